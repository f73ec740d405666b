// Dual-branch multi-attention network over CC/MLO views and lesion descriptors.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deepbirads/attention.hpp"
#include "deepbirads/backbone.hpp"
#include "deepbirads/birads.hpp"
#include "deepbirads/tensor.hpp"

namespace deepbirads {

struct ModelConfig {
  std::size_t layers = 6;          // N, stacked multi-attention layers per branch
  std::size_t latent = 64;         // L, latent and descriptor width
  std::size_t queries = 8;         // N_Q, learnable query tokens per branch
  std::size_t base_channels = 8;   // d0
  WiringConfig wiring{};           // view-attention Q/K/V sources
  std::size_t n_bands = 6;
  double dropout = 0.25;
  std::size_t heads = 1;
  std::size_t image_height = 128;
  std::size_t image_width = 128;
  std::size_t vocab_size = 14;
  bool tie_backbone = true;
  bool use_descriptors = true;
  std::uint64_t seed = 0;  // parameter initialization

  std::size_t pyramid_levels() const { return layers - 1; }

  void validate() const {
    if (layers < 2) throw ConfigError("model needs at least 2 multi-attention layers, got " + std::to_string(layers));
    if (latent == 0 || queries == 0 || base_channels == 0 || n_bands == 0 || heads == 0)
      throw ConfigError("model widths and counts must be positive");
    if (latent < vocab_size)
      throw ConfigError("latent length " + std::to_string(latent) + " is shorter than the descriptor vocabulary (" +
                        std::to_string(vocab_size) + ")");
    if (latent % heads != 0)
      throw ConfigError("latent length " + std::to_string(latent) + " not divisible by " + std::to_string(heads) +
                        " heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    wiring.validate();
    check_image_extent(image_height, image_width, pyramid_levels());
  }

  /// Stable `key=value` lines; the checkpoint header and run manifests use this.
  std::string to_kv() const {
    std::ostringstream os;
    os.precision(17);
    os << "layers=" << layers << '\n'
       << "latent=" << latent << '\n'
       << "queries=" << queries << '\n'
       << "d0=" << base_channels << '\n'
       << "wiring=" << wiring.str() << '\n'
       << "n_bands=" << n_bands << '\n'
       << "dropout=" << dropout << '\n'
       << "heads=" << heads << '\n'
       << "image_height=" << image_height << '\n'
       << "image_width=" << image_width << '\n'
       << "vocab_size=" << vocab_size << '\n'
       << "tie_backbone=" << (tie_backbone ? 1 : 0) << '\n'
       << "use_descriptors=" << (use_descriptors ? 1 : 0) << '\n'
       << "seed=" << seed << '\n';
    return os.str();
  }

  /// Applies one `key=value` setting; returns false for unknown keys.
  bool set(const std::string& key, const std::string& value) {
    auto u = [&] { return static_cast<std::size_t>(std::stoull(value)); };
    if (key == "layers") layers = u();
    else if (key == "latent") latent = u();
    else if (key == "queries") queries = u();
    else if (key == "d0") base_channels = u();
    else if (key == "wiring") wiring = WiringConfig::parse(value);
    else if (key == "n_bands") n_bands = u();
    else if (key == "dropout") dropout = std::stod(value);
    else if (key == "heads") heads = u();
    else if (key == "image_height") image_height = u();
    else if (key == "image_width") image_width = u();
    else if (key == "image_size") image_height = image_width = u();
    else if (key == "vocab_size") vocab_size = u();
    else if (key == "tie_backbone") tie_backbone = value == "1" || value == "true";
    else if (key == "use_descriptors") use_descriptors = value == "1" || value == "true";
    else if (key == "seed") seed = std::stoull(value);
    else return false;
    return true;
  }

  static ModelConfig from_kv(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) {
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos || !c.set(line.substr(0, eq), line.substr(eq + 1)))
        throw ValidationError("unrecognized model config line '" + line + "'");
    }
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ParameterCensus {
  std::size_t total = 0;
  std::map<std::string, std::size_t> by_module;  // backbone, queries, layers, head
};

class DeepBiradsModel {
 public:
  explicit DeepBiradsModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const std::size_t L = config_.latent;
    backbones_.push_back(BackboneParams::make(config_.base_channels, config_.pyramid_levels(), rng));
    if (!config_.tie_backbone)
      backbones_.push_back(BackboneParams::make(config_.base_channels, config_.pyramid_levels(), rng));
    const std::size_t image_kv = encoded_width(backbones_.front().token_width(), config_.n_bands);
    for (std::size_t b = 0; b < 2; ++b) {
      queries_[b] = init::normal({config_.queries, L}, 0.02, rng);
      for (std::size_t k = 0; k < config_.layers; ++k) {
        const bool first = k == 0, last = k + 1 == config_.layers;
        MultiAttentionParams p{AttentionParams::make(L, first ? L : image_kv, true, rng), std::nullopt,
                               AttentionParams::make(L, L, true, rng), AttentionParams::make(L, L, false, rng)};
        if (last) p.attribute_proj = KeyValueProjection::make(L, L, rng);
        layers_[b].push_back(std::move(p));
      }
    }
    head_norm_ = LayerNormParams::make(L);
    classifier_w_ = init::lecun({L, 2}, L, rng);
    classifier_b_ = Tensor::zeros({2}, true);
  }

  const ModelConfig& config() const { return config_; }

  /// Two-class logits [benign, malignant].
  Tensor forward(const Tensor& cc, const Tensor& mlo, const LesionDescriptorSet& attributes, bool training,
                 Rng* rng = nullptr) const {
    if (!cc.defined() || !mlo.defined()) throw ValidationError("forward: both CC and MLO views are required");
    if (attributes.count() == 0) throw ValidationError("forward: lesion descriptor set is empty");
    if (attributes.length() != config_.latent)
      throw ValidationError("forward: descriptor length " + std::to_string(attributes.length()) +
                            " does not match latent length " + std::to_string(config_.latent));
    Tensor phi = config_.use_descriptors ? attributes.as_tensor()
                                         : LesionDescriptorSet::blank(config_.latent).as_tensor();
    AttentionContext ctx{config_.heads, config_.n_bands, config_.dropout, training, rng};

    std::array<std::vector<Tensor>, 2> tokens;
    const std::array<const Tensor*, 2> images{&cc, &mlo};
    for (std::size_t b = 0; b < 2; ++b) {
      const auto& bb = backbone(b);
      FeaturePyramid pyr = extract_pyramid(*images[b], bb);
      for (std::size_t k = 0; k < pyr.levels.size(); ++k)
        tokens[b].push_back(tokenize_features(pyr.levels[k], k, bb).tokens);
    }

    std::array<LatentState, 2> latent;
    for (std::size_t k = 0; k < config_.layers; ++k) {
      std::array<LatentState, 2> self_out;
      for (std::size_t b = 0; b < 2; ++b) {
        LayerInput in;
        if (k == 0) {
          in.attributes = &phi;
        } else {
          in.image_tokens = &tokens[b][k - 1];
          // Descriptors skip forward into the last layer.
          if (k + 1 == config_.layers) in.attributes = &phi;
        }
        self_out[b] = cross_then_self(k == 0 ? nullptr : &latent[b], &queries_[b], in, layers_[b][k], ctx,
                                      b == 0 ? Branch::CC : Branch::MLO);
      }
      for (std::size_t b = 0; b < 2; ++b)
        latent[b] = view_attention(self_out[b], self_out[1 - b], config_.wiring, layers_[b][k].view, ctx);
    }

    Tensor z = scale(add(mean_rows(latent[0].tokens), mean_rows(latent[1].tokens)), 0.5);
    Tensor logits = add_row_vector(matmul(head_norm_(z), classifier_w_), classifier_b_);
    return reshape(logits, {2});
  }

  std::vector<NamedTensor> parameters() {
    std::vector<NamedTensor> out;
    visit([&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
    return out;
  }

  ParameterCensus census() {
    ParameterCensus c;
    visit([&](const std::string& name, Tensor& t) {
      c.total += t.numel();
      std::string module = name.substr(0, name.find('.'));
      if (module.rfind("layer", 0) == 0) module = "layers";
      c.by_module[module] += t.numel();
    });
    return c;
  }

  void zero_grad() {
    visit([](const std::string&, Tensor& t) { t.zero_grad(); });
  }

  template <typename Fn>
  void visit(Fn&& fn) {
    if (backbones_.size() == 1) {
      backbones_[0].visit("backbone.", fn);
    } else {
      backbones_[0].visit("backbone.cc.", fn);
      backbones_[1].visit("backbone.mlo.", fn);
    }
    for (std::size_t b = 0; b < 2; ++b) {
      const std::string br(branch_name(b == 0 ? Branch::CC : Branch::MLO));
      fn("queries." + br, queries_[b]);
      for (std::size_t k = 0; k < layers_[b].size(); ++k)
        layers_[b][k].visit("layer" + std::to_string(k) + "." + br + ".", fn);
    }
    fn("head.norm.gamma", head_norm_.gamma);
    fn("head.norm.beta", head_norm_.beta);
    fn("head.fc.weight", classifier_w_);
    fn("head.fc.bias", classifier_b_);
  }

 private:
  const BackboneParams& backbone(std::size_t branch) const {
    return backbones_.size() == 1 ? backbones_[0] : backbones_[branch];
  }

  ModelConfig config_;
  std::vector<BackboneParams> backbones_;
  std::array<Tensor, 2> queries_;
  std::array<std::vector<MultiAttentionParams>, 2> layers_;
  LayerNormParams head_norm_;
  Tensor classifier_w_;
  Tensor classifier_b_;
};

/// Softmax over the two logits; component 1 is the malignant probability.
inline Tensor predict_proba(const Tensor& logits) { return softmax(logits, 0); }

inline ParameterCensus parameter_census(DeepBiradsModel& model) { return model.census(); }

}  // namespace deepbirads
