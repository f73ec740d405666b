// Multi-resolution convolutional feature extractor.
//
// Level k of the pyramid has d0 * 2^k channels and spatial extent
// H / (4 * 2^k) x W / (4 * 2^k). Every convolution runs on a weight-standardized
// kernel and is followed by group normalization and ReLU.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "deepbirads/tensor.hpp"

namespace deepbirads {

namespace init {

inline Tensor normal(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

/// He fan-in initialization (gain sqrt(2)) for layers followed by ReLU.
inline Tensor he(Shape shape, std::size_t fan_in, Rng& rng) {
  return normal(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

inline Tensor lecun(Shape shape, std::size_t fan_in, Rng& rng) {
  return normal(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace init

/// Weight-standardized convolution -> group norm -> ReLU.
struct ConvUnit {
  Tensor weight;  // [Cout x Cin x k x k]
  Tensor gamma;   // [Cout]
  Tensor beta;    // [Cout]
  std::size_t stride = 1;
  std::size_t padding = 1;

  static ConvUnit make(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride, Rng& rng) {
    return ConvUnit{init::he({cout, cin, kernel, kernel}, cin * kernel * kernel, rng),
                    Tensor::full({cout}, 1.0, true), Tensor::zeros({cout}, true), stride, kernel / 2};
  }

  std::size_t out_channels() const { return weight.dim(0); }

  Tensor operator()(const Tensor& x) const {
    Tensor w = weight_standardize(weight);
#ifndef NDEBUG
    const std::size_t seg = w.numel() / w.dim(0);
    for (std::size_t f = 0; f < w.dim(0); ++f) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < seg; ++i) mean += w[f * seg + i];
      mean /= static_cast<double>(seg);
      for (std::size_t i = 0; i < seg; ++i) sq += (w[f * seg + i] - mean) * (w[f * seg + i] - mean);
      if (std::abs(mean) > 1e-6 || (sq > 0.0 && std::abs(sq / static_cast<double>(seg) - 1.0) > 1e-2))
        throw NumericError("convolution kernel is not standardized");
    }
#endif
    Tensor y = conv2d(x, w, Tensor{}, stride, padding);
    return relu(group_norm(y, default_groups(out_channels()), gamma, beta));
  }
};

/// Learned 1x1 projection from a pyramid level to the token width d' = 4 * d0.
struct TokenProjection {
  Tensor weight;  // [d' x C x 1 x 1]
  Tensor bias;    // [d']

  static TokenProjection make(std::size_t channels, std::size_t width, Rng& rng) {
    return TokenProjection{init::lecun({width, channels, 1, 1}, channels, rng), Tensor::zeros({width}, true)};
  }
};

struct BackboneParams {
  std::size_t base_channels = 0;  // d0
  ConvUnit stem;
  std::vector<std::pair<ConvUnit, ConvUnit>> blocks;  // one per level k >= 1
  std::vector<TokenProjection> projections;           // one per level

  std::size_t levels() const { return blocks.size() + 1; }
  std::size_t token_width() const { return 4 * base_channels; }

  static BackboneParams make(std::size_t base_channels, std::size_t levels, Rng& rng) {
    if (base_channels == 0) throw ConfigError("backbone: base channel count must be positive");
    if (levels == 0) throw ConfigError("backbone: at least one pyramid level is required");
    BackboneParams p;
    p.base_channels = base_channels;
    p.stem = ConvUnit::make(1, base_channels, 3, 2, rng);
    std::size_t c = base_channels;
    for (std::size_t k = 1; k < levels; ++k) {
      auto first = ConvUnit::make(c, 2 * c, 3, 1, rng);
      auto second = ConvUnit::make(2 * c, 2 * c, 3, 2, rng);
      p.blocks.emplace_back(std::move(first), std::move(second));
      c *= 2;
    }
    for (std::size_t k = 0; k < levels; ++k)
      p.projections.push_back(TokenProjection::make(base_channels << k, p.token_width(), rng));
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    auto unit = [&](const std::string& name, ConvUnit& u) {
      fn(prefix + name + ".weight", u.weight);
      fn(prefix + name + ".gamma", u.gamma);
      fn(prefix + name + ".beta", u.beta);
    };
    unit("stem", stem);
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      unit("block" + std::to_string(k + 1) + ".conv1", blocks[k].first);
      unit("block" + std::to_string(k + 1) + ".conv2", blocks[k].second);
    }
    for (std::size_t k = 0; k < projections.size(); ++k) {
      fn(prefix + "tokens" + std::to_string(k) + ".weight", projections[k].weight);
      fn(prefix + "tokens" + std::to_string(k) + ".bias", projections[k].bias);
    }
  }
};

/// Spatial divisor an image extent must satisfy for `levels` pyramid levels.
inline std::size_t required_divisor(std::size_t levels) { return std::size_t{4} << (levels - 1); }

inline void check_image_extent(std::size_t h, std::size_t w, std::size_t levels) {
  const std::size_t div = required_divisor(levels);
  if (h == 0 || w == 0 || h % div != 0 || w % div != 0)
    throw ConfigError("image extent " + std::to_string(h) + "x" + std::to_string(w) + " must be divisible by " +
                      std::to_string(div) + " for " + std::to_string(levels) + " pyramid levels");
}

struct FeaturePyramid {
  std::vector<Tensor> levels;  // level k: [d0*2^k x H/(4*2^k) x W/(4*2^k)]
};

inline FeaturePyramid extract_pyramid(const Tensor& image, const BackboneParams& params) {
  if (image.rank() != 3 || image.dim(0) != 1)
    throw DimensionError("extract_pyramid: expected a [1 x H x W] image, got " + shape_string(image.shape()));
  check_image_extent(image.dim(1), image.dim(2), params.levels());
  for (double v : image.data())
    if (v < 0.0 || v > 1.0) throw ValidationError("extract_pyramid: image values must lie in [0, 1]");
  FeaturePyramid pyr;
  Tensor x = max_pool2d(params.stem(image), 2, 2);
  pyr.levels.push_back(x);
  for (const auto& [first, second] : params.blocks) {
    x = second(first(x));
    pyr.levels.push_back(x);
  }
  return pyr;
}

struct TokenizedFeatures {
  Tensor tokens;  // [H'*W' x d']
  std::size_t level = 0;
};

/// Projects level k to d' channels and flattens positions row-major into tokens.
inline TokenizedFeatures tokenize_features(const Tensor& level_features, std::size_t level,
                                           const BackboneParams& params) {
  const auto& proj = params.projections.at(level);
  if (level_features.rank() != 3 || level_features.dim(0) != proj.weight.dim(1))
    throw DimensionError("tokenize_features: level " + std::to_string(level) + " expects " +
                         std::to_string(proj.weight.dim(1)) + " channels, got " +
                         shape_string(level_features.shape()));
  const std::size_t width = proj.weight.dim(0);
  const std::size_t positions = level_features.dim(1) * level_features.dim(2);
  Tensor y = conv2d(level_features, proj.weight, proj.bias, 1, 0);
  return {transpose(reshape(y, {width, positions})), level};
}

}  // namespace deepbirads
