// Multi-attention layer: cross-, self- and view-attention sublayers.
//
// Every sublayer projects its inputs to queries, keys and values of width
// d_model, applies scaled dot-product attention, and wraps the result in
// dropout -> residual add -> layer norm. Cross and self sublayers follow this
// with a position-wise feed-forward block wrapped the same way.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepbirads/backbone.hpp"
#include "deepbirads/tensor.hpp"

namespace deepbirads {

// ---------------------------------------------------------------------------
// View wiring

enum class ViewSource { Current, Opposite };

struct WiringConfig {
  ViewSource q = ViewSource::Opposite;
  ViewSource k = ViewSource::Opposite;
  ViewSource v = ViewSource::Current;

  bool operator==(const WiringConfig&) const = default;

  /// Mixed wirings only: CCC ignores the opposite view, OOO the current one.
  bool valid() const { return !(q == k && k == v); }

  void validate() const {
    if (!valid()) throw ValidationError("invalid wiring '" + str() + "'; expected one of " + legal_values());
  }

  /// Q, K, V sources as letters, e.g. "OOC".
  std::string str() const {
    auto c = [](ViewSource s) { return s == ViewSource::Current ? 'C' : 'O'; };
    return {c(q), c(k), c(v)};
  }

  /// The six legal wirings in ablation-table order.
  static const std::array<WiringConfig, 6>& table() {
    using S = ViewSource;
    static const std::array<WiringConfig, 6> rows{{{S::Current, S::Opposite, S::Opposite},
                                                   {S::Opposite, S::Current, S::Opposite},
                                                   {S::Opposite, S::Opposite, S::Current},
                                                   {S::Current, S::Current, S::Opposite},
                                                   {S::Current, S::Opposite, S::Current},
                                                   {S::Opposite, S::Current, S::Current}}};
    return rows;
  }

  static std::string legal_values() {
    std::string s;
    for (const auto& w : table()) s += (s.empty() ? "" : ", ") + w.str();
    return s;
  }

  static WiringConfig parse(std::string_view text) {
    auto bad = [&] {
      return ValidationError("invalid wiring '" + std::string(text) + "'; expected one of " + legal_values());
    };
    if (text.size() != 3) throw bad();
    std::array<ViewSource, 3> s{};
    for (std::size_t i = 0; i < 3; ++i) {
      const char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(text[i])));
      if (ch == 'C') s[i] = ViewSource::Current;
      else if (ch == 'O') s[i] = ViewSource::Opposite;
      else throw bad();
    }
    WiringConfig w{s[0], s[1], s[2]};
    if (!w.valid()) throw bad();
    return w;
  }

  /// Row index in table(), 0..5.
  std::size_t index() const {
    const auto& t = table();
    for (std::size_t i = 0; i < t.size(); ++i)
      if (t[i] == *this) return i;
    throw ValidationError("wiring " + str() + " is not a legal configuration");
  }
};

// ---------------------------------------------------------------------------
// Parameters

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams make(std::size_t width) {
    return {Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
  }
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;

  static FeedForwardParams make(std::size_t width, std::size_t hidden, Rng& rng) {
    return {init::he({width, hidden}, width, rng), Tensor::zeros({hidden}, true),
            init::lecun({hidden, width}, hidden, rng), Tensor::zeros({width}, true)};
  }
};

/// Query/key/value projections. Keys and values may take a wider input than
/// queries when they carry positional features.
struct ProjectionParams {
  Tensor w_q, w_k, w_v;

  static ProjectionParams make(std::size_t query_in, std::size_t kv_in, std::size_t d_model, Rng& rng) {
    return {init::lecun({query_in, d_model}, query_in, rng), init::lecun({kv_in, d_model}, kv_in, rng),
            init::lecun({kv_in, d_model}, kv_in, rng)};
  }
};

/// Key/value projections for descriptor tokens joining an image cross-attention.
struct KeyValueProjection {
  Tensor w_k, w_v;

  static KeyValueProjection make(std::size_t kv_in, std::size_t d_model, Rng& rng) {
    return {init::lecun({kv_in, d_model}, kv_in, rng), init::lecun({kv_in, d_model}, kv_in, rng)};
  }
};

struct AttentionParams {
  ProjectionParams proj;
  LayerNormParams attn_norm;
  std::optional<FeedForwardParams> ffn;
  std::optional<LayerNormParams> ffn_norm;

  static AttentionParams make(std::size_t d_model, std::size_t kv_in, bool with_ffn, Rng& rng) {
    AttentionParams p{ProjectionParams::make(d_model, kv_in, d_model, rng), LayerNormParams::make(d_model), {}, {}};
    if (with_ffn) {
      p.ffn = FeedForwardParams::make(d_model, 2 * d_model, rng);
      p.ffn_norm = LayerNormParams::make(d_model);
    }
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "w_q", proj.w_q);
    fn(prefix + "w_k", proj.w_k);
    fn(prefix + "w_v", proj.w_v);
    fn(prefix + "norm1.gamma", attn_norm.gamma);
    fn(prefix + "norm1.beta", attn_norm.beta);
    if (ffn) {
      fn(prefix + "ffn.w1", ffn->w1);
      fn(prefix + "ffn.b1", ffn->b1);
      fn(prefix + "ffn.w2", ffn->w2);
      fn(prefix + "ffn.b2", ffn->b2);
      fn(prefix + "norm2.gamma", ffn_norm->gamma);
      fn(prefix + "norm2.beta", ffn_norm->beta);
    }
  }
};

/// Runtime knobs shared by all sublayers of one forward pass.
struct AttentionContext {
  std::size_t heads = 1;
  std::size_t n_bands = 6;
  double dropout = 0.0;
  bool training = false;
  Rng* rng = nullptr;

  Tensor drop(const Tensor& x) const {
    if (!training || dropout == 0.0) return x;
    if (!rng) throw UsageError("attention: dropout in training mode needs an RNG");
    return deepbirads::dropout(x, dropout, *rng, true);
  }
};

enum class Branch { CC, MLO };

inline std::string_view branch_name(Branch b) { return b == Branch::CC ? "cc" : "mlo"; }

struct LatentState {
  Tensor tokens;  // [N_Q x L]
  std::size_t layer = 0;
  Branch branch = Branch::CC;

  std::size_t width() const { return tokens.dim(1); }
};

// ---------------------------------------------------------------------------
// Building blocks

/// Width of a row after Fourier positional encoding.
inline std::size_t encoded_width(std::size_t width, std::size_t n_bands) { return width + 2 * n_bands + 1; }

/// Band-limit policy: maximum frequency is half the sequence length.
inline double default_max_frequency(std::size_t sequence_length) {
  return std::max(1.0, static_cast<double>(sequence_length) / 2.0);
}

/// Appends [p_i, sin(p_i S_b pi)..., cos(p_i S_b pi)...] to each row, where
/// p_i = 2 i / N - 1 and S_b = b * max_freq / n_bands for b = 1..n_bands.
inline Tensor fourier_encode(const Tensor& sequence, std::size_t n_bands, double max_freq) {
  detail::require_rank(sequence, 2, "fourier_encode");
  if (n_bands == 0) throw ConfigError("fourier_encode: n_bands must be positive");
  const std::size_t n = sequence.dim(0), extra = 2 * n_bands + 1;
  std::vector<double> pe(n * extra);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = 2.0 * static_cast<double>(i) / static_cast<double>(n) - 1.0;
    double* row = pe.data() + i * extra;
    row[0] = p;
    for (std::size_t b = 1; b <= n_bands; ++b) {
      const double band = static_cast<double>(b) * max_freq / static_cast<double>(n_bands);
      row[b] = std::sin(p * band * std::numbers::pi);
      row[n_bands + b] = std::cos(p * band * std::numbers::pi);
    }
  }
  return concat_cols(sequence, Tensor::matrix(n, extra, std::move(pe)));
}

struct QKV {
  Tensor q, k, v;
};

inline QKV project_qkv(const Tensor& x_q, const Tensor& x_k, const Tensor& x_v, const ProjectionParams& p) {
  auto check = [](const Tensor& x, const Tensor& w, const char* which) {
    if (x.rank() != 2 || x.dim(1) != w.dim(0))
      throw DimensionError(std::string("project_qkv: ") + which + " input " + shape_string(x.shape()) +
                           " vs projection " + shape_string(w.shape()));
  };
  check(x_q, p.w_q, "query");
  check(x_k, p.w_k, "key");
  check(x_v, p.w_v, "value");
  return {matmul(x_q, p.w_q), matmul(x_k, p.w_k), matmul(x_v, p.w_v)};
}

/// Row-wise attention probabilities softmax(Q K^T / sqrt(d)).
inline Tensor attention_weights(const Tensor& q, const Tensor& k) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1))
    throw DimensionError("attention: query " + shape_string(q.shape()) + " vs key " + shape_string(k.shape()));
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  return softmax(scale(matmul(q, transpose(k)), inv), 1);
}

/// softmax(Q K^T / sqrt(d)) V.
inline Tensor attention_unit(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (v.rank() != 2 || k.rank() != 2 || k.dim(0) != v.dim(0))
    throw DimensionError("attention: key " + shape_string(k.shape()) + " vs value " + shape_string(v.shape()));
  return matmul(attention_weights(q, k), v);
}

/// Splits the d_model columns into `heads` equal slices and attends per slice.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  if (heads <= 1) return attention_unit(q, k, v);
  const std::size_t d = q.dim(1), dv = v.dim(1);
  if (d % heads != 0 || dv % heads != 0 || k.dim(1) != d)
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible into " + std::to_string(heads) +
                      " heads");
  const std::size_t hd = d / heads, hv = dv / heads;
  Tensor out;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor o = attention_unit(slice_cols(q, h * hd, hd), slice_cols(k, h * hd, hd), slice_cols(v, h * hv, hv));
    out = out.defined() ? concat_cols(out, o) : o;
  }
  return out;
}

/// max(0, x W1 + b1) W2 + b2, row by row.
inline Tensor ffn(const Tensor& x, const FeedForwardParams& p) {
  return add_row_vector(matmul(relu(add_row_vector(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

namespace detail {

// Residual attention + optional feed-forward block around precomputed Q, K, V.
inline Tensor finish_sublayer(const Tensor& residual, const QKV& qkv, const AttentionParams& p,
                              const AttentionContext& ctx) {
  Tensor a = multi_head_attention(qkv.q, qkv.k, qkv.v, ctx.heads);
  Tensor x = p.attn_norm(add(residual, ctx.drop(a)));
  if (!p.ffn) return x;
  return (*p.ffn_norm)(add(x, ctx.drop(ffn(x, *p.ffn))));
}

inline void require_latent_width(const LatentState& s, const AttentionParams& p, const char* op) {
  if (s.tokens.rank() != 2 || s.tokens.dim(1) != p.proj.w_q.dim(0))
    throw DimensionError(std::string(op) + ": latent " + shape_string(s.tokens.shape()) + " vs projection " +
                         shape_string(p.proj.w_q.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sublayers

/// Latents attend to positionally encoded image tokens.
inline LatentState cross_attention(const LatentState& latent_prev, const Tensor& keys_values,
                                   const AttentionParams& params, const AttentionContext& ctx) {
  detail::require_latent_width(latent_prev, params, "cross_attention");
  Tensor kv = fourier_encode(keys_values, ctx.n_bands, default_max_frequency(keys_values.dim(0)));
  QKV qkv = project_qkv(latent_prev.tokens, kv, kv, params.proj);
  return {detail::finish_sublayer(latent_prev.tokens, qkv, params, ctx), latent_prev.layer + 1, latent_prev.branch};
}

/// First layer: learnable queries attend to the lesion descriptor vectors.
/// Descriptors carry no positional encoding, so lesion order is irrelevant.
inline LatentState first_cross_attention(const Tensor& queries, const Tensor& attributes,
                                         const AttentionParams& params, const AttentionContext& ctx,
                                         Branch branch = Branch::CC) {
  if (attributes.rank() != 2 || attributes.dim(0) == 0)
    throw ValidationError("first_cross_attention: lesion descriptor set is empty");
  LatentState q{queries, 0, branch};
  detail::require_latent_width(q, params, "first_cross_attention");
  QKV qkv = project_qkv(queries, attributes, attributes, params.proj);
  return {detail::finish_sublayer(queries, qkv, params, ctx), 0, branch};
}

/// Latents attend jointly to image tokens (positionally encoded, projected by
/// `params`) and lesion descriptors (projected by `attribute_proj`).
inline LatentState joint_cross_attention(const LatentState& latent_prev, const Tensor& image_tokens,
                                         const Tensor& attributes, const AttentionParams& params,
                                         const KeyValueProjection& attribute_proj, const AttentionContext& ctx) {
  detail::require_latent_width(latent_prev, params, "joint_cross_attention");
  if (attributes.rank() != 2 || attributes.dim(1) != attribute_proj.w_k.dim(0))
    throw DimensionError("joint_cross_attention: attributes " + shape_string(attributes.shape()) +
                         " vs projection " + shape_string(attribute_proj.w_k.shape()));
  Tensor kv = fourier_encode(image_tokens, ctx.n_bands, default_max_frequency(image_tokens.dim(0)));
  QKV img = project_qkv(latent_prev.tokens, kv, kv, params.proj);
  QKV joint{img.q, concat_rows(img.k, matmul(attributes, attribute_proj.w_k)),
            concat_rows(img.v, matmul(attributes, attribute_proj.w_v))};
  return {detail::finish_sublayer(latent_prev.tokens, joint, params, ctx), latent_prev.layer + 1,
          latent_prev.branch};
}

inline LatentState self_attention(const LatentState& latent, const AttentionParams& params,
                                  const AttentionContext& ctx) {
  detail::require_latent_width(latent, params, "self_attention");
  QKV qkv = project_qkv(latent.tokens, latent.tokens, latent.tokens, params.proj);
  return {detail::finish_sublayer(latent.tokens, qkv, params, ctx), latent.layer, latent.branch};
}

/// Exchanges information between views; the residual comes from the current view.
inline LatentState view_attention(const LatentState& self_current, const LatentState& self_opposite,
                                  const WiringConfig& config, const AttentionParams& params,
                                  const AttentionContext& ctx) {
  config.validate();
  if (self_current.tokens.shape() != self_opposite.tokens.shape())
    throw DimensionError("view_attention: current " + shape_string(self_current.tokens.shape()) + " vs opposite " +
                         shape_string(self_opposite.tokens.shape()));
  detail::require_latent_width(self_current, params, "view_attention");
  auto pick = [&](ViewSource s) -> const Tensor& {
    return s == ViewSource::Current ? self_current.tokens : self_opposite.tokens;
  };
  QKV qkv = project_qkv(pick(config.q), pick(config.k), pick(config.v), params.proj);
  return {detail::finish_sublayer(self_current.tokens, qkv, params, ctx), self_current.layer, self_current.branch};
}

// ---------------------------------------------------------------------------
// Whole layer

struct MultiAttentionParams {
  AttentionParams cross;
  std::optional<KeyValueProjection> attribute_proj;  // present on the final layer only
  AttentionParams self;
  AttentionParams view;

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    cross.visit(prefix + "cross.", fn);
    if (attribute_proj) {
      fn(prefix + "cross.attr.w_k", attribute_proj->w_k);
      fn(prefix + "cross.attr.w_v", attribute_proj->w_v);
    }
    self.visit(prefix + "self.", fn);
    view.visit(prefix + "view.", fn);
  }
};

/// What a layer consumes besides the previous latent.
struct LayerInput {
  const Tensor* image_tokens = nullptr;  // tokenized pyramid level
  const Tensor* attributes = nullptr;    // [K x L] lesion descriptors
};

struct LayerOutput {
  LatentState view_out;  // C_k, fed to the next layer
  LatentState self_out;  // A^S_k, consumed by the opposite branch's view sublayer
};

/// Cross-attention followed by self-attention. `latent_prev` is ignored on the
/// first layer, where `queries` take its place.
inline LatentState cross_then_self(const LatentState* latent_prev, const Tensor* queries, const LayerInput& input,
                                   const MultiAttentionParams& params, const AttentionContext& ctx,
                                   Branch branch) {
  LatentState cross;
  if (!latent_prev) {
    if (!queries || !input.attributes) throw UsageError("first layer needs learnable queries and descriptors");
    cross = first_cross_attention(*queries, *input.attributes, params.cross, ctx, branch);
  } else if (input.image_tokens && input.attributes) {
    if (!params.attribute_proj) throw UsageError("joint cross-attention needs attribute projections");
    cross = joint_cross_attention(*latent_prev, *input.image_tokens, *input.attributes, params.cross,
                                  *params.attribute_proj, ctx);
  } else if (input.image_tokens) {
    cross = cross_attention(*latent_prev, *input.image_tokens, params.cross, ctx);
  } else {
    throw UsageError("multi-attention layer needs image tokens or descriptors");
  }
  return self_attention(cross, params.self, ctx);
}

/// One branch's full layer given the opposite branch's self-attention output.
inline LayerOutput multi_attention_layer(const LatentState* latent_prev, const Tensor* queries,
                                         const LayerInput& input, const LatentState& opposite_self_out,
                                         const WiringConfig& config, const MultiAttentionParams& params,
                                         const AttentionContext& ctx, Branch branch) {
  LatentState self_out = cross_then_self(latent_prev, queries, input, params, ctx, branch);
  LatentState view_out = view_attention(self_out, opposite_self_out, config, params.view, ctx);
  return {view_out, self_out};
}

}  // namespace deepbirads
