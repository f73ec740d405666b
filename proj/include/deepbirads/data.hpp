// Case ingestion, resizing, augmentation, stratified folds and the synthetic
// mammography-like dataset generator.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deepbirads/backbone.hpp"
#include "deepbirads/birads.hpp"
#include "deepbirads/image_io.hpp"
#include "deepbirads/tensor.hpp"

namespace deepbirads {

struct CaseRecord {
  std::string case_id;
  std::string cc_image_path;
  std::string mlo_image_path;
  std::vector<std::vector<std::string>> lesions;  // descriptor tokens per lesion, ordered by lesion id
  int label = 0;                                   // 0 benign, 1 malignant

  bool operator==(const CaseRecord&) const = default;
};

inline constexpr const char* kMetadataHeader = "case_id,view,image_path,lesion_id,descriptors,pathology";

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Numeric ids sort numerically, everything else lexicographically after them.
inline bool lesion_id_less(const std::string& a, const std::string& b) {
  auto numeric = [](const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
  };
  const bool na = numeric(a), nb = numeric(b);
  if (na && nb) return a.size() != b.size() ? a.size() < b.size() : a < b;
  if (na != nb) return na;
  return a < b;
}

}  // namespace detail

/// Parses pathology strings; BENIGN_WITHOUT_CALLBACK counts as benign.
inline int parse_pathology(const std::string& s) {
  const std::string p = fold_token(s);
  if (p == "malignant") return 1;
  if (p == "benign" || p == "benign_without_callback") return 0;
  throw ValidationError("unknown pathology '" + s + "'");
}

/// Reads rows of `case_id,view,image_path,lesion_id,descriptors,pathology`
/// (one per case, view and lesion) and groups them into cases, in order of
/// first appearance. Image paths are returned as written in the file.
inline std::vector<CaseRecord> parse_metadata_csv(const std::string& text, const DescriptorVocabulary& vocab) {
  struct Pending {
    CaseRecord rec;
    std::map<std::string, std::vector<std::string>, decltype(&detail::lesion_id_less)> lesions{
        &detail::lesion_id_less};
    std::size_t first_row = 0;
    bool any_malignant = false;
  };
  std::vector<std::string> order;
  std::map<std::string, Pending> cases;
  std::istringstream is(text);
  std::string line;
  std::size_t row = 0;
  if (!std::getline(is, line) || detail::trim(line) != kMetadataHeader)
    throw ValidationError(std::string("metadata row 1: expected header '") + kMetadataHeader + "'");
  row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    auto err = [&](const std::string& what) {
      return ValidationError("metadata row " + std::to_string(row) + ": " + what);
    };
    auto cols = detail::split(line, ',');
    if (cols.size() != 6) throw err("expected 6 columns, got " + std::to_string(cols.size()));
    for (auto& c : cols) c = detail::trim(c);
    const auto& [id, view, path, lesion_id, descriptors, pathology] =
        std::tie(cols[0], cols[1], cols[2], cols[3], cols[4], cols[5]);
    if (id.empty()) throw err("empty case_id");
    auto [it, inserted] = cases.try_emplace(id);
    Pending& p = it->second;
    if (inserted) {
      order.push_back(id);
      p.rec.case_id = id;
      p.first_row = row;
    }
    const std::string v = fold_token(view);
    if (v == "cc") {
      if (!p.rec.cc_image_path.empty() && p.rec.cc_image_path != path) throw err("conflicting CC image for case " + id);
      p.rec.cc_image_path = path;
    } else if (v == "mlo") {
      if (!p.rec.mlo_image_path.empty() && p.rec.mlo_image_path != path)
        throw err("conflicting MLO image for case " + id);
      p.rec.mlo_image_path = path;
    } else {
      throw err("unknown view '" + view + "'");
    }
    int label = 0;
    try {
      label = parse_pathology(pathology);
    } catch (const ValidationError& e) {
      throw err(e.what());
    }
    p.any_malignant = p.any_malignant || label == 1;
    auto& tokens = p.lesions[lesion_id];
    for (const auto& raw : detail::split(descriptors, ';')) {
      auto tok = detail::trim(raw);
      if (tok.empty()) continue;
      try {
        encode_lesion({tok}, vocab, vocab.size());
      } catch (const ValidationError& e) {
        throw err(e.what());
      }
      if (std::none_of(tokens.begin(), tokens.end(), [&](const auto& t) { return fold_token(t) == fold_token(tok); }))
        tokens.push_back(tok);
    }
  }
  std::vector<CaseRecord> out;
  for (const auto& id : order) {
    Pending& p = cases.at(id);
    if (p.rec.cc_image_path.empty())
      throw ValidationError("metadata row " + std::to_string(p.first_row) + ": case " + id + " has no CC view");
    if (p.rec.mlo_image_path.empty())
      throw ValidationError("metadata row " + std::to_string(p.first_row) + ": case " + id + " has no MLO view");
    for (auto& [lid, toks] : p.lesions) p.rec.lesions.push_back(std::move(toks));
    // A case is malignant when any of its lesions is.
    p.rec.label = p.any_malignant ? 1 : 0;
    out.push_back(std::move(p.rec));
  }
  return out;
}

inline std::vector<CaseRecord> load_metadata_csv(const std::filesystem::path& path, const DescriptorVocabulary& vocab) {
  return parse_metadata_csv(detail::read_file(path), vocab);
}

/// Inverse of parse_metadata_csv; lesion ids are 1-based positions.
inline std::string format_metadata_csv(const std::vector<CaseRecord>& records) {
  std::ostringstream os;
  os << kMetadataHeader << '\n';
  for (const auto& r : records)
    for (const auto& [view, path] : {std::pair{"CC", &r.cc_image_path}, std::pair{"MLO", &r.mlo_image_path}})
      for (std::size_t l = 0; l < r.lesions.size(); ++l) {
        std::string desc;
        for (const auto& t : r.lesions[l]) desc += (desc.empty() ? "" : ";") + t;
        os << r.case_id << ',' << view << ',' << *path << ',' << (l + 1) << ',' << desc << ','
           << (r.label == 1 ? "MALIGNANT" : "BENIGN") << '\n';
      }
  return os.str();
}

// ---------------------------------------------------------------------------
// Image transforms on [1 x H x W] tensors

/// Bilinear resize with corner alignment: output pixel i samples input
/// coordinate i * (in - 1) / (out - 1), so corner pixels map onto corners.
inline Tensor resize(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3 || image.dim(0) != 1)
    throw DimensionError("resize: expected a [1 x H x W] image, got " + shape_string(image.shape()));
  if (out_h == 0 || out_w == 0) throw ConfigError("resize: target extent must be positive");
  const std::size_t in_h = image.dim(1), in_w = image.dim(2);
  auto src = image.data();
  auto coord = [](std::size_t i, std::size_t in, std::size_t out) {
    return out == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  };
  std::vector<double> out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = coord(y, in_h, out_h);
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), in_h - 1), y1 = std::min(y0 + 1, in_h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = coord(x, in_w, out_w);
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), in_w - 1), x1 = std::min(x0 + 1, in_w - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = src[y0 * in_w + x0] * (1 - tx) + src[y0 * in_w + x1] * tx;
      const double bottom = src[y1 * in_w + x0] * (1 - tx) + src[y1 * in_w + x1] * tx;
      out[y * out_w + x] = std::clamp(top * (1 - ty) + bottom * ty, 0.0, 1.0);
    }
  }
  return Tensor::from({1, out_h, out_w}, std::move(out));
}

/// Resize that also enforces the backbone's divisibility for `levels` levels.
inline Tensor resize_checked(const Tensor& image, std::size_t out_h, std::size_t out_w, std::size_t levels) {
  check_image_extent(out_h, out_w, levels);
  return resize(image, out_h, out_w);
}

inline Tensor flip_horizontal(const Tensor& image) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<double> out(image.numel());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = image[y * w + (w - 1 - x)];
  return Tensor::from(image.shape(), std::move(out));
}

inline Tensor flip_vertical(const Tensor& image) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<double> out(image.numel());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = image[(h - 1 - y) * w + x];
  return Tensor::from(image.shape(), std::move(out));
}

namespace detail {

// Bilinear sample with border clamping.
inline double sample_clamped(std::span<const double> img, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const std::size_t y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double ty = y - static_cast<double>(y0), tx = x - static_cast<double>(x0);
  return (img[y0 * w + x0] * (1 - tx) + img[y0 * w + x1] * tx) * (1 - ty) +
         (img[y1 * w + x0] * (1 - tx) + img[y1 * w + x1] * tx) * ty;
}

}  // namespace detail

/// Smooth random warp: displacements drawn N(0, sigma) on a grid with the given
/// spacing, interpolated bilinearly to every pixel.
inline Tensor elastic_deform(const Tensor& image, double sigma, std::size_t spacing, Rng& rng) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (spacing == 0) throw ConfigError("elastic_deform: grid spacing must be positive");
  const std::size_t gh = (h - 1) / spacing + 2, gw = (w - 1) / spacing + 2;
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> dy(gh * gw), dx(gh * gw);
  for (std::size_t i = 0; i < gh * gw; ++i) {
    dy[i] = sigma * dist(rng);
    dx[i] = sigma * dist(rng);
  }
  std::vector<double> out(image.numel());
  auto src = image.data();
  const double sp = static_cast<double>(spacing);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double oy = detail::sample_clamped(dy, gh, gw, static_cast<double>(y) / sp, static_cast<double>(x) / sp);
      const double ox = detail::sample_clamped(dx, gh, gw, static_cast<double>(y) / sp, static_cast<double>(x) / sp);
      out[y * w + x] =
          std::clamp(detail::sample_clamped(src, h, w, static_cast<double>(y) + oy, static_cast<double>(x) + ox), 0.0, 1.0);
    }
  return Tensor::from(image.shape(), std::move(out));
}

inline Tensor add_gaussian_noise(const Tensor& image, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<double> out(image.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(image[i] + dist(rng), 0.0, 1.0);
  return Tensor::from(image.shape(), std::move(out));
}

struct AugmentationPolicy {
  std::string name = "Baseline w/o aug.";
  bool hflip = false;
  bool vflip = false;
  bool elastic = false;
  bool gaussian_noise = false;
  std::size_t target_size = 0;  // 0 keeps the stored resolution
  double flip_probability = 0.5;
  std::size_t elastic_spacing = 4;
  double elastic_sigma = 1.5;  // pixels
  double noise_sigma = 0.05;

  bool any() const { return hflip || vflip || elastic || gaussian_noise; }
};

/// Random augmentation of one view. Deterministic given the RNG state.
inline Tensor augment(const Tensor& image, const AugmentationPolicy& policy, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Tensor out = image;
  if (policy.hflip && unif(rng) < policy.flip_probability) out = flip_horizontal(out);
  if (policy.vflip && unif(rng) < policy.flip_probability) out = flip_vertical(out);
  if (policy.elastic) out = elastic_deform(out, policy.elastic_sigma, policy.elastic_spacing, rng);
  if (policy.gaussian_noise) out = add_gaussian_noise(out, policy.noise_sigma, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Stratified folds

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> folds;  // sample indices

  /// Indices outside fold `f`.
  std::vector<std::size_t> train_indices(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t g = 0; g < folds.size(); ++g)
      if (g != f) out.insert(out.end(), folds[g].begin(), folds[g].end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

/// Shuffles each class with a seeded RNG and deals it round-robin; the
/// negatives continue dealing where the positives stopped so fold sizes stay
/// within one of each other.
inline FoldPlan stratified_kfold(const std::vector<int>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("stratified_kfold: k must be at least 2");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("stratified_kfold: labels must be 0 or 1");
    (labels[i] == 1 ? pos : neg).push_back(i);
  }
  if (pos.size() < k || neg.size() < k)
    throw ValidationError("stratified_kfold: each class needs at least " + std::to_string(k) + " samples (have " +
                          std::to_string(pos.size()) + " positive, " + std::to_string(neg.size()) + " negative)");
  Rng rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  FoldPlan plan{k, seed, std::vector<std::vector<std::size_t>>(k)};
  std::size_t slot = 0;
  for (auto i : pos) plan.folds[slot++ % k].push_back(i);
  for (auto i : neg) plan.folds[slot++ % k].push_back(i);
  for (auto& f : plan.folds) std::sort(f.begin(), f.end());
  return plan;
}

// ---------------------------------------------------------------------------
// In-memory dataset

struct Sample {
  std::string case_id;
  Tensor cc;
  Tensor mlo;
  LesionDescriptorSet attributes;
  int label = 0;
};

struct Dataset {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }
};

/// Loads every case listed in `<dir>/metadata.csv`, resizing images to
/// `target_size` when it is non-zero.
inline Dataset load_dataset(const std::filesystem::path& dir, const DescriptorVocabulary& vocab,
                            std::size_t descriptor_length, std::size_t target_size = 0) {
  Dataset ds;
  for (const auto& rec : load_metadata_csv(dir / "metadata.csv", vocab)) {
    Sample s{rec.case_id, load_image(dir / rec.cc_image_path), load_image(dir / rec.mlo_image_path),
             encode_case(rec.lesions, vocab, descriptor_length), rec.label};
    if (target_size) {
      s.cc = resize(s.cc, target_size, target_size);
      s.mlo = resize(s.mlo, target_size, target_size);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Copy of the dataset with both views resized.
inline Dataset resized(const Dataset& ds, std::size_t h, std::size_t w) {
  Dataset out = ds;
  for (auto& s : out.samples) {
    if (s.cc.dim(1) != h || s.cc.dim(2) != w) s.cc = resize(s.cc, h, w);
    if (s.mlo.dim(1) != h || s.mlo.dim(2) != w) s.mlo = resize(s.mlo, h, w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthOptions {
  std::size_t n_cases = 100;
  double alpha = 1.0;  // probability that descriptors reflect the rendered lesion
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
};

namespace detail {

// Label-conditional descriptor distributions. Benign lesions tend to be round
// or oval with circumscribed/obscured margins, malignant ones irregular with
// ill-defined/spiculated margins.
inline const std::array<const char*, 3> kShapes{"Round", "Oval", "Irregular"};
inline const std::array<const char*, 4> kMargins{"Circumscribed", "Obscured", "Ill-defined", "Spicular"};
inline const std::array<std::array<double, 3>, 2> kShapeProb{{{0.45, 0.45, 0.10}, {0.15, 0.15, 0.70}}};
inline const std::array<std::array<double, 4>, 2> kMarginProb{{{0.50, 0.35, 0.10, 0.05}, {0.05, 0.10, 0.40, 0.45}}};

template <std::size_t N>
std::size_t draw(const std::array<double, N>& probs, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double u = unif(rng), acc = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return N - 1;
}

struct LesionGeometry {
  std::size_t shape = 0, margin = 0;
  double radius = 0.15;  // fraction of image size
  double elongation = 1.0;
  double angle = 0.0;
  std::array<double, 4> harmonics{};  // radial perturbation amplitudes
  std::array<double, 4> phases{};
  std::vector<double> spikes;  // spicule angles
  double contrast = 0.35;
};

struct ViewTransform {
  double cx = 0.5, cy = 0.5, rotation = 0.0, scale = 1.0;
};

// Soft membership of a lesion at lesion-local polar coordinates.
inline double lesion_intensity(const LesionGeometry& g, double r, double theta, double px_per_unit) {
  double boundary = g.radius;
  // Ellipse in the rotated lesion frame.
  const double c = std::cos(theta - g.angle), s = std::sin(theta - g.angle);
  boundary /= std::sqrt(c * c + (s * g.elongation) * (s * g.elongation));
  if (g.shape == 2)
    for (std::size_t h = 0; h < g.harmonics.size(); ++h)
      boundary *= 1.0 + g.harmonics[h] * std::sin(static_cast<double>(h + 2) * theta + g.phases[h]);
  double edge_px = 0.6;  // circumscribed: sharp
  double contrast = g.contrast;
  if (g.margin == 1) {  // obscured
    edge_px = 1.5;
    contrast *= 0.6;
  } else if (g.margin == 2) {  // ill-defined
    edge_px = 4.0;
  }
  const double d = (r - boundary) * px_per_unit / edge_px;
  double v = contrast / (1.0 + std::exp(d));
  if (g.margin == 3) {
    for (double a : g.spikes) {
      double delta = std::remainder(theta - a, 2.0 * std::numbers::pi);
      const double along = r / boundary;
      if (along > 0.8 && along < 1.9) {
        const double width = 0.8 / (r * px_per_unit + 1e-9);
        v = std::max(v, contrast * 0.8 * std::exp(-(delta * delta) / (2 * width * width)) * (1.9 - along));
      }
    }
  }
  return v;
}

inline Tensor render_view(const LesionGeometry& g, const ViewTransform& t, std::size_t size, Rng& rng) {
  std::normal_distribution<double> noise(0.0, 0.03);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  // Low-frequency tissue background.
  std::array<double, 6> f{}, ph{};
  for (std::size_t i = 0; i < 6; ++i) {
    f[i] = 1.0 + 3.0 * unif(rng);
    ph[i] = 2.0 * std::numbers::pi * unif(rng);
  }
  const double n = static_cast<double>(size);
  std::vector<double> px(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) / n, v = static_cast<double>(y) / n;
      double bg = 0.3;
      for (std::size_t i = 0; i < 3; ++i) bg += 0.04 * std::sin(2 * std::numbers::pi * f[i] * u + ph[i]);
      for (std::size_t i = 3; i < 6; ++i) bg += 0.04 * std::sin(2 * std::numbers::pi * f[i] * v + ph[i]);
      // Lesion-local coordinates.
      const double dx = (u - t.cx) / t.scale, dy = (v - t.cy) / t.scale;
      const double r = std::hypot(dx, dy);
      const double theta = std::atan2(dy, dx) - t.rotation;
      const double lesion = lesion_intensity(g, r, theta, n * t.scale);
      px[y * size + x] = std::clamp(bg + lesion + noise(rng), 0.0, 1.0);
    }
  return Tensor::from({1, size, size}, std::move(px));
}

}  // namespace detail

/// Serialized generation manifest (`key=value` lines).
inline std::string synth_manifest(const SynthOptions& o) {
  std::ostringstream os;
  os.precision(17);
  os << "generator=deepbirads-synth\n"
     << "seed=" << o.seed << '\n'
     << "alpha=" << o.alpha << '\n'
     << "n_cases=" << o.n_cases << '\n'
     << "image_size=" << o.image_size << '\n';
  return os.str();
}

/// Per-case RNG stream derived from the dataset seed and the case index.
inline Rng case_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5eedu};
  return Rng(seq);
}

/// In-memory synthetic cases: records (with relative image paths) and images.
struct SynthCase {
  CaseRecord record;
  Tensor cc, mlo;
};

inline std::vector<SynthCase> synth_cases(const SynthOptions& o) {
  if (!(o.alpha >= 0.0 && o.alpha <= 1.0)) throw ValidationError("synthetic alpha must lie in [0, 1]");
  if (o.image_size < 8) throw ValidationError("synthetic image size must be at least 8");
  std::vector<SynthCase> out;
  for (std::size_t i = 0; i < o.n_cases; ++i) {
    Rng rng = case_rng(o.seed, i);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const int label = unif(rng) < 0.5 ? 1 : 0;
    const std::size_t n_lesions = unif(rng) < 0.2 ? 2 : 1;
    char id[32];
    std::snprintf(id, sizeof id, "case%05zu", i);
    SynthCase sc;
    sc.record.case_id = id;
    sc.record.label = label;
    sc.record.cc_image_path = std::string("images/") + id + "_CC.pgm";
    sc.record.mlo_image_path = std::string("images/") + id + "_MLO.pgm";
    std::vector<detail::LesionGeometry> geoms;
    std::vector<std::pair<double, double>> centers;
    for (std::size_t l = 0; l < n_lesions; ++l) {
      detail::LesionGeometry g;
      g.shape = detail::draw(detail::kShapeProb[static_cast<std::size_t>(label)], rng);
      g.margin = detail::draw(detail::kMarginProb[static_cast<std::size_t>(label)], rng);
      g.radius = (0.10 + 0.06 * unif(rng)) / (n_lesions == 2 ? 1.3 : 1.0);
      g.elongation = g.shape == 1 ? 1.6 + 0.4 * unif(rng) : 1.0;
      g.angle = std::numbers::pi * unif(rng);
      for (std::size_t h = 0; h < g.harmonics.size(); ++h) {
        g.harmonics[h] = 0.08 + 0.12 * unif(rng);
        g.phases[h] = 2 * std::numbers::pi * unif(rng);
      }
      const std::size_t n_spikes = 5 + static_cast<std::size_t>(4 * unif(rng));
      for (std::size_t s = 0; s < n_spikes; ++s) g.spikes.push_back(2 * std::numbers::pi * unif(rng) - std::numbers::pi);
      g.contrast = 0.3 + 0.1 * unif(rng);
      geoms.push_back(g);
      centers.emplace_back(0.3 + 0.4 * unif(rng), 0.3 + 0.4 * unif(rng));
      // Descriptors either reflect the rendered lesion or are drawn uniformly.
      std::size_t shape_tok = g.shape, margin_tok = g.margin;
      if (!(unif(rng) < o.alpha)) {
        shape_tok = static_cast<std::size_t>(unif(rng) * 3) % 3;
        margin_tok = static_cast<std::size_t>(unif(rng) * 4) % 4;
      }
      sc.record.lesions.push_back({detail::kShapes[shape_tok], detail::kMargins[margin_tok]});
    }
    // Each view sees the lesions under its own projection.
    for (int view = 0; view < 2; ++view) {
      const double rot = (unif(rng) - 0.5) * std::numbers::pi / 3.0;
      const double scl = 0.9 + 0.2 * unif(rng);
      const double shift_x = (unif(rng) - 0.5) * 0.1, shift_y = (unif(rng) - 0.5) * 0.1;
      Tensor img;
      for (std::size_t l = 0; l < n_lesions; ++l) {
        detail::ViewTransform t{centers[l].first + shift_x, centers[l].second + shift_y, rot, scl};
        Tensor layer = detail::render_view(geoms[l], t, o.image_size, rng);
        if (!img.defined()) {
          img = layer;
        } else {
          std::vector<double> merged(img.numel());
          for (std::size_t p = 0; p < merged.size(); ++p) merged[p] = std::max(img[p], layer[p]);
          img = Tensor::from(img.shape(), std::move(merged));
        }
      }
      (view == 0 ? sc.cc : sc.mlo) = img;
    }
    out.push_back(std::move(sc));
  }
  return out;
}

/// Synthetic cases as an in-memory dataset, quantized to 8 bits exactly as
/// they would be after a synth_generate / load_dataset round trip.
inline Dataset synth_dataset(const SynthOptions& o, const DescriptorVocabulary& vocab, std::size_t descriptor_length) {
  Dataset ds;
  for (auto& sc : synth_cases(o)) {
    ds.samples.push_back({sc.record.case_id, GrayImage::from_tensor(sc.cc).to_tensor(),
                          GrayImage::from_tensor(sc.mlo).to_tensor(),
                          encode_case(sc.record.lesions, vocab, descriptor_length), sc.record.label});
  }
  return ds;
}

/// Writes images/, metadata.csv and manifest.txt under `dir`.
inline std::vector<CaseRecord> synth_generate(const SynthOptions& o, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  {
    std::ofstream m(dir / "manifest.txt", std::ios::binary);
    m << synth_manifest(o);
  }
  std::vector<CaseRecord> records;
  for (auto& sc : synth_cases(o)) {
    write_pgm(dir / sc.record.cc_image_path, GrayImage::from_tensor(sc.cc));
    write_pgm(dir / sc.record.mlo_image_path, GrayImage::from_tensor(sc.mlo));
    records.push_back(std::move(sc.record));
  }
  std::ofstream csv(dir / "metadata.csv", std::ios::binary);
  csv << format_metadata_csv(records);
  return records;
}

}  // namespace deepbirads
