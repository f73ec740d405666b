// Training loop, evaluation, cross-validation and ablation harnesses.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "deepbirads/data.hpp"
#include "deepbirads/metrics.hpp"
#include "deepbirads/model.hpp"
#include "deepbirads/tensor.hpp"

namespace deepbirads {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t iterations = 1000;
  double lr = 0.001;
  double decay_factor = 10.0;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  AugmentationPolicy augmentation{"Baseline + h/vflip + elastic", true, true, true, false};

  void validate() const {
    if (iterations == 0) throw ConfigError("training needs at least one iteration");
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(decay_factor > 0.0)) throw ConfigError("decay factor must be positive");
  }

  std::string to_kv() const {
    std::ostringstream os;
    os.precision(17);
    os << "batch=" << batch_size << '\n'
       << "iters=" << iterations << '\n'
       << "lr=" << lr << '\n'
       << "decay_factor=" << decay_factor << '\n'
       << "momentum=" << momentum << '\n'
       << "train_seed=" << seed << '\n'
       << "aug_hflip=" << augmentation.hflip << '\n'
       << "aug_vflip=" << augmentation.vflip << '\n'
       << "aug_elastic=" << augmentation.elastic << '\n'
       << "aug_noise=" << augmentation.gaussian_noise << '\n'
       << "aug_size=" << augmentation.target_size << '\n';
    return os.str();
  }

  bool set(const std::string& key, const std::string& value) {
    auto flag = [&] { return value == "1" || value == "true"; };
    if (key == "batch") batch_size = std::stoull(value);
    else if (key == "iters") iterations = std::stoull(value);
    else if (key == "lr") lr = std::stod(value);
    else if (key == "decay_factor") decay_factor = std::stod(value);
    else if (key == "momentum") momentum = std::stod(value);
    else if (key == "train_seed") seed = std::stoull(value);
    else if (key == "aug_hflip") augmentation.hflip = flag();
    else if (key == "aug_vflip") augmentation.vflip = flag();
    else if (key == "aug_elastic") augmentation.elastic = flag();
    else if (key == "aug_noise") augmentation.gaussian_noise = flag();
    else if (key == "aug_size") augmentation.target_size = std::stoull(value);
    else return false;
    return true;
  }
};

/// -log softmax(logits)[label] for two-class logits.
inline Tensor cross_entropy(const Tensor& logits, int label) {
  if (label != 0 && label != 1) throw UsageError("cross_entropy: label must be 0 or 1, got " + std::to_string(label));
  if (logits.numel() != 2) throw DimensionError("cross_entropy: expected 2 logits, got " + shape_string(logits.shape()));
  const double mx = std::max(logits[0], logits[1]);
  const double lse = mx + std::log(std::exp(logits[0] - mx) + std::exp(logits[1] - mx));
  const std::size_t y = static_cast<std::size_t>(label);
  std::vector<double> p{std::exp(logits[0] - lse), std::exp(logits[1] - lse)};
  return detail::make_result({1}, {lse - logits[y]}, {logits}, [p, y](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < 2; ++i) g[i] += self.grad[0] * (p[i] - (i == y ? 1.0 : 0.0));
  }, "cross_entropy");
}

/// Step decay: lr0 for the first half of training, lr0 / decay afterwards.
/// With the default 1000 iterations the boundary is iteration 500.
inline double lr_at(std::size_t iteration, const TrainConfig& cfg) {
  const std::size_t boundary = cfg.iterations / 2;
  return iteration < boundary ? cfg.lr : cfg.lr / cfg.decay_factor;
}

struct LossRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::unique_ptr<DeepBiradsModel> model;
  std::vector<LossRecord> trace;
};

/// Independent RNG stream for job `job` of a run seeded with `seed`.
inline Rng job_rng(std::uint64_t seed, std::uint64_t job) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(job), static_cast<std::uint32_t>(job >> 32), 0x7a11u};
  return Rng(seq);
}

/// Minibatch SGD with momentum over `indices` of `data`. Batches walk through
/// a shuffled permutation that is redrawn every epoch.
inline TrainResult train_fold(const Dataset& data, const std::vector<std::size_t>& indices, const ModelConfig& mcfg,
                              const TrainConfig& tcfg) {
  tcfg.validate();
  if (indices.empty()) throw ValidationError("train_fold: no training cases");
  TrainResult result;
  result.model = std::make_unique<DeepBiradsModel>(mcfg);
  auto& model = *result.model;
  auto named = model.parameters();
  std::vector<Tensor> params;
  for (auto& p : named) params.push_back(p.tensor);
  std::vector<std::vector<double>> velocity;
  Rng rng(tcfg.seed);
  std::vector<std::size_t> perm = indices;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::size_t cursor = 0;
  const std::size_t batch = tcfg.batch_size;
  const double inv_batch = 1.0 / static_cast<double>(batch);
  const auto& policy = tcfg.augmentation;
  for (std::size_t it = 0; it < tcfg.iterations; ++it) {
    model.zero_grad();
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == perm.size()) {
        std::shuffle(perm.begin(), perm.end(), rng);
        cursor = 0;
      }
      const Sample& s = data.samples[perm[cursor++]];
      Tensor cc = augment(s.cc, policy, rng);
      Tensor mlo = augment(s.mlo, policy, rng);
      Tensor loss = cross_entropy(model.forward(cc, mlo, s.attributes, true, &rng), s.label);
      loss_sum += loss.item();
      backward(scale(loss, inv_batch));
    }
    const double lr = lr_at(it, tcfg);
    sgd_momentum_step(params, velocity, lr, tcfg.momentum);
    result.trace.push_back({it, loss_sum * inv_batch, lr});
  }
  return result;
}

/// Malignant probability for each of `indices`, evaluated without dropout.
inline std::vector<double> predict_scores(const DeepBiradsModel& model, const Dataset& data,
                                          const std::vector<std::size_t>& indices) {
  std::vector<double> scores;
  scores.reserve(indices.size());
  for (auto i : indices) {
    const Sample& s = data.samples[i];
    scores.push_back(predict_proba(model.forward(s.cc, s.mlo, s.attributes, false))[1]);
  }
  return scores;
}

inline MetricsReport evaluate(const DeepBiradsModel& model, const Dataset& data,
                              const std::vector<std::size_t>& indices, double threshold = 0.5) {
  std::vector<int> labels;
  for (auto i : indices) labels.push_back(data.samples[i].label);
  auto scores = predict_scores(model, data, indices);
  return compute_metrics(scores, labels, threshold);
}

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation across folds
};

struct CvReport {
  std::vector<MetricsReport> folds;
  std::vector<MetricSummary> summary;  // in metric_names() order
  std::size_t parameter_count = 0;

  const MetricSummary& get(const std::string& metric) const {
    const auto& names = metric_names();
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == metric) return summary.at(i);
    throw UsageError("unknown metric '" + metric + "'");
  }
};

inline std::vector<MetricSummary> summarize(const std::vector<MetricsReport>& folds) {
  std::vector<MetricSummary> out(metric_names().size());
  if (folds.empty()) return out;
  const double n = static_cast<double>(folds.size());
  for (std::size_t m = 0; m < out.size(); ++m) {
    double s = 0.0;
    for (const auto& f : folds) s += metric_values(f)[m];
    out[m].mean = s / n;
    double ss = 0.0;
    for (const auto& f : folds) ss += (metric_values(f)[m] - out[m].mean) * (metric_values(f)[m] - out[m].mean);
    out[m].std = folds.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  return out;
}

/// Runs independent jobs on up to `workers` threads; results keep job order.
template <typename Result>
std::vector<Result> run_jobs(std::size_t count, std::size_t workers, const std::function<Result(std::size_t)>& job) {
  std::vector<Result> results(count);
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) results[i] = job(i);
    return results;
  }
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, count); ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < count;) {
        try {
          results[i] = job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

struct CvOptions {
  std::size_t folds = 5;
  std::size_t jobs = 1;
  std::function<void(const std::string&)> progress;
};

/// Stratified k-fold cross-validation: train on k-1 folds, score the held-out
/// fold. Fold f trains with the RNG stream job_rng(seed, f).
inline CvReport run_cv(const Dataset& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                       const CvOptions& opt = {}) {
  FoldPlan plan = stratified_kfold(data.labels(), opt.folds, tcfg.seed);
  auto reports = run_jobs<MetricsReport>(opt.folds, opt.jobs, [&](std::size_t f) {
    TrainConfig t = tcfg;
    t.seed = job_rng(tcfg.seed, f)();
    ModelConfig m = mcfg;
    m.seed = job_rng(mcfg.seed, 1000 + f)();
    auto trained = train_fold(data, plan.train_indices(f), m, t);
    auto report = evaluate(*trained.model, data, plan.folds[f]);
    if (opt.progress) {
      std::ostringstream os;
      os.precision(4);
      os << "fold " << f << ": auc=" << report.auc << " accuracy=" << report.accuracy;
      opt.progress(os.str());
    }
    return report;
  });
  CvReport out;
  out.folds = std::move(reports);
  out.summary = summarize(out.folds);
  out.parameter_count = DeepBiradsModel(mcfg).census().total;
  return out;
}

// ---------------------------------------------------------------------------
// Table formatting

inline std::string format_g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// Table-style "mean ± std" with two decimals on the mean and three on the std.
inline std::string format_mean_std(const MetricSummary& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.3f", s.mean, s.std);
  return buf;
}

inline std::string metrics_csv(const MetricsReport& m) {
  std::ostringstream os;
  os << "auc,accuracy,specificity,precision,recall,f1,threshold,undefined\n";
  for (double v : metric_values(m)) os << format_g6(v) << ',';
  std::string undefined;
  auto flag = [&](bool b, const char* name) {
    if (b) undefined += (undefined.empty() ? "" : ";") + std::string(name);
  };
  flag(m.auc_undefined, "auc");
  flag(m.specificity_undefined, "specificity");
  flag(m.precision_undefined, "precision");
  flag(m.recall_undefined, "recall");
  flag(m.f1_undefined, "f1");
  os << format_g6(m.threshold) << ',' << undefined << '\n';
  return os.str();
}

inline std::string roc_csv(const std::vector<RocPoint>& pts) {
  std::ostringstream os;
  os << "fpr,tpr\n";
  for (const auto& p : pts) os << format_g6(p.fpr) << ',' << format_g6(p.tpr) << '\n';
  return os.str();
}

inline std::string loss_trace_csv(const std::vector<LossRecord>& trace) {
  std::ostringstream os;
  os << "iteration,loss,lr\n";
  for (const auto& r : trace) os << r.iteration << ',' << format_g6(r.loss) << ',' << format_g6(r.lr) << '\n';
  return os.str();
}

inline std::string cv_csv(const CvReport& r) {
  std::ostringstream os;
  os << "fold";
  for (const auto& n : metric_names()) os << ',' << n;
  os << ",undefined\n";
  for (std::size_t f = 0; f < r.folds.size(); ++f) {
    os << f;
    for (double v : metric_values(r.folds[f])) os << ',' << format_g6(v);
    os << ',' << (r.folds[f].any_undefined() ? 1 : 0) << '\n';
  }
  os << "mean";
  for (const auto& s : r.summary) os << ',' << format_g6(s.mean);
  os << ",\nstd";
  for (const auto& s : r.summary) os << ',' << format_g6(s.std);
  os << ",\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string label;
  CvReport report;
};

struct WiringTable {
  std::vector<std::pair<WiringConfig, CvReport>> rows;

  std::string csv() const {
    std::ostringstream os;
    os << "configuration,q,k,v";
    for (const auto& n : metric_names()) os << ',' << n;
    os << '\n';
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto s = rows[i].first.str();
      os << i << ',' << s[0] << ',' << s[1] << ',' << s[2];
      for (const auto& m : rows[i].second.summary) os << ',' << format_g6(m.mean);
      os << '\n';
    }
    return os.str();
  }
};

inline WiringTable ablate_wiring(const Dataset& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                                 const CvOptions& opt = {}) {
  WiringTable t;
  for (const auto& w : WiringConfig::table()) {
    ModelConfig m = mcfg;
    m.wiring = w;
    t.rows.emplace_back(w, run_cv(data, m, tcfg, opt));
  }
  return t;
}

/// Smallest multiple of the backbone divisor that is at least `extent`.
inline std::size_t round_up_extent(std::size_t extent, std::size_t levels) {
  const std::size_t div = required_divisor(levels);
  return std::max(div, (extent + div - 1) / div * div);
}

struct LayerTable {
  std::vector<std::size_t> counts;
  std::vector<CvReport> reports;

  std::string csv() const {
    std::ostringstream os;
    os << "layers,parameters,image_size,accuracy_mean,accuracy_std,accuracy\n";
    for (std::size_t i = 0; i < counts.size(); ++i) {
      const auto& acc = reports[i].get("accuracy");
      os << counts[i] << ',' << reports[i].parameter_count << ',' << image_sizes[i] << ',' << format_g6(acc.mean)
         << ',' << format_g6(acc.std) << ',' << format_mean_std(acc) << '\n';
    }
    return os.str();
  }
  std::vector<std::size_t> image_sizes;
};

/// Cross-validates each layer count. Images are upsampled when a deeper
/// pyramid needs a larger divisor than the stored resolution provides.
inline LayerTable ablate_layers(const Dataset& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                                const std::vector<std::size_t>& counts = {3, 5, 6, 7}, const CvOptions& opt = {}) {
  LayerTable t;
  for (auto n : counts) {
    ModelConfig m = mcfg;
    m.layers = n;
    const std::size_t h = round_up_extent(data.samples.front().cc.dim(1), m.pyramid_levels());
    const std::size_t w = round_up_extent(data.samples.front().cc.dim(2), m.pyramid_levels());
    m.image_height = h;
    m.image_width = w;
    const bool same = h == data.samples.front().cc.dim(1) && w == data.samples.front().cc.dim(2);
    t.counts.push_back(n);
    t.image_sizes.push_back(h);
    t.reports.push_back(same ? run_cv(data, m, tcfg, opt) : run_cv(resized(data, h, w), m, tcfg, opt));
  }
  return t;
}

/// The seven augmentation settings: no augmentation, three resize targets
/// (half, same and double the stored resolution), flips, elastic, noise.
inline std::vector<AugmentationPolicy> default_augmentation_policies(std::size_t base_size, std::size_t levels) {
  auto sized = [&](std::size_t s) { return round_up_extent(s, levels); };
  std::vector<AugmentationPolicy> p;
  p.push_back({"Baseline w/o aug."});
  for (std::size_t s : {sized(base_size / 2), sized(base_size), sized(base_size * 2)}) {
    AugmentationPolicy a{"Baseline + " + std::to_string(s)};
    a.target_size = s;
    p.push_back(a);
  }
  AugmentationPolicy flips{"Baseline + h/vflip"};
  flips.hflip = flips.vflip = true;
  p.push_back(flips);
  AugmentationPolicy elastic{"Baseline + elastic"};
  elastic.elastic = true;
  p.push_back(elastic);
  AugmentationPolicy noise{"Baseline + Gaussian"};
  noise.gaussian_noise = true;
  p.push_back(noise);
  return p;
}

struct AugmentationTable {
  std::vector<AblationRow> rows;

  std::string csv() const {
    std::ostringstream os;
    os << "configuration,accuracy_mean,accuracy_std,accuracy\n";
    for (const auto& r : rows) {
      const auto& acc = r.report.get("accuracy");
      os << r.label << ',' << format_g6(acc.mean) << ',' << format_g6(acc.std) << ',' << format_mean_std(acc) << '\n';
    }
    return os.str();
  }
};

inline AugmentationTable ablate_augmentations(const Dataset& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                                              const std::vector<AugmentationPolicy>& policies,
                                              const CvOptions& opt = {}) {
  AugmentationTable t;
  for (const auto& policy : policies) {
    TrainConfig tc = tcfg;
    tc.augmentation = policy;
    tc.augmentation.target_size = 0;
    ModelConfig m = mcfg;
    if (policy.target_size) {
      m.image_height = m.image_width = policy.target_size;
      t.rows.push_back({policy.name, run_cv(resized(data, policy.target_size, policy.target_size), m, tc, opt)});
    } else {
      m.image_height = data.samples.front().cc.dim(1);
      m.image_width = data.samples.front().cc.dim(2);
      t.rows.push_back({policy.name, run_cv(data, m, tc, opt)});
    }
  }
  return t;
}

}  // namespace deepbirads
