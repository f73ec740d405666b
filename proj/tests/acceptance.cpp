// Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Pass criterion numbers as arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "deepbirads/checkpoint.hpp"
#include "deepbirads/cli.hpp"
#include "deepbirads/gradcheck.hpp"
#include "deepbirads/train.hpp"

using namespace deepbirads;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kRowSumTolerance = 1e-9;
constexpr double kHullSlack = 1e-12;
constexpr double kPermutationTolerance = 1e-12;
constexpr double kTrapezoidTolerance = 1e-12;
constexpr double kDirectionalGap = 0.05;
constexpr double kNullGap = 0.05;
constexpr double kDirectionalBudgetSeconds = 15 * 60.0;
constexpr int kAttentionTrials = 1000;
constexpr int kMetricTrials = 1000;
constexpr int kCodecTrials = 10000;

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t c = x.dim(1);
  std::vector<double> v(x.numel());
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t j = 0; j < c; ++j) v[r * c + j] = x.at(perm[r], j);
  return Tensor::matrix(x.dim(0), c, std::move(v));
}

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  Clock clock;
  auto r = model_gradient_check(minimal_config());
  const double t = clock.seconds();
  return {r.passed(kGradTolerance) && t < kGradBudgetSeconds,
          "worst " + fmt("%.3g", r.worst_rel_error) + " in " + r.worst_group + ", " + std::to_string(r.groups.size()) +
              " groups, " + fmt("%.1f", t) + " s"};
}

Outcome attention_invariants() {
  Rng rng(2024);
  std::size_t failures = 0;
  double worst_row = 0.0;
  for (int trial = 0; trial < kAttentionTrials; ++trial) {
    const std::size_t nq = 1 + rng() % 6, nk = 1 + rng() % 9, d = 1 + rng() % 8, dv = 1 + rng() % 5;
    auto q = uniform({nq, d}, rng, -4, 4), k = uniform({nk, d}, rng, -4, 4), v = uniform({nk, dv}, rng, -3, 3);
    auto w = attention_weights(q, k);
    for (std::size_t r = 0; r < nq; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < nk; ++j) s += w.at(r, j);
      worst_row = std::max(worst_row, std::abs(s - 1.0));
    }
    auto out = attention_unit(q, k, v);
    for (std::size_t c = 0; c < dv; ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t j = 0; j < nk; ++j) lo = std::min(lo, v.at(j, c)), hi = std::max(hi, v.at(j, c));
      for (std::size_t r = 0; r < nq; ++r)
        if (out.at(r, c) < lo - kHullSlack || out.at(r, c) > hi + kHullSlack) ++failures;
    }
    std::vector<std::size_t> perm(nk);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto pout = attention_unit(q, permute_rows(k, perm), permute_rows(v, perm));
    for (std::size_t i = 0; i < out.numel(); ++i)
      if (std::abs(out[i] - pout[i]) > kPermutationTolerance) ++failures;

    // View attention with the default wiring against a direct evaluation of
    // LN(A + Attn(A_hat W_q, A_hat W_k, A W_v)).
    const std::size_t L = 2 + rng() % 7, nl = 1 + rng() % 5;
    auto p = AttentionParams::make(L, L, false, rng);
    p.attn_norm.gamma = uniform({L}, rng, 0.5, 1.5);
    p.attn_norm.beta = uniform({L}, rng, -0.5, 0.5);
    auto a = uniform({nl, L}, rng, -2, 2), a_hat = uniform({nl, L}, rng, -2, 2);
    auto view = view_attention({a}, {a_hat}, WiringConfig::table()[2], p, {}).tokens;
    auto direct = layer_norm(
        add(a, attention_unit(matmul(a_hat, p.proj.w_q), matmul(a_hat, p.proj.w_k), matmul(a, p.proj.w_v))),
        p.attn_norm.gamma, p.attn_norm.beta);
    for (std::size_t i = 0; i < view.numel(); ++i)
      if (view[i] != direct[i]) ++failures;
  }
  const bool ok = failures == 0 && worst_row <= kRowSumTolerance;
  return {ok, std::to_string(kAttentionTrials) + " trials, worst row-sum error " + fmt("%.2g", worst_row) + ", " +
                  std::to_string(failures) + " violations"};
}

Outcome shape_law() {
  std::size_t cases = 0, failures = 0;
  for (std::size_t layers = 2; layers <= 6; ++layers)
    for (std::size_t d0 : {1u, 2u, 4u, 8u})
      for (std::size_t hm : {1u, 2u})
        for (std::size_t wm : {1u, 3u}) {
          const std::size_t levels = layers - 1, div = required_divisor(levels);
          const std::size_t h = div * hm, w = div * wm;
          if (h * w > 256 * 256) continue;
          Rng rng(cases + 1);
          auto params = BackboneParams::make(d0, levels, rng);
          auto pyr = extract_pyramid(uniform({1, h, w}, rng, 0, 1), params);
          ++cases;
          if (pyr.levels.size() != levels) ++failures;
          for (std::size_t k = 0; k < pyr.levels.size(); ++k) {
            const std::size_t f = 4u << k;
            if (pyr.levels[k].shape() != Shape{d0 << k, h / f, w / f}) ++failures;
            auto tok = tokenize_features(pyr.levels[k], k, params).tokens;
            if (tok.shape() != Shape{(h / f) * (w / f), 4 * d0}) ++failures;
          }
        }
  return {failures == 0, std::to_string(cases) + " (H, W, d0, N) combinations, " + std::to_string(failures) +
                             " mismatches"};
}

Outcome metric_oracle() {
  std::mt19937_64 gen(77);
  std::size_t trials = 0, mismatches = 0;
  double worst_trap = 0.0;
  while (trials < static_cast<std::size_t>(kMetricTrials)) {
    const std::size_t n = 2 + gen() % 29, levels = 1 + gen() % 10;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = static_cast<double>(gen() % levels) * 0.1, y[i] = gen() % 2;
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == static_cast<long>(n)) continue;
    ++trials;
    long long twice = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) twice += s[i] > s[j] ? 2 : s[i] == s[j] ? 1 : 0;
    const double brute = static_cast<double>(twice) / (2.0 * static_cast<double>(pos * (n - pos)));
    const double a = auc(s, y);
    if (a != brute) ++mismatches;
    worst_trap = std::max(worst_trap, std::abs(trapezoid_area(roc_points(s, y)) - a));
  }
  return {mismatches == 0 && worst_trap <= kTrapezoidTolerance,
          std::to_string(trials) + " instances, " + std::to_string(mismatches) + " inexact, worst trapezoid gap " +
              fmt("%.2g", worst_trap)};
}

Outcome stratification() {
  std::mt19937_64 gen(5);
  std::size_t plans = 0;
  double worst = 0.0;
  bool partition = true;
  while (plans < 500) {
    const std::size_t n = 10 + gen() % 500;
    std::vector<int> labels(n);
    const double rate = 0.05 + 0.9 * std::uniform_real_distribution<double>(0, 1)(gen);
    for (auto& l : labels) l = std::uniform_real_distribution<double>(0, 1)(gen) < rate;
    const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    if (pos < 5 || n - pos < 5) continue;
    ++plans;
    auto plan = stratified_kfold(labels, 5, gen());
    std::vector<int> seen(n, 0);
    for (const auto& f : plan.folds) {
      std::size_t p = 0;
      for (auto i : f) p += labels[i], ++seen[i];
      const double share = static_cast<double>(pos) * static_cast<double>(f.size()) / static_cast<double>(n);
      worst = std::max(worst, std::abs(static_cast<double>(p) - share));
    }
    partition = partition && std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; });
  }
  return {worst <= 1.0 && partition, std::to_string(plans) + " label vectors, k=5, worst deviation " +
                                         fmt("%.3f", worst) + (partition ? "" : ", not a partition")};
}

// Toy protocol shared by criteria 6 and 7.
struct Directional {
  double full = 0.0, blind = 0.0, seconds = 0.0;
};

Directional directional_run(double alpha) {
  Clock clock;
  SynthOptions o;
  o.n_cases = 400;
  o.alpha = alpha;
  o.seed = 11;
  o.image_size = 64;
  auto data = synth_dataset(o, DescriptorVocabulary::standard(), 16);
  ModelConfig m;
  m.layers = 4;
  m.latent = 16;
  m.queries = 4;
  m.base_channels = 4;
  m.image_height = m.image_width = 64;
  m.seed = 1;
  TrainConfig t;
  t.iterations = 300;
  t.seed = 2;
  CvOptions cv;
  cv.folds = 5;
  Directional d;
  d.full = run_cv(data, m, t, cv).get("auc").mean;
  m.use_descriptors = false;
  d.blind = run_cv(data, m, t, cv).get("auc").mean;
  d.seconds = clock.seconds();
  return d;
}

std::string directional_detail(const Directional& d) {
  return "AUC full " + fmt("%.3f", d.full) + " vs no-descriptors " + fmt("%.3f", d.blind) + ", gap " +
         fmt("%+.3f", d.full - d.blind) + ", " + fmt("%.0f", d.seconds) + " s";
}

Outcome directional_claim() {
  auto d = directional_run(1.0);
  return {d.full - d.blind >= kDirectionalGap && d.seconds < kDirectionalBudgetSeconds, directional_detail(d)};
}

Outcome null_control() {
  auto d = directional_run(0.0);
  return {std::abs(d.full - d.blind) <= kNullGap, directional_detail(d)};
}

Outcome ablation_structure() {
  Clock clock;
  SynthOptions o;
  o.n_cases = 10;
  o.seed = 3;
  o.image_size = 16;
  auto data = synth_dataset(o, DescriptorVocabulary::standard(), 16);
  ModelConfig m;
  m.layers = 2;
  m.latent = 16;
  m.queries = 2;
  m.base_channels = 1;
  m.n_bands = 2;
  m.image_height = m.image_width = 16;
  TrainConfig t;
  t.iterations = 1;
  t.batch_size = 2;
  CvOptions cv;
  cv.folds = 2;
  auto rows = [](const std::string& csv) { return std::count(csv.begin(), csv.end(), '\n') - 1; };
  auto wiring = [&] { return ablate_wiring(data, m, t, cv).csv(); };
  auto layers = [&] { return ablate_layers(data, m, t, {3, 5, 6, 7}, cv).csv(); };
  auto aug = [&] { return ablate_augmentations(data, m, t, default_augmentation_policies(16, 1), cv).csv(); };
  const auto w1 = wiring(), w2 = wiring(), l1 = layers(), l2 = layers(), a1 = aug(), a2 = aug();
  std::string labels;
  {
    std::istringstream is(w1);
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      auto parts = detail::split(line, ',');
      labels += (labels.empty() ? "" : " ") + parts[1] + parts[2] + parts[3];
    }
  }
  const bool ok = rows(w1) == 6 && rows(l1) == 4 && rows(a1) == 7 && w1 == w2 && l1 == l2 && a1 == a2 &&
                  labels == "COO OCO OOC CCO COC OCC";
  return {ok, "wiring " + std::to_string(rows(w1)) + " rows (" + labels + "), layers " + std::to_string(rows(l1)) +
                  ", aug " + std::to_string(rows(a1)) + ", reruns " +
                  (w1 == w2 && l1 == l2 && a1 == a2 ? "identical" : "differ") + ", " + fmt("%.0f", clock.seconds()) +
                  " s"};
}

Outcome descriptor_codec() {
  auto vocab = DescriptorVocabulary::standard();
  std::size_t failures = 0;
  std::vector<std::string> table;
  for (const auto& c : vocab.classes()) table.push_back(c.token);
  if (table.size() != 14) ++failures;
  for (const auto& t : table) {
    auto d = encode_lesion({t}, vocab, 64);
    if (decode_lesion(d, vocab) != std::vector<std::string>{t}) ++failures;
  }
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < kCodecTrials; ++trial) {
    std::vector<std::string> tokens;
    const std::size_t n = gen() % 8;
    for (std::size_t i = 0; i < n; ++i) tokens.push_back(table[gen() % table.size()]);
    auto base = encode_lesion(tokens, vocab, 32);
    std::shuffle(tokens.begin(), tokens.end(), gen);
    if (encode_lesion(tokens, vocab, 32).values != base.values) ++failures;
    if (encode_lesion(decode_lesion(base, vocab), vocab, 32).values != base.values) ++failures;
  }
  auto combo = encode_lesion({"Circumscribed-Obscured"}, vocab, 14);
  auto pair = encode_lesion({"Circumscribed", "Obscured"}, vocab, 14);
  if (combo.values != pair.values) ++failures;
  if (encode_lesion({"Ill-defined"}, vocab, 14).values != encode_lesion({"ill-defined"}, vocab, 14).values) ++failures;
  return {failures == 0, "14 classes, " + std::to_string(kCodecTrials) + " permutation trials, " +
                             std::to_string(failures) + " failures"};
}

Outcome determinism() {
  const auto root = fs::temp_directory_path() / "deepbirads_acceptance_determinism";
  fs::remove_all(root);
  auto run = [](std::vector<std::string> args) {
    args.insert(args.begin(), "deepbirads");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  };
  int codes = run({"synth-gen", "--out", (root / "data").string(), "--n-cases", "24", "--seed", "4", "--size", "32"});
  const std::vector<std::string> model{"--layers", "3", "--latent", "16", "--queries", "2", "--d0", "2",
                                       "--iters",  "5", "--batch",  "4",  "--seed",    "8"};
  for (const char* name : {"a", "b"}) {
    std::vector<std::string> args{"train", "--data", (root / "data").string(), "--out", (root / name).string()};
    args.insert(args.end(), model.begin(), model.end());
    codes |= run(args);
  }
  const std::string a = detail::read_file(root / "a" / "checkpoint.bin");
  const std::string b = detail::read_file(root / "b" / "checkpoint.bin");
  auto loaded = load_checkpoint(root / "a" / "checkpoint.bin");
  save_checkpoint(loaded, root / "resaved.bin");
  const std::string c = detail::read_file(root / "resaved.bin");
  const bool ok = codes == 0 && a == b && a == c;
  return {ok, "checkpoints " + std::string(a == b ? "identical" : "differ") + " (" + std::to_string(a.size()) +
                  " bytes, sha1 " + sha1_hex(a).substr(0, 12) + "), reload/save " + (a == c ? "bit-exact" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"attention invariants", attention_invariants},
      {"shape law", shape_law},
      {"metric oracle", metric_oracle},
      {"stratification", stratification},
      {"directional multi-modal claim", directional_claim},
      {"null-signal control", null_control},
      {"ablation harness structure", ablation_structure},
      {"descriptor codec", descriptor_codec},
      {"determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
