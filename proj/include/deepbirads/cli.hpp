// Command-line front end: synth-gen, train, eval, cv, ablate, gradcheck.
#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "deepbirads/checkpoint.hpp"
#include "deepbirads/data.hpp"
#include "deepbirads/gradcheck.hpp"
#include "deepbirads/train.hpp"

namespace deepbirads {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitVerification = 2;

// ---------------------------------------------------------------------------
// Files

/// Writes through a sibling temp file and renames it into place.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string sha1_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr)) throw IoError("SHA-1 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

/// Git blob id of a file's contents.
inline std::string git_blob_hash(const std::string& content) {
  return sha1_hex("blob " + std::to_string(content.size()) + '\0' + content);
}

/// Content hash of a file, or of a directory as the hash of its sorted
/// "<blob id> <relative path>" listing.
inline std::string content_hash(const fs::path& path) {
  if (fs::is_regular_file(path)) return git_blob_hash(detail::read_file(path));
  if (!fs::is_directory(path)) throw UsageError("input path does not exist: " + path.string());
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file())
      lines.push_back(git_blob_hash(detail::read_file(e.path())) + ' ' + fs::relative(e.path(), path).generic_string());
  std::sort(lines.begin(), lines.end(), [](const std::string& a, const std::string& b) {
    return a.substr(41) < b.substr(41);
  });
  std::string listing;
  for (const auto& l : lines) listing += l + '\n';
  return sha1_hex("tree " + std::to_string(listing.size()) + '\0' + listing);
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config;  // resolved key=value lines
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, content hash
  std::vector<std::string> outputs;
  bool timestamps = true;

  std::string str() const {
    std::ostringstream os;
    os << "command=" << command << '\n' << "seed=" << seed << '\n';
    if (timestamps) os << "started_at=" << utc_timestamp() << '\n';
    for (const auto& [path, hash] : inputs) os << "input=" << path << ' ' << hash << '\n';
    for (const auto& o : outputs) os << "output=" << o << '\n';
    os << "[config]\n" << config;
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Settings

/// Everything a command can be configured with. Keys are shared between the
/// `key=value` config file and the flags (flag `--n-cases` is key `n_cases`).
struct RunSettings {
  ModelConfig model;
  TrainConfig train;
  std::string data;
  std::string out;
  std::string vocab;
  std::string checkpoint;
  std::string mode = "cv";
  std::size_t folds = 5;
  std::optional<std::size_t> fold;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;
  std::size_t image_size = 0;  // 0: use the dataset's resolution
  double threshold = 0.5;
  std::string augment = "default";
  SynthOptions synth;
  bool image_size_set = false;

  void set(const std::string& key, const std::string& value) {
    try {
      apply(key, value);
    } catch (const ValidationError&) {
      throw;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument&) {
      throw ValidationError("invalid value '" + value + "' for " + key);
    } catch (const std::out_of_range&) {
      throw ValidationError("value '" + value + "' out of range for " + key);
    }
  }

  std::string str() const {
    std::ostringstream os;
    os.precision(17);
    os << model.to_kv() << train.to_kv() << "data=" << data << '\n'
       << "out=" << out << '\n'
       << "folds=" << folds << '\n'
       << "fold=" << (fold ? std::to_string(*fold) : "all") << '\n'
       << "jobs=" << jobs << '\n'
       << "threshold=" << threshold << '\n'
       << "augment=" << augment << '\n';
    return os.str();
  }

 private:
  static std::size_t count(const std::string& v) {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    std::size_t used = 0;
    const auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  }
  static double real(const std::string& v) {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  }
  static bool flag(const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw std::invalid_argument(v);
  }

  void apply(const std::string& key, const std::string& v) {
    if (key == "seed") {
      seed = count(v);
      model.seed = train.seed = synth.seed = seed;
    } else if (key == "data") data = v;
    else if (key == "out") out = v;
    else if (key == "vocab") vocab = v;
    else if (key == "checkpoint") checkpoint = v;
    else if (key == "mode") mode = v;
    else if (key == "folds") folds = count(v);
    else if (key == "fold") fold = count(v);
    else if (key == "jobs") jobs = std::max<std::size_t>(1, count(v));
    else if (key == "threshold") threshold = real(v);
    else if (key == "no_descriptors") model.use_descriptors = !flag(v);
    else if (key == "image_size") {
      image_size = count(v);
      image_size_set = true;
    } else if (key == "augment") {
      augmentation_policy(v);
      augment = v;
    } else if (key == "n_cases") synth.n_cases = count(v);
    else if (key == "alpha") synth.alpha = real(v);
    else if (key == "size") synth.image_size = count(v);
    else if (key == "bands") model.n_bands = count(v);
    else if (key == "dropout") model.dropout = real(v);
    else if (key == "latent" || key == "queries" || key == "d0" || key == "layers" || key == "heads") {
      count(v);
      model.set(key, v);
    } else if (key == "wiring") model.set(key, v);
    else if (key == "iters" || key == "batch") train.set(key, std::to_string(count(v)));
    else if (key == "lr") train.lr = real(v);
    else if (key == "momentum") train.momentum = real(v);
    else if (key == "decay_factor") train.decay_factor = real(v);
    else throw ValidationError("unknown setting '" + key + "'");
  }

 public:
  /// Named augmentation presets for training.
  static AugmentationPolicy augmentation_policy(const std::string& name) {
    AugmentationPolicy p;
    if (name == "none") return p;
    if (name == "default") {
      p.name = "Baseline + h/vflip + elastic";
      p.hflip = p.vflip = p.elastic = true;
    } else if (name == "flip") {
      p.name = "Baseline + h/vflip";
      p.hflip = p.vflip = true;
    } else if (name == "elastic") {
      p.name = "Baseline + elastic";
      p.elastic = true;
    } else if (name == "noise") {
      p.name = "Baseline + Gaussian";
      p.gaussian_noise = true;
    } else {
      throw ValidationError("unknown augmentation '" + name + "'; expected none, default, flip, elastic or noise");
    }
    return p;
  }
};

inline std::string read_config_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw UsageError("config file not found: " + path.string());
  return detail::read_file(path);
}

/// Applies `key=value` lines; blank lines and `#` comments are skipped.
inline void apply_config_text(RunSettings& s, const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(origin + ":" + std::to_string(line_no) + ": expected key=value, got '" + line + "'");
    s.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

inline DescriptorVocabulary resolve_vocab(const RunSettings& s) {
  return s.vocab.empty() ? DescriptorVocabulary::standard() : DescriptorVocabulary::load(s.vocab);
}

inline void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required option ") + flag);
}

/// Loads the dataset and fixes the model's image extent and vocabulary size.
inline Dataset load_for_model(RunSettings& s, const DescriptorVocabulary& vocab) {
  require(s.data, "--data");
  s.model.vocab_size = vocab.size();
  if (s.model.latent < vocab.size())
    throw ConfigError("latent length " + std::to_string(s.model.latent) + " is shorter than the descriptor vocabulary (" +
                      std::to_string(vocab.size()) + ")");
  Dataset ds = load_dataset(s.data, vocab, s.model.latent, s.image_size_set ? s.image_size : 0);
  if (ds.samples.empty()) throw ValidationError("dataset " + s.data + " has no cases");
  s.model.image_height = ds.samples.front().cc.dim(1);
  s.model.image_width = ds.samples.front().cc.dim(2);
  for (const auto& smp : ds.samples)
    if (smp.cc.shape() != ds.samples.front().cc.shape() || smp.mlo.shape() != ds.samples.front().cc.shape())
      throw ValidationError("case " + smp.case_id + " has a different image size; pass --image-size to resize");
  return ds;
}

inline RunManifest begin_manifest(const std::string& command, const RunSettings& s) {
  RunManifest m;
  m.command = command;
  m.config = s.str();
  m.seed = s.seed;
  if (!s.data.empty()) m.inputs.emplace_back(s.data, content_hash(s.data));
  if (!s.checkpoint.empty()) m.inputs.emplace_back(s.checkpoint, content_hash(s.checkpoint));
  return m;
}

inline void print_metrics(std::ostream& out, const MetricsReport& m) {
  const auto values = metric_values(m);
  const auto& names = metric_names();
  for (std::size_t i = 0; i < names.size(); ++i) out << names[i] << ": " << format_g6(values[i]) << '\n';
  if (m.auc_undefined) out << "warning: " << m.auc_error << '\n';
}

inline std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

}  // namespace detail

inline int cmd_synth_gen(RunSettings& s, bool force, std::ostream& out) {
  detail::require(s.out, "--out");
  if (!(s.synth.alpha >= 0.0 && s.synth.alpha <= 1.0))
    throw ValidationError("--alpha must lie in [0, 1], got " + format_g6(s.synth.alpha));
  if (s.synth.n_cases == 0) throw ValidationError("--n-cases must be positive");
  if (s.synth.image_size < 8) throw ValidationError("--size must be at least 8");
  const fs::path dir = s.out;
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
    for (const auto& e : fs::directory_iterator(dir)) fs::remove_all(e.path());
  }
  fs::create_directories(dir);
  RunManifest m;
  m.command = "synth-gen";
  m.seed = s.synth.seed;
  m.config = synth_manifest(s.synth);
  m.outputs = {"manifest.txt", "metadata.csv", "images/"};
  // Reruns must reproduce the directory byte for byte, so no timestamps here.
  m.timestamps = false;
  write_file_atomic(dir / "run_manifest.txt", m.str());
  const auto records = synth_generate(s.synth, dir);
  std::size_t malignant = 0;
  for (const auto& r : records) malignant += static_cast<std::size_t>(r.label);
  out << "wrote " << records.size() << " cases (" << malignant << " malignant, " << 2 * records.size()
      << " images) to " << dir.string() << '\n';
  return kExitOk;
}

inline int cmd_train(RunSettings& s, std::ostream& out, std::ostream& err) {
  s.model.validate();
  s.train.validate();
  detail::require(s.out, "--out");
  const auto vocab = detail::resolve_vocab(s);
  Dataset ds = detail::load_for_model(s, vocab);
  s.model.validate();
  std::vector<std::size_t> idx = detail::all_indices(ds);
  if (s.fold) {
    FoldPlan plan = stratified_kfold(ds.labels(), s.folds, s.seed);
    if (*s.fold >= s.folds)
      throw ValidationError("--fold " + std::to_string(*s.fold) + " out of range for " + std::to_string(s.folds) +
                            " folds");
    idx = plan.train_indices(*s.fold);
  }
  const fs::path dir = s.out;
  RunManifest m = detail::begin_manifest("train", s);
  m.outputs = {"checkpoint.bin", "loss_trace.csv"};
  write_file_atomic(dir / "run_manifest.txt", m.str());
  err << "training on " << idx.size() << " cases for " << s.train.iterations << " iterations\n";
  TrainResult r = train_fold(ds, idx, s.model, s.train);
  write_file_atomic(dir / "checkpoint.bin", serialize_checkpoint(*r.model));
  write_file_atomic(dir / "loss_trace.csv", loss_trace_csv(r.trace));
  out << "final loss " << format_g6(r.trace.back().loss) << " (initial " << format_g6(r.trace.front().loss) << ")\n"
      << "checkpoint " << (dir / "checkpoint.bin").string() << '\n';
  return kExitOk;
}

/// `arch` holds architecture settings from a config file; each must agree
/// with the checkpoint.
inline int cmd_eval(RunSettings& s, const std::vector<std::pair<std::string, std::string>>& arch, std::ostream& out) {
  detail::require(s.checkpoint, "--checkpoint");
  detail::require(s.out, "--out");
  if (!fs::is_regular_file(s.checkpoint)) throw UsageError("checkpoint not found: " + s.checkpoint);
  DeepBiradsModel model = load_checkpoint(s.checkpoint);
  for (const auto& [key, value] : arch) {
    ModelConfig probe = model.config();
    probe.set(key == "bands" ? "n_bands" : key, value);
    if (!(probe == model.config()))
      throw CheckpointVersionError("config sets " + key + "=" + value + " but the checkpoint was trained with:\n" +
                                   model.config().to_kv());
  }
  const auto vocab = detail::resolve_vocab(s);
  if (vocab.size() != model.config().vocab_size)
    throw CheckpointVersionError("checkpoint expects a vocabulary of " + std::to_string(model.config().vocab_size) +
                                 " classes, got " + std::to_string(vocab.size()));
  detail::require(s.data, "--data");
  Dataset ds = load_dataset(s.data, vocab, model.config().latent);
  if (ds.samples.empty()) throw ValidationError("dataset " + s.data + " has no cases");
  if (ds.samples.front().cc.dim(1) != model.config().image_height ||
      ds.samples.front().cc.dim(2) != model.config().image_width)
    ds = resized(ds, model.config().image_height, model.config().image_width);
  std::vector<std::size_t> idx = detail::all_indices(ds);
  if (s.fold) {
    if (*s.fold >= s.folds)
      throw ValidationError("--fold " + std::to_string(*s.fold) + " out of range for " + std::to_string(s.folds) +
                            " folds");
    idx = stratified_kfold(ds.labels(), s.folds, s.seed).folds[*s.fold];
  }
  const fs::path dir = s.out;
  RunManifest m = detail::begin_manifest("eval", s);
  m.config += "[checkpoint]\n" + model.config().to_kv();
  m.outputs = {"metrics.csv", "roc.csv"};
  write_file_atomic(dir / "run_manifest.txt", m.str());
  MetricsReport rep = evaluate(model, ds, idx, s.threshold);
  write_file_atomic(dir / "metrics.csv", metrics_csv(rep));
  write_file_atomic(dir / "roc.csv", roc_csv(rep.roc));
  detail::print_metrics(out, rep);
  return kExitOk;
}

inline int cmd_ablate(RunSettings& s, std::ostream& out, std::ostream& err) {
  static const std::vector<std::string> modes{"cv", "wiring", "layers", "aug"};
  if (std::find(modes.begin(), modes.end(), s.mode) == modes.end())
    throw ValidationError("--mode must be one of cv, wiring, layers, aug; got '" + s.mode + "'");
  s.train.validate();
  detail::require(s.out, "--out");
  const auto vocab = detail::resolve_vocab(s);
  Dataset ds = detail::load_for_model(s, vocab);
  if (s.mode != "layers") s.model.validate();
  const fs::path dir = s.out;
  RunManifest m = detail::begin_manifest(s.mode == "cv" ? "cv" : "ablate --mode " + s.mode, s);
  m.outputs = {s.mode + ".csv"};
  write_file_atomic(dir / "run_manifest.txt", m.str());
  CvOptions opt{s.folds, s.jobs, [&](const std::string& msg) { err << msg << '\n'; }};
  std::string csv;
  if (s.mode == "cv") {
    csv = cv_csv(run_cv(ds, s.model, s.train, opt));
  } else if (s.mode == "wiring") {
    csv = ablate_wiring(ds, s.model, s.train, opt).csv();
  } else if (s.mode == "layers") {
    csv = ablate_layers(ds, s.model, s.train, {3, 5, 6, 7}, opt).csv();
  } else {
    csv = ablate_augmentations(ds, s.model, s.train,
                               default_augmentation_policies(s.model.image_height, s.model.pyramid_levels()), opt)
              .csv();
  }
  write_file_atomic(dir / (s.mode + ".csv"), csv);
  out << csv;
  return kExitOk;
}

inline int cmd_gradcheck(const std::string& config, double tolerance, bool inject_fault, std::ostream& out) {
  ModelConfig cfg = minimal_config();
  if (config != "minimal") {
    RunSettings s;
    s.model = cfg;
    apply_config_text(s, read_config_file(config), config);
    cfg = s.model;
  }
  cfg.dropout = 0.0;
  const double saved = debug::relu_gradient_scale;
  if (inject_fault) debug::relu_gradient_scale = 1.5;
  GradCheckReport r;
  try {
    r = model_gradient_check(cfg);
  } catch (...) {
    debug::relu_gradient_scale = saved;
    throw;
  }
  debug::relu_gradient_scale = saved;
  for (const auto& g : r.groups)
    out << std::left << std::setw(36) << g.name << " n=" << std::setw(6) << g.count
        << " rel_error=" << format_g6(g.rel_error) << '\n';
  const bool ok = r.passed(tolerance);
  out << "worst relative error " << format_g6(r.worst_rel_error) << " (" << r.worst_group << "): "
      << (ok ? "PASS" : "FAIL") << " at tolerance " << format_g6(tolerance) << '\n';
  return ok ? kExitOk : kExitVerification;
}

// ---------------------------------------------------------------------------
// Argument parsing

namespace detail {

/// Flags are collected as strings and applied after the config file so the
/// precedence is defaults < config file < flags.
struct FlagSet {
  std::map<std::string, std::string> storage;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void value(CLI::App* app, const std::string& flag, const std::string& help) {
    std::string key = flag.substr(2);
    std::replace(key.begin(), key.end(), '-', '_');
    options.emplace_back(key, app->add_option(flag, storage[key], help));
  }
  void boolean(CLI::App* app, const std::string& flag, const std::string& help) {
    std::string key = flag.substr(2);
    std::replace(key.begin(), key.end(), '-', '_');
    options.emplace_back(key, app->add_flag(flag, help));
  }
  void apply(RunSettings& s) const {
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      if (opt->get_expected_min() == 0) s.set(key, "1");
      else s.set(key, storage.at(key));
    }
  }
};

inline void model_flags(CLI::App* app, FlagSet& f) {
  f.value(app, "--layers", "multi-attention layers N (default 6)");
  f.value(app, "--latent", "latent / descriptor length L (default 64)");
  f.value(app, "--queries", "learnable queries per branch (default 8)");
  f.value(app, "--d0", "backbone base channels (default 8)");
  f.value(app, "--wiring", "view-attention Q/K/V sources, one of " + WiringConfig::legal_values() + " (default OOC)");
  f.value(app, "--bands", "Fourier bands (default 6)");
  f.value(app, "--heads", "attention heads (default 1)");
  f.value(app, "--dropout", "dropout rate (default 0.25)");
  f.value(app, "--image-size", "resize views to this square size");
  f.boolean(app, "--no-descriptors", "replace the descriptor set by one all-zero vector");
}

inline void train_flags(CLI::App* app, FlagSet& f) {
  f.value(app, "--iters", "optimizer steps (default 1000)");
  f.value(app, "--lr", "initial learning rate (default 0.001)");
  f.value(app, "--batch", "minibatch size (default 16)");
  f.value(app, "--momentum", "SGD momentum (default 0.9)");
  f.value(app, "--augment", "none, default, flip, elastic or noise (default: flips + elastic)");
}

}  // namespace detail

/// Parses and runs one command. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Dual-view mammogram classification with lesion descriptors", "deepbirads"};
  app.require_subcommand(1);
  std::string config_path;
  bool force = false;
  bool inject_fault = false;
  double tolerance = 1e-4;
  std::string gradcheck_config = "minimal";
  std::optional<std::string> eval_config;

  detail::FlagSet flags;

  auto* synth = app.add_subcommand("synth-gen", "generate a synthetic dataset");
  flags.value(synth, "--out", "output directory");
  flags.value(synth, "--n-cases", "number of cases (default 100)");
  flags.value(synth, "--alpha", "descriptor informativeness in [0, 1] (default 1)");
  flags.value(synth, "--seed", "random seed (default 0)");
  flags.value(synth, "--size", "image side length (default 64)");
  synth->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* train = app.add_subcommand("train", "train one model and write a checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* cv = app.add_subcommand("cv", "stratified k-fold cross-validation");
  auto* ablate = app.add_subcommand("ablate", "cross-validated ablation tables");
  for (auto* sub : {train, eval, cv, ablate}) {
    flags.value(sub, "--data", "dataset directory (metadata.csv + images)");
    flags.value(sub, "--out", "output directory");
    flags.value(sub, "--seed", "random seed (default 0)");
    flags.value(sub, "--folds", "number of folds (default 5)");
    flags.value(sub, "--vocab", "descriptor vocabulary file (category,token lines)");
    sub->add_option("--config", config_path, "key=value settings file; flags take precedence");
  }
  for (auto* sub : {train, cv, ablate}) {
    detail::model_flags(sub, flags);
    detail::train_flags(sub, flags);
    flags.value(sub, "--jobs", "parallel fold jobs (default 1)");
  }
  flags.value(train, "--fold", "train on all folds except this one");
  flags.value(eval, "--fold", "evaluate this held-out fold only");
  flags.value(eval, "--checkpoint", "checkpoint file");
  flags.value(eval, "--threshold", "probability threshold (default 0.5)");
  flags.value(ablate, "--mode", "cv, wiring, layers or aug");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every model gradient");
  gradcheck->add_option("--config", gradcheck_config, "'minimal' or a key=value model settings file");
  gradcheck->add_option("--tolerance", tolerance, "largest accepted relative error (default 1e-4)");
  gradcheck->add_flag("--inject-fault", inject_fault, "corrupt the ReLU backward rule (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_config, tolerance, inject_fault, out);
    RunSettings s;
    std::vector<std::pair<std::string, std::string>> arch;
    if (!config_path.empty()) {
      const std::string text = read_config_file(config_path);
      apply_config_text(s, text, config_path);
      for (const char* key : {"layers", "latent", "queries", "d0", "wiring", "bands", "heads"}) {
        std::istringstream is(text);
        for (std::string line; std::getline(is, line);) {
          const auto eq = line.find('=');
          if (eq != std::string::npos && detail::trim(line.substr(0, eq)) == key)
            arch.emplace_back(key, detail::trim(line.substr(eq + 1)));
        }
      }
    }
    flags.apply(s);
    s.train.augmentation = RunSettings::augmentation_policy(s.augment);
    if (synth->parsed()) return cmd_synth_gen(s, force, out);
    if (train->parsed()) return cmd_train(s, out, err);
    if (eval->parsed()) return cmd_eval(s, arch, out);
    if (cv->parsed()) s.mode = "cv";
    return cmd_ablate(s, out, err);
  } catch (const CheckpointVersionError& e) {
    err << "checkpoint error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
  }
  return kExitUsage;
}

}  // namespace deepbirads
