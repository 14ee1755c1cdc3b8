#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "skillprobe/analysis.hpp"
#include "skillprobe/compress.hpp"
#include "skillprobe/errors.hpp"
#include "skillprobe/model.hpp"
#include "skillprobe/skillfind.hpp"
#include "skillprobe/tasks.hpp"
#include "skillprobe/tuning.hpp"

namespace skillprobe {

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Text helpers
// ---------------------------------------------------------------------------

/// Shortest decimal text that reads back to the same double.
inline std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  double x = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(x))
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// A task read from a JSONL file instead of the synthetic suite.
struct FileTask {
  std::string name;
  std::filesystem::path file;
  Family family = Family::polarity;
  std::size_t classes = 2;
  std::vector<int> verbalizer;  // empty: the family's label words
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out = "skillprobe_out";
  ModelConfig model;

  MlmConfig mlm{3000, 16, 1e-3, 0.15, {}, 0.5};
  std::size_t corpus_size = 20000;
  double label_word_prob = 1.0;
  double mixed_prob = 0.7;

  bool suite = true;
  std::size_t task_size = 1000;
  double task_noise = 0.05;
  std::filesystem::path vocab_file;
  std::vector<FileTask> files;

  TuneConfig tune;
  std::size_t trials = 5;

  FindOptions find;
  std::size_t top_k = 10;

  PerturbationConfig perturb;
  std::vector<std::string> regimes{"prompt"};
  std::size_t adapter_bottleneck = 8;

  std::size_t words_k = 10;
  std::size_t words_neurons = 3;

  PruneOptions prune;
  BenchConfig bench;
  TransferOptions transfer;

  void set(const std::string& key, const std::string& value);
  std::string canonical() const;
  void validate() const;
};

namespace detail {

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define SKILLPROBE_UINT(K, M)                                                                  \
  Field{K, [](ExperimentConfig& c, const std::string& v) { c.M = parse_uint(K, v); },         \
        [](const ExperimentConfig& c) { return std::to_string(c.M); }}
#define SKILLPROBE_DOUBLE(K, M)                                                                \
  Field{K, [](ExperimentConfig& c, const std::string& v) { c.M = parse_double(K, v); },       \
        [](const ExperimentConfig& c) { return num(c.M); }}

inline std::string optional_layer(const std::optional<std::size_t>& l) {
  return l ? std::to_string(*l) : "auto";
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      SKILLPROBE_UINT("seed", seed),
      Field{"out", [](ExperimentConfig& c, const std::string& v) { c.out = v; },
            [](const ExperimentConfig& c) { return c.out.string(); }},
      SKILLPROBE_UINT("model.layers", model.num_layers),
      SKILLPROBE_UINT("model.d", model.d),
      SKILLPROBE_UINT("model.d_m", model.d_m),
      SKILLPROBE_UINT("model.heads", model.num_heads),
      SKILLPROBE_UINT("model.vocab", model.vocab_size),
      SKILLPROBE_UINT("model.max_positions", model.max_positions),
      Field{"model.activation",
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "gelu") c.model.activation = Activation::gelu;
              else if (v == "relu") c.model.activation = Activation::relu;
              else throw ConfigError("model.activation: expected gelu or relu");
            },
            [](const ExperimentConfig& c) { return std::string(c.model.activation == Activation::gelu ? "gelu" : "relu"); }},
      SKILLPROBE_UINT("pretrain.steps", mlm.steps),
      SKILLPROBE_UINT("pretrain.batch", mlm.batch),
      SKILLPROBE_DOUBLE("pretrain.lr", mlm.lr),
      SKILLPROBE_DOUBLE("pretrain.mask_prob", mlm.mask_prob),
      SKILLPROBE_DOUBLE("pretrain.label_mask_prob", mlm.focus_mask_prob),
      SKILLPROBE_UINT("pretrain.corpus", corpus_size),
      SKILLPROBE_DOUBLE("pretrain.label_word_prob", label_word_prob),
      SKILLPROBE_DOUBLE("pretrain.mixed_prob", mixed_prob),
      Field{"tasks.suite", [](ExperimentConfig& c, const std::string& v) { c.suite = parse_bool("tasks.suite", v); },
            [](const ExperimentConfig& c) { return std::string(c.suite ? "true" : "false"); }},
      SKILLPROBE_UINT("tasks.size", task_size),
      SKILLPROBE_DOUBLE("tasks.noise", task_noise),
      Field{"tasks.vocab_file", [](ExperimentConfig& c, const std::string& v) { c.vocab_file = v; },
            [](const ExperimentConfig& c) { return c.vocab_file.string(); }},
      SKILLPROBE_UINT("tune.trials", trials),
      SKILLPROBE_DOUBLE("tune.lr", tune.lr),
      SKILLPROBE_UINT("tune.batch", tune.batch),
      SKILLPROBE_UINT("tune.eval_interval", tune.eval_interval),
      SKILLPROBE_UINT("tune.patience", tune.patience),
      SKILLPROBE_DOUBLE("tune.init_std", tune.prompt_init_std),
      SKILLPROBE_UINT("tune.max_steps", tune.max_steps),
      SKILLPROBE_UINT("tune.prompt_len", tune.prompt_len),
      Field{"find.aggregator",
            [](ExperimentConfig& c, const std::string& v) { c.find.aggregator = parse_aggregator(v); },
            [](const ExperimentConfig& c) { return std::string(aggregator_name(c.find.aggregator)); }},
      Field{"find.polarity", [](ExperimentConfig& c, const std::string& v) { c.find.polarity = parse_polarity(v); },
            [](const ExperimentConfig& c) { return std::string(polarity_name(c.find.polarity)); }},
      SKILLPROBE_UINT("find.top_k", top_k),
      SKILLPROBE_DOUBLE("perturb.mean", perturb.mean),
      SKILLPROBE_DOUBLE("perturb.sigma", perturb.stddev),
      Field{"perturb.fractions",
            [](ExperimentConfig& c, const std::string& v) {
              c.perturb.fractions.clear();
              for (const auto& x : split_list(v)) c.perturb.fractions.push_back(parse_double("perturb.fractions", x));
            },
            [](const ExperimentConfig& c) {
              return join<double>(c.perturb.fractions, [](const double& x) { return num(x); });
            }},
      SKILLPROBE_UINT("perturb.trials", perturb.trials),
      Field{"perturb.regimes", [](ExperimentConfig& c, const std::string& v) { c.regimes = split_list(v); },
            [](const ExperimentConfig& c) {
              return join<std::string>(c.regimes, [](const std::string& x) { return x; });
            }},
      SKILLPROBE_UINT("perturb.adapter_bottleneck", adapter_bottleneck),
      SKILLPROBE_UINT("words.k", words_k),
      SKILLPROBE_UINT("words.neurons", words_neurons),
      SKILLPROBE_DOUBLE("prune.keep", prune.keep_fraction),
      Field{"prune.first_layer",
            [](ExperimentConfig& c, const std::string& v) {
              c.prune.first_layer = v == "auto" ? std::nullopt : std::optional(parse_uint("prune.first_layer", v));
            },
            [](const ExperimentConfig& c) { return optional_layer(c.prune.first_layer); }},
      Field{"prune.last_layer",
            [](ExperimentConfig& c, const std::string& v) {
              c.prune.last_layer = v == "auto" ? std::nullopt : std::optional(parse_uint("prune.last_layer", v));
            },
            [](const ExperimentConfig& c) { return optional_layer(c.prune.last_layer); }},
      Field{"prune.clamp",
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "mean") c.prune.clamp = ClampSource::mean_over_tokens;
              else if (v == "best_token") c.prune.clamp = ClampSource::best_token;
              else throw ConfigError("prune.clamp: expected mean or best_token");
            },
            [](const ExperimentConfig& c) {
              return std::string(c.prune.clamp == ClampSource::mean_over_tokens ? "mean" : "best_token");
            }},
      SKILLPROBE_UINT("bench.batch", bench.batch),
      SKILLPROBE_UINT("bench.seq_len", bench.seq_len),
      SKILLPROBE_UINT("bench.prompt_len", bench.prompt_len),
      SKILLPROBE_UINT("bench.repetitions", bench.repetitions),
      SKILLPROBE_UINT("bench.warmup", bench.warmup),
      SKILLPROBE_DOUBLE("transfer.mask_fraction", transfer.mask_fraction),
      SKILLPROBE_DOUBLE("transfer.threshold", transfer.threshold),
      Field{"transfer.trial",
            [](ExperimentConfig& c, const std::string& v) {
              c.transfer.trial = v == "best" ? std::nullopt : std::optional(parse_uint("transfer.trial", v));
            },
            [](const ExperimentConfig& c) {
              return c.transfer.trial ? std::to_string(*c.transfer.trial) : std::string("best");
            }},
  };
  return f;
}

#undef SKILLPROBE_UINT
#undef SKILLPROBE_DOUBLE

inline FileTask& file_task(ExperimentConfig& c, const std::string& name) {
  for (auto& t : c.files)
    if (t.name == name) return t;
  c.files.push_back({name, {}, Family::polarity, 2, {}});
  return c.files.back();
}

}  // namespace detail

/// Keys are the dotted names listed by `canonical()`, plus
/// task.<name>.{file,family,classes,verbalizer} for JSONL tasks.
inline void ExperimentConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  for (const auto& f : detail::fields())
    if (f.key == key) {
      f.set(*this, value);
      return;
    }
  if (key.rfind("task.", 0) == 0) {
    const auto dot = key.rfind('.');
    const std::string name = key.substr(5, dot - 5), attr = key.substr(dot + 1);
    if (dot <= 5 || name.empty()) throw ConfigError("bad task key '" + key + "'");
    FileTask& t = detail::file_task(*this, name);
    if (attr == "file") t.file = value;
    else if (attr == "family") t.family = parse_family(value);
    else if (attr == "classes") t.classes = detail::parse_uint(key, value);
    else if (attr == "verbalizer") {
      t.verbalizer.clear();
      for (const auto& x : split_list(value)) t.verbalizer.push_back(static_cast<int>(detail::parse_uint(key, x)));
    } else {
      throw ConfigError("unknown task attribute '" + attr + "' in '" + key + "'");
    }
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// One `key = value` line per setting, in a fixed order. The output
/// directory is left out so relocated runs hash the same.
inline std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& f : detail::fields())
    if (f.key != "out") out += f.key + " = " + f.get(*this) + "\n";
  for (const FileTask& t : files) {
    out += "task." + t.name + ".file = " + t.file.string() + "\n";
    out += "task." + t.name + ".family = " + family_name(t.family) + "\n";
    out += "task." + t.name + ".classes = " + std::to_string(t.classes) + "\n";
    if (!t.verbalizer.empty())
      out += "task." + t.name + ".verbalizer = " +
             detail::join<int>(t.verbalizer, [](const int& x) { return std::to_string(x); }) + "\n";
  }
  return out;
}

inline void ExperimentConfig::validate() const {
  model.validate();
  tune.validate();
  perturb.validate();
  prune.validate();
  bench.validate();
  if (mlm.steps == 0 || mlm.batch == 0 || !(mlm.lr > 0.0)) throw ConfigError("pretrain: steps, batch and lr must be positive");
  if (corpus_size == 0) throw ConfigError("pretrain.corpus must be positive");
  if (trials == 0) throw ConfigError("tune.trials must be positive");
  if (top_k == 0 || top_k > model.neuron_count()) throw ConfigError("find.top_k must be in [1, neuron count]");
  if (words_k == 0 || words_k > model.vocab_size) throw ConfigError("words.k must be in [1, vocab]");
  if (!suite && files.empty()) throw ConfigError("no tasks: enable tasks.suite or add task.<name>.file entries");
  for (const auto& r : regimes)
    if (r != "prompt" && r != "bitfit" && r != "adapter")
      throw ConfigError("perturb.regimes: unknown regime '" + r + "'");
  if (std::find(regimes.begin(), regimes.end(), "prompt") == regimes.end())
    throw ConfigError("perturb.regimes must include prompt");
  if (!vocab_file.empty() && !std::filesystem::exists(vocab_file))
    throw ConfigError("tasks.vocab_file does not exist: " + vocab_file.string());
  for (const FileTask& t : files) {
    if (t.file.empty()) throw ConfigError("task." + t.name + ".file is missing");
    if (!std::filesystem::exists(t.file)) throw ConfigError("task." + t.name + ".file does not exist: " + t.file.string());
    if (t.classes < 2 || t.classes > family_classes(t.family))
      throw ConfigError("task." + t.name + ".classes does not fit family " + family_name(t.family));
    if (!t.verbalizer.empty() && t.verbalizer.size() != t.classes)
      throw ConfigError("task." + t.name + ".verbalizer needs one word per class");
  }
}

/// Reads `key = value` lines; '#' starts a comment.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Pipeline building blocks shared by the commands
// ---------------------------------------------------------------------------

struct TaskData {
  TaskSpec spec;
  Dataset data;
};

/// Suite tasks first, then file tasks, in config order. Every call yields
/// the same data for the same config.
inline std::vector<TaskData> load_tasks(const ExperimentConfig& cfg) {
  std::vector<TaskData> out;
  if (cfg.suite) {
    const auto suite = default_suite(cfg.task_size, cfg.task_noise);
    for (std::size_t i = 0; i < suite.size(); ++i) {
      SeededRng rng(cfg.seed, 0x7461736b00ULL + i);
      auto [spec, data] = gen_synthetic_task(suite[i], cfg.model.vocab_size, rng);
      out.push_back({std::move(spec), std::move(data)});
    }
  }
  std::unordered_map<std::string, int> vocab;
  if (!cfg.vocab_file.empty()) vocab = load_vocab(cfg.vocab_file);
  for (const FileTask& f : cfg.files) {
    TaskSpec spec = make_task_spec(f.name, f.family, f.classes);
    if (!f.verbalizer.empty()) spec.verbalizer = f.verbalizer;
    spec.validate();
    Dataset d = load_jsonl(f.file, vocab, f.classes);
    for (const auto* split : {&d.train, &d.dev, &d.test})
      for (const Sample& s : *split)
        for (int t : s.tokens)
          if (t < 0 || static_cast<std::size_t>(t) >= cfg.model.vocab_size)
            throw VocabError(f.name + ": token " + std::to_string(t) + " outside the model vocabulary");
    out.push_back({std::move(spec), std::move(d)});
  }
  std::set<std::string> names;
  for (const auto& t : out)
    if (!names.insert(t.spec.name).second) throw ConfigError("duplicate task name '" + t.spec.name + "'");
  return out;
}

/// Initial weights; the same draw serves as the random-model baseline.
inline ModelWeights initial_weights(const ExperimentConfig& cfg) {
  SeededRng rng(cfg.seed, 0x696e6974ULL);
  return init_weights(cfg.model, rng);
}

inline std::pair<ModelWeights, std::vector<double>> pretrain_model(const ExperimentConfig& cfg) {
  ModelWeights w = initial_weights(cfg);
  SeededRng corpus_rng(cfg.seed, 0x636f72707573ULL);
  const auto corpus = gen_pretraining_corpus(cfg.model.vocab_size, cfg.corpus_size, corpus_rng,
                                             cfg.label_word_prob, cfg.mixed_prob);
  MlmConfig m = cfg.mlm;
  m.focus_tokens = all_label_words();
  SeededRng rng(cfg.seed, 0x6d6c6dULL);
  auto losses = mlm_pretrain(w, corpus, rng, m);
  return {std::move(w), std::move(losses)};
}

/// Untuned prompt groups drawn like the tuner's initial prompts.
inline TrialSet random_prompt_trials(const ExperimentConfig& cfg, const std::string& task, std::size_t d) {
  TrialSet ts;
  ts.task = task;
  for (std::size_t k = 0; k < cfg.trials; ++k) {
    PromptGroup g = make_random_prompts(cfg.tune.prompt_len, d, cfg.tune.prompt_init_std,
                                        trial_seed(cfg.seed ^ 0x72616e64ULL, task, k));
    ts.groups.push_back(std::move(g));
    ts.results.emplace_back();
  }
  return ts;
}

inline double top1(const PredictivityTable& t) {
  double best = 0.0;
  for (const auto& v : t.views)
    for (double p : v.overall) best = std::max(best, p);
  return best;
}

// ---------------------------------------------------------------------------
// Output directory bookkeeping
// ---------------------------------------------------------------------------

/// One command run against an output directory. Files go through write()
/// or are registered with record(); finish() updates manifest.json and
/// timing.json.
class StageRun {
 public:
  StageRun(const ExperimentConfig& cfg, std::string stage)
      : cfg_(cfg), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {
    cfg_.validate();
    std::filesystem::create_directories(cfg_.out);
    text_ = cfg_.canonical();
    write_raw("config.txt", text_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& out() const { return cfg_.out; }
  std::filesystem::path path(const std::string& rel) const { return cfg_.out / rel; }

  void write(const std::string& rel, const std::string& content) {
    write_raw(rel, content);
    files_.push_back(rel);
  }
  void write_json(const std::string& rel, const nlohmann::json& j) { write(rel, j.dump(2) + "\n"); }

  /// Registers a file or every file below a directory written elsewhere.
  void record(const std::string& rel) {
    const auto p = path(rel);
    if (std::filesystem::is_directory(p)) {
      std::vector<std::string> found;
      for (const auto& e : std::filesystem::recursive_directory_iterator(p))
        if (e.is_regular_file()) found.push_back(std::filesystem::relative(e.path(), cfg_.out).generic_string());
      std::sort(found.begin(), found.end());
      files_.insert(files_.end(), found.begin(), found.end());
    } else if (std::filesystem::exists(p)) {
      files_.push_back(rel);
    }
  }

  /// Wall-clock data for timing.json only.
  nlohmann::json& timing() { return timing_; }

  void finish() {
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::sort(files_.begin(), files_.end());
    files_.erase(std::unique(files_.begin(), files_.end()), files_.end());
    nlohmann::json manifest = read_json("manifest.json");
    const std::string hash = "fnv1a64:" + hex64(fnv1a(text_));
    manifest["tool"] = {{"name", "skillprobe"}, {"version", kToolVersion}};
    manifest["config_file"] = "config.txt";
    manifest["config_hash"] = hash;
    manifest["meta_files"] = {"config.txt", "manifest.json", "timing.json"};
    manifest["stages"][stage_] = {{"config_hash", hash}, {"files", files_}, {"finished_at", utc_now()}};
    nlohmann::json timing = read_json("timing.json");
    timing_["seconds"] = seconds;
    timing_["finished_at"] = utc_now();
    timing[stage_] = timing_;
    write_raw("timing.json", timing.dump(2) + "\n");
    write_raw("manifest.json", manifest.dump(2) + "\n");
  }

 private:
  void write_raw(const std::string& rel, const std::string& content) const {
    const auto p = path(rel);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream o(p, std::ios::binary | std::ios::trunc);
    if (!o) throw IoError("cannot write " + p.string());
    o << content;
    if (!o) throw IoError("write failed for " + p.string());
  }
  nlohmann::json read_json(const std::string& rel) const {
    std::ifstream in(path(rel));
    if (!in) return nlohmann::json::object();
    try {
      nlohmann::json j;
      in >> j;
      return j.is_object() ? j : nlohmann::json::object();
    } catch (const nlohmann::json::exception&) {
      return nlohmann::json::object();
    }
  }

  ExperimentConfig cfg_;
  std::string stage_;
  std::string text_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::string> files_;
  nlohmann::json timing_ = nlohmann::json::object();
};

namespace detail {

inline void require(const std::filesystem::path& p, const std::string& stage, const std::string& needed) {
  if (!std::filesystem::exists(p))
    throw DependencyError(stage + " needs the outputs of cmd_" + needed + " (run `skillprobe " + needed +
                          "` first); missing " + p.string());
}

inline std::string task_dir(const std::string& name) { return "tasks/" + name; }

inline ModelWeights need_model(const StageRun& run, const std::string& stage) {
  require(run.path("model/weights.bin"), stage, "pretrain");
  return load_weights(run.path("model/weights.bin"));
}

inline TrialSet need_trials(const StageRun& run, const std::string& stage, const std::string& task) {
  require(run.path(task_dir(task) + "/trials/trials.json"), stage, "tune");
  return load_trials(run.path(task_dir(task) + "/trials"));
}

inline PredictivityTable need_table(const StageRun& run, const std::string& stage, const std::string& task) {
  require(run.path(task_dir(task) + "/find/table.json"), stage, "find");
  return load_table(run.path(task_dir(task) + "/find"));
}

inline nlohmann::json need_json(const StageRun& run, const std::string& stage, const std::string& rel,
                                const std::string& needed) {
  require(run.path(rel), stage, needed);
  std::ifstream in(run.path(rel));
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(run.path(rel).string() + ": " + e.what());
  }
  return j;
}

inline std::string csv_matrix(const Matrix& m, const std::vector<std::string>& names, const std::string& corner) {
  std::string out = corner;
  for (const auto& n : names) out += "," + n;
  out += "\n";
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out += names[r];
    for (std::size_t c = 0; c < m.cols(); ++c) out += "," + num(m(r, c));
    out += "\n";
  }
  return out;
}

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline std::vector<std::size_t> flat_ids(const std::vector<NeuronId>& ids, std::size_t width) {
  std::vector<std::size_t> out;
  for (const auto& id : ids) out.push_back(id.flat(width));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void cmd_pretrain(const ExperimentConfig& cfg) {
  StageRun run(cfg, "pretrain");
  auto [w, losses] = pretrain_model(cfg);
  std::filesystem::create_directories(run.path("model"));
  save_weights(w, run.path("model/weights.bin"));
  run.record("model/weights.bin");
  std::string csv = "step,loss\n";
  const std::size_t window = 50;
  for (std::size_t i = 0; i < losses.size(); i += window) {
    const std::size_t hi = std::min(losses.size(), i + window);
    double m = 0.0;
    for (std::size_t j = i; j < hi; ++j) m += losses[j];
    csv += std::to_string(hi) + "," + num(m / static_cast<double>(hi - i)) + "\n";
  }
  run.write("model/pretrain_loss.csv", csv);
  run.finish();
}

inline void cmd_tune(const ExperimentConfig& cfg) {
  StageRun run(cfg, "tune");
  const ModelWeights w = detail::need_model(run, "tune");
  for (const TaskData& t : load_tasks(cfg)) {
    const TrialSet ts = tune_trials(w, t.spec, t.data, cfg.tune, cfg.trials, cfg.seed);
    const std::string dir = detail::task_dir(t.spec.name);
    std::filesystem::remove_all(run.path(dir + "/trials"));
    save_trials(ts, run.path(dir + "/trials"));
    run.record(dir + "/trials");
    std::string csv = "trial,seed,best_dev,best_step,steps_run,warning,test_acc\n";
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const TuneResult& r = ts.results[k];
      // Accuracy of the stored (32-bit) prompts, as later stages see them.
      const PromptGroup stored = round_to_storage(ts.groups[k]);
      const double test = evaluate(w, &stored.embeddings, nullptr, t.spec, t.data, Split::test);
      csv += std::to_string(k) + "," + std::to_string(ts.groups[k].seed) + "," + num(r.best_dev) + "," +
             std::to_string(r.best_step) + "," + std::to_string(r.steps_run) + "," + (r.warning ? "1" : "0") +
             "," + num(test) + "\n";
      if (r.warning)
        std::fprintf(stderr, "warning: %s trial %zu never beat its initial prompts\n", t.spec.name.c_str(), k);
    }
    run.write(dir + "/tune.csv", csv);
  }
  run.finish();
}

inline void cmd_find(const ExperimentConfig& cfg) {
  StageRun run(cfg, "find");
  const ModelWeights w = detail::need_model(run, "find");
  const ModelWeights random_model = initial_weights(cfg);
  for (const TaskData& t : load_tasks(cfg)) {
    const std::string dir = detail::task_dir(t.spec.name) + "/find";
    const TrialSet ts = detail::need_trials(run, "find", t.spec.name);
    const PredictivityTable table = build_predictivity_table(w, ts, t.spec, t.data, cfg.find);
    std::filesystem::remove_all(run.path(dir));
    for (const auto& f : save_table(table, run.path(dir))) run.record(dir + "/" + f);
    const SkillNeuronSet set = select_skill_neurons(table, cfg.top_k);
    run.write_json(dir + "/skill_neurons.json", skill_set_json(set));

    std::vector<int> ytr, yte;
    for (const Sample& s : t.data.train) ytr.push_back(s.label);
    for (const Sample& s : t.data.test) yte.push_back(s.label);
    SeededRng probe_rng(cfg.seed, 0x70726f6265ULL);
    const double probe = logistic_probe(probe_features(w, ts, table, set, t.data.train), ytr,
                                        probe_features(w, ts, table, set, t.data.test), yte,
                                        t.spec.num_classes, probe_rng);
    nlohmann::json probe_j;
    probe_j["top_k"] = cfg.top_k;
    probe_j["top1_pred"] = top1(table);
    probe_j["probe_test_acc"] = probe;
    run.write_json(dir + "/probe.json", probe_j);

    // Where skill neurons come from: tuned vs untuned prompts, pre-trained
    // vs freshly initialized model.
    const TrialSet random_prompts = random_prompt_trials(cfg, t.spec.name, w.config.d);
    TrialSet hard;
    hard.task = t.spec.name;
    hard.groups.push_back(make_hard_prompt(default_hard_prompt_tokens(t.spec), w.token_embedding));
    hard.results.emplace_back();
    nlohmann::json base;
    base["tuned_prompts"] = top1(table);
    base["random_prompts"] = top1(build_predictivity_table(w, random_prompts, t.spec, t.data, cfg.find));
    base["hard_prompt"] = top1(build_predictivity_table(w, hard, t.spec, t.data, cfg.find));
    base["random_model_random_prompts"] =
        top1(build_predictivity_table(random_model, random_prompts, t.spec, t.data, cfg.find));
    run.write_json(dir + "/baselines.json", base);
  }
  run.finish();
}

inline void cmd_perturb(const ExperimentConfig& config) {
  StageRun run(config, "perturb");
  ExperimentConfig cfg = config;
  cfg.perturb.seed = SeededRng::derive_key(cfg.seed, 0x6e6f697365ULL);
  const ModelWeights w = detail::need_model(run, "perturb");
  const auto tasks = load_tasks(cfg);
  const std::size_t n = tasks.size(), N = w.config.neuron_count();
  std::vector<TrialSet> trials;
  std::vector<std::vector<std::size_t>> orders;
  std::vector<std::string> names;
  for (const TaskData& t : tasks) {
    trials.push_back(detail::need_trials(run, "perturb", t.spec.name));
    orders.push_back(task_order(detail::need_table(run, "perturb", t.spec.name)));
    names.push_back(t.spec.name);
  }
  std::vector<std::vector<std::size_t>> random_orders;
  for (std::size_t k = 0; k < cfg.perturb.trials; ++k)
    random_orders.push_back(random_order(N, SeededRng::derive_key(cfg.seed, 0x6f72646572ULL + k)));

  auto curve_rows = [](const std::string& regime, const std::string& eval, const PerturbationCurve& c) {
    std::string out;
    for (std::size_t f = 0; f < c.fractions.size(); ++f)
      out += regime + "," + eval + "," + c.order + "," + num(c.fractions[f]) + "," + num(c.mean[f]) + "," +
             num(c.stddev[f]) + "\n";
    return out;
  };

  for (const std::string& regime : cfg.regimes) {
    std::string curves = "regime,eval_task,order,fraction,mean_acc,std_acc\n";
    std::string areas = "regime,eval_task,source_task,area\n";
    Matrix importance(n, n);
    nlohmann::json accuracy;
    for (std::size_t e = 0; e < n; ++e) {
      const TaskData& t = tasks[e];
      const PromptGroup& best = trials[e].groups[trials[e].best_trial()];
      ModelWeights tuned;
      AdapterParams adapters;
      Assembly a;
      const ModelWeights* model = &w;
      const std::uint64_t seed = trial_seed(cfg.seed ^ 0x7265676dULL, t.spec.name, 0);
      if (regime == "prompt") {
        a.prompts = &best.embeddings;
      } else if (regime == "bitfit") {
        tuned = bitfit_tune(w, t.spec, t.data, cfg.tune, seed).first;
        model = &tuned;
      } else {
        SeededRng rng(seed, 0x61646170ULL);
        adapters = adapter_tune(w, init_adapters(w.config, cfg.adapter_bottleneck, rng), t.spec, t.data,
                                cfg.tune, seed)
                       .first;
        a.adapters = &adapters;
      }
      accuracy[t.spec.name] = evaluate(*model, a, t.spec, t.data.test);
      const PerturbationCurve random =
          perturbation_curve(*model, a, t.spec, t.data.test, random_orders, cfg.perturb, "random");
      curves += curve_rows(regime, t.spec.name, random);
      // Other regimes only need the task's own order.
      for (std::size_t s = 0; s < n; ++s) {
        if (regime != "prompt" && s != e) continue;
        const PerturbationCurve c =
            perturbation_curve(*model, a, t.spec, t.data.test, {orders[s]}, cfg.perturb, names[s]);
        curves += curve_rows(regime, t.spec.name, c);
        importance(e, s) = neuronal_importance(c, random);
        areas += regime + "," + t.spec.name + "," + names[s] + "," + num(importance(e, s)) + "\n";
      }
    }
    run.write("perturb/" + regime + "/curves.csv", curves);
    run.write("perturb/" + regime + "/importance.csv", areas);
    run.write_json("perturb/" + regime + "/accuracy.json", accuracy);
    if (regime == "prompt" && n >= 2) {
      const ZScored z = zscore_rows(importance);
      run.write("perturb/prompt/importance_raw.csv", detail::csv_matrix(importance, names, "eval\\source"));
      run.write("perturb/prompt/importance_z.csv", detail::csv_matrix(z.values, names, "eval\\source"));
      for (std::size_t r = 0; r < n; ++r)
        if (z.degenerate[r]) std::fprintf(stderr, "warning: importance row %s has zero variance\n", names[r].c_str());
    }
  }
  run.finish();
}

inline void cmd_correlate(const ExperimentConfig& cfg) {
  StageRun run(cfg, "correlate");
  std::vector<PredictivityTable> tables;
  for (const TaskData& t : load_tasks(cfg)) tables.push_back(detail::need_table(run, "correlate", t.spec.name));
  const CorrelationResult r = correlation_matrix(tables);
  run.write("correlate/rho_overall.csv", detail::csv_matrix(r.overall, r.tasks, "task"));
  run.write("correlate/rho_pooled.csv", detail::csv_matrix(r.pooled, r.tasks, "task"));
  for (std::size_t l = 0; l < r.per_layer.size(); ++l)
    run.write("correlate/rho_layer_" + std::to_string(l) + ".csv", detail::csv_matrix(r.per_layer[l], r.tasks, "task"));
  run.finish();
}

inline void cmd_words(const ExperimentConfig& cfg) {
  StageRun run(cfg, "words");
  const ModelWeights w = detail::need_model(run, "words");
  for (const TaskData& t : load_tasks(cfg)) {
    const TrialSet ts = detail::need_trials(run, "words", t.spec.name);
    const PredictivityTable table = detail::need_table(run, "words", t.spec.name);
    const Matrix& prompts = ts.groups[ts.best_trial()].embeddings;
    const SkillNeuronSet set = select_skill_neurons(table, std::min(cfg.words_neurons, table.neurons()));
    auto list = [](const std::vector<ScoredToken>& xs) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& x : xs) a.push_back({{"token", x.token}, {"score", x.score}});
      return a;
    };
    nlohmann::json out = nlohmann::json::array();
    for (const SkillNeuron& n : set.neurons) {
      const RelatedWords r = related_words(w, n.id, t.data.train, cfg.words_k, &prompts);
      out.push_back({{"layer", n.id.layer},
                     {"index", n.id.index},
                     {"pred", n.pred},
                     {"cosine_top", list(r.cosine_top)},
                     {"cosine_bottom", list(r.cosine_bottom)},
                     {"activation_top", list(r.activation_top)},
                     {"activation_bottom", list(r.activation_bottom)}});
    }
    run.write_json("words/" + t.spec.name + ".json", out);
  }
  run.finish();
}

inline void cmd_prune(const ExperimentConfig& cfg) {
  StageRun run(cfg, "prune");
  const ModelWeights w = detail::need_model(run, "prune");
  std::string csv = "task,keep_fraction,first_layer,last_layer,full_test_acc,pruned_test_acc,full_params,pruned_params,"
                    "flop_ratio,fold_max_logit_dev\n";
  for (const TaskData& t : load_tasks(cfg)) {
    const TrialSet ts = detail::need_trials(run, "prune", t.spec.name);
    const PredictivityTable table = detail::need_table(run, "prune", t.spec.name);
    const std::size_t best = ts.best_trial();
    const PrunePlan plan = build_prune_plan(table, best, cfg.prune);
    const ModelWeights pruned = fold(w, plan);
    const std::string dir = "prune/" + t.spec.name;
    std::filesystem::create_directories(run.path(dir));
    save_weights(pruned, run.path(dir + "/weights.bin"));
    run.record(dir + "/weights.bin");
    nlohmann::json plan_j;
    plan_j["first_layer"] = plan.first_layer;
    plan_j["last_layer"] = plan.last_layer;
    plan_j["kept"] = plan.kept;
    plan_j["clamp"] = plan.clamp;
    plan_j["trial"] = best;
    run.write_json(dir + "/plan.json", plan_j);

    // Folded vs clamped logits on the test inputs.
    const ClampHook clamp(plan);
    const Matrix& prompts = ts.groups[best].embeddings;
    double dev = 0.0;
    for (std::size_t lo = 0; lo < t.data.test.size(); lo += kEvalBatch) {
      std::vector<std::vector<int>> seqs;
      for (std::size_t i = lo; i < std::min(t.data.test.size(), lo + kEvalBatch); ++i)
        seqs.push_back(classification_input(t.data.test[i].tokens));
      ForwardOptions a, b;
      a.prompts = b.prompts = &prompts;
      a.hook = &clamp;
      const Matrix la = forward(w, seqs, a).logits, lb = forward(pruned, seqs, b).logits;
      for (std::size_t i = 0; i < la.size(); ++i) dev = std::max(dev, std::abs(la[i] - lb[i]));
    }
    // Prompt tuning on the pruned model against the full model, same seed.
    const std::uint64_t seed = trial_seed(cfg.seed, t.spec.name, 0);
    const auto [p, r] = prompt_tune(pruned, t.spec, t.data, cfg.tune, seed);
    (void)r;
    const double pruned_acc = evaluate(pruned, &p.embeddings, nullptr, t.spec, t.data, Split::test);
    const double full_acc = evaluate(w, &ts.groups[0].embeddings, nullptr, t.spec, t.data, Split::test);
    csv += t.spec.name + "," + num(cfg.prune.keep_fraction) + "," + std::to_string(plan.first_layer) + "," +
           std::to_string(plan.last_layer) + "," + num(full_acc) + "," + num(pruned_acc) + "," +
           std::to_string(parameter_count(w)) + "," + std::to_string(parameter_count(pruned)) + "," +
           num(forward_flops(w, cfg.bench) / forward_flops(pruned, cfg.bench)) + "," + num(dev) + "\n";
  }
  run.write("prune/summary.csv", csv);
  run.finish();
}

/// Wall-clock numbers go to timing.json; bench.json keeps the analytic ones.
inline void cmd_bench(const ExperimentConfig& cfg) {
  StageRun run(cfg, "bench");
  const ModelWeights w = detail::need_model(run, "bench");
  const auto tasks = load_tasks(cfg);
  const std::string rel = "prune/" + tasks.front().spec.name + "/weights.bin";
  detail::require(run.path(rel), "bench", "prune");
  const ModelWeights pruned = load_weights(run.path(rel));
  const SpeedupReport r = compare_speed(w, pruned, cfg.bench);
  nlohmann::json b;
  b["task"] = tasks.front().spec.name;
  b["flop_ratio"] = r.flop_ratio;
  b["full_params"] = r.full_params;
  b["pruned_params"] = r.pruned_params;
  b["batch"] = cfg.bench.batch;
  b["seq_len"] = cfg.bench.seq_len;
  b["prompt_len"] = cfg.bench.prompt_len;
  b["repetitions"] = cfg.bench.repetitions;
  run.write_json("bench/bench.json", b);
  run.timing()["full_median_seconds"] = r.full.median_seconds;
  run.timing()["pruned_median_seconds"] = r.pruned.median_seconds;
  run.timing()["speedup"] = r.speedup;
  run.timing()["threads"] = 1;
  run.finish();
}

inline void cmd_transfer(const ExperimentConfig& cfg) {
  StageRun run(cfg, "transfer");
  const ModelWeights w = detail::need_model(run, "transfer");
  std::vector<TaskSpec> specs;
  std::vector<Dataset> data;
  std::vector<TrialSet> trials;
  std::vector<PredictivityTable> tables;
  for (const TaskData& t : load_tasks(cfg)) {
    specs.push_back(t.spec);
    data.push_back(t.data);
    trials.push_back(detail::need_trials(run, "transfer", t.spec.name));
    tables.push_back(detail::need_table(run, "transfer", t.spec.name));
  }
  const TransferReport r = transfer_indicator(w, specs, data, trials, tables, cfg.transfer);
  nlohmann::json j;
  j["tasks"] = r.tasks;
  j["rho_full"] = r.rho_full;
  j["rho_masked"] = r.rho_masked;
  j["mean_rho_full"] = r.mean_full;
  j["mean_rho_masked"] = r.mean_masked;
  j["empty_unions"] = r.empty_unions;
  j["mask_fraction"] = cfg.transfer.mask_fraction;
  j["threshold"] = cfg.transfer.threshold;
  run.write_json("transfer/report.json", j);
  run.write("transfer/on_full.csv", detail::csv_matrix(r.on_full, r.tasks, "source\\target"));
  run.write("transfer/on_masked.csv", detail::csv_matrix(r.on_masked, r.tasks, "source\\target"));
  run.write("transfer/transfer_acc.csv", detail::csv_matrix(r.transfer, r.tasks, "source\\target"));
  run.finish();
}

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(split_list(line));
  return rows;
}

inline nlohmann::json csv_matrix_json(const std::filesystem::path& p) {
  const auto rows = read_csv(p);
  nlohmann::json m = nlohmann::json::array();
  for (std::size_t r = 1; r < rows.size(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 1; c < rows[r].size(); ++c) row.push_back(std::stod(rows[r][c]));
    m.push_back(row);
  }
  return m;
}

}  // namespace detail

/// Collates the stage outputs into report/summary.json.
inline void cmd_report(const ExperimentConfig& cfg) {
  StageRun run(cfg, "report");
  const auto tasks = load_tasks(cfg);
  nlohmann::json s;
  s["config_hash"] = "fnv1a64:" + hex64(fnv1a(cfg.canonical()));
  std::vector<std::string> names;
  for (const auto& t : tasks) names.push_back(t.spec.name);
  s["tasks"] = names;

  nlohmann::json acc = nlohmann::json::array(), base = nlohmann::json::array();
  for (const auto& name : names) {
    const std::string dir = detail::task_dir(name);
    detail::require(run.path(dir + "/tune.csv"), "report", "tune");
    const auto rows = detail::read_csv(run.path(dir + "/tune.csv"));
    std::vector<double> test;
    for (std::size_t r = 1; r < rows.size(); ++r) test.push_back(std::stod(rows[r].back()));
    double mean = 0.0, sd = 0.0;
    for (double x : test) mean += x / static_cast<double>(test.size());
    for (double x : test) sd += (x - mean) * (x - mean) / static_cast<double>(test.size());
    const nlohmann::json probe = detail::need_json(run, "report", dir + "/find/probe.json", "find");
    acc.push_back({{"task", name},
                   {"prompt_tuning_test_acc_mean", mean},
                   {"prompt_tuning_test_acc_std", std::sqrt(sd)},
                   {"top1_skill_neuron_pred", probe["top1_pred"]},
                   {"probe_test_acc", probe["probe_test_acc"]},
                   {"probe_top_k", probe["top_k"]}});
    nlohmann::json b = detail::need_json(run, "report", dir + "/find/baselines.json", "find");
    b["task"] = name;
    base.push_back(b);
  }
  s["accuracy_table"] = acc;
  s["baseline_table"] = base;

  nlohmann::json curves = nlohmann::json::object();
  for (const std::string& regime : cfg.regimes) {
    detail::require(run.path("perturb/" + regime + "/curves.csv"), "report", "perturb");
    nlohmann::json c = nlohmann::json::array();
    const auto rows = detail::read_csv(run.path("perturb/" + regime + "/curves.csv"));
    for (std::size_t r = 1; r < rows.size(); ++r)
      c.push_back({{"eval_task", rows[r][1]},
                   {"order", rows[r][2]},
                   {"fraction", std::stod(rows[r][3])},
                   {"mean_acc", std::stod(rows[r][4])},
                   {"std_acc", std::stod(rows[r][5])}});
    nlohmann::json areas = nlohmann::json::array();
    const auto arows = detail::read_csv(run.path("perturb/" + regime + "/importance.csv"));
    for (std::size_t r = 1; r < arows.size(); ++r)
      areas.push_back({{"eval_task", arows[r][1]}, {"source_task", arows[r][2]}, {"area", std::stod(arows[r][3])}});
    curves[regime] = {{"curves", c}, {"importance", areas}};
  }
  s["perturbation_curves"] = curves;

  nlohmann::json mats;
  detail::require(run.path("correlate/rho_overall.csv"), "report", "correlate");
  mats["rho_overall"] = detail::csv_matrix_json(run.path("correlate/rho_overall.csv"));
  mats["rho_pooled"] = detail::csv_matrix_json(run.path("correlate/rho_pooled.csv"));
  if (std::filesystem::exists(run.path("perturb/prompt/importance_z.csv"))) {
    mats["importance_raw"] = detail::csv_matrix_json(run.path("perturb/prompt/importance_raw.csv"));
    mats["importance_z"] = detail::csv_matrix_json(run.path("perturb/prompt/importance_z.csv"));
  }
  s["task_matrices"] = mats;

  detail::require(run.path("prune/summary.csv"), "report", "prune");
  nlohmann::json prune = nlohmann::json::array();
  const auto prow = detail::read_csv(run.path("prune/summary.csv"));
  for (std::size_t r = 1; r < prow.size(); ++r) {
    nlohmann::json e;
    for (std::size_t c = 0; c < prow[0].size(); ++c)
      e[prow[0][c]] = c == 0 ? nlohmann::json(prow[r][c]) : nlohmann::json(std::stod(prow[r][c]));
    prune.push_back(e);
  }
  nlohmann::json prune_section{{"tasks", prune}};
  // Speedups are wall-clock and live in timing.json.
  prune_section["speedup_source"] = "timing.json:bench";
  s["prune_table"] = prune_section;

  if (std::filesystem::exists(run.path("transfer/report.json")))
    s["transfer"] = detail::need_json(run, "report", "transfer/report.json", "transfer");
  run.write_json("report/summary.json", s);
  run.finish();
}

inline const std::vector<std::pair<std::string, void (*)(const ExperimentConfig&)>>& commands() {
  static const std::vector<std::pair<std::string, void (*)(const ExperimentConfig&)>> c = {
      {"pretrain", cmd_pretrain}, {"tune", cmd_tune},   {"find", cmd_find},
      {"perturb", cmd_perturb},   {"correlate", cmd_correlate}, {"words", cmd_words},
      {"prune", cmd_prune},       {"bench", cmd_bench}, {"transfer", cmd_transfer},
      {"report", cmd_report}};
  return c;
}

}  // namespace skillprobe
