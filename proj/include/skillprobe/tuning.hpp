#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <bit>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "skillprobe/errors.hpp"
#include "skillprobe/model.hpp"
#include "skillprobe/numerics.hpp"
#include "skillprobe/parallel.hpp"
#include "skillprobe/tasks.hpp"

namespace skillprobe {

struct PromptGroup {
  Matrix embeddings;            // l x d
  std::string provenance = "tuned";  // tuned | random | hard
  std::vector<int> hard_tokens;  // source tokens of a hard prompt
  std::uint64_t seed = 0;

  std::size_t length() const { return embeddings.rows(); }
  bool operator==(const PromptGroup&) const = default;
};

struct TuneConfig {
  double lr = 1e-3;
  std::size_t batch = 8;
  std::size_t eval_interval = 100;
  std::size_t patience = 6;
  double prompt_init_std = 0.03;
  std::size_t max_steps = 3000;
  std::size_t prompt_len = 16;

  void validate() const {
    if (!(lr > 0.0) || batch == 0 || eval_interval == 0 || patience == 0 ||
        !(prompt_init_std > 0.0) || max_steps == 0 || prompt_len == 0)
      throw ConfigError("tune config: all values must be positive");
  }
};

struct TuneResult {
  std::vector<std::pair<std::size_t, double>> dev_curve;  // (step, dev accuracy)
  double best_dev = 0.0;
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  bool warning = false;  // never improved on the step-0 checkpoint
};

/// Classification input: MASK followed by the sample tokens.
inline std::vector<int> classification_input(const std::vector<int>& tokens) {
  std::vector<int> seq;
  seq.reserve(tokens.size() + 1);
  seq.push_back(tokens::mask);
  seq.insert(seq.end(), tokens.begin(), tokens.end());
  return seq;
}

/// Everything that shapes a forward pass besides the weights.
struct Assembly {
  const Matrix* prompts = nullptr;
  const AdapterParams* adapters = nullptr;
  const ActivationHook* hook = nullptr;
};

inline constexpr std::size_t kEvalBatch = 64;

/// Predicted label per sample: argmax over the verbalizer's label-word logits
/// at MASK, ties to the lowest label.
inline std::vector<int> predict(const ModelWeights& w, const Assembly& a,
                                const std::vector<int>& verbalizer,
                                const std::vector<Sample>& samples) {
  const std::size_t batches = (samples.size() + kEvalBatch - 1) / kEvalBatch;
  std::vector<int> out(samples.size());
  parallel_for(batches, [&](std::size_t b) {
    const std::size_t lo = b * kEvalBatch, hi = std::min(samples.size(), lo + kEvalBatch);
    std::vector<std::vector<int>> seqs;
    ForwardOptions opt;
    opt.prompts = a.prompts;
    opt.adapters = a.adapters;
    opt.hook = a.hook;
    opt.vocab_subset = verbalizer;
    for (std::size_t i = lo; i < hi; ++i) {
      seqs.push_back(classification_input(samples[i].tokens));
      opt.sample_ids.push_back(i);
    }
    const Matrix logits = forward(w, seqs, opt).logits;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      auto row = logits.row(r);
      out[lo + r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
  });
  return out;
}

inline double evaluate(const ModelWeights& w, const Assembly& a, const TaskSpec& task,
                       const std::vector<Sample>& samples) {
  if (samples.empty()) throw InputError("evaluate: empty split");
  const std::vector<int> pred = predict(w, a, task.verbalizer, samples);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) correct += pred[i] == samples[i].label;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

inline double evaluate(const ModelWeights& w, const Matrix* prompts, const AdapterParams* adapters,
                       const TaskSpec& task, const Dataset& data, Split split) {
  return evaluate(w, Assembly{prompts, adapters, nullptr}, task, data.split(split));
}

namespace detail {

/// Shared loop for every regime. `params` are the tensors Adam updates;
/// snapshot/restore keep the best dev checkpoint.
template <class Snapshot, class Restore>
TuneResult train_loop(ModelWeights& w, Matrix* prompts, AdapterParams* adapters,
                      TrainableKind kind, const TaskSpec& task, const Dataset& data,
                      const TuneConfig& cfg, SeededRng& rng, Snapshot snapshot, Restore restore) {
  cfg.validate();
  task.validate();
  if (data.train.empty() || data.dev.empty()) throw InputError("tuning needs train and dev samples");
  const Assembly a{prompts, adapters, nullptr};
  AdamState adam(AdamConfig{.lr = cfg.lr});
  TuneResult res;
  res.best_dev = evaluate(w, a, task, data.dev);
  res.dev_curve.emplace_back(0, res.best_dev);
  auto best = snapshot();
  std::size_t bad = 0;

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::size_t cursor = 0;
  std::vector<std::size_t> targets;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<std::vector<int>> seqs;
    targets.clear();
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const Sample& s = data.train[order[cursor++]];
      seqs.push_back(classification_input(s.tokens));
      targets.push_back(static_cast<std::size_t>(s.label));
    }
    ForwardOptions opt;
    opt.prompts = prompts;
    opt.adapters = adapters;
    opt.vocab_subset = task.verbalizer;
    ForwardTape tape;
    const Matrix logits = forward(w, seqs, opt, &tape).logits;
    Matrix dlogits;
    softmax_cross_entropy(logits, targets, dlogits);
    Gradients g = backward(w, tape, dlogits, kind);
    std::vector<Matrix*> params;
    std::vector<const Matrix*> grads;
    if (kind == TrainableKind::prompts) {
      params.push_back(prompts);
      grads.push_back(&g.prompts);
    } else if (kind == TrainableKind::adapters) {
      collect_trainable(*adapters, g, params, grads);
    } else {
      collect_trainable(w, g, params, grads);
    }
    adam.step(params, grads);
    res.steps_run = step;

    if (step % cfg.eval_interval == 0 || step == cfg.max_steps) {
      const double acc = evaluate(w, a, task, data.dev);
      res.dev_curve.emplace_back(step, acc);
      if (acc > res.best_dev) {
        res.best_dev = acc;
        res.best_step = step;
        best = snapshot();
        bad = 0;
      } else if (++bad >= cfg.patience) {
        break;
      }
    }
  }
  restore(best);
  res.warning = res.best_step == 0;
  return res;
}

}  // namespace detail

inline PromptGroup make_random_prompts(std::size_t l, std::size_t d, double stddev,
                                       std::uint64_t seed) {
  SeededRng rng(seed, 0x70726f6d7074ULL);
  PromptGroup p;
  p.embeddings = Matrix(l, d);
  for (double& v : p.embeddings.values()) v = rng.normal(0.0, stddev);
  p.provenance = "random";
  p.seed = seed;
  return p;
}

inline PromptGroup make_hard_prompt(const std::vector<int>& token_ids, const Matrix& embedding) {
  if (token_ids.empty()) throw InputError("hard prompt needs at least one token");
  PromptGroup p;
  p.embeddings = Matrix(token_ids.size(), embedding.cols());
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    const int t = token_ids[i];
    if (t < 0 || static_cast<std::size_t>(t) >= embedding.rows())
      throw VocabError("hard prompt token " + std::to_string(t) + " outside vocabulary");
    std::copy_n(embedding.data() + static_cast<std::size_t>(t) * embedding.cols(), embedding.cols(),
                p.embeddings.data() + i * embedding.cols());
  }
  p.provenance = "hard";
  p.hard_tokens = token_ids;
  return p;
}

/// Hand-written prompt for a synthetic task: its label words, then SEP.
inline std::vector<int> default_hard_prompt_tokens(const TaskSpec& task) {
  std::vector<int> t = task.verbalizer;
  t.push_back(VocabLayout::sep);
  return t;
}

/// Tunes soft prompts on a frozen model. Prompts start as N(0, std^2).
inline std::pair<PromptGroup, TuneResult> prompt_tune(const ModelWeights& weights,
                                                      const TaskSpec& task, const Dataset& data,
                                                      const TuneConfig& cfg, std::uint64_t seed) {
  PromptGroup p = make_random_prompts(cfg.prompt_len, weights.config.d, cfg.prompt_init_std, seed);
  p.provenance = "tuned";
  SeededRng rng(seed, 0x6f72646572ULL);
  // The backbone is only read; the const_cast lets the shared loop take one
  // weight type for every regime.
  ModelWeights& w = const_cast<ModelWeights&>(weights);
  TuneResult r = detail::train_loop(
      w, &p.embeddings, nullptr, TrainableKind::prompts, task, data, cfg, rng,
      [&] { return p.embeddings; }, [&](const Matrix& m) { p.embeddings = m; });
  return {std::move(p), std::move(r)};
}

/// Tunes every bias vector of a copy of the model. No prompts are used.
inline std::pair<ModelWeights, TuneResult> bitfit_tune(const ModelWeights& weights,
                                                       const TaskSpec& task, const Dataset& data,
                                                       const TuneConfig& cfg, std::uint64_t seed) {
  ModelWeights w = weights;
  SeededRng rng(seed, 0x6f72646572ULL);
  auto snapshot = [&] {
    std::vector<Matrix> b;
    visit_tensors(w, [&](const std::string&, const Matrix& m, bool is_bias) {
      if (is_bias) b.push_back(m);
    });
    return b;
  };
  auto restore = [&](const std::vector<Matrix>& b) {
    std::size_t i = 0;
    visit_tensors(w, [&](const std::string&, Matrix& m, bool is_bias) {
      if (is_bias) m = b[i++];
    });
  };
  TuneResult r = detail::train_loop(w, nullptr, nullptr, TrainableKind::biases, task, data, cfg,
                                    rng, snapshot, restore);
  return {std::move(w), std::move(r)};
}

/// Tunes adapters on a frozen backbone. No prompts are used.
inline std::pair<AdapterParams, TuneResult> adapter_tune(const ModelWeights& weights,
                                                         AdapterParams adapters,
                                                         const TaskSpec& task, const Dataset& data,
                                                         const TuneConfig& cfg, std::uint64_t seed) {
  if (adapters.layers.size() != weights.layers.size())
    throw ShapeError("adapter layer count does not match model");
  SeededRng rng(seed, 0x6f72646572ULL);
  ModelWeights& w = const_cast<ModelWeights&>(weights);
  TuneResult r = detail::train_loop(
      w, nullptr, &adapters, TrainableKind::adapters, task, data, cfg, rng,
      [&] { return adapters; }, [&](const AdapterParams& a) { adapters = a; });
  return {std::move(adapters), std::move(r)};
}

// ---------------------------------------------------------------------------
// Trial sets
// ---------------------------------------------------------------------------

struct TrialSet {
  std::string task;
  std::vector<PromptGroup> groups;
  std::vector<TuneResult> results;

  std::size_t size() const { return groups.size(); }
  std::size_t best_trial() const {
    std::size_t best = 0;
    for (std::size_t k = 1; k < results.size(); ++k)
      if (results[k].best_dev > results[best].best_dev) best = k;
    return best;
  }
};

/// Seed of trial k of a task under an experiment seed.
inline std::uint64_t trial_seed(std::uint64_t experiment_seed, const std::string& task,
                                std::size_t k) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : task) h = (h ^ c) * 0x100000001b3ULL;
  return SeededRng::mix(experiment_seed ^ SeededRng::mix(h + k));
}

inline TrialSet tune_trials(const ModelWeights& weights, const TaskSpec& task, const Dataset& data,
                            const TuneConfig& cfg, std::size_t trials,
                            std::uint64_t experiment_seed) {
  TrialSet set;
  set.task = task.name;
  set.groups.resize(trials);
  set.results.resize(trials);
  parallel_for(trials, [&](std::size_t k) {
    auto [p, r] = prompt_tune(weights, task, data, cfg, trial_seed(experiment_seed, task.name, k));
    set.groups[k] = std::move(p);
    set.results[k] = std::move(r);
  });
  return set;
}

// ---------------------------------------------------------------------------
// Prompt files
// ---------------------------------------------------------------------------

// A JSON header line {l, d, provenance, seed, tokens} followed by l * d
// little-endian float32 values.
inline void save_prompts(const PromptGroup& p, const std::filesystem::path& path) {
  nlohmann::json h;
  h["l"] = p.embeddings.rows();
  h["d"] = p.embeddings.cols();
  h["provenance"] = p.provenance;
  h["seed"] = p.seed;
  h["tokens"] = p.hard_tokens;
  std::string buf = h.dump() + "\n";
  for (double v : p.embeddings.values()) detail::put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline PromptGroup load_prompts(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto nl = buf.find('\n');
  if (nl == std::string::npos) throw FormatError(path.string() + ": missing prompt header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(buf.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad prompt header: " + e.what());
  }
  PromptGroup p;
  const auto l = h.at("l").get<std::size_t>();
  const auto d = h.at("d").get<std::size_t>();
  p.provenance = h.at("provenance").get<std::string>();
  p.seed = h.at("seed").get<std::uint64_t>();
  p.hard_tokens = h.value("tokens", std::vector<int>{});
  if (buf.size() - nl - 1 != 4 * l * d) throw IoError(path.string() + ": prompt payload size mismatch");
  p.embeddings = Matrix(l, d);
  const auto* bytes = reinterpret_cast<const unsigned char*>(buf.data()) + nl + 1;
  for (std::size_t i = 0; i < l * d; ++i)
    p.embeddings[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(bytes + 4 * i)));
  return p;
}

/// Prompts rounded to file precision.
inline PromptGroup round_to_storage(PromptGroup p) {
  for (double& v : p.embeddings.values()) v = static_cast<double>(static_cast<float>(v));
  return p;
}

inline void save_trials(const TrialSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["task"] = set.task;
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto sub = dir / ("trial_" + std::to_string(k));
    std::filesystem::create_directories(sub);
    save_prompts(set.groups[k], sub / "prompts.bin");
    nlohmann::json r;
    r["best_dev"] = set.results[k].best_dev;
    r["best_step"] = set.results[k].best_step;
    r["steps_run"] = set.results[k].steps_run;
    r["warning"] = set.results[k].warning;
    r["dev_curve"] = set.results[k].dev_curve;
    meta["trials"].push_back(r);
  }
  std::ofstream out(dir / "trials.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "trials.json").string());
  out << meta.dump(2) << "\n";
}

inline TrialSet load_trials(const std::filesystem::path& dir) {
  std::ifstream in(dir / "trials.json");
  if (!in) throw IoError("cannot open " + (dir / "trials.json").string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "trials.json").string() + ": " + e.what());
  }
  TrialSet set;
  set.task = meta.at("task").get<std::string>();
  std::size_t k = 0;
  for (const auto& r : meta.at("trials")) {
    set.groups.push_back(load_prompts(dir / ("trial_" + std::to_string(k)) / "prompts.bin"));
    TuneResult t;
    t.best_dev = r.at("best_dev").get<double>();
    t.best_step = r.at("best_step").get<std::size_t>();
    t.steps_run = r.at("steps_run").get<std::size_t>();
    t.warning = r.at("warning").get<bool>();
    t.dev_curve = r.at("dev_curve").get<std::vector<std::pair<std::size_t, double>>>();
    set.results.push_back(std::move(t));
    ++k;
  }
  return set;
}

}  // namespace skillprobe
