#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "skillprobe/analysis.hpp"
#include "skillprobe/errors.hpp"
#include "skillprobe/model.hpp"
#include "skillprobe/numerics.hpp"
#include "skillprobe/skillfind.hpp"
#include "skillprobe/tuning.hpp"

namespace skillprobe {

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

enum class ClampSource { mean_over_tokens, best_token };

struct PruneOptions {
  double keep_fraction = 0.02;
  // Layers [first_layer, last_layer) are pruned. Unset means the top three
  // quarters of the stack, rounded down.
  std::optional<std::size_t> first_layer;
  std::optional<std::size_t> last_layer;
  ClampSource clamp = ClampSource::mean_over_tokens;

  void validate() const {
    if (!(keep_fraction > 0.0 && keep_fraction < 1.0))
      throw ConfigError("prune: keep fraction must lie in (0, 1)");
  }
};

inline std::pair<std::size_t, std::size_t> prune_layer_range(const PruneOptions& opt,
                                                             std::size_t num_layers) {
  const std::size_t hi = opt.last_layer.value_or(num_layers);
  const std::size_t lo = opt.first_layer.value_or(num_layers - (3 * num_layers) / 4);
  if (lo > hi || hi > num_layers) throw ConfigError("prune: layer range outside the model");
  return {lo, hi};
}

inline std::size_t kept_per_layer(double keep_fraction, std::size_t width) {
  // Guard against 0.02 * 250 landing a hair above 5.
  return std::min(width, static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(width) - 1e-9)));
}

struct PrunePlan {
  std::size_t width = 0;
  std::size_t first_layer = 0, last_layer = 0;
  std::vector<std::vector<std::size_t>> kept;  // per layer, ascending; empty outside the range
  std::vector<std::vector<double>> clamp;      // per layer, width entries; only frozen ones are used

  bool in_range(std::size_t l) const { return l >= first_layer && l < last_layer; }
  std::vector<std::size_t> frozen(std::size_t l) const {
    std::vector<char> keep(width, 0);
    for (std::size_t j : kept[l]) keep[j] = 1;
    std::vector<std::size_t> f;
    for (std::size_t j = 0; j < width; ++j)
      if (!keep[j]) f.push_back(j);
    return f;
  }
};

/// Per layer in range, keeps the layer's best neurons in the task order and
/// freezes the rest at the chosen trial's baseline activation.
inline PrunePlan build_prune_plan(const PredictivityTable& table, std::size_t trial,
                                  const PruneOptions& opt = {}) {
  opt.validate();
  if (trial >= table.trials) throw ContractError("prune: trial index outside the table");
  const auto [lo, hi] = prune_layer_range(opt, table.layers);
  PrunePlan plan;
  plan.width = table.width;
  plan.first_layer = lo;
  plan.last_layer = hi;
  plan.kept.assign(table.layers, {});
  plan.clamp.assign(table.layers, std::vector<double>(table.width, 0.0));

  // Baselines come from the first view that keeps every sample.
  std::size_t view = 0;
  for (std::size_t v = 0; v < table.views.size(); ++v) {
    const auto& r = table.views[v].relabel;
    if (std::none_of(r.begin(), r.end(), [](int x) { return x < 0; })) {
      view = v;
      break;
    }
  }
  const PredictivityView& pv = table.views[view];
  const std::size_t N = table.neurons();
  const std::size_t keep = kept_per_layer(opt.keep_fraction, table.width);
  const std::vector<std::size_t> order = task_order(table);

  for (std::size_t l = lo; l < hi; ++l) {
    for (std::size_t flat : order)
      if (flat / table.width == l && plan.kept[l].size() < keep) plan.kept[l].push_back(flat % table.width);
    std::sort(plan.kept[l].begin(), plan.kept[l].end());
    for (std::size_t j = 0; j < table.width; ++j) {
      const std::size_t flat = l * table.width + j;
      if (opt.clamp == ClampSource::best_token) {
        const std::size_t p = pv.best_token[trial * N + flat];
        plan.clamp[l][j] = pv.a_bsl[table.cell(trial, p, flat)];
      } else {
        double s = 0.0;
        for (std::size_t p = 0; p < table.tokens; ++p) s += pv.a_bsl[table.cell(trial, p, flat)];
        plan.clamp[l][j] = s / static_cast<double>(table.tokens);
      }
    }
  }
  return plan;
}

/// Holds every frozen neuron at its clamp constant at all positions.
class ClampHook : public ActivationHook {
 public:
  explicit ClampHook(const PrunePlan& plan) : plan_(plan) {
    frozen_.resize(plan.kept.size());
    for (std::size_t l = 0; l < plan.kept.size(); ++l)
      if (plan.in_range(l)) frozen_[l] = plan.frozen(l);
  }
  void apply(std::size_t layer, Matrix& act, const HookRows&) const override {
    if (layer >= frozen_.size()) return;
    for (std::size_t r = 0; r < act.rows(); ++r)
      for (std::size_t j : frozen_[layer]) act(r, j) = plan_.clamp[layer][j];
  }

 private:
  const PrunePlan& plan_;
  std::vector<std::vector<std::size_t>> frozen_;
};

/// Slices kept neurons and folds frozen ones into the output bias:
/// b2' = b2 + sum_j c_j V_j. Layers with nothing frozen stay untouched.
inline ModelWeights fold(const ModelWeights& w, const PrunePlan& plan) {
  if (w.pruned()) throw ContractError("fold: weights are already pruned");
  if (plan.kept.size() != w.layers.size() || plan.width != w.config.d_m)
    throw ContractError("fold: plan does not match the model");
  ModelWeights out = w;
  const std::size_t d = w.config.d;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    if (!plan.in_range(l)) continue;
    const std::vector<std::size_t> F = plan.frozen(l);
    if (F.empty()) continue;
    const LayerWeights& src = w.layers[l];
    LayerWeights& dst = out.layers[l];
    const auto& S = plan.kept[l];
    dst.ffn_k = Matrix(S.size(), d);
    dst.ffn_v = Matrix(S.size(), d);
    dst.ffn_b1 = Matrix(1, S.size());
    for (std::size_t i = 0; i < S.size(); ++i) {
      std::copy_n(src.ffn_k.data() + S[i] * d, d, dst.ffn_k.data() + i * d);
      std::copy_n(src.ffn_v.data() + S[i] * d, d, dst.ffn_v.data() + i * d);
      dst.ffn_b1[i] = src.ffn_b1[S[i]];
    }
    for (std::size_t j : F)
      for (std::size_t c = 0; c < d; ++c) dst.ffn_b2[c] += plan.clamp[l][j] * src.ffn_v(j, c);
    out.ffn_kept[l] = S;
  }
  return out;
}

/// Closed-form parameter count of a model whose FFN layers have the given widths.
inline std::size_t parameter_count_formula(const ModelConfig& c, const std::vector<std::size_t>& widths) {
  std::size_t n = c.vocab_size * c.d + c.max_positions * c.d;
  for (std::size_t w : widths) n += 4 * c.d * c.d + 4 * c.d + 4 * c.d + 2 * w * c.d + w + c.d;
  return n + 2 * c.d + c.vocab_size;
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

struct BenchConfig {
  std::size_t batch = 16;
  std::size_t seq_len = 16;     // input tokens per sample, MASK excluded
  std::size_t prompt_len = 16;
  std::size_t repetitions = 30;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
  std::vector<int> outputs = {8, 9};  // vocabulary subset read at MASK

  void validate() const {
    if (repetitions < 30) throw ConfigError("bench: at least 30 timed repetitions are required");
    if (batch == 0 || seq_len == 0) throw ConfigError("bench: batch and sequence length must be positive");
  }
};

inline double median(std::vector<double> s) {
  if (s.empty()) throw ContractError("median of an empty sample");
  std::sort(s.begin(), s.end());
  const std::size_t m = s.size() / 2;
  return s.size() % 2 ? s[m] : 0.5 * (s[m - 1] + s[m]);
}

struct BenchResult {
  double median_seconds = 0.0;
  std::vector<double> seconds;
};

/// Median wall-clock of one classification forward. The forward pass runs on
/// the calling thread only.
inline BenchResult benchmark(const ModelWeights& w, const BenchConfig& cfg) {
  cfg.validate();
  const std::size_t total = cfg.prompt_len + 1 + cfg.seq_len;
  if (total > w.config.max_positions) throw ConfigError("bench: sequence exceeds max_positions");
  SeededRng rng(cfg.seed, 0x62656e6368);
  const Matrix prompts = make_random_prompts(cfg.prompt_len, w.config.d, 0.03, cfg.seed).embeddings;
  const auto regular = static_cast<std::uint64_t>(w.config.vocab_size - tokens::first_regular);
  std::vector<std::vector<int>> seqs(cfg.batch);
  for (auto& s : seqs) {
    std::vector<int> t(cfg.seq_len);
    for (int& x : t) x = tokens::first_regular + static_cast<int>(rng.below(regular));
    s = classification_input(t);
  }
  ForwardOptions opt;
  if (cfg.prompt_len > 0) opt.prompts = &prompts;
  opt.vocab_subset = cfg.outputs;
  BenchResult r;
  double sink = 0.0;
  for (std::size_t i = 0; i < cfg.warmup + cfg.repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Matrix logits = forward(w, seqs, opt).logits;
    const auto t1 = std::chrono::steady_clock::now();
    sink += logits[0];
    if (i >= cfg.warmup) r.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  if (!std::isfinite(sink)) throw NumericalError("bench: non-finite logits");
  r.median_seconds = median(r.seconds);
  return r;
}

/// Multiply-add FLOPs of one classification forward (2 per multiply-add).
inline double forward_flops(const ModelWeights& w, const BenchConfig& cfg) {
  const double T = static_cast<double>(cfg.prompt_len + 1 + cfg.seq_len);
  const double d = static_cast<double>(w.config.d);
  double per_sample = 0.0;
  for (const LayerWeights& L : w.layers) {
    const double width = static_cast<double>(L.ffn_width());
    per_sample += T * 2.0 * 4.0 * d * d;   // q, k, v, o projections
    per_sample += 2.0 * 2.0 * T * T * d;   // scores and context
    per_sample += T * 2.0 * 2.0 * width * d;
  }
  per_sample += 2.0 * d * static_cast<double>(cfg.outputs.size());
  return per_sample * static_cast<double>(cfg.batch);
}

struct SpeedupReport {
  BenchResult full, pruned;
  double speedup = 0.0;
  double flop_ratio = 0.0;
  std::size_t full_params = 0, pruned_params = 0;
};

/// Times the two models in alternating rounds so drift affects both equally.
inline SpeedupReport compare_speed(const ModelWeights& full, const ModelWeights& pruned,
                                   const BenchConfig& cfg, std::size_t rounds = 3) {
  SpeedupReport r;
  BenchConfig timed = cfg;
  timed.warmup = 0;
  BenchConfig warm = cfg;
  warm.repetitions = 30;
  (void)benchmark(full, warm);
  (void)benchmark(pruned, warm);
  for (std::size_t i = 0; i < rounds; ++i) {
    const auto a = benchmark(full, timed);
    const auto b = benchmark(pruned, timed);
    r.full.seconds.insert(r.full.seconds.end(), a.seconds.begin(), a.seconds.end());
    r.pruned.seconds.insert(r.pruned.seconds.end(), b.seconds.begin(), b.seconds.end());
  }
  r.full.median_seconds = median(r.full.seconds);
  r.pruned.median_seconds = median(r.pruned.seconds);
  r.speedup = r.full.median_seconds / r.pruned.median_seconds;
  r.flop_ratio = forward_flops(full, cfg) / forward_flops(pruned, cfg);
  r.full_params = parameter_count(full);
  r.pruned_params = parameter_count(pruned);
  return r;
}

// ---------------------------------------------------------------------------
// Overlapping rate of activated neurons
// ---------------------------------------------------------------------------

/// Mean activation of every neuron over the prompt tokens and the samples.
inline std::vector<double> prompt_activation_means(const ModelWeights& w, const Matrix& prompts,
                                                   const std::vector<Sample>& samples) {
  if (samples.empty()) throw InputError("on: reference split is empty");
  const std::size_t N = w.config.neuron_count(), l = prompts.rows();
  std::vector<double> sum(N, 0.0);
  for_each_prompt_trace(w, prompts, samples, [&](std::size_t, const ActivationTrace& t) {
    for (std::size_t s = 0; s < t.batch; ++s)
      for (std::size_t p = 0; p < l; ++p) {
        const double* row = t.values.data() + t.offset(s, p, 0);
        for (std::size_t n = 0; n < N; ++n) sum[n] += row[n];
      }
  });
  const double inv = 1.0 / static_cast<double>(samples.size() * l);
  for (double& x : sum) x *= inv;
  return sum;
}

struct OnValue {
  double value = 0.0;
  bool empty_union = false;
};

/// Jaccard overlap of the neurons whose mean exceeds the threshold,
/// restricted to `mask` when given.
inline OnValue on_from_means(const std::vector<double>& a, const std::vector<double>& b,
                             const std::vector<std::size_t>* mask = nullptr, double threshold = 0.0) {
  if (a.size() != b.size()) throw ShapeError("on: activation vectors differ in size");
  std::size_t inter = 0, uni = 0;
  auto visit = [&](std::size_t n) {
    const bool x = a[n] > threshold, y = b[n] > threshold;
    inter += x && y;
    uni += x || y;
  };
  if (mask) {
    for (std::size_t n : *mask) visit(n);
  } else {
    for (std::size_t n = 0; n < a.size(); ++n) visit(n);
  }
  if (uni == 0) return {0.0, true};
  return {static_cast<double>(inter) / static_cast<double>(uni), false};
}

inline OnValue on_metric(const PromptGroup& a, const PromptGroup& b, const ModelWeights& w,
                         const std::vector<Sample>& reference,
                         const std::vector<std::size_t>* mask = nullptr, double threshold = 0.0) {
  return on_from_means(prompt_activation_means(w, a.embeddings, reference),
                       prompt_activation_means(w, b.embeddings, reference), mask, threshold);
}

// ---------------------------------------------------------------------------
// Transferability indicator
// ---------------------------------------------------------------------------

struct TransferOptions {
  double mask_fraction = 0.2;
  double threshold = 0.0;
  std::optional<std::size_t> trial;  // unset: each task's best trial
};

struct TransferReport {
  std::vector<std::string> tasks;
  Matrix on_full, on_masked, transfer;  // [source][target]
  std::vector<double> rho_full, rho_masked;  // per target, across the other tasks
  double mean_full = 0.0, mean_masked = 0.0;
  std::size_t empty_unions = 0;
};

/// Zero-shot transfer of every task's prompt to every other task, correlated
/// with ON. Transfer is measured on the target's test split and ON on its
/// dev split; the mask is the target's top skill neurons.
inline TransferReport transfer_indicator(const ModelWeights& w, const std::vector<TaskSpec>& tasks,
                                         const std::vector<Dataset>& data,
                                         const std::vector<TrialSet>& trials,
                                         const std::vector<PredictivityTable>& tables,
                                         const TransferOptions& opt = {}) {
  const std::size_t n = tasks.size();
  if (data.size() != n || trials.size() != n || tables.size() != n)
    throw ContractError("transfer: one dataset, trial set and table per task");
  if (n < 4) throw ContractError("transfer: every target needs at least 3 source tasks");
  if (!(opt.mask_fraction > 0.0 && opt.mask_fraction <= 1.0))
    throw ConfigError("transfer: mask fraction must lie in (0, 1]");

  std::vector<const PromptGroup*> prompt(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = opt.trial.value_or(trials[i].best_trial());
    if (k >= trials[i].size()) throw ContractError("transfer: trial index outside the trial set");
    prompt[i] = &trials[i].groups[k];
  }

  TransferReport r;
  for (const auto& t : tasks) r.tasks.push_back(t.name);
  r.on_full = Matrix(n, n);
  r.on_masked = Matrix(n, n);
  r.transfer = Matrix(n, n);
  const std::size_t N = w.config.neuron_count();
  const auto masked_count = static_cast<std::size_t>(std::ceil(opt.mask_fraction * static_cast<double>(N) - 1e-9));

  for (std::size_t t = 0; t < n; ++t) {
    std::vector<std::vector<double>> means(n);
    for (std::size_t s = 0; s < n; ++s) means[s] = prompt_activation_means(w, prompt[s]->embeddings, data[t].dev);
    std::vector<std::size_t> mask = task_order(tables[t]);
    mask.resize(masked_count);
    std::vector<double> on_f, on_m, acc;
    for (std::size_t s = 0; s < n; ++s) {
      const OnValue f = on_from_means(means[s], means[t], nullptr, opt.threshold);
      const OnValue m = on_from_means(means[s], means[t], &mask, opt.threshold);
      r.empty_unions += f.empty_union + m.empty_union;
      r.on_full(s, t) = f.value;
      r.on_masked(s, t) = m.value;
      r.transfer(s, t) = evaluate(w, &prompt[s]->embeddings, nullptr, tasks[t], data[t], Split::test);
      if (s == t) continue;
      on_f.push_back(f.value);
      on_m.push_back(m.value);
      acc.push_back(r.transfer(s, t));
    }
    r.rho_full.push_back(spearman(on_f, acc));
    r.rho_masked.push_back(spearman(on_m, acc));
  }
  for (std::size_t t = 0; t < n; ++t) {
    r.mean_full += r.rho_full[t] / static_cast<double>(n);
    r.mean_masked += r.rho_masked[t] / static_cast<double>(n);
  }
  return r;
}

}  // namespace skillprobe
