#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "skillprobe/errors.hpp"
#include "skillprobe/model.hpp"
#include "skillprobe/numerics.hpp"
#include "skillprobe/parallel.hpp"
#include "skillprobe/skillfind.hpp"
#include "skillprobe/tasks.hpp"
#include "skillprobe/tuning.hpp"

namespace skillprobe {

// ---------------------------------------------------------------------------
// Gaussian perturbation
// ---------------------------------------------------------------------------

inline std::vector<double> default_fraction_grid() {
  return {0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0};
}

struct PerturbationConfig {
  double mean = 0.0;
  double stddev = 0.1;
  std::vector<double> fractions = default_fraction_grid();
  std::size_t trials = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(stddev >= 0.0) || !std::isfinite(mean)) throw ConfigError("perturbation: bad noise parameters");
    if (fractions.empty() || fractions.front() != 0.0) throw ConfigError("perturbation: grid must start at 0");
    for (std::size_t i = 0; i < fractions.size(); ++i) {
      if (fractions[i] < 0.0 || fractions[i] > 1.0) throw ConfigError("perturbation: fraction outside [0, 1]");
      if (i > 0 && fractions[i] <= fractions[i - 1]) throw ConfigError("perturbation: grid must be ascending");
    }
    if (trials == 0) throw ConfigError("perturbation: need at least one trial");
  }
};

/// Adds N(mean, stddev^2) to chosen neurons at every position. The draw for
/// (sample, position, layer, neuron) depends only on those indices and the
/// key, so any two runs that perturb a neuron see the same noise.
class PerturbationHook final : public ActivationHook {
 public:
  PerturbationHook(const ModelConfig& config, const std::vector<NeuronId>& neurons, double mean,
                   double stddev, std::uint64_t key)
      : per_layer_(config.num_layers), mean_(mean), stddev_(stddev), key_(key),
        positions_(config.max_positions), layers_(config.num_layers), width_(config.d_m) {
    for (const NeuronId& n : neurons) {
      if (n.layer >= config.num_layers || n.index >= config.d_m)
        throw ContractError("perturbation: neuron (" + std::to_string(n.layer) + "," +
                            std::to_string(n.index) + ") out of range");
      per_layer_[n.layer].push_back(n.index);
    }
    for (auto& v : per_layer_) std::sort(v.begin(), v.end());
  }

  void apply(std::size_t layer, Matrix& act, const HookRows& rows) const override {
    const auto& idx = per_layer_[layer];
    if (idx.empty()) return;
    for (std::size_t r = 0; r < act.rows(); ++r) {
      const std::uint64_t base =
          ((rows.sample_id[r] * positions_ + rows.position[r]) * layers_ + layer) * width_;
      for (std::size_t n : idx) act(r, n) += mean_ + stddev_ * SeededRng::normal_at(key_, base + n);
    }
  }

 private:
  std::vector<std::vector<std::size_t>> per_layer_;
  double mean_, stddev_;
  std::uint64_t key_;
  std::uint64_t positions_, layers_, width_;
};

inline double perturbed_evaluate(const ModelWeights& w, const Assembly& a, const TaskSpec& task,
                                 const std::vector<Sample>& samples,
                                 const std::vector<NeuronId>& neurons, double mean, double stddev,
                                 std::uint64_t noise_seed) {
  const PerturbationHook hook(w.config, neurons, mean, stddev, SeededRng::derive_key(noise_seed, 0x6e6f697365ULL));
  Assembly with_hook = a;
  with_hook.hook = &hook;
  return evaluate(w, with_hook, task, samples);
}

inline std::vector<std::size_t> random_order(std::size_t num_neurons, std::uint64_t seed) {
  std::vector<std::size_t> order(num_neurons);
  std::iota(order.begin(), order.end(), 0);
  SeededRng rng(seed, 0x72616e646f6dULL);
  rng.shuffle(order);
  return order;
}

struct PerturbationCurve {
  std::string order;
  std::vector<double> fractions;
  std::vector<double> mean, stddev;             // per fraction, over trials
  std::vector<std::vector<double>> per_trial;   // [trial][fraction]
};

inline std::uint64_t noise_seed(const PerturbationConfig& cfg, std::size_t trial) {
  return SeededRng::derive_key(cfg.seed, 0x747269616cULL + trial);
}

/// Accuracy as the first ceil(f * N) neurons of an order are perturbed.
/// `orders` holds one complete order, or one per trial.
inline PerturbationCurve perturbation_curve(const ModelWeights& w, const Assembly& a,
                                            const TaskSpec& task, const std::vector<Sample>& samples,
                                            const std::vector<std::vector<std::size_t>>& orders,
                                            const PerturbationConfig& cfg, const std::string& label) {
  cfg.validate();
  const std::size_t N = w.config.neuron_count();
  if (orders.empty() || (orders.size() != 1 && orders.size() != cfg.trials))
    throw ContractError("perturbation: need one order or one per trial");
  for (const auto& o : orders) {
    if (o.size() != N) throw ContractError("perturbation: order must cover all neurons");
    std::vector<char> seen(N, 0);
    for (std::size_t n : o) {
      if (n >= N || seen[n]) throw ContractError("perturbation: order is not a permutation");
      seen[n] = 1;
    }
  }
  PerturbationCurve c;
  c.order = label;
  c.fractions = cfg.fractions;
  const std::size_t F = cfg.fractions.size();
  c.per_trial.assign(cfg.trials, std::vector<double>(F, 0.0));
  const double base = evaluate(w, a, task, samples);
  // Cells run one at a time; evaluate already spreads batches over workers.
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    const auto& order = orders.size() == 1 ? orders[0] : orders[t];
    for (std::size_t f = 0; f < F; ++f) {
      const auto count = static_cast<std::size_t>(std::ceil(cfg.fractions[f] * static_cast<double>(N) - 1e-9));
      if (count == 0) {
        c.per_trial[t][f] = base;
        continue;
      }
      std::vector<NeuronId> chosen;
      for (std::size_t i = 0; i < count; ++i) chosen.push_back(NeuronId::from_flat(order[i], w.config.d_m));
      c.per_trial[t][f] = perturbed_evaluate(w, a, task, samples, chosen, cfg.mean, cfg.stddev, noise_seed(cfg, t));
    }
  }
  c.mean.assign(F, 0.0);
  c.stddev.assign(F, 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t t = 0; t < cfg.trials; ++t) c.mean[f] += c.per_trial[t][f];
    c.mean[f] /= static_cast<double>(cfg.trials);
    for (std::size_t t = 0; t < cfg.trials; ++t)
      c.stddev[f] += (c.per_trial[t][f] - c.mean[f]) * (c.per_trial[t][f] - c.mean[f]);
    c.stddev[f] = std::sqrt(c.stddev[f] / static_cast<double>(cfg.trials));
  }
  return c;
}

/// Trapezoidal area of (random - source) over the fraction grid.
inline double neuronal_importance(const std::vector<double>& fractions, const std::vector<double>& source,
                                  const std::vector<double>& random) {
  if (source.size() != fractions.size() || random.size() != fractions.size())
    throw ContractError("importance: curves and grid differ in length");
  double area = 0.0;
  for (std::size_t i = 1; i < fractions.size(); ++i) {
    const double g0 = random[i - 1] - source[i - 1], g1 = random[i] - source[i];
    area += 0.5 * (g0 + g1) * (fractions[i] - fractions[i - 1]);
  }
  return area;
}

inline double neuronal_importance(const PerturbationCurve& source, const PerturbationCurve& random) {
  if (source.fractions != random.fractions) throw ContractError("importance: fraction grids differ");
  return neuronal_importance(source.fractions, source.mean, random.mean);
}

struct ZScored {
  Matrix values;
  std::vector<char> degenerate;  // per row: zero variance
};

/// Per row: subtract the mean and divide by the population std.
inline ZScored zscore_rows(const Matrix& m) {
  if (m.cols() < 2) throw ContractError("z-score needs at least two columns per row");
  ZScored z{Matrix(m.rows(), m.cols()), std::vector<char>(m.rows(), 0)};
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) mean += m(r, c);
    mean /= static_cast<double>(m.cols());
    double var = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) var += (m(r, c) - mean) * (m(r, c) - mean);
    var /= static_cast<double>(m.cols());
    if (var == 0.0) {
      z.degenerate[r] = 1;
      continue;
    }
    const double sd = std::sqrt(var);
    for (std::size_t c = 0; c < m.cols(); ++c) z.values(r, c) = (m(r, c) - mean) / sd;
  }
  return z;
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Pearson correlation of average ranks. A constant input has no rank
/// variation and yields 0.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("spearman: length mismatch");
  if (x.size() < 2) throw ContractError("spearman: need at least two values");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double a = rx[i] - mean, b = ry[i] - mean;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct CorrelationResult {
  std::vector<std::string> tasks;
  Matrix overall;              // mean of per-layer rho
  std::vector<Matrix> per_layer;
  Matrix pooled;               // rho over all neurons at once
};

/// Task x task Spearman matrices over neuron predictivity orders.
inline CorrelationResult correlation_matrix(const std::vector<PredictivityTable>& tables) {
  if (tables.empty()) throw InputError("correlation: no tables");
  const std::size_t L = tables[0].layers, W = tables[0].width, T = tables.size();
  std::vector<std::vector<double>> scores;
  CorrelationResult r;
  for (const auto& t : tables) {
    if (t.layers != L || t.width != W) throw ContractError("correlation: tables come from different models");
    scores.push_back(order_scores(t));
    r.tasks.push_back(t.task);
  }
  r.overall = Matrix(T, T);
  r.pooled = Matrix(T, T);
  r.per_layer.assign(L, Matrix(T, T));
  for (std::size_t a = 0; a < T; ++a)
    for (std::size_t b = a; b < T; ++b) {
      double sum = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        const auto lo = static_cast<std::ptrdiff_t>(l * W), hi = static_cast<std::ptrdiff_t>((l + 1) * W);
        const double rho = spearman(std::vector<double>(scores[a].begin() + lo, scores[a].begin() + hi),
                                    std::vector<double>(scores[b].begin() + lo, scores[b].begin() + hi));
        r.per_layer[l](a, b) = r.per_layer[l](b, a) = rho;
        sum += rho;
      }
      r.overall(a, b) = r.overall(b, a) = sum / static_cast<double>(L);
      r.pooled(a, b) = r.pooled(b, a) = spearman(scores[a], scores[b]);
    }
  return r;
}

// ---------------------------------------------------------------------------
// Related words
// ---------------------------------------------------------------------------

struct ScoredToken {
  int token = 0;
  double score = 0.0;
  bool operator==(const ScoredToken&) const = default;
};

struct RelatedWords {
  std::vector<ScoredToken> cosine_top, cosine_bottom, activation_top, activation_bottom;
};

namespace detail {

inline void top_bottom(std::vector<ScoredToken> all, std::size_t k, std::vector<ScoredToken>& top,
                       std::vector<ScoredToken>& bottom) {
  std::sort(all.begin(), all.end(), [](const ScoredToken& a, const ScoredToken& b) {
    return a.score != b.score ? a.score > b.score : a.token < b.token;
  });
  top.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min(k, all.size())));
  std::sort(all.begin(), all.end(), [](const ScoredToken& a, const ScoredToken& b) {
    return a.score != b.score ? a.score < b.score : a.token < b.token;
  });
  bottom.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min(k, all.size())));
}

/// Sums one neuron's activation per input token.
class TokenActivationRecorder final : public ActivationHook {
 public:
  TokenActivationRecorder(NeuronId n, const std::vector<std::vector<int>>& seqs, std::size_t first_input,
                          std::vector<double>& sum, std::vector<std::size_t>& count)
      : n_(n), seqs_(seqs), first_input_(first_input), sum_(sum), count_(count) {}
  void apply(std::size_t layer, Matrix& act, const HookRows& rows) const override {
    if (layer != n_.layer) return;
    for (std::size_t r = 0; r < act.rows(); ++r) {
      const std::size_t pos = rows.position[r];
      if (pos < first_input_) continue;
      const int tok = seqs_[rows.sample_id[r]][pos - first_input_];
      sum_[static_cast<std::size_t>(tok)] += act(r, n_.index);
      ++count_[static_cast<std::size_t>(tok)];
    }
  }

 private:
  NeuronId n_;
  const std::vector<std::vector<int>>& seqs_;
  std::size_t first_input_;
  std::vector<double>& sum_;
  std::vector<std::size_t>& count_;
};

}  // namespace detail

/// Tokens closest to a neuron: by cosine between embedding rows and the
/// neuron's K row, and by its mean activation per occurrence of each input
/// token (prompts, if given, are present but not counted).
inline RelatedWords related_words(const ModelWeights& w, NeuronId neuron,
                                  const std::vector<Sample>& samples, std::size_t k,
                                  const Matrix* prompts = nullptr) {
  const ModelConfig& c = w.config;
  if (neuron.layer >= c.num_layers || neuron.index >= w.layers[neuron.layer].ffn_width())
    throw ContractError("related words: neuron out of range");
  if (k == 0 || k > c.vocab_size) throw ConfigError("related words: k must be in [1, vocab]");
  const Matrix& K = w.layers[neuron.layer].ffn_k;
  const Matrix& E = w.token_embedding;
  double kn = 0.0;
  for (std::size_t j = 0; j < c.d; ++j) kn += K(neuron.index, j) * K(neuron.index, j);
  kn = std::sqrt(kn);
  std::vector<ScoredToken> cos;
  for (std::size_t t = 0; t < c.vocab_size; ++t) {
    double dot = 0.0, en = 0.0;
    for (std::size_t j = 0; j < c.d; ++j) {
      dot += E(t, j) * K(neuron.index, j);
      en += E(t, j) * E(t, j);
    }
    if (en == 0.0 || kn == 0.0) continue;
    cos.push_back({static_cast<int>(t), dot / (std::sqrt(en) * kn)});
  }
  RelatedWords out;
  detail::top_bottom(cos, k, out.cosine_top, out.cosine_bottom);

  if (samples.empty()) throw InputError("related words: empty dataset");
  std::vector<std::vector<int>> seqs;
  for (const Sample& s : samples) seqs.push_back(s.tokens);
  std::vector<double> sum(c.vocab_size, 0.0);
  std::vector<std::size_t> count(c.vocab_size, 0);
  const std::size_t l = prompts ? prompts->rows() : 0;
  const detail::TokenActivationRecorder rec(neuron, seqs, l + 1, sum, count);
  for (std::size_t lo = 0; lo < samples.size(); lo += kEvalBatch) {
    const std::size_t hi = std::min(samples.size(), lo + kEvalBatch);
    std::vector<std::vector<int>> batch;
    ForwardOptions opt;
    opt.prompts = prompts;
    opt.hook = &rec;
    opt.vocab_subset = {tokens::mask};
    for (std::size_t s = lo; s < hi; ++s) {
      batch.push_back(classification_input(samples[s].tokens));
      opt.sample_ids.push_back(s);
    }
    forward(w, batch, opt);
  }
  std::vector<ScoredToken> act;
  for (std::size_t t = 0; t < c.vocab_size; ++t)
    if (count[t] > 0) act.push_back({static_cast<int>(t), sum[t] / static_cast<double>(count[t])});
  detail::top_bottom(act, k, out.activation_top, out.activation_bottom);
  return out;
}

// ---------------------------------------------------------------------------
// Label-word robustness
// ---------------------------------------------------------------------------

/// k distinct label words drawn uniformly from regular non-cue tokens.
inline std::vector<int> draw_label_words(std::size_t k, std::size_t vocab_size, SeededRng& rng) {
  const VocabLayout v(vocab_size);
  std::vector<int> out;
  const auto span = static_cast<std::uint64_t>(vocab_size - tokens::first_regular);
  while (out.size() < k) {
    const int t = tokens::first_regular + static_cast<int>(rng.below(span));
    if (v.is_cue(t) || std::find(out.begin(), out.end(), t) != out.end()) continue;  // redraw
    out.push_back(t);
  }
  return out;
}

struct RobustnessReport {
  std::vector<std::vector<int>> label_words;
  std::vector<double> pair_rho;  // pairs (i, j), i < j, in row-major order
  double mean_rho = 0.0;
};

/// Reruns tuning and the find pipeline under several label-word sets and
/// compares the resulting predictivity orders.
inline RobustnessReport label_word_robustness(const ModelWeights& w, const TaskSpec& task,
                                              const Dataset& data,
                                              const std::vector<std::vector<int>>& label_sets,
                                              const TuneConfig& cfg, std::size_t trials,
                                              std::uint64_t seed, const FindOptions& options = {}) {
  if (label_sets.size() < 2) throw ConfigError("robustness needs at least two label-word sets");
  const VocabLayout v(w.config.vocab_size);
  std::vector<std::vector<double>> scores;
  RobustnessReport r;
  for (const auto& words : label_sets) {
    for (int t : words)
      if (v.is_cue(t)) throw ContractError("robustness: label word " + std::to_string(t) + " is a cue token");
    TaskSpec alt = task;
    alt.verbalizer = words;
    alt.validate();
    const TrialSet ts = tune_trials(w, alt, data, cfg, trials, seed);
    scores.push_back(order_scores(build_predictivity_table(w, ts, alt, data, options)));
    r.label_words.push_back(words);
  }
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = i + 1; j < scores.size(); ++j) r.pair_rho.push_back(spearman(scores[i], scores[j]));
  r.mean_rho = std::accumulate(r.pair_rho.begin(), r.pair_rho.end(), 0.0) / static_cast<double>(r.pair_rho.size());
  return r;
}

}  // namespace skillprobe
