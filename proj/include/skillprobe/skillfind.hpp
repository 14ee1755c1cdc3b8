#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "skillprobe/errors.hpp"
#include "skillprobe/model.hpp"
#include "skillprobe/numerics.hpp"
#include "skillprobe/parallel.hpp"
#include "skillprobe/tasks.hpp"
#include "skillprobe/tuning.hpp"

namespace skillprobe {

enum class Aggregator { max_over_tokens, mean_over_tokens };
enum class Polarity { both, positive_only };

inline const char* aggregator_name(Aggregator a) {
  return a == Aggregator::max_over_tokens ? "max" : "mean";
}
inline const char* polarity_name(Polarity p) {
  return p == Polarity::both ? "both" : "positive";
}
inline Aggregator parse_aggregator(const std::string& s) {
  if (s == "max") return Aggregator::max_over_tokens;
  if (s == "mean") return Aggregator::mean_over_tokens;
  throw ConfigError("unknown aggregator '" + s + "' (expected max or mean)");
}
inline Polarity parse_polarity(const std::string& s) {
  if (s == "both") return Polarity::both;
  if (s == "positive") return Polarity::positive_only;
  throw ConfigError("unknown polarity '" + s + "' (expected both or positive)");
}

struct FindOptions {
  Aggregator aggregator = Aggregator::max_over_tokens;
  Polarity polarity = Polarity::both;
};

// ---------------------------------------------------------------------------
// Per-neuron primitives
// ---------------------------------------------------------------------------

/// Mean activation over the training split.
inline double baseline_activation(std::span<const double> activations) {
  if (activations.empty()) throw InputError("baseline activation over an empty split");
  double sum = 0.0;
  for (double a : activations) sum += a;
  return sum / static_cast<double>(activations.size());
}

/// Fraction of samples where (activation > baseline) equals the label.
inline double neuron_accuracy(std::span<const double> activations, double a_bsl,
                              std::span<const int> labels) {
  if (activations.size() != labels.size()) throw ShapeError("activation/label count mismatch");
  if (activations.empty()) throw InputError("accuracy over an empty split");
  std::size_t correct = 0;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] != 0 && labels[j] != 1)
      throw ContractError("neuron accuracy needs binary labels, got " + std::to_string(labels[j]));
    correct += static_cast<int>(activations[j] > a_bsl) == labels[j];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

inline double predictivity(double acc, Polarity mode = Polarity::both) {
  return mode == Polarity::both ? std::max(acc, 1.0 - acc) : acc;
}

/// Same from integer counts, so flipping every label gives the identical value.
inline double predictivity(std::size_t correct, std::size_t total, Polarity mode = Polarity::both) {
  const std::size_t c = mode == Polarity::both ? std::max(correct, total - correct) : correct;
  return static_cast<double>(c) / static_cast<double>(total);
}

/// Per-trial token predictivities -> overall predictivity.
inline double aggregate(const std::vector<std::vector<double>>& per_trial_tokens,
                        Aggregator mode = Aggregator::max_over_tokens) {
  if (per_trial_tokens.empty()) throw InputError("aggregate needs at least one trial");
  double sum = 0.0;
  for (const auto& tokens : per_trial_tokens) {
    if (tokens.empty()) throw InputError("aggregate needs at least one prompt token");
    sum += mode == Aggregator::max_over_tokens
               ? *std::max_element(tokens.begin(), tokens.end())
               : std::accumulate(tokens.begin(), tokens.end(), 0.0) / static_cast<double>(tokens.size());
  }
  return sum / static_cast<double>(per_trial_tokens.size());
}

// ---------------------------------------------------------------------------
// Activation capture at prompt positions
// ---------------------------------------------------------------------------

/// Runs the classification forward in fixed batches and hands each batch's
/// trace to `fn(first_sample, trace)` in sample order. Batches are computed
/// in parallel a chunk at a time.
template <class Fn>
void for_each_prompt_trace(const ModelWeights& w, const Matrix& prompts,
                           const std::vector<Sample>& samples, Fn&& fn,
                           const ActivationHook* hook = nullptr) {
  const std::size_t l = prompts.rows();
  std::vector<std::size_t> positions(l);
  std::iota(positions.begin(), positions.end(), 0);
  const std::size_t batches = (samples.size() + kEvalBatch - 1) / kEvalBatch;
  const std::size_t chunk = std::max<std::size_t>(1, worker_count());
  for (std::size_t b0 = 0; b0 < batches; b0 += chunk) {
    const std::size_t nb = std::min(chunk, batches - b0);
    std::vector<ActivationTrace> traces(nb);
    parallel_for(nb, [&](std::size_t i) {
      const std::size_t lo = (b0 + i) * kEvalBatch;
      const std::size_t hi = std::min(samples.size(), lo + kEvalBatch);
      std::vector<std::vector<int>> seqs;
      ForwardOptions opt;
      opt.prompts = &prompts;
      opt.capture_positions = positions;
      opt.hook = hook;
      opt.vocab_subset = {tokens::mask};  // logits are not needed
      for (std::size_t s = lo; s < hi; ++s) {
        seqs.push_back(classification_input(samples[s].tokens));
        opt.sample_ids.push_back(s);
      }
      traces[i] = std::move(*forward(w, seqs, opt).trace);
    });
    for (std::size_t i = 0; i < nb; ++i) fn((b0 + i) * kEvalBatch, traces[i]);
  }
}

/// Dense activations [sample][token][layer][neuron] for a split.
inline std::vector<double> capture_prompt_activations(const ModelWeights& w, const Matrix& prompts,
                                                      const std::vector<Sample>& samples) {
  std::vector<double> out;
  for_each_prompt_trace(w, prompts, samples, [&](std::size_t, const ActivationTrace& t) {
    out.insert(out.end(), t.values.begin(), t.values.end());
  });
  return out;
}

// ---------------------------------------------------------------------------
// Predictivity tables
// ---------------------------------------------------------------------------

/// One binary view of a task: the task itself, or one subtask of a
/// multi-class task.
struct PredictivityView {
  std::string name;
  std::vector<int> relabel;          // empty for a binary task
  std::vector<double> a_bsl, acc, pred;  // [(t * tokens + p) * N + n]
  std::vector<double> best_pred;          // [t * N + n]
  std::vector<std::size_t> best_token;    // [t * N + n]
  std::vector<double> overall;            // [n]
  std::vector<std::size_t> ranking;       // flat neuron ids, best first
};

struct PredictivityTable {
  std::string task;
  std::size_t trials = 0, tokens = 0, layers = 0, width = 0;
  FindOptions options;
  std::vector<PredictivityView> views;

  std::size_t neurons() const { return layers * width; }
  std::size_t cell(std::size_t t, std::size_t p, std::size_t n) const {
    return (t * tokens + p) * neurons() + n;
  }
  NeuronId neuron(std::size_t flat) const { return NeuronId::from_flat(flat, width); }
};

struct SkillNeuron {
  NeuronId id;
  double pred = 0.0;
  int subtask = -1;  // contributing subtask of a multi-class task
};

struct SkillNeuronSet {
  std::string task;
  std::vector<SkillNeuron> neurons;
};

namespace detail {

inline std::vector<std::size_t> rank_by(const std::vector<double>& score) {
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return order;
}

/// Fills best-token, overall and ranking fields from per-cell predictivities.
inline void finish_view(const PredictivityTable& t, PredictivityView& v) {
  const std::size_t N = t.neurons();
  v.best_pred.assign(t.trials * N, 0.0);
  v.best_token.assign(t.trials * N, 0);
  v.overall.assign(N, 0.0);
  for (std::size_t tr = 0; tr < t.trials; ++tr)
    for (std::size_t n = 0; n < N; ++n) {
      double best = v.pred[t.cell(tr, 0, n)], sum = best;
      std::size_t arg = 0;
      for (std::size_t p = 1; p < t.tokens; ++p) {
        const double x = v.pred[t.cell(tr, p, n)];
        sum += x;
        if (x > best) {
          best = x;
          arg = p;
        }
      }
      v.best_pred[tr * N + n] = best;
      v.best_token[tr * N + n] = arg;
      v.overall[n] += t.options.aggregator == Aggregator::max_over_tokens
                          ? best
                          : sum / static_cast<double>(t.tokens);
    }
  for (double& x : v.overall) x /= static_cast<double>(t.trials);
  v.ranking = rank_by(v.overall);
}

}  // namespace detail

/// Builds the table for every trial's prompts. Baselines come from the
/// training split and accuracies from the dev split.
inline PredictivityTable build_predictivity_table(const ModelWeights& w, const TrialSet& trials,
                                                  const TaskSpec& task, const Dataset& data,
                                                  const FindOptions& options = {}) {
  if (trials.size() == 0) throw InputError("find: trial set is empty");
  if (w.pruned()) throw ContractError("find: skill neurons are searched on an unpruned model");
  if (data.train.empty() || data.dev.empty()) throw InputError("find: train and dev splits must be non-empty");
  PredictivityTable t;
  t.task = task.name;
  t.trials = trials.size();
  t.tokens = trials.groups[0].length();
  t.layers = w.config.num_layers;
  t.width = w.config.d_m;
  t.options = options;
  for (const PromptGroup& g : trials.groups)
    if (g.length() != t.tokens || g.embeddings.cols() != w.config.d)
      throw ShapeError("find: prompt groups of one trial set must share l and d");

  if (task.num_classes == 2) {
    t.views.push_back({task.name, {}, {}, {}, {}, {}, {}, {}, {}});
  } else {
    for (const BinarySubtask& b : task.decomposition) t.views.push_back({b.name, b.relabel, {}, {}, {}, {}, {}, {}, {}});
  }
  auto view_label = [&](const PredictivityView& v, int y) {
    if (v.relabel.empty()) {
      if (y != 0 && y != 1) throw ContractError("find: binary task label " + std::to_string(y));
      return y;
    }
    return v.relabel.at(static_cast<std::size_t>(y));
  };

  const std::size_t N = t.neurons(), TPN = t.tokens * N;
  for (PredictivityView& v : t.views) {
    v.a_bsl.assign(t.trials * TPN, 0.0);
    v.acc.assign(t.trials * TPN, 0.0);
    v.pred.assign(t.trials * TPN, 0.0);
  }
  for (std::size_t tr = 0; tr < t.trials; ++tr) {
    const Matrix& prompts = trials.groups[tr].embeddings;
    // Streaming sum in sample order.
    std::vector<std::vector<double>> sums(t.views.size(), std::vector<double>(TPN, 0.0));
    std::vector<std::size_t> counts(t.views.size(), 0);
    for_each_prompt_trace(w, prompts, data.train, [&](std::size_t first, const ActivationTrace& tr_) {
      for (std::size_t s = 0; s < tr_.batch; ++s) {
        const int y = data.train[first + s].label;
        const double* a = tr_.values.data() + s * TPN;
        for (std::size_t v = 0; v < t.views.size(); ++v) {
          if (view_label(t.views[v], y) < 0) continue;
          ++counts[v];
          double* dst = sums[v].data();
          for (std::size_t i = 0; i < TPN; ++i) dst[i] += a[i];
        }
      }
    });
    for (std::size_t v = 0; v < t.views.size(); ++v) {
      if (counts[v] == 0) throw InputError("find: view '" + t.views[v].name + "' has no training samples");
      double* bsl = t.views[v].a_bsl.data() + tr * TPN;
      for (std::size_t i = 0; i < TPN; ++i) bsl[i] = sums[v][i] / static_cast<double>(counts[v]);
    }
    // Correct-prediction counts on dev.
    std::vector<std::vector<std::uint32_t>> correct(t.views.size(), std::vector<std::uint32_t>(TPN, 0));
    std::vector<std::size_t> dev_counts(t.views.size(), 0);
    for_each_prompt_trace(w, prompts, data.dev, [&](std::size_t first, const ActivationTrace& tr_) {
      for (std::size_t s = 0; s < tr_.batch; ++s) {
        const int y0 = data.dev[first + s].label;
        const double* a = tr_.values.data() + s * TPN;
        for (std::size_t v = 0; v < t.views.size(); ++v) {
          const int y = view_label(t.views[v], y0);
          if (y < 0) continue;
          ++dev_counts[v];
          const double* bsl = t.views[v].a_bsl.data() + tr * TPN;
          std::uint32_t* c = correct[v].data();
          for (std::size_t i = 0; i < TPN; ++i) c[i] += static_cast<std::uint32_t>((a[i] > bsl[i]) == (y == 1));
        }
      }
    });
    for (std::size_t v = 0; v < t.views.size(); ++v) {
      if (dev_counts[v] == 0) throw InputError("find: view '" + t.views[v].name + "' has no dev samples");
      PredictivityView& pv = t.views[v];
      for (std::size_t i = 0; i < TPN; ++i) {
        const double acc = static_cast<double>(correct[v][i]) / static_cast<double>(dev_counts[v]);
        pv.acc[tr * TPN + i] = acc;
        pv.pred[tr * TPN + i] = predictivity(correct[v][i], dev_counts[v], options.polarity);
      }
    }
  }
  for (PredictivityView& v : t.views) detail::finish_view(t, v);
  return t;
}

/// Total neuron order of a task: the ranking of a binary task, or the
/// subtask rankings interleaved round-robin with duplicates skipped.
inline std::vector<std::pair<std::size_t, int>> merged_order(const PredictivityTable& t,
                                                             std::size_t k) {
  std::vector<std::pair<std::size_t, int>> out;
  if (t.views.size() == 1) {
    for (std::size_t i = 0; i < std::min(k, t.views[0].ranking.size()); ++i)
      out.emplace_back(t.views[0].ranking[i], -1);
    return out;
  }
  std::vector<char> taken(t.neurons(), 0);
  std::vector<std::size_t> cursor(t.views.size(), 0);
  while (out.size() < k) {
    bool progressed = false;
    for (std::size_t v = 0; v < t.views.size() && out.size() < k; ++v) {
      const auto& r = t.views[v].ranking;
      while (cursor[v] < r.size() && taken[r[cursor[v]]]) ++cursor[v];
      if (cursor[v] == r.size()) continue;
      taken[r[cursor[v]]] = 1;
      out.emplace_back(r[cursor[v]++], static_cast<int>(v));
      progressed = true;
    }
    if (!progressed) break;
  }
  return out;
}

/// Flat neuron ids of the task's complete predictivity order.
inline std::vector<std::size_t> task_order(const PredictivityTable& t) {
  std::vector<std::size_t> out;
  for (const auto& [n, v] : merged_order(t, t.neurons())) out.push_back(n);
  return out;
}

/// Per-neuron score consistent with task_order: the overall predictivity of
/// a binary task, or minus the merged rank of a multi-class task.
inline std::vector<double> order_scores(const PredictivityTable& t) {
  if (t.views.size() == 1) return t.views[0].overall;
  std::vector<double> s(t.neurons());
  const auto order = task_order(t);
  for (std::size_t r = 0; r < order.size(); ++r) s[order[r]] = -static_cast<double>(r);
  return s;
}

inline SkillNeuronSet select_skill_neurons(const PredictivityTable& t, std::size_t top_k) {
  if (top_k == 0 || top_k > t.neurons())
    throw ConfigError("top_k must be in [1, " + std::to_string(t.neurons()) + "]");
  SkillNeuronSet set;
  set.task = t.task;
  for (const auto& [n, v] : merged_order(t, top_k))
    set.neurons.push_back({t.neuron(n), t.views[v < 0 ? 0 : static_cast<std::size_t>(v)].overall[n], v});
  return set;
}

inline std::pair<PredictivityTable, SkillNeuronSet> find_skill_neurons(
    const ModelWeights& w, const TrialSet& trials, const TaskSpec& task, const Dataset& data,
    std::size_t top_k, const FindOptions& options = {}) {
  if (top_k == 0 || top_k > w.config.neuron_count())
    throw ConfigError("top_k must be in [1, " + std::to_string(w.config.neuron_count()) + "]");
  PredictivityTable t = build_predictivity_table(w, trials, task, data, options);
  SkillNeuronSet s = select_skill_neurons(t, top_k);
  return {std::move(t), std::move(s)};
}

/// Trial with the highest best-token predictivity for a neuron in a view.
inline std::size_t best_trial_of(const PredictivityTable& t, std::size_t view, std::size_t flat) {
  std::size_t best = 0;
  for (std::size_t tr = 1; tr < t.trials; ++tr)
    if (t.views[view].best_pred[tr * t.neurons() + flat] > t.views[view].best_pred[best * t.neurons() + flat])
      best = tr;
  return best;
}

/// Predictivity of one neuron on another split, using the dev-selected best
/// token and training baseline of every trial; averaged over trials.
inline double held_out_predictivity(const ModelWeights& w, const TrialSet& trials,
                                    const PredictivityTable& t, std::size_t view, NeuronId id,
                                    const std::vector<Sample>& samples) {
  const PredictivityView& v = t.views.at(view);
  const std::size_t flat = id.flat(t.width), N = t.neurons(), TPN = t.tokens * N;
  std::vector<int> labels;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int y = v.relabel.empty() ? samples[i].label : v.relabel.at(static_cast<std::size_t>(samples[i].label));
    if (y >= 0) {
      labels.push_back(y);
      keep.push_back(i);
    }
  }
  double sum = 0.0;
  for (std::size_t tr = 0; tr < t.trials; ++tr) {
    const std::size_t p = v.best_token[tr * N + flat];
    std::vector<double> acts(samples.size());
    for_each_prompt_trace(w, trials.groups[tr].embeddings, samples,
                          [&](std::size_t first, const ActivationTrace& trace) {
                            for (std::size_t s = 0; s < trace.batch; ++s)
                              acts[first + s] = trace.values[s * TPN + p * N + flat];
                          });
    std::vector<double> kept;
    for (std::size_t i : keep) kept.push_back(acts[i]);
    sum += predictivity(neuron_accuracy(kept, v.a_bsl[t.cell(tr, p, flat)], labels), t.options.polarity);
  }
  return sum / static_cast<double>(t.trials);
}

// ---------------------------------------------------------------------------
// Logistic-regression probe
// ---------------------------------------------------------------------------

struct ProbeConfig {
  std::size_t iterations = 500;
  double lr = 0.5;
  double l2 = 1e-4;
};

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features. Returns accuracy on the evaluation set.
inline double logistic_probe(const Matrix& x_train, const std::vector<int>& y_train,
                             const Matrix& x_eval, const std::vector<int>& y_eval,
                             std::size_t num_classes, SeededRng& rng, const ProbeConfig& cfg = {}) {
  if (num_classes < 2) throw ContractError("probe needs at least two classes");
  if (x_train.rows() != y_train.size() || x_eval.rows() != y_eval.size() || x_train.cols() != x_eval.cols())
    throw ShapeError("probe: feature/label shapes disagree");
  if (x_train.rows() == 0 || x_eval.rows() == 0) throw InputError("probe: empty split");
  std::set<int> seen;
  for (int y : y_train) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ContractError("probe: label out of range");
    seen.insert(y);
  }
  if (seen.size() < 2) throw ContractError("probe: training split has a single class");

  const std::size_t n = x_train.rows(), f = x_train.cols(), k = num_classes;
  std::vector<double> mean(f, 0.0), scale(f, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) mean[j] += x_train(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) scale[j] += (x_train(i, j) - mean[j]) * (x_train(i, j) - mean[j]);
  for (double& s : scale) s = s > 0.0 ? std::sqrt(static_cast<double>(n) / s) : 1.0;
  auto standardize = [&](const Matrix& x) {
    Matrix z(x.rows(), f);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < f; ++j) z(i, j) = (x(i, j) - mean[j]) * scale[j];
    return z;
  };
  const Matrix zt = standardize(x_train), ze = standardize(x_eval);

  Matrix W(f, k), b(1, k);
  for (double& v : W.values()) v = rng.normal(0.0, 0.01);
  std::vector<std::size_t> targets(y_train.begin(), y_train.end());
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Matrix logits = matmul(zt, W);
    add_row_bias(logits, b);
    Matrix d;
    softmax_cross_entropy(logits, targets, d);
    Matrix gW = matmul_tn(zt, d);
    for (std::size_t i = 0; i < W.size(); ++i) W[i] -= cfg.lr * (gW[i] + cfg.l2 * W[i]);
    Matrix gb(1, k);
    add_column_sums(d, gb);
    for (std::size_t c = 0; c < k; ++c) b[c] -= cfg.lr * gb[c];
  }
  Matrix logits = matmul(ze, W);
  add_row_bias(logits, b);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == y_eval[i];
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

/// One feature per chosen neuron: its activation at the best token of its
/// best trial (within the contributing view).
inline Matrix probe_features(const ModelWeights& w, const TrialSet& trials,
                             const PredictivityTable& t, const SkillNeuronSet& set,
                             const std::vector<Sample>& samples) {
  const std::size_t N = t.neurons(), TPN = t.tokens * N;
  Matrix x(samples.size(), set.neurons.size());
  std::vector<std::vector<std::size_t>> by_trial(t.trials);
  std::vector<std::size_t> token_of(set.neurons.size());
  for (std::size_t j = 0; j < set.neurons.size(); ++j) {
    const std::size_t view = set.neurons[j].subtask < 0 ? 0 : static_cast<std::size_t>(set.neurons[j].subtask);
    const std::size_t flat = set.neurons[j].id.flat(t.width);
    const std::size_t tr = best_trial_of(t, view, flat);
    by_trial[tr].push_back(j);
    token_of[j] = t.views[view].best_token[tr * N + flat];
  }
  for (std::size_t tr = 0; tr < t.trials; ++tr) {
    if (by_trial[tr].empty()) continue;
    for_each_prompt_trace(w, trials.groups[tr].embeddings, samples,
                          [&](std::size_t first, const ActivationTrace& trace) {
                            for (std::size_t s = 0; s < trace.batch; ++s)
                              for (std::size_t j : by_trial[tr])
                                x(first + s, j) = trace.values[s * TPN + token_of[j] * N +
                                                               set.neurons[j].id.flat(t.width)];
                          });
  }
  return x;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Shortest round-trip text of a value at 32-bit precision.
inline std::string f32_text(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, static_cast<float>(v));
  return std::string(buf, r.ptr);
}

inline std::string view_suffix(const PredictivityTable& t, std::size_t v) {
  return t.views.size() == 1 ? std::string() : "_" + t.views[v].name;
}

inline nlohmann::json skill_set_json(const SkillNeuronSet& s) {
  nlohmann::json j;
  j["task"] = s.task;
  j["neurons"] = nlohmann::json::array();
  for (const SkillNeuron& n : s.neurons) {
    nlohmann::json e;
    e["layer"] = n.id.layer;
    e["index"] = n.id.index;
    e["pred"] = std::stod(f32_text(n.pred));
    if (n.subtask >= 0) e["subtask"] = n.subtask;
    j["neurons"].push_back(e);
  }
  return j;
}

inline SkillNeuronSet skill_set_from_json(const nlohmann::json& j) {
  SkillNeuronSet s;
  s.task = j.at("task").get<std::string>();
  for (const auto& e : j.at("neurons"))
    s.neurons.push_back({NeuronId{e.at("layer").get<std::size_t>(), e.at("index").get<std::size_t>()},
                         e.at("pred").get<double>(), e.value("subtask", -1)});
  return s;
}

/// Writes table{suffix}.csv and aggregate{suffix}.csv per view plus
/// table.json holding dimensions, options and exact rankings. Returns the
/// written file names.
inline std::vector<std::string> save_table(const PredictivityTable& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> files;
  const std::size_t N = t.neurons();
  for (std::size_t v = 0; v < t.views.size(); ++v) {
    const PredictivityView& pv = t.views[v];
    const std::string table_name = "table" + view_suffix(t, v) + ".csv";
    std::string out = "layer,index,trial,token,a_bsl,acc,pred\n";
    for (std::size_t n = 0; n < N; ++n) {
      const NeuronId id = t.neuron(n);
      for (std::size_t tr = 0; tr < t.trials; ++tr)
        for (std::size_t p = 0; p < t.tokens; ++p) {
          const std::size_t c = t.cell(tr, p, n);
          out += std::to_string(id.layer) + ',' + std::to_string(id.index) + ',' + std::to_string(tr) + ',' +
                 std::to_string(p) + ',' + f32_text(pv.a_bsl[c]) + ',' + f32_text(pv.acc[c]) + ',' +
                 f32_text(pv.pred[c]) + '\n';
        }
    }
    std::ofstream(dir / table_name, std::ios::binary | std::ios::trunc) << out;
    files.push_back(table_name);
    const std::string agg_name = "aggregate" + view_suffix(t, v) + ".csv";
    std::string agg = "layer,index,pred_overall\n";
    for (std::size_t n = 0; n < N; ++n) {
      const NeuronId id = t.neuron(n);
      agg += std::to_string(id.layer) + ',' + std::to_string(id.index) + ',' + f32_text(pv.overall[n]) + '\n';
    }
    std::ofstream(dir / agg_name, std::ios::binary | std::ios::trunc) << agg;
    files.push_back(agg_name);
  }
  nlohmann::json meta;
  meta["task"] = t.task;
  meta["trials"] = t.trials;
  meta["tokens"] = t.tokens;
  meta["layers"] = t.layers;
  meta["width"] = t.width;
  meta["aggregator"] = aggregator_name(t.options.aggregator);
  meta["polarity"] = polarity_name(t.options.polarity);
  for (const PredictivityView& pv : t.views) {
    nlohmann::json v;
    v["name"] = pv.name;
    v["relabel"] = pv.relabel;
    v["ranking"] = pv.ranking;
    meta["views"].push_back(v);
  }
  std::ofstream(dir / "table.json", std::ios::binary | std::ios::trunc) << meta.dump() << '\n';
  files.push_back("table.json");
  return files;
}

/// Reads a saved table. Values come back at 32-bit precision; rankings are
/// the exact ones computed before rounding.
inline PredictivityTable load_table(const std::filesystem::path& dir) {
  std::ifstream in(dir / "table.json");
  if (!in) throw IoError("cannot open " + (dir / "table.json").string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "table.json").string() + ": " + e.what());
  }
  PredictivityTable t;
  t.task = meta.at("task").get<std::string>();
  t.trials = meta.at("trials").get<std::size_t>();
  t.tokens = meta.at("tokens").get<std::size_t>();
  t.layers = meta.at("layers").get<std::size_t>();
  t.width = meta.at("width").get<std::size_t>();
  t.options.aggregator = parse_aggregator(meta.at("aggregator").get<std::string>());
  t.options.polarity = parse_polarity(meta.at("polarity").get<std::string>());
  for (const auto& v : meta.at("views")) {
    PredictivityView pv;
    pv.name = v.at("name").get<std::string>();
    pv.relabel = v.at("relabel").get<std::vector<int>>();
    pv.ranking = v.at("ranking").get<std::vector<std::size_t>>();
    t.views.push_back(std::move(pv));
  }
  const std::size_t N = t.neurons(), size = t.trials * t.tokens * N;
  for (std::size_t v = 0; v < t.views.size(); ++v) {
    PredictivityView& pv = t.views[v];
    pv.a_bsl.assign(size, 0.0);
    pv.acc.assign(size, 0.0);
    pv.pred.assign(size, 0.0);
    const auto path = dir / ("table" + view_suffix(t, v) + ".csv");
    std::ifstream csv(path);
    if (!csv) throw IoError("cannot open " + path.string());
    std::string line;
    std::getline(csv, line);
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
      std::istringstream ss(line);
      std::string f[7];
      for (auto& x : f)
        if (!std::getline(ss, x, ',')) throw ParseError(path.string() + ": short row " + std::to_string(rows + 2));
      const NeuronId id{std::stoul(f[0]), std::stoul(f[1])};
      if (id.layer >= t.layers || id.index >= t.width) throw ParseError(path.string() + ": neuron out of range");
      const std::size_t c = t.cell(std::stoul(f[2]), std::stoul(f[3]), id.flat(t.width));
      if (c >= size) throw ParseError(path.string() + ": cell out of range");
      pv.a_bsl[c] = std::strtof(f[4].c_str(), nullptr);
      pv.acc[c] = std::strtof(f[5].c_str(), nullptr);
      pv.pred[c] = std::strtof(f[6].c_str(), nullptr);
      ++rows;
    }
    if (rows != size) throw ParseError(path.string() + ": expected " + std::to_string(size) + " rows");
    const auto ranking = pv.ranking;
    detail::finish_view(t, pv);
    pv.ranking = ranking;
  }
  return t;
}

}  // namespace skillprobe
