#include <gtest/gtest.h>

#include <set>

#include "planted_model.hpp"
#include "skillprobe/analysis.hpp"
#include "skillprobe/skillfind.hpp"
#include "test_support.hpp"

using namespace skillprobe;
namespace planted = skillprobe::testing::planted;

namespace {

TrialSet manual_trials(std::vector<Matrix> prompts) {
  TrialSet ts;
  ts.task = "manual";
  for (auto& p : prompts) {
    ts.groups.push_back({std::move(p), "manual", {}, 0});
    ts.results.emplace_back();
  }
  return ts;
}

/// Random one-layer model with two random prompt groups.
struct SmallSetup {
  ModelWeights w;
  TrialSet trials;
  TaskSpec task;
  Dataset data;
};

SmallSetup small_setup(std::uint64_t seed, std::size_t classes = 2) {
  SmallSetup s;
  ModelConfig c = skillprobe::testing::tiny_config(1);
  c.vocab_size = 64;
  c.max_positions = 40;
  s.w = skillprobe::testing::busy_weights(c, seed);
  s.trials = manual_trials({make_random_prompts(3, c.d, 0.5, seed).embeddings,
                            make_random_prompts(3, c.d, 0.5, seed + 1).embeddings});
  s.task = make_task_spec("small", Family::inference, classes);
  SeededRng rng(seed);
  for (auto* split : {&s.data.train, &s.data.dev, &s.data.test})
    for (int i = 0; i < 90; ++i) {
      std::vector<int> t(4 + rng.below(6));
      for (int& x : t) x = 8 + static_cast<int>(rng.below(56));
      split->push_back({t, static_cast<int>(rng.below(classes))});
    }
  s.data.num_classes = classes;
  return s;
}

/// Naive oracle: baseline, accuracy and predictivity recomputed one
/// (trial, token, neuron) cell at a time from the captured activations.
std::vector<double> naive_pred(const SmallSetup& s, std::size_t trial, std::size_t token, std::size_t neuron,
                               const std::vector<int>& relabel) {
  const std::size_t N = s.w.config.neuron_count(), TPN = s.trials.groups[trial].length() * N;
  const Matrix& prompts = s.trials.groups[trial].embeddings;
  const std::vector<double> train = capture_prompt_activations(s.w, prompts, s.data.train);
  const std::vector<double> dev = capture_prompt_activations(s.w, prompts, s.data.dev);
  auto act = [&](const std::vector<double>& a, std::size_t i) { return a[i * TPN + token * N + neuron]; };
  auto label = [&](int y) { return relabel.empty() ? y : relabel[static_cast<std::size_t>(y)]; };
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.data.train.size(); ++i)
    if (label(s.data.train[i].label) >= 0) {
      sum += act(train, i);
      ++n;
    }
  const double bsl = sum / static_cast<double>(n);
  std::size_t correct = 0, m = 0;
  for (std::size_t i = 0; i < s.data.dev.size(); ++i) {
    const int y = label(s.data.dev[i].label);
    if (y < 0) continue;
    correct += (act(dev, i) > bsl) == (y == 1);
    ++m;
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(m);
  return {bsl, acc, static_cast<double>(std::max(correct, m - correct)) / static_cast<double>(m)};
}

}  // namespace

TEST(Primitives, BaselineActivation) {
  const std::vector<double> c(7, 0.3);
  EXPECT_DOUBLE_EQ(baseline_activation(c), 0.3);
  EXPECT_DOUBLE_EQ(baseline_activation(std::vector<double>{0.2, 0.8}), 0.5);
  SeededRng rng(1);
  std::vector<double> x(1000);
  for (double& v : x) v = rng.normal(0.4, 2.0);
  long double two_pass = 0.0L;
  for (double v : x) two_pass += v;
  EXPECT_NEAR(baseline_activation(x), static_cast<double>(two_pass / 1000.0L), 1e-12);
  EXPECT_THROW(baseline_activation(std::vector<double>{}), InputError);
}

TEST(Primitives, AccuracyAndPredictivity) {
  const std::vector<double> a{0.9, 0.1, 0.8, 0.2};
  EXPECT_DOUBLE_EQ(neuron_accuracy(a, 0.5, std::vector<int>{1, 0, 1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(neuron_accuracy(a, 0.5, std::vector<int>{0, 1, 0, 1}), 0.0);
  // Equality predicts 0.
  EXPECT_DOUBLE_EQ(neuron_accuracy(std::vector<double>(4, 0.5), 0.5, std::vector<int>{0, 1, 1, 1}), 0.25);
  EXPECT_THROW(neuron_accuracy(a, 0.5, std::vector<int>{0, 1, 2, 0}), ContractError);
  EXPECT_DOUBLE_EQ(predictivity(0.3), 0.7);
  EXPECT_DOUBLE_EQ(predictivity(0.5), 0.5);
  EXPECT_DOUBLE_EQ(predictivity(0.3, Polarity::positive_only), 0.3);
  for (double acc = 0.0; acc <= 1.0; acc += 0.05) EXPECT_DOUBLE_EQ(predictivity(acc), 0.5 + std::abs(acc - 0.5));
}

TEST(Primitives, Aggregate) {
  EXPECT_DOUBLE_EQ(aggregate({{0.9}, {0.7}}), 0.8);
  EXPECT_DOUBLE_EQ(aggregate({{0.6, 0.9, 0.55}}), 0.9);
  EXPECT_NEAR(aggregate({{0.6, 0.9, 0.55}}, Aggregator::mean_over_tokens), 2.05 / 3.0, 1e-15);
  EXPECT_THROW(aggregate({}), InputError);
  EXPECT_EQ(parse_aggregator("mean"), Aggregator::mean_over_tokens);
  EXPECT_EQ(parse_polarity("positive"), Polarity::positive_only);
  EXPECT_THROW(parse_polarity("sideways"), ConfigError);
}

TEST(Table, PlantedNeuronRanksFirst) {
  const ModelWeights w = planted::weights();
  const Dataset d = planted::dataset(100, 2);
  const auto trials = manual_trials({planted::prompts(4)});
  const auto [table, set] = find_skill_neurons(w, trials, planted::task(), d, 3);
  ASSERT_EQ(set.neurons.size(), 3u);
  EXPECT_EQ(set.neurons[0].id, (NeuronId{0, 0}));
  EXPECT_DOUBLE_EQ(set.neurons[0].pred, 1.0);
  EXPECT_DOUBLE_EQ(table.views[0].overall[1], 1.0);
  // Dead neurons are constant and sit exactly at the floor.
  for (std::size_t n = 3; n < planted::width; ++n) EXPECT_DOUBLE_EQ(table.views[0].overall[n], 0.5);
  EXPECT_THROW(find_skill_neurons(w, trials, planted::task(), d, 9), ConfigError);
}

TEST(Table, MatchesNaiveOracleBitwise) {
  const SmallSetup s = small_setup(3);
  const PredictivityTable t = build_predictivity_table(s.w, s.trials, s.task, s.data);
  for (std::size_t tr = 0; tr < 2; ++tr)
    for (std::size_t p = 0; p < 3; ++p)
      for (std::size_t n = 0; n < t.width; ++n) {
        const auto oracle = naive_pred(s, tr, p, n, {});
        const std::size_t c = t.cell(tr, p, n);
        // The pipeline sums in the same sample order, so equality is exact.
        EXPECT_EQ(t.views[0].a_bsl[c], oracle[0]) << tr << ' ' << p << ' ' << n;
        EXPECT_EQ(t.views[0].acc[c], oracle[1]);
        EXPECT_EQ(t.views[0].pred[c], oracle[2]);
      }
  // Batched capture agrees with a lone single-sample forward.
  ForwardOptions opt;
  opt.prompts = &s.trials.groups[1].embeddings;
  opt.capture_positions = {2};
  const std::vector<std::vector<int>> one{classification_input(s.data.dev[7].tokens)};
  const double lone = forward(s.w, one, opt).trace->at(0, 0, 0, 5);
  const std::size_t N = s.w.config.neuron_count();
  EXPECT_NEAR(capture_prompt_activations(s.w, s.trials.groups[1].embeddings, s.data.dev)[7 * 3 * N + 2 * N + 5], lone,
              1e-12);
  for (std::size_t n = 0; n < t.width; ++n) {
    std::vector<std::vector<double>> per_trial(2);
    for (std::size_t tr = 0; tr < 2; ++tr)
      for (std::size_t p = 0; p < 3; ++p) per_trial[tr].push_back(t.views[0].pred[t.cell(tr, p, n)]);
    EXPECT_EQ(t.views[0].overall[n], aggregate(per_trial));
  }
}

TEST(Table, InvariantsAndLabelFlip) {
  SmallSetup s = small_setup(4);
  const PredictivityTable t = build_predictivity_table(s.w, s.trials, s.task, s.data);
  for (double p : t.views[0].pred) {
    EXPECT_GE(p, 0.5);
    EXPECT_LE(p, 1.0);
  }
  for (auto* split : {&s.data.train, &s.data.dev, &s.data.test})
    for (Sample& x : *split) x.label = 1 - x.label;
  const PredictivityTable f = build_predictivity_table(s.w, s.trials, s.task, s.data);
  EXPECT_EQ(t.views[0].pred, f.views[0].pred);
  for (std::size_t i = 0; i < t.views[0].acc.size(); ++i) EXPECT_NEAR(f.views[0].acc[i], 1.0 - t.views[0].acc[i], 1e-15);
  EXPECT_EQ(t.views[0].ranking, f.views[0].ranking);
}

TEST(Table, RankingTiesGoToLowerId) {
  const SmallSetup s = small_setup(5);
  const PredictivityTable t = build_predictivity_table(s.w, s.trials, s.task, s.data);
  const auto& v = t.views[0];
  for (std::size_t i = 1; i < v.ranking.size(); ++i) {
    const double a = v.overall[v.ranking[i - 1]], b = v.overall[v.ranking[i]];
    EXPECT_GE(a, b);
    if (a == b) {
      EXPECT_LT(v.ranking[i - 1], v.ranking[i]);
    }
  }
}

TEST(Table, DefaultDefinitionDominatesVariants) {
  const ModelWeights w = planted::weights();
  const Dataset d = planted::dataset(100, 6);
  Matrix other = planted::prompts(4);
  for (double& v : other.values()) v *= 2.0;
  const auto trials = manual_trials({planted::prompts(4), other});
  const auto best = build_predictivity_table(w, trials, planted::task(), d);
  FindOptions weak{Aggregator::mean_over_tokens, Polarity::positive_only};
  const auto variant = build_predictivity_table(w, trials, planted::task(), d, weak);
  const double top_default = best.views[0].overall[best.views[0].ranking[0]];
  const double top_variant = variant.views[0].overall[variant.views[0].ranking[0]];
  EXPECT_GE(top_default, top_variant);
  // Neuron 1 is negatively correlated, so positive-only halves it to zero.
  EXPECT_DOUBLE_EQ(variant.views[0].overall[1], 0.0);
}

TEST(Table, RejectsBadInput) {
  const ModelWeights w = planted::weights();
  Dataset d = planted::dataset(20, 7);
  EXPECT_THROW(build_predictivity_table(w, TrialSet{}, planted::task(), d), InputError);
  const auto trials = manual_trials({planted::prompts(4), planted::prompts(5)});
  EXPECT_THROW(build_predictivity_table(w, trials, planted::task(), d), ShapeError);
  d.dev[0].label = 2;
  EXPECT_THROW(build_predictivity_table(w, manual_trials({planted::prompts(4)}), planted::task(), d),
               ContractError);
}

TEST(MultiClass, EqualSubtaskShares) {
  const SmallSetup s = small_setup(8, 3);
  const PredictivityTable t = build_predictivity_table(s.w, s.trials, s.task, s.data);
  ASSERT_EQ(t.views.size(), 2u);
  // Subtask views use the original prompts on relabeled data.
  const auto oracle = naive_pred(s, 1, 2, 5, t.views[0].relabel);
  EXPECT_EQ(t.views[0].pred[t.cell(1, 2, 5)], oracle[2]);
  const SkillNeuronSet set = select_skill_neurons(t, 10);
  std::set<NeuronId> ids;
  std::size_t per[2] = {0, 0};
  for (const auto& n : set.neurons) {
    EXPECT_TRUE(ids.insert(n.id).second);
    ++per[n.subtask];
  }
  EXPECT_EQ(per[0], 5u);
  EXPECT_EQ(per[1], 5u);
}

TEST(MultiClass, DuplicateRefilledFromSameSubtask) {
  PredictivityTable t;
  t.layers = 1;
  t.width = 6;
  t.views.resize(2);
  t.views[0].ranking = {0, 1, 2, 3, 4, 5};
  t.views[1].ranking = {0, 3, 1, 2, 4, 5};
  const auto m = merged_order(t, 4);
  ASSERT_EQ(m.size(), 4u);
  EXPECT_EQ(m[0], (std::pair<std::size_t, int>{0, 0}));
  EXPECT_EQ(m[1], (std::pair<std::size_t, int>{3, 1}));
  EXPECT_EQ(m[2], (std::pair<std::size_t, int>{1, 0}));
  EXPECT_EQ(m[3], (std::pair<std::size_t, int>{2, 1}));
  EXPECT_EQ(task_order(t).size(), 6u);
}

TEST(MultiClass, PlantedSubtaskNeuronsAndProbe) {
  const ModelWeights w = planted::weights();
  const Dataset d = planted::dataset(150, 9, 3);
  const auto trials = manual_trials({planted::prompts(4)});
  const auto [t, set] = find_skill_neurons(w, trials, planted::task3(), d, 2);
  ASSERT_EQ(set.neurons.size(), 2u);
  EXPECT_EQ(set.neurons[0].id.index, 0u);
  EXPECT_EQ(set.neurons[1].id.index, 2u);
  double max_pred = 0.0;
  for (const auto& n : set.neurons) max_pred = std::max(max_pred, n.pred);
  const Matrix xtr = probe_features(w, trials, t, set, d.train), xte = probe_features(w, trials, t, set, d.test);
  std::vector<int> ytr, yte;
  for (const auto& s : d.train) ytr.push_back(s.label);
  for (const auto& s : d.test) yte.push_back(s.label);
  SeededRng rng(1);
  EXPECT_GE(logistic_probe(xtr, ytr, xte, yte, 3, rng), max_pred - 0.05);
}

TEST(Probe, SeparableShuffledAndDegenerate) {
  SeededRng rng(10);
  Matrix x(200, 1), xe(200, 1);
  std::vector<int> y(200), ye(200);
  for (std::size_t i = 0; i < 200; ++i) {
    y[i] = static_cast<int>(i % 2);
    ye[i] = y[i];
    x(i, 0) = y[i] ? 1.0 + rng.uniform() : -1.0 - rng.uniform();
    xe(i, 0) = ye[i] ? 1.0 + rng.uniform() : -1.0 - rng.uniform();
  }
  EXPECT_DOUBLE_EQ(logistic_probe(x, y, xe, ye, 2, rng), 1.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SeededRng r(seed);
    // Labels carry no information about the feature on either split.
    std::vector<int> shuffled = y, shuffled_e = ye;
    r.shuffle(shuffled);
    r.shuffle(shuffled_e);
    const double acc = logistic_probe(x, shuffled, xe, shuffled_e, 2, r);
    EXPECT_GE(acc, 0.35) << seed;
    EXPECT_LE(acc, 0.65) << seed;
  }
  EXPECT_THROW(logistic_probe(x, std::vector<int>(200, 1), xe, ye, 2, rng), ContractError);
  SeededRng a(3), b(3);
  EXPECT_EQ(logistic_probe(x, y, xe, ye, 2, a), logistic_probe(x, y, xe, ye, 2, b));
}

TEST(Persistence, TableAndSkillSetRoundTrip) {
  const SmallSetup s = small_setup(11, 3);
  const auto [t, set] = find_skill_neurons(s.w, s.trials, s.task, s.data, 6);
  skillprobe::testing::TempDir dir("table");
  const auto files = save_table(t, dir.path());
  EXPECT_EQ(files.size(), 5u);
  {
    std::ifstream in(dir.path() / files[0]);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "layer,index,trial,token,a_bsl,acc,pred");
  }
  const PredictivityTable back = load_table(dir.path());
  ASSERT_EQ(back.views.size(), 2u);
  for (std::size_t v = 0; v < 2; ++v) {
    EXPECT_EQ(back.views[v].ranking, t.views[v].ranking);
    for (std::size_t i = 0; i < t.views[v].pred.size(); ++i)
      EXPECT_EQ(back.views[v].pred[i], static_cast<double>(static_cast<float>(t.views[v].pred[i])));
  }
  const SkillNeuronSet again = skill_set_from_json(skill_set_json(set));
  ASSERT_EQ(again.neurons.size(), set.neurons.size());
  for (std::size_t i = 0; i < set.neurons.size(); ++i) {
    EXPECT_EQ(again.neurons[i].id, set.neurons[i].id);
    EXPECT_EQ(again.neurons[i].subtask, set.neurons[i].subtask);
  }
  EXPECT_THROW(load_table(dir.path() / "nope"), IoError);
}

TEST(Stability, DisjointDevHalvesAgree) {
  const ModelWeights w = planted::weights();
  Dataset a = planted::dataset(500, 12), b = a;
  SeededRng rng(13);
  b.dev = planted::samples(500, rng);
  const auto trials = manual_trials({planted::prompts(4)});
  const auto ta = build_predictivity_table(w, trials, planted::task(), a);
  const auto tb = build_predictivity_table(w, trials, planted::task(), b);
  EXPECT_GT(spearman(ta.views[0].overall, tb.views[0].overall), 0.0);
}
