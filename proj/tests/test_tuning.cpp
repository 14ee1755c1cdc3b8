#include <gtest/gtest.h>

#include "planted_model.hpp"
#include "skillprobe/tuning.hpp"
#include "test_support.hpp"

using namespace skillprobe;
namespace planted = skillprobe::testing::planted;

namespace {

TuneConfig quick_config() {
  TuneConfig c;
  c.lr = 0.1;
  c.eval_interval = 20;
  c.max_steps = 400;
  c.prompt_len = 4;
  return c;
}

/// Planted model whose FFN output is shifted so far toward "positive" that
/// every sample gets that answer.
ModelWeights biased_planted() {
  ModelWeights w = planted::weights();
  w.layers[0].ffn_b2[0] = 12.0;
  return w;
}

std::vector<std::string> changed_tensors(const ModelWeights& a, const ModelWeights& b) {
  std::vector<const Matrix*> tb;
  visit_tensors(b, [&](const std::string&, const Matrix& m, bool) { tb.push_back(&m); });
  std::vector<std::string> out;
  std::size_t i = 0;
  visit_tensors(a, [&](const std::string& name, const Matrix& m, bool) {
    if (!(m == *tb[i++])) out.push_back(name);
  });
  return out;
}

}  // namespace

TEST(Prompts, RandomAndHard) {
  const PromptGroup a = make_random_prompts(5, 8, 0.03, 4), b = make_random_prompts(5, 8, 0.03, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, make_random_prompts(5, 8, 0.03, 5));
  double sq = 0.0;
  const PromptGroup big = make_random_prompts(100, 64, 0.03, 1);
  for (double v : big.embeddings.values()) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(big.embeddings.size())), 0.03, 0.002);

  const ModelWeights w = planted::weights();
  const PromptGroup h = make_hard_prompt({planted::cue_pos, 3, planted::positive}, w.token_embedding);
  ASSERT_EQ(h.length(), 3u);
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_EQ(h.embeddings(0, c), w.token_embedding(planted::cue_pos, c));
    EXPECT_EQ(h.embeddings(2, c), w.token_embedding(planted::positive, c));
  }
  EXPECT_EQ(h.provenance, "hard");
  EXPECT_THROW(make_hard_prompt({16}, w.token_embedding), VocabError);
  EXPECT_THROW(make_hard_prompt({-1}, w.token_embedding), VocabError);
}

TEST(Evaluate, PlantedModelIsPerfectAndPure) {
  const ModelWeights w = planted::weights();
  const Dataset d = planted::dataset(100, 1);
  const Matrix p = planted::prompts(4);
  const double acc = evaluate(w, &p, nullptr, planted::task(), d, Split::test);
  EXPECT_DOUBLE_EQ(acc, 1.0);
  EXPECT_EQ(acc, evaluate(w, &p, nullptr, planted::task(), d, Split::test));
  // Swapping the verbalizer alone inverts every prediction.
  TaskSpec swapped = planted::task();
  std::swap(swapped.verbalizer[0], swapped.verbalizer[1]);
  EXPECT_DOUBLE_EQ(evaluate(w, &p, nullptr, swapped, d, Split::test), 0.0);
}

TEST(Evaluate, RelabelingInvariance) {
  SeededRng rng(2);
  const ModelConfig c = skillprobe::testing::tiny_config();
  const ModelWeights w = skillprobe::testing::busy_weights(c, 2);
  Dataset d;
  for (int i = 0; i < 120; ++i) {
    std::vector<int> t(5);
    for (int& x : t) x = 8 + static_cast<int>(rng.below(30));
    d.test.push_back({t, static_cast<int>(rng.below(3))});
  }
  TaskSpec t = make_task_spec("t", Family::inference, 3);
  t.verbalizer = {10, 11, 12};
  const double base = evaluate(w, nullptr, nullptr, t, d, Split::test);
  // permutation label -> (label + 1) % 3 applied to both sides
  TaskSpec tp = t;
  Dataset dp = d;
  for (int k = 0; k < 3; ++k) tp.verbalizer[(k + 1) % 3] = t.verbalizer[k];
  for (Sample& s : dp.test) s.label = (s.label + 1) % 3;
  EXPECT_DOUBLE_EQ(evaluate(w, nullptr, nullptr, tp, dp, Split::test), base);
}

TEST(Evaluate, RandomModelIsNearChance) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SeededRng rng(seed);
    const ModelWeights w = init_weights(ModelConfig{}, rng);
    auto [task, d] = gen_synthetic_task(Family::polarity, 2, 600, 512, rng, 0.0);
    const Matrix p = make_random_prompts(16, 64, 0.03, seed).embeddings;
    const double acc = evaluate(w, &p, nullptr, task, d, Split::test);
    EXPECT_GE(acc, 0.35) << seed;
    EXPECT_LE(acc, 0.65) << seed;
  }
}

TEST(Evaluate, EmptySplitRejected) {
  const ModelWeights w = planted::weights();
  Dataset d = planted::dataset(10, 1);
  d.test.clear();
  EXPECT_THROW(evaluate(w, nullptr, nullptr, planted::task(), d, Split::test), InputError);
}

TEST(PromptTune, LearnsPlantedTaskAndFreezesModel) {
  const ModelWeights w = planted::weights();
  const ModelWeights before = w;
  const Dataset d = planted::dataset(100, 3);
  const auto [p, r] = prompt_tune(w, planted::task(), d, quick_config(), 7);
  EXPECT_TRUE(w == before);
  EXPECT_GE(r.best_dev, 0.95);
  EXPECT_EQ(p.provenance, "tuned");
  EXPECT_EQ(p.length(), 4u);
  // The returned checkpoint is the best evaluated one.
  double best = 0.0;
  for (const auto& [step, acc] : r.dev_curve) best = std::max(best, acc);
  EXPECT_EQ(r.best_dev, best);
  EXPECT_EQ(evaluate(w, &p.embeddings, nullptr, planted::task(), d, Split::dev), r.best_dev);

  const auto [p2, r2] = prompt_tune(w, planted::task(), d, quick_config(), 7);
  EXPECT_EQ(p, p2);
  EXPECT_EQ(r.dev_curve, r2.dev_curve);
}

TEST(PromptTune, BeatsRandomPrompts) {
  const ModelWeights w = biased_planted();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Dataset d = planted::dataset(60, 10 + seed);
    TuneConfig c = quick_config();
    c.prompt_init_std = 0.03;
    const auto [p, r] = prompt_tune(w, planted::task(), d, c, seed);
    const Matrix random = make_random_prompts(4, 8, 0.03, seed).embeddings;
    EXPECT_LE(evaluate(w, &random, nullptr, planted::task(), d, Split::test),
              evaluate(w, &p.embeddings, nullptr, planted::task(), d, Split::test));
  }
}

TEST(PromptTune, WarningWhenNothingImproves) {
  // Already perfect at step 0, so no later checkpoint can improve on it.
  const ModelWeights w = planted::weights();
  const Dataset d = planted::dataset(40, 4);
  TuneConfig c = quick_config();
  c.lr = 1e-9;
  c.patience = 2;
  const auto [p, r] = prompt_tune(w, planted::task(), d, c, 1);
  if (r.dev_curve.front().second == 1.0) {
    EXPECT_TRUE(r.warning);
    EXPECT_EQ(r.best_step, 0u);
    EXPECT_EQ(r.steps_run, 2 * c.eval_interval);
    PromptGroup initial = make_random_prompts(4, 8, 0.03, 1);
    initial.provenance = "tuned";
    EXPECT_EQ(p, initial);
  }
  TuneConfig bad = c;
  bad.patience = 0;
  EXPECT_THROW(prompt_tune(w, planted::task(), d, bad, 1), ConfigError);
}

TEST(BitFit, TouchesOnlyBiases) {
  const ModelWeights w = biased_planted();
  const Dataset d = planted::dataset(100, 5);
  EXPECT_DOUBLE_EQ(evaluate(w, nullptr, nullptr, planted::task(), d, Split::dev), 0.5);
  const auto [tuned, r] = bitfit_tune(w, planted::task(), d, quick_config(), 3);
  EXPECT_GE(r.best_dev, 0.9);
  bool b2_moved = false;
  std::vector<std::string> biases;
  visit_tensors(w, [&](const std::string& name, const Matrix&, bool is_bias) {
    if (is_bias) biases.push_back(name);
  });
  for (const auto& name : changed_tensors(w, tuned)) {
    EXPECT_NE(std::find(biases.begin(), biases.end(), name), biases.end()) << name;
    b2_moved |= name.find("ffn_b2") != std::string::npos;
  }
  EXPECT_TRUE(b2_moved);
}

TEST(Adapters, IdentityAtInitAndFrozenBackbone) {
  const ModelWeights w = biased_planted();
  const ModelWeights before = w;
  const Dataset d = planted::dataset(100, 6);
  SeededRng rng(1);
  const AdapterParams a0 = init_adapters(w.config, 4, rng);
  const std::vector<int> plain = predict(w, Assembly{}, planted::task().verbalizer, d.dev);
  EXPECT_EQ(predict(w, Assembly{nullptr, &a0, nullptr}, planted::task().verbalizer, d.dev), plain);
  const auto [a, r] = adapter_tune(w, a0, planted::task(), d, quick_config(), 2);
  EXPECT_TRUE(w == before);
  EXPECT_GE(r.best_dev, 0.9);
  EXPECT_FALSE(a == a0);
  SeededRng rng2(1);
  AdapterParams wrong = init_adapters(skillprobe::testing::tiny_config(2), 4, rng2);
  EXPECT_THROW(adapter_tune(w, wrong, planted::task(), d, quick_config(), 2), ShapeError);
}

TEST(Trials, SeedsDifferAndFilesRoundTrip) {
  const ModelWeights w = planted::weights();
  const Dataset d = planted::dataset(40, 7);
  TuneConfig c = quick_config();
  c.max_steps = 40;
  const TrialSet set = tune_trials(w, planted::task(), d, c, 3, 42);
  ASSERT_EQ(set.size(), 3u);
  EXPECT_NE(set.groups[0], set.groups[1]);
  EXPECT_NE(trial_seed(42, "a", 0), trial_seed(42, "b", 0));
  EXPECT_NE(trial_seed(42, "a", 0), trial_seed(42, "a", 1));
  EXPECT_EQ(set.groups[1].seed, trial_seed(42, "planted", 1));

  skillprobe::testing::TempDir dir("trials");
  save_trials(set, dir.path() / "ts");
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "ts" / "trial_2" / "prompts.bin"));
  const TrialSet back = load_trials(dir.path() / "ts");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(back.groups[k], round_to_storage(set.groups[k]));
    EXPECT_EQ(back.results[k].dev_curve, set.results[k].dev_curve);
  }
  EXPECT_EQ(back.best_trial(), set.best_trial());
  EXPECT_THROW(load_trials(dir.path() / "missing"), IoError);
}

TEST(Trials, HardPromptRoundTrip) {
  skillprobe::testing::TempDir dir("hard");
  const ModelWeights w = planted::weights();
  const PromptGroup h = make_hard_prompt({planted::negative, planted::positive, 3}, w.token_embedding);
  save_prompts(h, dir.path() / "h.bin");
  const PromptGroup back = load_prompts(dir.path() / "h.bin");
  EXPECT_EQ(back, round_to_storage(h));
  EXPECT_EQ(back.hard_tokens, h.hard_tokens);
  std::ofstream(dir.path() / "bad.bin") << "no header";
  EXPECT_THROW(load_prompts(dir.path() / "bad.bin"), FormatError);
}
