#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "skillprobe/experiment.hpp"
#include "test_support.hpp"

using namespace skillprobe;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# small enough for a unit test
seed = 3
model.layers = 2
model.d = 16
model.d_m = 32
model.heads = 2
model.vocab = 256
pretrain.steps = 40
pretrain.corpus = 300
tasks.size = 120
tune.trials = 2
tune.max_steps = 30
tune.eval_interval = 10
tune.prompt_len = 4
tune.lr = 0.01
find.top_k = 4
perturb.fractions = 0, 0.5, 1
perturb.trials = 2
perturb.sigma = 5
perturb.regimes = prompt, adapter
words.k = 5
bench.batch = 2
bench.seq_len = 6
bench.prompt_len = 4
prune.keep = 0.25
)";

struct CliRun {
  int code = -1;
  std::string output;
};

/// Runs the CLI with stderr folded into the captured output.
CliRun cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + SKILLPROBE_CLI_PATH + " " + args + " 2>&1";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) r.output += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::set<std::string> tree(const fs::path& root) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.insert(fs::relative(e.path(), root).generic_string());
  return out;
}

fs::path write_config(const skillprobe::testing::TempDir& dir) {
  const fs::path p = dir.path() / "tiny.cfg";
  std::ofstream(p) << kTinyConfig;
  return p;
}

}  // namespace

TEST(Config, ParsesCommentsAndOverrides) {
  const ExperimentConfig c = parse_config("seed = 7  # trailing\n\n  model.layers=3\nperturb.fractions = 0, .5 ,1\n"
                                          "find.polarity = positive\nprune.first_layer = 1\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.model.num_layers, 3u);
  EXPECT_EQ(c.perturb.fractions, (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_EQ(c.find.polarity, Polarity::positive_only);
  EXPECT_EQ(c.prune.first_layer, std::optional<std::size_t>(1));
  EXPECT_FALSE(c.prune.last_layer.has_value());

  EXPECT_THROW(parse_config("nonsense\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("tune.lr = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("model.activation = tanh\n"), ConfigError);
  EXPECT_THROW(parse_config("task.x.colour = red\n"), ConfigError);
}

TEST(Config, CanonicalTextRoundTripsAndHashes) {
  ExperimentConfig c = parse_config(kTinyConfig);
  c.set("tune.lr", "0.1");
  c.set("perturb.sigma", "0.30000000000000004");
  const std::string text = c.canonical();
  EXPECT_EQ(parse_config(text).canonical(), text);
  EXPECT_NE(text.find("perturb.sigma = 0.30000000000000004\n"), std::string::npos);
  EXPECT_EQ(text.find("\nout ="), std::string::npos);

  ExperimentConfig moved = c;
  moved.out = "elsewhere";
  EXPECT_EQ(fnv1a(moved.canonical()), fnv1a(text));
  c.set("seed", "4");
  EXPECT_NE(fnv1a(c.canonical()), fnv1a(text));
  // FNV-1a 64 reference values.
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Config, ValidationCatchesMissingFilesAndBadTasks) {
  ExperimentConfig c;
  c.validate();
  ExperimentConfig f = c;
  f.set("task.mine.file", "/nonexistent/data.jsonl");
  EXPECT_THROW(f.validate(), ConfigError);
  ExperimentConfig r = c;
  r.set("perturb.regimes", "bitfit");
  EXPECT_THROW(r.validate(), ConfigError);
  ExperimentConfig k = c;
  k.set("find.top_k", "100000");
  EXPECT_THROW(k.validate(), ConfigError);
  ExperimentConfig n = c;
  n.set("tasks.suite", "false");
  EXPECT_THROW(n.validate(), ConfigError);
}

TEST(Cli, OutputDirectoryPrecedence) {
  skillprobe::testing::TempDir dir("cli_prec");
  const fs::path cfg = dir.path() / "o.cfg";
  std::ofstream(cfg) << "out = from_file\n";
  auto out_line = [](const CliRun& r) { return r.output.substr(0, r.output.find('\n')); };
  EXPECT_EQ(out_line(cli("show-config --config " + cfg.string())), "out = from_file");
  EXPECT_EQ(out_line(cli("show-config --config " + cfg.string() + " --set out=from_set")), "out = from_set");
  EXPECT_EQ(out_line(cli("show-config --config " + cfg.string() + " --set out=from_set", "SKILLPROBE_OUT=from_env")),
            "out = from_env");
  EXPECT_EQ(out_line(cli("show-config --config " + cfg.string() + " --out from_flag", "SKILLPROBE_OUT=from_env")),
            "out = from_flag");
}

TEST(Cli, ExitCodes) {
  skillprobe::testing::TempDir dir("cli_codes");
  const fs::path cfg = write_config(dir);
  const std::string out = (dir.path() / "run").string();

  const CliRun bad_key = cli("show-config --set no.such.key=1");
  EXPECT_EQ(bad_key.code, 2);
  EXPECT_NE(bad_key.output.find("no.such.key"), std::string::npos);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("pretrain --config /nonexistent.cfg").code, 2);

  // Validation fails before anything is written.
  EXPECT_EQ(cli("pretrain --config " + cfg.string() + " --set model.heads=5 --out " + out).code, 2);
  EXPECT_FALSE(fs::exists(out));

  ASSERT_EQ(cli("pretrain --config " + cfg.string() + " --out " + out).code, 0);
  const CliRun early = cli("find --config " + cfg.string() + " --out " + out);
  EXPECT_EQ(early.code, 2);
  EXPECT_NE(early.output.find("cmd_tune"), std::string::npos) << early.output;
  EXPECT_EQ(cli("correlate --config " + cfg.string() + " --out " + out).code, 2);

  // A corrupt upstream artifact is a runtime failure.
  std::ofstream(fs::path(out) / "model" / "weights.bin", std::ios::trunc) << "garbage";
  EXPECT_EQ(cli("tune --config " + cfg.string() + " --out " + out).code, 1);
}

TEST(Cli, FullPipelineIsCompleteListedAndDeterministic) {
  skillprobe::testing::TempDir dir("cli_all");
  const fs::path cfg = write_config(dir);
  const fs::path a = dir.path() / "a", b = dir.path() / "b";
  const CliRun ra = cli("all --config " + cfg.string() + " --out " + a.string());
  ASSERT_EQ(ra.code, 0) << ra.output;
  ASSERT_EQ(cli("all --config " + cfg.string(), "SKILLPROBE_OUT=" + b.string()).code, 0);

  // Every file on disk is listed in the manifest, and every listed file exists.
  const nlohmann::json m = nlohmann::json::parse(slurp(a / "manifest.json"));
  std::set<std::string> listed;
  for (const auto& f : m["meta_files"]) listed.insert(f.get<std::string>());
  for (const auto& [stage, entry] : m["stages"].items()) {
    EXPECT_FALSE(entry["finished_at"].get<std::string>().empty()) << stage;
    for (const auto& f : entry["files"]) listed.insert(f.get<std::string>());
  }
  EXPECT_EQ(m["stages"].size(), commands().size());
  EXPECT_EQ(listed, tree(a));

  // The hash covers the stored config byte for byte.
  EXPECT_EQ(m["config_hash"], "fnv1a64:" + hex64(fnv1a(slurp(a / "config.txt"))));
  EXPECT_EQ(m["tool"]["version"], kToolVersion);

  const nlohmann::json s = nlohmann::json::parse(slurp(a / "report" / "summary.json"));
  for (const char* key : {"accuracy_table", "perturbation_curves", "task_matrices", "baseline_table", "prune_table"})
    EXPECT_TRUE(s.contains(key)) << key;
  EXPECT_EQ(s["accuracy_table"].size(), 4u);
  EXPECT_TRUE(s["perturbation_curves"].contains("adapter"));

  // Primary outputs are byte-identical; only timing and the manifest's
  // timestamps may differ.
  ASSERT_EQ(tree(a), tree(b));
  for (const std::string& f : tree(a)) {
    if (f == "timing.json" || f == "manifest.json") continue;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  nlohmann::json ma = m, mb = nlohmann::json::parse(slurp(b / "manifest.json"));
  for (auto* x : {&ma, &mb})
    for (auto& [stage, entry] : (*x)["stages"].items()) entry.erase("finished_at");
  EXPECT_EQ(ma, mb);
  const nlohmann::json t = nlohmann::json::parse(slurp(a / "timing.json"));
  EXPECT_GT(t["bench"]["full_median_seconds"].get<double>(), 0.0);
}

TEST(Cli, StageRerunReplacesItsOwnFiles) {
  skillprobe::testing::TempDir dir("cli_rerun");
  const fs::path cfg = write_config(dir);
  const fs::path out = dir.path() / "r";
  const std::string base = " --config " + cfg.string() + " --out " + out.string();
  ASSERT_EQ(cli("pretrain" + base).code, 0);
  ASSERT_EQ(cli("tune" + base).code, 0);
  ASSERT_EQ(cli("tune" + base + " --set tune.trials=1").code, 0);
  EXPECT_FALSE(fs::exists(out / "tasks" / "polarity-short" / "trials" / "trial_1"));
  const nlohmann::json m = nlohmann::json::parse(slurp(out / "manifest.json"));
  std::set<std::string> listed;
  for (const auto& f : m["meta_files"]) listed.insert(f.get<std::string>());
  for (const auto& [stage, entry] : m["stages"].items())
    for (const auto& f : entry["files"]) listed.insert(f.get<std::string>());
  EXPECT_EQ(listed, tree(out));
}
