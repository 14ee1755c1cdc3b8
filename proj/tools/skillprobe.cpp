// skillprobe command-line entry point.
//
//   skillprobe <command> [--config FILE] [--set key=value]... [--out DIR]
//
// Output directory precedence: config file < --set < $SKILLPROBE_OUT < --out.
// Exit status: 0 success, 1 runtime failure, 2 bad config, usage or
// missing upstream stage.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "skillprobe/experiment.hpp"

namespace {

struct Args {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

skillprobe::ExperimentConfig resolve(const Args& a) {
  skillprobe::ExperimentConfig cfg = a.config.empty() ? skillprobe::ExperimentConfig{} : skillprobe::load_config(a.config);
  for (const std::string& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw skillprobe::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(skillprobe::trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  if (const char* env = std::getenv("SKILLPROBE_OUT"); env && *env) cfg.out = env;
  if (!a.out.empty()) cfg.out = a.out;
  return cfg;
}

void add_common(CLI::App* cmd, Args& a) {
  cmd->add_option("--config", a.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", a.sets, "override one config key (key=value), repeatable");
  cmd->add_option("--out", a.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skillprobe: skill neurons in prompt-tuned transformers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", skillprobe::kToolVersion);

  Args args;
  std::string chosen;
  for (const auto& [name, fn] : skillprobe::commands()) {
    auto* cmd = app.add_subcommand(name, "run the " + name + " stage");
    add_common(cmd, args);
    cmd->callback([&chosen, n = name] { chosen = n; });
  }
  auto* all = app.add_subcommand("all", "run every stage in order");
  add_common(all, args);
  all->callback([&chosen] { chosen = "all"; });
  auto* show = app.add_subcommand("show-config", "print the resolved config");
  add_common(show, args);
  show->callback([&chosen] { chosen = "show-config"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const skillprobe::ExperimentConfig cfg = resolve(args);
    if (chosen == "show-config") {
      cfg.validate();
      std::cout << "out = " << cfg.out.string() << "\n" << cfg.canonical();
      return 0;
    }
    for (const auto& [name, fn] : skillprobe::commands()) {
      if (chosen != "all" && chosen != name) continue;
      std::fprintf(stderr, "[skillprobe] %s\n", name.c_str());
      fn(cfg);
    }
    return 0;
  } catch (const skillprobe::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const skillprobe::DependencyError& e) {
    std::fprintf(stderr, "dependency error: %s\n", e.what());
    return 2;
  } catch (const skillprobe::ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
