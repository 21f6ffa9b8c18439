#include <iostream>

#include "CLI11.hpp"
#include "gilab/cli.hpp"

namespace gilab::cli {

int main_entry(int argc, char** argv) {
  // Dotted flags (--attack.T 100, --attack.T=100) are config overrides;
  // everything else goes to the regular parser.
  std::vector<Override> overrides;
  std::vector<std::string> rest;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg.rfind("--", 0) == 0) {
      const auto eq = arg.find('=');
      const auto key = arg.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
      if (key.find('.') != std::string::npos) {
        if (eq != std::string::npos) {
          overrides.emplace_back(key, arg.substr(eq + 1));
        } else if (i + 1 < argc) {
          overrides.emplace_back(key, argv[++i]);
        } else {
          std::cerr << "gilab: override --" << key << " needs a value\n";
          return 2;
        }
        continue;
      }
    }
    rest.push_back(arg);
  }

  CLI::App app{"gilab: gradient inversion lab (train-probe, collect, train-denoiser, attack, guide, report)"};
  app.footer("Config overrides: --<dotted.path> <value>, e.g. --attack.T 200 --defense.topk_keep 0.05");
  std::string command;
  RunOptions opts;
  std::uint64_t seed = 0;
  app.add_option("command", command, "command to run")->required()->check(CLI::IsMember(kCommands));
  app.add_option("--config", opts.config, "experiment TOML file")->required();
  app.add_option("--threads", opts.threads, "worker threads (1 = deterministic mode)")
      ->capture_default_str();
  auto* seed_opt = app.add_option("--seed", seed, "master seed, overrides the config's seed");
  try {
    std::reverse(rest.begin(), rest.end());
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (*seed_opt) opts.seed = seed;
  opts.overrides = std::move(overrides);
  return run_command(command, opts, std::cerr);
}

}  // namespace gilab::cli
