// Copyright 2026 The qwdiff Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qwdiff/config.hpp"
#include "qwdiff/pipeline.hpp"

namespace {

using namespace qwdiff;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool serial = false;
  std::vector<std::string> overrides;
};

config::ExperimentConfig resolve(const Options& opt) {
  config::ExperimentConfig cfg;
  if (!opt.config_path.empty()) cfg = config::load(opt.config_path);
  for (const auto& kv : opt.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParameterError("--set expects key=value, got '" + kv + "'");
    config::set(cfg, config::detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.out.empty()) cfg.out = opt.out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Categorical diffusion with quantum-walk forward processes"};
  app.set_version_flag("--version", QWDIFF_VERSION);
  Options opt;
  app.add_option("--config", opt.config_path, "key = value config file");
  app.add_option("--seed", opt.seed, "master seed (overrides the config)");
  app.add_option("--out", opt.out, "output directory (overrides the config)");
  app.add_flag("--serial", opt.serial, "single worker everywhere; reruns are byte-identical");
  app.add_option("--set", opt.overrides, "override one config key, key=value (repeatable)");
  app.require_subcommand(1, 1);
  app.fallthrough();

  using Command = void (*)(const pipeline::Context&);
  const std::vector<std::pair<std::string, std::pair<std::string, Command>>> commands{
      {"kernels", {"per-step forward kernels and KL-from-uniform traces", pipeline::cmd_kernels}},
      {"forward", {"forward trajectories of the dataset and per-step histograms", pipeline::cmd_forward}},
      {"train", {"train the denoiser on the stored trajectories", pipeline::cmd_train}},
      {"generate", {"ancestral sampling from the stored checkpoint", pipeline::cmd_generate}},
      {"evaluate", {"Frechet pixel proxy and histogram KL against the training set", pipeline::cmd_evaluate}},
      {"sweep", {"full pipeline per (omega, repetition) with box statistics", pipeline::cmd_sweep}},
      {"run-all", {"kernels, forward, train, generate and evaluate in order", pipeline::cmd_run_all}},
  };
  std::vector<std::pair<CLI::App*, Command>> stage_apps;
  for (const auto& [name, entry] : commands) stage_apps.emplace_back(app.add_subcommand(name, entry.first), entry.second);
  CLI::App* config_cmd = app.add_subcommand("config", "print the resolved config");
  bool explain = false;
  config_cmd->add_flag("--explain", explain, "list every key with its default and meaning");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (config_cmd->parsed()) {
      if (explain) {
        std::cout << config::explain();
      } else {
        const auto cfg = resolve(opt);
        cfg.validate();
        std::cout << config::to_text(cfg);
      }
      return 0;
    }
    pipeline::Context ctx;
    ctx.cfg = resolve(opt);
    ctx.serial = opt.serial;
    ctx.log = &std::cerr;
    for (const auto& [sub, command] : stage_apps)
      if (sub->parsed()) command(ctx);
    return 0;
  } catch (const Error& e) {
    std::cerr << "qwdiff: error: " << e.what() << "\n";
    return pipeline::exit_code(e.category());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "qwdiff: error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "qwdiff: internal error: " << e.what() << "\n";
    return 1;
  }
}
