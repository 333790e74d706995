#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "sdtc/error.hpp"
#include "sdtc/pipeline.hpp"

namespace {

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("sdtc");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("SDTC_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only accept "off" when asked for it.
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
  }
}

int exit_code(const std::string& kind) {
  if (kind == "config") return 2;
  if (kind == "data") return 3;
  if (kind == "io") return 4;
  if (kind == "shape") return 5;
  if (kind == "numeric") return 6;
  return 1;
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Slow-feature assisted temporal capsule network for remaining-useful-life estimation"};
  app.set_version_flag("--version", std::string(sdtc::kVersion));
  app.require_subcommand(1);

  sdtc::RunSpec spec;
  std::string config_path;
  std::size_t epochs = 0;

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"synth", "Generate a synthetic run-to-failure dataset in the C-MAPSS text format"},
      {"fit-features", "Fit normalization and slow features; emit spectrum, ACF and feature dumps"},
      {"train", "Train a model on the fitted features"},
      {"evaluate", "Score the trained model on the test units"},
      {"tune", "Grid search over filters and LSTM units"},
      {"ablate", "Train and score the ablation variants"},
  };
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--data-dir", spec.data_dir, "Dataset directory")->capture_default_str();
    sub->add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", spec.seed, "Master random seed")->capture_default_str();
    sub->add_option("--out", spec.out_dir, "Output directory")->capture_default_str();
    sub->add_option("--jobs", spec.jobs, "Concurrent jobs for tune and ablate")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--set", spec.overrides, "Override a config value: dotted.key=value (repeatable)");
    sub->add_option("--variant", spec.variant, "full, no-sfa, no-lstm, plain-capsnet (ablate also accepts all)");
    sub->add_option("--epochs", epochs, "Override the epoch budget")->check(CLI::PositiveNumber);
    sub->add_flag("--no-clip", spec.no_clip, "Score unclipped predictions");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  for (auto* sub : app.get_subcommands()) spec.command = sub->get_name();
  if (!config_path.empty()) spec.config_path = config_path;
  if (epochs) spec.epochs = epochs;

  try {
    std::filesystem::create_directories(spec.out_dir);
    sdtc::run_command(spec);
  } catch (const sdtc::ConfigError& e) {
    std::string list;
    for (const auto& p : e.problems()) list += (list.empty() ? "" : "; ") + p;
    std::cerr << "error: config: " << one_line(list) << '\n';
    return exit_code("config");
  } catch (const sdtc::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << '\n';
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: io: " << one_line(e.what()) << '\n';
    return exit_code("io");
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}
