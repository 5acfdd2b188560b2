#include <exception>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "robustcam/commands.hpp"
#include "robustcam/config.hpp"
#include "robustcam/errors.hpp"

namespace {

int fail(int code, const std::string& kind, const std::string& message) {
  std::string flat = message;
  for (char& c : flat) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << "error code=" << code << " kind=" << kind << " message=" << flat << "\n";
  return code;
}

// Leftover arguments are `--dotted.key value` pairs.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string key = extras[i];
    if (key.rfind("--", 0) != 0 || key.size() == 2) {
      throw robustcam::ConfigError("unexpected argument '" + key + "'");
    }
    key = key.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw robustcam::ConfigError("override --" + key + " is missing a value");
      value = extras[++i];
    }
    out.emplace_back(key, value);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust CAM toolkit: synthetic data, clean and adversarially robust training, "
               "attacks, localization evaluation and visualization.\n"
               "Any config field can be overridden with --<dotted.key> <value>, e.g. --attack.epsilon 0.01"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string threads;
  std::string epsilon;
  std::vector<std::string> ids;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    std::string("JSON config file (relative names are also looked up in $") + robustcam::kConfigDirEnv +
                        ")");
    sub->add_option("--threads", threads, "worker threads for data generation and evaluation");
    sub->allow_extras();
    return sub;
  };
  auto* gen = add_common(app.add_subcommand("generate-data", "generate the synthetic dataset and manifest"));
  auto* tr = add_common(app.add_subcommand("train", "train the clean baseline"));
  auto* trr = add_common(app.add_subcommand("train-robust", "warm start, then adversarially robust training"));
  auto* att = add_common(app.add_subcommand("attack", "FGSM examples and per-example loss changes for a checkpoint"));
  att->add_option("--epsilon", epsilon, "attack budget (same as --attack.epsilon)");
  att->add_option("--ids", ids, "sample ids to attack (default: the test split)")->delimiter(',');
  auto* ev = add_common(app.add_subcommand("evaluate", "AUC table and localization report for a checkpoint"));
  auto* vis = add_common(app.add_subcommand("visualize", "CAM overlays and saliency maps for listed samples"));
  vis->add_option("--ids", ids, "sample ids to render")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "config", e.what());
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    auto overrides = parse_overrides(sub->remaining());
    if (!threads.empty()) overrides.emplace_back("threads", threads);
    if (!epsilon.empty()) overrides.emplace_back("attack.epsilon", epsilon);
    const robustcam::RunConfig cfg = robustcam::load_config(config_path, overrides);
    namespace cmd = robustcam::commands;
    if (sub == gen) cmd::generate_data(cfg);
    else if (sub == tr) cmd::train(cfg);
    else if (sub == trr) cmd::train_robust(cfg);
    else if (sub == att) cmd::attack(cfg, ids);
    else if (sub == ev) cmd::evaluate(cfg);
    else if (sub == vis) cmd::visualize(cfg, ids);
  } catch (const robustcam::Error& e) {
    return fail(e.exit_code(), e.kind(), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(3, "data", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
  return 0;
}
