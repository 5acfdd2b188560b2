#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "robustcam/adversarial.hpp"
#include "robustcam/checkpoint.hpp"
#include "robustcam/data.hpp"
#include "robustcam/errors.hpp"
#include "robustcam/evaluation.hpp"
#include "robustcam/model.hpp"
#include "robustcam/objective.hpp"

namespace robustcam {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr const char* kConfigDirEnv = "ROBUSTCAM_CONFIG_DIR";

struct PathsConfig {
  std::string data_dir = "data";
  std::string out_dir = "runs/default";
  std::string checkpoint;       // empty: <out_dir>/model.ckpt
  std::string init_checkpoint;  // train-robust: start phase 2 from this model

  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(out_dir) / "model.ckpt" : std::filesystem::path(checkpoint);
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  GenerateConfig data;
  SplitRatios split;
  ModelArch model;
  RobustTrainConfig train;
  AttackConfig attack;
  std::vector<double> epsilon_sweep{0.001, 0.005, 0.01, 0.05};
  EvalConfig eval;
  std::size_t eval_batch_size = 64;
  PathsConfig paths;

  void validate() const {
    if (threads == 0) throw ConfigError("threads must be >= 1");
    data.validate();
    model.validate();
    if (model.input_height != data.image_size || model.input_width != data.image_size) {
      throw ConfigError("model input size must equal data.image_size");
    }
    if (model.num_classes != data.n_classes) throw ConfigError("model.num_classes must equal data.n_classes");
    train.validate();
    attack.validate();
    for (double e : epsilon_sweep) AttackConfig{e, attack.clamp_to_valid_range}.validate();
    eval.validate();
    if (eval_batch_size == 0) throw ConfigError("eval.batch_size must be >= 1");
  }
};

inline const char* beta_mode_name(BetaPolicy::Mode m) {
  return m == BetaPolicy::Mode::per_class ? "per_class" : "batch_global";
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["data"] = {{"n_samples", c.data.n_samples},
               {"image_size", c.data.image_size},
               {"n_classes", c.data.n_classes},
               {"noise_level", c.data.noise_level},
               {"background", c.data.background},
               {"class_probability", c.data.probabilities()},
               {"min_shape_size", c.data.min_shape_size},
               {"max_shape_size", c.data.max_shape_size},
               {"min_intensity", c.data.min_intensity},
               {"max_intensity", c.data.max_intensity},
               {"split", {{"train", c.split.train}, {"validation", c.split.validation}, {"test", c.split.test}}}};
  j["model"] = arch_to_json(c.model);
  j["train"] = {{"lr", c.train.lr},
                {"momentum", c.train.momentum},
                {"batch_size", c.train.batch_size},
                {"perturb_fraction", c.train.perturb_fraction},
                {"warm_start", c.train.warm_start},
                {"patience", c.train.patience},
                {"max_epochs", c.train.max_epochs}};
  j["beta"] = {{"mode", beta_mode_name(c.train.beta.mode)},
               {"cap", c.train.beta.cap},
               {"zero_positive_fallback", c.train.beta.zero_positive_fallback}};
  j["attack"] = {{"epsilon", c.attack.epsilon},
                 {"clamp_to_valid_range", c.attack.clamp_to_valid_range},
                 {"epsilon_sweep", c.epsilon_sweep}};
  j["eval"] = {{"folds", c.eval.folds},
               {"threshold_grid", c.eval.threshold_grid},
               {"iou_grid", c.eval.iou_grid},
               {"selection_iou", c.eval.selection_iou},
               {"batch_size", c.eval_batch_size}};
  j["paths"] = {{"data_dir", c.paths.data_dir},
                {"out_dir", c.paths.out_dir},
                {"checkpoint", c.paths.checkpoint},
                {"init_checkpoint", c.paths.init_checkpoint}};
  return j;
}

namespace detail {

// Calls fn(key, value) for each member of section, rejecting keys not in
// `allowed`.
template <typename Fn>
void for_each_key(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> allowed,
                  Fn&& fn) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(section + ": unknown key '" + key + "'");
    fn(key, value);
  }
}

}  // namespace detail

// Keys absent from j keep their defaults.
inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    detail::for_each_key(j, "config", {"seed", "threads", "data", "model", "train", "beta", "attack", "eval", "paths"},
                         [&](const std::string& k, const nlohmann::json& v) {
      if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "threads") c.threads = v.get<std::size_t>();
      else if (k == "model") c.model = arch_from_json(v);
      else if (k == "data") {
        detail::for_each_key(v, "data",
                             {"n_samples", "image_size", "n_classes", "noise_level", "background", "class_probability",
                              "min_shape_size", "max_shape_size", "min_intensity", "max_intensity", "split"},
                             [&](const std::string& dk, const nlohmann::json& dv) {
          auto& d = c.data;
          if (dk == "n_samples") d.n_samples = dv.get<std::size_t>();
          else if (dk == "image_size") d.image_size = dv.get<std::size_t>();
          else if (dk == "n_classes") d.n_classes = dv.get<std::size_t>();
          else if (dk == "noise_level") d.noise_level = dv.get<double>();
          else if (dk == "background") d.background = dv.get<double>();
          else if (dk == "class_probability") d.class_probability = dv.get<std::vector<double>>();
          else if (dk == "min_shape_size") d.min_shape_size = dv.get<std::size_t>();
          else if (dk == "max_shape_size") d.max_shape_size = dv.get<std::size_t>();
          else if (dk == "min_intensity") d.min_intensity = dv.get<double>();
          else if (dk == "max_intensity") d.max_intensity = dv.get<double>();
          else if (dk == "split") {
            detail::for_each_key(dv, "data.split", {"train", "validation", "test"},
                                 [&](const std::string& sk, const nlohmann::json& sv) {
              (sk == "train" ? c.split.train : sk == "validation" ? c.split.validation : c.split.test) =
                  sv.get<double>();
            });
          }
        });
      } else if (k == "train") {
        detail::for_each_key(v, "train",
                             {"lr", "momentum", "batch_size", "perturb_fraction", "warm_start", "patience",
                              "max_epochs"},
                             [&](const std::string& tk, const nlohmann::json& tv) {
          auto& t = c.train;
          if (tk == "lr") t.lr = tv.get<double>();
          else if (tk == "momentum") t.momentum = tv.get<double>();
          else if (tk == "batch_size") t.batch_size = tv.get<std::size_t>();
          else if (tk == "perturb_fraction") t.perturb_fraction = tv.get<double>();
          else if (tk == "warm_start") t.warm_start = tv.get<bool>();
          else if (tk == "patience") t.patience = tv.get<std::size_t>();
          else if (tk == "max_epochs") t.max_epochs = tv.get<std::size_t>();
        });
      } else if (k == "beta") {
        detail::for_each_key(v, "beta", {"mode", "cap", "zero_positive_fallback"},
                             [&](const std::string& bk, const nlohmann::json& bv) {
          auto& b = c.train.beta;
          if (bk == "mode") {
            const auto m = bv.get<std::string>();
            if (m == "batch_global") b.mode = BetaPolicy::Mode::batch_global;
            else if (m == "per_class") b.mode = BetaPolicy::Mode::per_class;
            else throw ConfigError("beta.mode must be batch_global or per_class, got '" + m + "'");
          } else if (bk == "cap") {
            b.cap = bv.get<double>();
          } else {
            b.zero_positive_fallback = bv.get<double>();
          }
        });
      } else if (k == "attack") {
        detail::for_each_key(v, "attack", {"epsilon", "clamp_to_valid_range", "epsilon_sweep"},
                             [&](const std::string& ak, const nlohmann::json& av) {
          if (ak == "epsilon") c.attack.epsilon = av.get<double>();
          else if (ak == "clamp_to_valid_range") c.attack.clamp_to_valid_range = av.get<bool>();
          else c.epsilon_sweep = av.get<std::vector<double>>();
        });
      } else if (k == "eval") {
        detail::for_each_key(v, "eval", {"folds", "threshold_grid", "iou_grid", "selection_iou", "batch_size"},
                             [&](const std::string& ek, const nlohmann::json& ev) {
          if (ek == "folds") c.eval.folds = ev.get<std::size_t>();
          else if (ek == "threshold_grid") c.eval.threshold_grid = ev.get<std::vector<int>>();
          else if (ek == "iou_grid") c.eval.iou_grid = ev.get<std::vector<double>>();
          else if (ek == "selection_iou") c.eval.selection_iou = ev.get<double>();
          else c.eval_batch_size = ev.get<std::size_t>();
        });
      } else if (k == "paths") {
        detail::for_each_key(v, "paths", {"data_dir", "out_dir", "checkpoint", "init_checkpoint"},
                             [&](const std::string& pk, const nlohmann::json& pv) {
          auto& p = c.paths;
          (pk == "data_dir" ? p.data_dir : pk == "out_dir" ? p.out_dir : pk == "checkpoint" ? p.checkpoint
                                                                                           : p.init_checkpoint) =
              pv.get<std::string>();
        });
      }
    });
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.train.seed = c.seed;
  return c;
}

// Sets a dotted key ("attack.epsilon") in j. The value is parsed as JSON when
// possible and taken as a plain string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& dotted, const std::string& value) {
  if (dotted.empty()) throw ConfigError("empty override key");
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("malformed override key '" + dotted + "'");
    if (!node->is_object()) throw ConfigError("override '" + dotted + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

// A relative config path that does not exist is looked up in the directory
// named by ROBUSTCAM_CONFIG_DIR. With no path at all, that directory's
// default.json is used when present.
inline std::optional<std::filesystem::path> resolve_config_path(const std::string& given) {
  const char* env = std::getenv(kConfigDirEnv);
  if (given.empty()) {
    if (env && *env && std::filesystem::exists(std::filesystem::path(env) / "default.json")) {
      return std::filesystem::path(env) / "default.json";
    }
    return std::nullopt;
  }
  const std::filesystem::path p(given);
  if (std::filesystem::exists(p) || p.is_absolute() || !env || !*env) return p;
  return std::filesystem::path(env) / p;
}

inline RunConfig load_config(const std::string& config_path,
                             const std::vector<std::pair<std::string, std::string>>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (const auto path = resolve_config_path(config_path)) j = read_json_file(*path);
  for (const auto& [k, v] : overrides) apply_override(j, k, v);
  RunConfig c = config_from_json(j);
  c.validate();
  return c;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("failed writing " + path.string());
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
  return buf;
}

// Everything needed to reproduce a command's artifacts, with no timestamps so
// reruns stay byte-identical.
inline nlohmann::ordered_json run_metadata(const std::string& command, const RunConfig& c) {
  return {{"command", command},
          {"config_hash", config_hash(c)},
          {"seed", c.seed},
          {"versions",
           {{"robustcam", kVersion},
            {"manifest", kManifestVersion},
            {"checkpoint", kCheckpointVersion},
            {"compiler", __VERSION__}}}};
}

}  // namespace robustcam
