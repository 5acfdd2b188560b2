#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustcam/adversarial.hpp"
#include "robustcam/checkpoint.hpp"
#include "robustcam/config.hpp"
#include "robustcam/data.hpp"
#include "robustcam/evaluation.hpp"
#include "robustcam/interpretability.hpp"
#include "robustcam/model.hpp"

// One function per command-line subcommand. Each writes its artifacts, the
// effective config and a run-metadata record into its output directory.
namespace robustcam::commands {

namespace fs = std::filesystem;

inline void write_run_records(const fs::path& dir, const std::string& command, const RunConfig& cfg) {
  write_json_file(dir / "config.json", to_json(cfg));
  write_json_file(dir / ("run_metadata_" + command + ".json"), run_metadata(command, cfg));
}

inline void generate_data(const RunConfig& cfg, std::ostream& log = std::cerr) {
  const Dataset ds = generate_dataset(cfg.data, cfg.seed, cfg.threads);
  const DatasetSplits splits = split_dataset(ds, cfg.split, cfg.seed);
  write_dataset(cfg.paths.data_dir, ds, splits);
  write_run_records(cfg.paths.data_dir, "generate-data", cfg);
  log << "wrote " << ds.samples.size() << " samples to " << cfg.paths.data_dir << " (train " << splits.train.size()
      << ", validation " << splits.validation.size() << ", test " << splits.test.size() << ", annotated "
      << splits.annotated_test.size() << ")\n";
}

inline LoadedDataset load_data(const RunConfig& cfg) {
  LoadedDataset data = read_dataset(cfg.paths.data_dir);
  if (data.dataset.image_size != cfg.model.input_height || data.dataset.image_size != cfg.model.input_width) {
    throw DataError("dataset images are " + std::to_string(data.dataset.image_size) + "px but the model expects " +
                    std::to_string(cfg.model.input_height) + "x" + std::to_string(cfg.model.input_width));
  }
  if (data.dataset.num_classes() != cfg.model.num_classes) {
    throw DataError("dataset has " + std::to_string(data.dataset.num_classes()) + " classes, model expects " +
                    std::to_string(cfg.model.num_classes));
  }
  return data;
}

inline EpochCallback epoch_printer(std::ostream& log) {
  return [&log](const EpochRecord& e) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "epoch %zu phase %d clean %.5f adv %s val %.5f (%.1fs)\n", e.epoch, e.phase,
                  e.clean_loss, e.adv_loss ? std::to_string(*e.adv_loss).c_str() : "-", e.val_loss,
                  e.wallclock_seconds);
    log << buf << std::flush;
  };
}

inline void save_training(const RunConfig& cfg, const std::string& command, const TrainResult& result) {
  const fs::path out(cfg.paths.out_dir);
  save_checkpoint(result.model, cfg.paths.checkpoint_path());
  std::ostringstream csv;
  result.log.write_csv(csv);
  write_text_file(out / "training_log.csv", csv.str());
  write_run_records(out, command, cfg);
}

// Clean baseline: no adversarial phase whatever the attack settings say.
inline TrainResult train_clean(const RunConfig& cfg, const LoadedDataset& data, std::ostream& log) {
  return robustcam::train(init_model(cfg.model, cfg.seed), data.dataset, data.splits, cfg.train, AttackConfig{0.0, true},
               epoch_printer(log));
}

inline void train(const RunConfig& cfg, std::ostream& log = std::cerr) {
  const LoadedDataset data = load_data(cfg);
  save_training(cfg, "train", train_clean(cfg, data, log));
}

// Warm start then min-max training. With paths.init_checkpoint set, that
// model is taken as already warm and only the robust phase runs.
inline void train_robust(const RunConfig& cfg, std::ostream& log = std::cerr) {
  const LoadedDataset data = load_data(cfg);
  RobustTrainConfig tc = cfg.train;
  CamModel model = init_model(cfg.model, cfg.seed);
  if (!cfg.paths.init_checkpoint.empty()) {
    model = load_checkpoint(cfg.paths.init_checkpoint);
    if (!(model.arch() == cfg.model)) throw CheckpointError("init checkpoint architecture differs from config");
    tc.warm_start = false;
  }
  save_training(cfg, "train-robust",
                robustcam::train(std::move(model), data.dataset, data.splits, tc, cfg.attack, epoch_printer(log)));
}

inline CamModel load_model(const RunConfig& cfg) {
  CamModel model = load_checkpoint(cfg.paths.checkpoint_path());
  if (model.arch().num_classes != cfg.model.num_classes || model.arch().input_height != cfg.model.input_height ||
      model.arch().input_width != cfg.model.input_width) {
    throw CheckpointError("checkpoint does not fit the configured data (classes or input size differ)");
  }
  return model;
}

inline std::vector<std::size_t> resolve_ids(const Dataset& ds, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) by_id[ds.samples[i].id] = i;
  std::vector<std::size_t> out;
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("unknown sample id '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

// FGSM on the chosen samples (default: the test split) in fixed chunks of
// eval batch size, beta taken per chunk. Writes x/ and x_adv/ PGMs and the
// per-example losses.
inline void attack(const RunConfig& cfg, const std::vector<std::string>& ids, std::ostream& log = std::cerr) {
  const LoadedDataset data = load_data(cfg);
  const CamModel model = load_model(cfg);
  const Dataset& ds = data.dataset;
  const std::vector<std::size_t> indices = ids.empty() ? data.splits.test : resolve_ids(ds, ids);
  if (indices.empty()) throw DataError("attack: no samples selected");
  const fs::path out = fs::path(cfg.paths.out_dir) / "attack";
  fs::create_directories(out / "x");
  fs::create_directories(out / "x_adv");

  std::ostringstream csv;
  csv << "id,clean_loss,adv_loss,loss_delta,linf\n";
  double clean_sum = 0.0, adv_sum = 0.0, max_linf = 0.0;
  std::size_t ascents = 0;
  const std::size_t pixels = ds.image_size * ds.image_size;
  for (std::size_t i = 0; i < indices.size(); i += cfg.eval_batch_size) {
    const auto chunk = std::span<const std::size_t>(indices).subspan(i, std::min(cfg.eval_batch_size, indices.size() - i));
    const Batch b = make_batch(ds, chunk);
    const Beta beta = compute_beta(b.labels, cfg.train.beta);
    std::vector<double> clean;
    const auto grad = loss_input_gradient(model, b.images, b.labels, beta, &clean);
    const auto adv = cfg.attack.epsilon == 0.0 ? b.images : fgsm_step(b.images, grad, cfg.attack);
    const auto adv_loss = weighted_bce_per_sample(model.predict(adv).probs, b.labels, beta);
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      const Sample& s = ds.samples[chunk[k]];
      Tensor x(Shape{1, ds.image_size, ds.image_size}), xa(Shape{1, ds.image_size, ds.image_size});
      double linf = 0.0;
      for (std::size_t p = 0; p < pixels; ++p) {
        x[p] = b.images[k * pixels + p];
        xa[p] = adv[k * pixels + p];
        linf = std::max(linf, std::abs(double(xa[p]) - double(x[p])));
      }
      write_pgm(out / "x" / (s.id + ".pgm"), to_gray(x));
      write_pgm(out / "x_adv" / (s.id + ".pgm"), to_gray(xa));
      char row[256];
      std::snprintf(row, sizeof row, "%s,%.9g,%.9g,%.9g,%.9g\n", s.id.c_str(), clean[k], adv_loss[k],
                    adv_loss[k] - clean[k], linf);
      csv << row;
      clean_sum += clean[k];
      adv_sum += adv_loss[k];
      max_linf = std::max(max_linf, linf);
      ascents += adv_loss[k] >= clean[k] ? 1 : 0;
    }
  }
  write_text_file(out / "attack_losses.csv", csv.str());
  const double n = double(indices.size());
  nlohmann::ordered_json summary{{"epsilon", cfg.attack.epsilon},
                                 {"n_samples", indices.size()},
                                 {"mean_clean_loss", clean_sum / n},
                                 {"mean_adv_loss", adv_sum / n},
                                 {"fraction_loss_not_decreased", double(ascents) / n},
                                 {"max_linf", max_linf}};
  write_json_file(out / "attack_summary.json", summary);
  write_run_records(out, "attack", cfg);
  log << "attack eps=" << cfg.attack.epsilon << ": mean loss " << clean_sum / n << " -> " << adv_sum / n << "\n";
}

struct EvaluationResult {
  ClassificationReport classification;
  LocalizationReport localization;
  double saliency_box_fraction = 0.0;
};

inline EvaluationResult evaluate_model(const CamModel& model, const LoadedDataset& data, const RunConfig& cfg) {
  EvaluationResult r;
  r.classification = classification_auc(model, data.dataset, data.splits.test, cfg.eval_batch_size);
  const auto cases = build_localization_cases(model, data.dataset, data.splits.annotated_test, cfg.threads);
  r.localization = select_thresholds(cases, data.dataset.num_classes(), cfg.eval, cfg.seed);
  r.saliency_box_fraction = mean_saliency_box_fraction(model, data.dataset, data.splits.annotated_test, cfg.threads);
  return r;
}

inline void write_evaluation(const fs::path& out, const EvaluationResult& r, const Dataset& ds) {
  nlohmann::ordered_json auc;
  auto& per_class = auc["per_class"] = nlohmann::ordered_json::array();
  std::ostringstream auc_csv;
  auc_csv << "class,auc\n";
  for (std::size_t c = 0; c < r.classification.auc.size(); ++c) {
    const auto& a = r.classification.auc[c];
    per_class.push_back({{"class_id", c}, {"name", ds.class_names[c]}, {"auc", a ? nlohmann::json(*a) : nlohmann::json()}});
    auc_csv << ds.class_names[c] << ',' << (a ? nlohmann::json(*a).dump() : "") << '\n';
  }
  const auto macro = r.classification.macro_auc();
  auc["macro_auc"] = macro ? nlohmann::ordered_json(*macro) : nlohmann::ordered_json();

  nlohmann::ordered_json report;
  report["classification"] = auc;
  report["localization"] = r.localization.to_json(ds.class_names);
  report["saliency_box_fraction"] = r.saliency_box_fraction;
  write_json_file(out / "evaluation.json", report);
  write_text_file(out / "auc.csv", auc_csv.str());
  std::ostringstream loc_csv;
  r.localization.write_csv(loc_csv, ds.class_names);
  write_text_file(out / "localization.csv", loc_csv.str());
}

inline void evaluate(const RunConfig& cfg, std::ostream& log = std::cerr) {
  const LoadedDataset data = load_data(cfg);
  const CamModel model = load_model(cfg);
  const EvaluationResult r = evaluate_model(model, data, cfg);
  const fs::path out = fs::path(cfg.paths.out_dir) / "evaluation";
  write_evaluation(out, r, data.dataset);
  write_run_records(out, "evaluate", cfg);
  const auto macro = r.classification.macro_auc();
  log << "macro AUC " << (macro ? std::to_string(*macro) : std::string("n/a"));
  if (!r.localization.classes.empty()) {
    log << ", localization@" << cfg.eval.iou_grid.front() << " "
        << r.localization.mean_accuracy_at(cfg.eval.iou_grid.front());
  }
  log << ", saliency in boxes " << r.saliency_box_fraction << "\n";
  for (const auto& w : r.localization.warnings) log << "warning: " << w << "\n";
}

// CAM overlay, CAM and saliency images for each listed sample and each of its
// labelled classes (the highest-scoring class when it has none).
inline void visualize(const RunConfig& cfg, const std::vector<std::string>& ids, std::ostream& log = std::cerr) {
  if (ids.empty()) throw ConfigError("visualize: no sample ids given (use --ids)");
  const LoadedDataset data = load_data(cfg);
  const CamModel model = load_model(cfg);
  const Dataset& ds = data.dataset;
  const fs::path out = fs::path(cfg.paths.out_dir) / "visualize";
  fs::create_directories(out);
  for (const std::size_t i : resolve_ids(ds, ids)) {
    const Sample& s = ds.samples[i];
    const Tensor image = s.image.reshaped(Shape{1, 1, ds.image_size, ds.image_size});
    std::vector<std::size_t> classes;
    for (std::size_t c = 0; c < ds.num_classes(); ++c) {
      if (s.labels[c]) classes.push_back(c);
    }
    if (classes.empty()) {
      const auto probs = model.predict(image).probs;
      classes.push_back(static_cast<std::size_t>(std::max_element(probs.data().begin(), probs.data().end()) -
                                                 probs.data().begin()));
    }
    for (const std::size_t c : classes) {
      std::vector<BoundingBox> boxes;
      for (const auto& b : s.boxes) {
        if (b.class_id == c) boxes.push_back(b);
      }
      const Cam cam = make_cam(model, image, c);
      const std::string stem = s.id + "_" + ds.class_names[c];
      render_overlay(s.image, cam.scaled, boxes, out / (stem + "_overlay.ppm"));
      write_pgm(out / (stem + "_cam.pgm"), to_gray(cam.scaled));
      write_pgm(out / (stem + "_saliency.pgm"), to_gray(saliency(model, image, c).values));
    }
    log << "rendered " << s.id << "\n";
  }
  write_run_records(out, "visualize", cfg);
}

}  // namespace robustcam::commands
