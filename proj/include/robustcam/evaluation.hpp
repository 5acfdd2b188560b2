#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustcam/box.hpp"
#include "robustcam/data.hpp"
#include "robustcam/errors.hpp"
#include "robustcam/interpretability.hpp"
#include "robustcam/model.hpp"
#include "robustcam/parallel.hpp"
#include "robustcam/random.hpp"

namespace robustcam {

struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  std::size_t count() const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1)); }
};

inline Mask threshold_cam(const ScaledMap& scaled, int t) {
  if (t < 0 || t > 255) throw ConfigError("threshold must be in [0,255], got " + std::to_string(t));
  Mask m{scaled.height, scaled.width, std::vector<std::uint8_t>(scaled.values.size())};
  for (std::size_t i = 0; i < scaled.values.size(); ++i) m.values[i] = scaled.values[i] >= t ? 1 : 0;
  return m;
}

inline Mask box_mask(std::size_t height, std::size_t width, std::span<const BoundingBox> boxes) {
  Mask m{height, width, std::vector<std::uint8_t>(height * width, 0)};
  for (const auto& b : boxes) {
    b.validate(height, width);
    for (std::size_t y = b.y; y < b.y + b.h; ++y) {
      std::fill_n(m.values.begin() + static_cast<long>(y * width + b.x), b.w, std::uint8_t{1});
    }
  }
  return m;
}

// Pixel IoU of two masks; 0 when both are empty.
inline double iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    inter += a.values[i] & b.values[i];
    uni += a.values[i] | b.values[i];
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

inline double iou_mask_box(const Mask& mask, const BoundingBox& box) {
  const BoundingBox one[] = {box};
  return iou(mask, box_mask(mask.height, mask.width, one));
}

// IoU against the pixel union of all boxes, strictly above t_iou.
inline bool localize_correct(const Cam& cam, std::span<const BoundingBox> boxes, int t, double t_iou) {
  if (boxes.empty()) throw DataError("localize_correct: no ground-truth boxes");
  for (const auto& b : boxes) {
    if (b.class_id != cam.class_id) throw DataError("localize_correct: box class differs from CAM class");
  }
  const Mask boxes_mask = box_mask(cam.scaled.height, cam.scaled.width, boxes);
  return iou(threshold_cam(cam.scaled, t), boxes_mask) > t_iou;
}

// One (image, class) pair with ground truth, reduced to value histograms so
// the IoU at every threshold is a prefix-sum lookup.
struct LocalizationCase {
  std::size_t image_index = 0;
  std::size_t class_id = 0;
  std::array<std::uint32_t, 256> inside{};  // CAM value histogram inside the boxes
  std::array<std::uint32_t, 256> all{};     // over the whole map
  std::uint32_t box_pixels = 0;

  static LocalizationCase from(std::size_t image_index, const ScaledMap& scaled,
                               std::span<const BoundingBox> boxes) {
    if (boxes.empty()) throw DataError("localization case without boxes");
    LocalizationCase c;
    c.image_index = image_index;
    c.class_id = boxes.front().class_id;
    const Mask m = box_mask(scaled.height, scaled.width, boxes);
    for (std::size_t i = 0; i < scaled.values.size(); ++i) {
      ++c.all[scaled.values[i]];
      if (m.values[i]) {
        ++c.inside[scaled.values[i]];
        ++c.box_pixels;
      }
    }
    return c;
  }

  // Same value as iou(threshold_cam(cam, t), box_mask(boxes)).
  double iou_at(int t) const {
    std::uint64_t mask = 0, inter = 0;
    for (int v = t; v < 256; ++v) {
      mask += all[v];
      inter += inside[v];
    }
    const std::uint64_t uni = mask + box_pixels - inter;
    return uni == 0 ? 0.0 : double(inter) / double(uni);
  }
};

struct EvalConfig {
  std::size_t folds = 5;
  std::vector<int> threshold_grid = default_threshold_grid();
  std::vector<double> iou_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  double selection_iou = 0.1;

  static std::vector<int> default_threshold_grid() {
    std::vector<int> g;
    for (int t = 0; t <= 255; t += 5) g.push_back(t);
    return g;
  }

  void validate() const {
    if (folds < 2) throw ConfigError("eval: folds must be >= 2");
    if (threshold_grid.empty()) throw ConfigError("eval: empty threshold grid");
    for (int t : threshold_grid) {
      if (t < 0 || t > 255) throw ConfigError("eval: thresholds must be in [0,255]");
    }
    if (iou_grid.empty()) throw ConfigError("eval: empty T(IoU) grid");
  }
};

struct FoldResult {
  std::size_t fold = 0;
  std::size_t class_id = 0;
  int threshold = 0;
  std::size_t calibration_cases = 0;
  std::size_t evaluation_cases = 0;
  std::vector<double> accuracy;  // per T(IoU)
};

struct ClassLocalization {
  std::size_t class_id = 0;
  int threshold = 0;
  std::size_t n_images = 0;
  std::vector<double> accuracy;  // per T(IoU)
};

struct LocalizationReport {
  std::vector<double> iou_grid;
  std::vector<ClassLocalization> classes;
  std::vector<FoldResult> folds;
  std::vector<std::string> warnings;

  const ClassLocalization* find(std::size_t class_id) const {
    for (const auto& c : classes) {
      if (c.class_id == class_id) return &c;
    }
    return nullptr;
  }

  // Macro average over reported classes at one grid value.
  double mean_accuracy_at(double t_iou) const {
    const auto it = std::find(iou_grid.begin(), iou_grid.end(), t_iou);
    if (it == iou_grid.end()) throw ConfigError("T(IoU) " + std::to_string(t_iou) + " not in grid");
    const auto k = static_cast<std::size_t>(it - iou_grid.begin());
    if (classes.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& c : classes) acc += c.accuracy[k];
    return acc / double(classes.size());
  }

  nlohmann::ordered_json to_json(std::span<const std::string> class_names = {}) const {
    nlohmann::ordered_json j;
    j["iou_grid"] = iou_grid;
    auto& cls = j["classes"] = nlohmann::ordered_json::array();
    for (const auto& c : classes) {
      nlohmann::ordered_json e;
      e["class_id"] = c.class_id;
      if (c.class_id < class_names.size()) e["name"] = class_names[c.class_id];
      e["threshold"] = c.threshold;
      e["n_images"] = c.n_images;
      e["accuracy"] = c.accuracy;
      cls.push_back(e);
    }
    auto& folds_json = j["folds"] = nlohmann::ordered_json::array();
    for (const auto& f : folds) {
      folds_json.push_back({{"fold", f.fold},
                            {"class_id", f.class_id},
                            {"threshold", f.threshold},
                            {"calibration_cases", f.calibration_cases},
                            {"evaluation_cases", f.evaluation_cases},
                            {"accuracy", f.accuracy}});
    }
    j["warnings"] = warnings;
    return j;
  }

  // class x T(IoU) table.
  void write_csv(std::ostream& out, std::span<const std::string> class_names = {}) const {
    out << "class";
    for (double t : iou_grid) out << ",T" << nlohmann::json(t).dump();
    out << '\n';
    for (const auto& c : classes) {
      out << (c.class_id < class_names.size() ? class_names[c.class_id] : std::to_string(c.class_id));
      for (double a : c.accuracy) out << ',' << nlohmann::json(a).dump();
      out << '\n';
    }
  }
};

namespace detail {

inline std::vector<double> accuracy_over(std::span<const LocalizationCase* const> cases, int t,
                                         std::span<const double> iou_grid) {
  std::vector<double> acc(iou_grid.size(), 0.0);
  if (cases.empty()) return acc;
  for (const auto* c : cases) {
    const double v = c->iou_at(t);
    for (std::size_t k = 0; k < iou_grid.size(); ++k) acc[k] += v > iou_grid[k] ? 1.0 : 0.0;
  }
  for (double& a : acc) a /= double(cases.size());
  return acc;
}

inline int most_frequent(std::span<const int> values) {
  std::map<int, std::size_t> counts;
  for (int v : values) ++counts[v];
  int best = values.front();
  std::size_t best_n = 0;
  for (const auto& [v, n] : counts) {  // ascending, so ties keep the smaller value
    if (n > best_n) {
      best = v;
      best_n = n;
    }
  }
  return best;
}

}  // namespace detail

// Fraction of each class's cases localized correctly at fixed per-class
// thresholds, for every T(IoU) in the grid.
inline LocalizationReport localization_accuracy(std::span<const LocalizationCase> cases,
                                                const std::map<std::size_t, int>& thresholds,
                                                std::span<const double> iou_grid) {
  LocalizationReport report;
  report.iou_grid.assign(iou_grid.begin(), iou_grid.end());
  std::map<std::size_t, std::vector<const LocalizationCase*>> by_class;
  for (const auto& c : cases) by_class[c.class_id].push_back(&c);
  for (const auto& [cls, members] : by_class) {
    const auto t = thresholds.find(cls);
    if (t == thresholds.end()) {
      report.warnings.push_back("class " + std::to_string(cls) + ": no calibrated threshold, omitted");
      continue;
    }
    std::vector<std::size_t> images;
    for (const auto* m : members) images.push_back(m->image_index);
    std::sort(images.begin(), images.end());
    images.erase(std::unique(images.begin(), images.end()), images.end());
    report.classes.push_back(ClassLocalization{cls, t->second, images.size(),
                                               detail::accuracy_over(members, t->second, iou_grid)});
  }
  return report;
}

// Seeded k-fold calibration. Annotated images are shuffled and cut into
// `folds` contiguous groups. For each fold, that fold alone is the
// calibration subset: each class picks the grid threshold with the highest
// accuracy at selection_iou there (ties to the smallest threshold), which is
// then scored on the remaining folds. Class accuracy is the mean over folds
// and the reported threshold is the most frequent fold choice.
inline LocalizationReport select_thresholds(std::span<const LocalizationCase> cases, std::size_t num_classes,
                                            const EvalConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  LocalizationReport report;
  report.iou_grid = cfg.iou_grid;

  std::vector<std::size_t> images;
  for (const auto& c : cases) images.push_back(c.image_index);
  std::sort(images.begin(), images.end());
  images.erase(std::unique(images.begin(), images.end()), images.end());
  Rng rng(derive_seed(seed, 0x666f6c6473ULL));
  rng.shuffle(std::span<std::size_t>(images));
  std::map<std::size_t, std::size_t> fold_of;
  for (std::size_t i = 0; i < images.size(); ++i) fold_of[images[i]] = i * cfg.folds / images.size();

  const double sel[] = {cfg.selection_iou};
  for (std::size_t cls = 0; cls < num_classes; ++cls) {
    std::vector<const LocalizationCase*> members;
    for (const auto& c : cases) {
      if (c.class_id == cls) members.push_back(&c);
    }
    if (members.empty()) {
      report.warnings.push_back("class " + std::to_string(cls) + ": no annotated images, omitted");
      continue;
    }
    std::vector<int> chosen;
    std::vector<double> sum(cfg.iou_grid.size(), 0.0);
    for (std::size_t f = 0; f < cfg.folds; ++f) {
      std::vector<const LocalizationCase*> calib, held_out;
      for (const auto* m : members) (fold_of[m->image_index] == f ? calib : held_out).push_back(m);
      if (calib.empty() || held_out.empty()) {
        report.warnings.push_back("class " + std::to_string(cls) + ": fold " + std::to_string(f) +
                                  " has no " + (calib.empty() ? "calibration" : "evaluation") +
                                  " images, skipped");
        continue;
      }
      int best_t = cfg.threshold_grid.front();
      double best_acc = -1.0;
      std::vector<int> grid = cfg.threshold_grid;
      std::sort(grid.begin(), grid.end());
      for (int t : grid) {
        const double a = detail::accuracy_over(calib, t, sel)[0];
        if (a > best_acc) {
          best_acc = a;
          best_t = t;
        }
      }
      FoldResult fr{f, cls, best_t, calib.size(), held_out.size(),
                    detail::accuracy_over(held_out, best_t, cfg.iou_grid)};
      for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += fr.accuracy[k];
      chosen.push_back(best_t);
      report.folds.push_back(std::move(fr));
    }
    if (chosen.empty()) {
      report.warnings.push_back("class " + std::to_string(cls) + ": no usable folds, omitted");
      continue;
    }
    std::vector<std::size_t> class_images;
    for (const auto* m : members) class_images.push_back(m->image_index);
    std::sort(class_images.begin(), class_images.end());
    class_images.erase(std::unique(class_images.begin(), class_images.end()), class_images.end());
    for (double& s : sum) s /= double(chosen.size());
    report.classes.push_back(ClassLocalization{cls, detail::most_frequent(chosen), class_images.size(), sum});
  }
  return report;
}

// CAM-based localization cases for every (image, class with boxes) pair.
inline std::vector<LocalizationCase> build_localization_cases(const CamModel& model, const Dataset& ds,
                                                              std::span<const std::size_t> indices,
                                                              std::size_t threads = 1) {
  std::vector<std::vector<LocalizationCase>> per_image(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t k) {
    const Sample& s = ds.samples.at(indices[k]);
    if (s.boxes.empty()) return;
    const auto image = s.image.reshaped(Shape{1, 1, ds.image_size, ds.image_size});
    const auto features = model.predict(image).features;
    for (std::size_t cls = 0; cls < ds.num_classes(); ++cls) {
      std::vector<BoundingBox> boxes;
      for (const auto& b : s.boxes) {
        if (b.class_id == cls) boxes.push_back(b);
      }
      if (boxes.empty()) continue;
      const auto raw = cam_from_features(features, model.head_weight(), cls);
      per_image[k].push_back(LocalizationCase::from(indices[k], postprocess_cam(raw, ds.image_size, ds.image_size), boxes));
    }
  });
  std::vector<LocalizationCase> out;
  for (auto& v : per_image) out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline LocalizationReport localization_accuracy(const CamModel& model, const Dataset& ds,
                                                std::span<const std::size_t> annotated,
                                                const std::map<std::size_t, int>& thresholds,
                                                std::span<const double> iou_grid, std::size_t threads = 1) {
  const auto cases = build_localization_cases(model, ds, annotated, threads);
  return localization_accuracy(cases, thresholds, iou_grid);
}

// Probability that a random positive outranks a random negative, ties
// counted one half (Mann-Whitney U / (n1 n0)). Absent when only one class is
// present.
inline std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (auto l : labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the average 1-based rank keeps tied ranks integral.
  double rank_sum_x2 = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double rank_x2 = double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) rank_sum_x2 += rank_x2;
    }
    i = j;
  }
  const double u = rank_sum_x2 / 2.0 - double(n_pos) * double(n_pos + 1) / 2.0;
  return u / (double(n_pos) * double(n_neg));
}

struct ClassificationReport {
  std::vector<std::optional<double>> auc;  // per class

  std::optional<double> macro_auc() const {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& a : auc) {
      if (a) {
        acc += *a;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return acc / double(n);
  }
};

inline ClassificationReport classification_auc(const CamModel& model, const Dataset& ds,
                                               std::span<const std::size_t> indices, std::size_t batch_size = 64) {
  const std::size_t c = ds.num_classes();
  std::vector<std::vector<double>> scores(c);
  std::vector<std::vector<std::uint8_t>> labels(c);
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    const auto chunk = indices.subspan(i, std::min(batch_size, indices.size() - i));
    const Batch b = make_batch(ds, chunk);
    const auto probs = model.predict(b.images).probs;
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      for (std::size_t k = 0; k < c; ++k) {
        scores[k].push_back(probs[r * c + k]);
        labels[k].push_back(b.labels(r, k));
      }
    }
  }
  ClassificationReport report;
  for (std::size_t k = 0; k < c; ++k) report.auc.push_back(roc_auc(scores[k], labels[k]));
  return report;
}

// Mean fraction of saliency mass inside the ground-truth boxes, over every
// (annotated image, class with boxes) pair.
inline double mean_saliency_box_fraction(const CamModel& model, const Dataset& ds,
                                         std::span<const std::size_t> annotated, std::size_t threads = 1) {
  std::vector<std::vector<double>> per_image(annotated.size());
  parallel_for(annotated.size(), threads, [&](std::size_t k) {
    const Sample& s = ds.samples.at(annotated[k]);
    const auto image = s.image.reshaped(Shape{1, 1, ds.image_size, ds.image_size});
    for (std::size_t cls = 0; cls < ds.num_classes(); ++cls) {
      std::vector<BoundingBox> boxes;
      for (const auto& b : s.boxes) {
        if (b.class_id == cls) boxes.push_back(b);
      }
      if (boxes.empty()) continue;
      per_image[k].push_back(saliency_mass_in_boxes(saliency(model, image, cls), boxes));
    }
  });
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& v : per_image) {
    for (double x : v) {
      acc += x;
      ++n;
    }
  }
  return n ? acc / double(n) : 0.0;
}

}  // namespace robustcam
