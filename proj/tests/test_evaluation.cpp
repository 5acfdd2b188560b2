#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "robustcam/evaluation.hpp"
#include "support.hpp"

using namespace robustcam;

namespace {

ScaledMap random_map(Rng& rng, std::size_t h, std::size_t w) {
  ScaledMap m{h, w, std::vector<std::uint8_t>(h * w)};
  for (auto& v : m.values) v = static_cast<std::uint8_t>(rng.index(256));
  return m;
}

BoundingBox random_box(Rng& rng, std::size_t h, std::size_t w, std::size_t cls = 0) {
  BoundingBox b;
  b.w = 1 + rng.index(w);
  b.h = 1 + rng.index(h);
  b.x = rng.index(w - b.w + 1);
  b.y = rng.index(h - b.h + 1);
  b.class_id = cls;
  return b;
}

// A map whose box pixels hold 255 and every other pixel holds `outside`.
ScaledMap box_map(std::size_t size, const BoundingBox& box, std::uint8_t outside) {
  ScaledMap m{size, size, std::vector<std::uint8_t>(size * size, outside)};
  for (std::size_t y = box.y; y < box.y + box.h; ++y) {
    for (std::size_t x = box.x; x < box.x + box.w; ++x) m.values[y * size + x] = 255;
  }
  return m;
}

std::vector<int> full_grid() {
  std::vector<int> g(256);
  for (int t = 0; t < 256; ++t) g[t] = t;
  return g;
}

}  // namespace

TEST(ThresholdCam, ExtremesAndCounts) {
  Rng rng(1);
  const ScaledMap m = random_map(rng, 12, 9);
  EXPECT_EQ(threshold_cam(m, 0).count(), m.values.size());
  std::size_t top = 0;
  for (auto v : m.values) top += v == 255;
  EXPECT_EQ(threshold_cam(m, 255).count(), top);
  for (int trial = 0; trial < 50; ++trial) {
    const int t = static_cast<int>(rng.index(256));
    std::size_t expected = 0;
    for (auto v : m.values) expected += v >= t;
    EXPECT_EQ(threshold_cam(m, t).count(), expected);
  }
  EXPECT_THROW(threshold_cam(m, 256), ConfigError);
  EXPECT_THROW(threshold_cam(m, -1), ConfigError);
}

TEST(Iou, WorkedExamples) {
  const BoundingBox a{0, 0, 10, 10, 0}, b{5, 5, 10, 10, 0}, far{20, 20, 4, 4, 0};
  const BoundingBox one_a[] = {a}, one_far[] = {far};
  const Mask ma = box_mask(32, 32, one_a);
  EXPECT_DOUBLE_EQ(iou_mask_box(ma, a), 1.0);
  EXPECT_DOUBLE_EQ(iou_mask_box(ma, far), 0.0);
  EXPECT_DOUBLE_EQ(iou_mask_box(ma, b), 25.0 / 175.0);
  EXPECT_DOUBLE_EQ(iou(box_mask(32, 32, one_far), ma), 0.0);
  const Mask empty{32, 32, std::vector<std::uint8_t>(32 * 32, 0)};
  EXPECT_DOUBLE_EQ(iou(empty, empty), 0.0);
}

TEST(Iou, SymmetricAndMatchesPixelOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 4 + rng.index(20), w = 4 + rng.index(20);
    const ScaledMap cam = random_map(rng, h, w);
    std::vector<BoundingBox> boxes;
    for (std::size_t k = 0, n = 1 + rng.index(3); k < n; ++k) boxes.push_back(random_box(rng, h, w));
    const Mask m = threshold_cam(cam, static_cast<int>(rng.index(256)));
    const Mask truth = box_mask(h, w, boxes);
    const double got = iou(m, truth);
    EXPECT_DOUBLE_EQ(got, iou(truth, m));
    EXPECT_DOUBLE_EQ(got, oracles::iou(m.values, h, w, boxes));
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 1.0);
  }
}

TEST(Iou, UnionOfSeveralBoxes) {
  const std::vector<BoundingBox> boxes{{0, 0, 3, 3, 1}, {6, 6, 2, 2, 1}};
  const Mask truth = box_mask(10, 10, boxes);
  EXPECT_EQ(truth.count(), 13u);
  EXPECT_DOUBLE_EQ(iou(truth, truth), 1.0);
  // Covering only the first box scores against the union.
  EXPECT_DOUBLE_EQ(iou_mask_box(truth, boxes[0]), 9.0 / 13.0);
}

TEST(LocalizeCorrect, StrictlyAboveThreshold) {
  const BoundingBox box{0, 0, 2, 2, 2};
  ScaledMap m{4, 4, std::vector<std::uint8_t>(16, 0)};
  for (std::size_t i : {0, 1, 4, 5, 2, 3, 6, 7}) m.values[i] = 200;  // mask = top two rows, IoU = 4/8
  const Cam cam{2, Tensor(Shape{1, 1}), m};
  const BoundingBox boxes[] = {box};
  EXPECT_FALSE(localize_correct(cam, boxes, 100, 0.5));
  EXPECT_TRUE(localize_correct(cam, boxes, 100, 0.49));
  EXPECT_FALSE(localize_correct(cam, boxes, 201, 0.0));  // empty mask, IoU 0
}

TEST(LocalizeCorrect, RejectsMissingOrForeignBoxes) {
  const Cam cam{1, Tensor(Shape{1, 1}), ScaledMap{4, 4, std::vector<std::uint8_t>(16, 0)}};
  EXPECT_THROW(localize_correct(cam, {}, 10, 0.1), DataError);
  const BoundingBox other[] = {{0, 0, 2, 2, 0}};
  EXPECT_THROW(localize_correct(cam, other, 10, 0.1), DataError);
}

TEST(LocalizationCase, HistogramIouMatchesMasks) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const ScaledMap cam = random_map(rng, 16, 16);
    std::vector<BoundingBox> boxes{random_box(rng, 16, 16), random_box(rng, 16, 16)};
    const auto c = LocalizationCase::from(trial, cam, boxes);
    const Mask truth = box_mask(16, 16, boxes);
    for (int t = 0; t < 256; t += 17) EXPECT_DOUBLE_EQ(c.iou_at(t), iou(threshold_cam(cam, t), truth));
  }
}

TEST(SelectThresholds, SingleGridValueIsAlwaysChosen) {
  Rng rng(4);
  std::vector<LocalizationCase> cases;
  for (std::size_t i = 0; i < 40; ++i) {
    const BoundingBox b = random_box(rng, 16, 16, i % 2);
    const BoundingBox one[] = {b};
    cases.push_back(LocalizationCase::from(i, random_map(rng, 16, 16), one));
  }
  EvalConfig cfg;
  cfg.threshold_grid = {77};
  const auto report = select_thresholds(cases, 2, cfg, 1);
  ASSERT_EQ(report.classes.size(), 2u);
  for (const auto& c : report.classes) EXPECT_EQ(c.threshold, 77);
  for (const auto& f : report.folds) EXPECT_EQ(f.threshold, 77);
}

TEST(SelectThresholds, FindsConstructedOptimum) {
  // Below 128 the mask covers the whole image (IoU 16/256 < 0.1); from 128
  // upward it is exactly the box. The smallest winning threshold is 128.
  Rng rng(5);
  std::vector<LocalizationCase> cases;
  for (std::size_t i = 0; i < 50; ++i) {
    BoundingBox b{rng.index(13), rng.index(13), 4, 4, 0};
    const BoundingBox one[] = {b};
    cases.push_back(LocalizationCase::from(i, box_map(16, b, 127), one));
  }
  EvalConfig cfg;
  cfg.threshold_grid = full_grid();
  const auto report = select_thresholds(cases, 1, cfg, 9);
  ASSERT_EQ(report.classes.size(), 1u);
  EXPECT_EQ(report.classes[0].threshold, 128);
  EXPECT_EQ(report.folds.size(), 5u);
  for (const auto& f : report.folds) {
    EXPECT_EQ(f.threshold, 128);
    EXPECT_EQ(f.calibration_cases, 10u);
    EXPECT_EQ(f.evaluation_cases, 40u);
  }
  for (double a : report.classes[0].accuracy) EXPECT_DOUBLE_EQ(a, 1.0);
  EXPECT_EQ(report.classes[0].n_images, 50u);
  EXPECT_TRUE(report.warnings.empty());
}

TEST(SelectThresholds, DeterministicPerSeed) {
  Rng rng(6);
  std::vector<LocalizationCase> cases;
  for (std::size_t i = 0; i < 60; ++i) {
    const BoundingBox one[] = {random_box(rng, 16, 16, i % 3)};
    cases.push_back(LocalizationCase::from(i, random_map(rng, 16, 16), one));
  }
  const EvalConfig cfg;
  const auto a = select_thresholds(cases, 3, cfg, 42), b = select_thresholds(cases, 3, cfg, 42);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
}

TEST(SelectThresholds, ClassWithoutAnnotationsIsWarnedAndOmitted) {
  Rng rng(7);
  std::vector<LocalizationCase> cases;
  for (std::size_t i = 0; i < 20; ++i) {
    const BoundingBox one[] = {random_box(rng, 16, 16, 0)};
    cases.push_back(LocalizationCase::from(i, random_map(rng, 16, 16), one));
  }
  const auto report = select_thresholds(cases, 3, EvalConfig{}, 1);
  EXPECT_EQ(report.classes.size(), 1u);
  EXPECT_EQ(report.find(1), nullptr);
  EXPECT_EQ(report.warnings.size(), 2u);
  EvalConfig bad;
  bad.folds = 1;
  EXPECT_THROW(select_thresholds(cases, 1, bad, 1), ConfigError);
}

TEST(LocalizationAccuracy, NonIncreasingInIouThreshold) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<LocalizationCase> cases;
    for (std::size_t i = 0; i < 30; ++i) {
      const BoundingBox one[] = {random_box(rng, 16, 16, i % 2)};
      cases.push_back(LocalizationCase::from(i, random_map(rng, 16, 16), one));
    }
    const std::vector<double> grid{0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9};
    const auto t = static_cast<int>(rng.index(256));
    const auto report = localization_accuracy(cases, {{0, t}, {1, t}}, grid);
    for (const auto& c : report.classes) {
      for (std::size_t k = 1; k < grid.size(); ++k) EXPECT_LE(c.accuracy[k], c.accuracy[k - 1]);
    }
  }
}

TEST(LocalizationReport, CsvTable) {
  LocalizationReport r;
  r.iou_grid = {0.1, 0.5};
  r.classes.push_back({1, 50, 10, {0.75, 0.5}});
  std::ostringstream out;
  const std::vector<std::string> names{"square", "disk"};
  r.write_csv(out, names);
  EXPECT_EQ(out.str(), "class,T0.1,T0.5\ndisk,0.75,0.5\n");
  EXPECT_DOUBLE_EQ(r.mean_accuracy_at(0.5), 0.5);
  EXPECT_THROW(r.mean_accuracy_at(0.3), ConfigError);
}

TEST(RocAuc, WorkedExamples) {
  const std::vector<std::uint8_t> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(*roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y), 1.0);
  EXPECT_DOUBLE_EQ(*roc_auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, y), 0.0);
  EXPECT_DOUBLE_EQ(*roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, y), 0.75);
  EXPECT_DOUBLE_EQ(*roc_auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, y), 0.5);
  EXPECT_FALSE(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{1, 1}).has_value());
  EXPECT_FALSE(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{0, 0}).has_value());
  EXPECT_THROW(roc_auc(std::vector<double>{0.1}, y), ShapeError);
}

TEST(RocAuc, MatchesPairwiseOracleWithTies) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(60);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(rng.index(8)) / 8.0;  // coarse values force ties
      y[i] = rng.bernoulli(0.4);
    }
    const auto got = roc_auc(s, y);
    const bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
    ASSERT_EQ(got.has_value(), both);
    if (both) {
      EXPECT_NEAR(*got, oracles::auc_all_pairs(s, y), 1e-12);
    }
  }
}

TEST(RocAuc, InvariantUnderIncreasingTransforms) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(40), t(40);
    std::vector<std::uint8_t> y(40);
    for (std::size_t i = 0; i < 40; ++i) {
      s[i] = rng.uniform(-3, 3);
      t[i] = std::exp(2 * s[i]) + 5;
      y[i] = i % 3 == 0;
    }
    EXPECT_DOUBLE_EQ(*roc_auc(s, y), *roc_auc(t, y));
  }
}

TEST(ClassificationAuc, ConstantScoresGiveOneHalf) {
  const auto set = fixtures::tiny_set();
  CamModel m = init_model(fixtures::tiny_arch(), 1);
  m.head_weight().fill(0.0f);
  const auto report = classification_auc(m, set.dataset, set.splits.test, 7);
  ASSERT_EQ(report.auc.size(), 3u);
  for (const auto& a : report.auc) {
    if (a) {
      EXPECT_DOUBLE_EQ(*a, 0.5);
    }
  }
  ASSERT_TRUE(report.macro_auc().has_value());
  EXPECT_DOUBLE_EQ(*report.macro_auc(), 0.5);
}

TEST(BuildLocalizationCases, AgreesWithPerImageCams) {
  const auto set = fixtures::tiny_set(3, 60);
  const CamModel m = fixtures::random_model(fixtures::tiny_arch(), 2);
  const auto& idx = set.splits.annotated_test;
  const auto cases = build_localization_cases(m, set.dataset, idx, 2);
  std::size_t expected = 0;
  for (auto i : idx) {
    const Sample& s = set.dataset.samples[i];
    for (const auto& b : s.boxes) {
      ++expected;
      const auto it = std::find_if(cases.begin(), cases.end(), [&](const LocalizationCase& c) {
        return c.image_index == i && c.class_id == b.class_id;
      });
      ASSERT_NE(it, cases.end());
      const BoundingBox one[] = {b};
      const Cam cam = make_cam(m, s.image.reshaped(Shape{1, 1, 16, 16}), b.class_id);
      for (int t : {0, 64, 128, 200}) {
        EXPECT_EQ(it->iou_at(t) > 0.1, localize_correct(cam, one, t, 0.1));
      }
    }
  }
  EXPECT_EQ(cases.size(), expected);  // one box per class per image in this generator
}
