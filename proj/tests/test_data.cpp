#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "robustcam/data.hpp"
#include "support.hpp"

using namespace robustcam;

namespace {

GenerateConfig noiseless(std::size_t n) {
  GenerateConfig g = fixtures::tiny_data_config(n);
  g.noise_level = 0.0;
  return g;
}

}  // namespace

TEST(Rasterize, EveryCatalogShapeIsNonEmptyAndFitsItsCell) {
  for (ShapeKind kind : kShapeCatalog) {
    for (std::size_t size : {4u, 7u, 12u, 22u}) {
      const auto mask = rasterize_shape(kind, size);
      ASSERT_EQ(mask.size(), size * size);
      EXPECT_GT(std::count(mask.begin(), mask.end(), 1), 0) << shape_name(kind) << " " << size;
    }
  }
}

TEST(Generate, BoxIsTightAroundTheShape) {
  const Dataset ds = generate_dataset(noiseless(300), 3);
  std::size_t checked = 0;
  for (const Sample& s : ds.samples) {
    if (s.boxes.size() != 1) continue;
    const auto bg = quantize_pixel(0.15);
    std::size_t min_x = 99, min_y = 99, max_x = 0, max_y = 0;
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 16; ++x) {
        if (s.image[y * 16 + x] == bg) continue;
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
    }
    const BoundingBox& b = s.boxes[0];
    EXPECT_EQ(b.x, min_x);
    EXPECT_EQ(b.y, min_y);
    EXPECT_EQ(b.x + b.w - 1, max_x);
    EXPECT_EQ(b.y + b.h - 1, max_y);
    ++checked;
  }
  EXPECT_GT(checked, 50u);
}

TEST(Generate, LabelsAgreeWithBoxes) {
  const Dataset ds = generate_dataset(fixtures::tiny_data_config(500), 4);
  for (const Sample& s : ds.samples) {
    std::vector<std::uint8_t> from_boxes(3, 0);
    for (const auto& b : s.boxes) {
      from_boxes[b.class_id] = 1;
      EXPECT_NO_THROW(b.validate(16, 16));
    }
    EXPECT_EQ(from_boxes, s.labels);
    for (float v : s.image.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Generate, DeterministicAndIndependentOfThreads) {
  const auto cfg = fixtures::tiny_data_config(64);
  const Dataset a = generate_dataset(cfg, 9), b = generate_dataset(cfg, 9, 3), c = generate_dataset(cfg, 10);
  bool any_difference = false;
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_TRUE(bit_identical(a.samples[i].image, b.samples[i].image));
    EXPECT_EQ(a.samples[i].labels, b.samples[i].labels);
    any_difference = any_difference || !bit_identical(a.samples[i].image, c.samples[i].image);
  }
  EXPECT_TRUE(any_difference);
}

TEST(Generate, ClassFrequenciesMatchProbabilities) {
  GenerateConfig cfg;
  cfg.n_samples = 10000;
  cfg.image_size = 24;
  cfg.min_shape_size = 6;
  cfg.max_shape_size = 10;
  const Dataset ds = generate_dataset(cfg, 5);
  const auto p = cfg.probabilities();
  ASSERT_EQ(p, (std::vector<double>{0.3, 0.3, 0.3, 0.05}));
  for (std::size_t c = 0; c < 4; ++c) {
    double count = 0;
    for (const Sample& s : ds.samples) count += s.labels[c];
    EXPECT_NEAR(count / 10000.0, p[c], 0.02) << "class " << c;
  }
}

TEST(Generate, RejectsBadConfig) {
  GenerateConfig g;
  g.n_classes = 9;
  EXPECT_THROW(generate_dataset(g, 1), ConfigError);
  g = GenerateConfig{};
  g.max_shape_size = 80;
  EXPECT_THROW(generate_dataset(g, 1), ConfigError);
  g = GenerateConfig{};
  g.class_probability = {0.5};
  EXPECT_THROW(generate_dataset(g, 1), ConfigError);
}

TEST(Split, SizesDisjointAndCovering) {
  const Dataset ds = generate_dataset(fixtures::tiny_data_config(100), 1);
  const DatasetSplits s = split_dataset(ds, {}, 1);
  EXPECT_EQ(s.train.size(), 72u);
  EXPECT_EQ(s.validation.size(), 8u);
  EXPECT_EQ(s.test.size(), 20u);
  std::set<std::size_t> all;
  for (const auto* v : {&s.train, &s.validation, &s.test}) all.insert(v->begin(), v->end());
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(*all.rbegin(), 99u);
  for (auto i : s.annotated_test) {
    EXPECT_TRUE(std::binary_search(s.test.begin(), s.test.end(), i));
    EXPECT_FALSE(ds.samples[i].boxes.empty());
  }
  const DatasetSplits again = split_dataset(ds, {}, 1);
  EXPECT_EQ(again.train, s.train);
  EXPECT_NE(split_dataset(ds, {}, 2).train, s.train);
  EXPECT_THROW(split_dataset(ds, {0.5, 0.1, 0.1}, 1), ConfigError);
}

TEST(Batches, LastPartialBatchIsKept) {
  std::vector<std::size_t> idx(70);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto batches = make_batches(idx, 32, 1, 0);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 32u);
  EXPECT_EQ(batches[1].size(), 32u);
  EXPECT_EQ(batches[2].size(), 6u);
  std::set<std::size_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 70u);
  EXPECT_EQ(make_batches(idx, 32, 1, 0), batches);
  EXPECT_NE(make_batches(idx, 32, 1, 1), batches);
  EXPECT_THROW(make_batches(idx, 0, 1, 0), ConfigError);
}

TEST(Batches, MakeBatchStacksImagesAndLabels) {
  const auto set = fixtures::tiny_set();
  const std::vector<std::size_t> idx{3, 7};
  const Batch b = make_batch(set.dataset, idx);
  EXPECT_EQ(b.images.shape(), (Shape{2, 1, 16, 16}));
  EXPECT_EQ(b.images[256 + 5], set.dataset.samples[7].image[5]);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(b.labels(1, c), set.dataset.samples[7].labels[c]);
  EXPECT_THROW(make_batch(set.dataset, std::vector<std::size_t>{}), DataError);
}

TEST(Manifest, RoundTripIsExact) {
  testing_support::TempDir dir("manifest_roundtrip");
  const auto set = fixtures::tiny_set(6, 50);
  write_dataset(dir.path(), set.dataset, set.splits);
  const LoadedDataset back = read_dataset(dir.path());
  ASSERT_EQ(back.dataset.samples.size(), 50u);
  EXPECT_EQ(back.dataset.class_names, set.dataset.class_names);
  EXPECT_EQ(back.splits.train, set.splits.train);
  EXPECT_EQ(back.splits.validation, set.splits.validation);
  EXPECT_EQ(back.splits.test, set.splits.test);
  EXPECT_EQ(back.splits.annotated_test, set.splits.annotated_test);
  for (std::size_t i = 0; i < 50; ++i) {
    const Sample &a = set.dataset.samples[i], &b = back.dataset.samples[i];
    EXPECT_EQ(a.id, b.id);
    EXPECT_TRUE(bit_identical(a.image, b.image));
    EXPECT_EQ(a.labels, b.labels);
    ASSERT_EQ(a.boxes.size(), b.boxes.size());
    for (std::size_t k = 0; k < a.boxes.size(); ++k) {
      EXPECT_EQ(a.boxes[k].x, b.boxes[k].x);
      EXPECT_EQ(a.boxes[k].w, b.boxes[k].w);
      EXPECT_EQ(a.boxes[k].class_id, b.boxes[k].class_id);
    }
  }
}

TEST(Manifest, MissingOrCorruptIsADataError) {
  testing_support::TempDir dir("manifest_bad");
  EXPECT_THROW(read_dataset(dir.path()), DataError);
  std::ofstream(dir.path() / "manifest.json") << "{not json";
  EXPECT_THROW(read_dataset(dir.path()), DataError);
  std::ofstream(dir.path() / "manifest.json") << R"({"version": 99})";
  EXPECT_THROW(read_dataset(dir.path()), DataError);
}

TEST(Pgm, RoundTripAndHeaderComments) {
  testing_support::TempDir dir("pgm");
  GrayImage g{3, 2, {0, 1, 2, 253, 254, 255}};
  write_pgm(dir.path() / "a.pgm", g);
  const GrayImage back = read_pgm(dir.path() / "a.pgm");
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.pixels, g.pixels);
  {
    std::ofstream out(dir.path() / "c.pgm", std::ios::binary);
    out << "P5\n# comment\n2 1\n255\n" << char(7) << char(9);
  }
  EXPECT_EQ(read_pgm(dir.path() / "c.pgm").pixels, (std::vector<std::uint8_t>{7, 9}));
  {
    std::ofstream out(dir.path() / "t.pgm", std::ios::binary);
    out << "P5\n4 4\n255\n" << char(1);
  }
  EXPECT_THROW(read_pgm(dir.path() / "t.pgm"), DataError);
  {
    std::ofstream out(dir.path() / "p2.pgm");
    out << "P2\n1 1\n255\n0\n";
  }
  EXPECT_THROW(read_pgm(dir.path() / "p2.pgm"), DataError);
}

TEST(Pgm, QuantizedPixelsSurviveTheFileFormat) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const float v = quantize_pixel(rng.uniform(-0.2, 1.2));
    const GrayImage g = to_gray(BasicTensor<float>(Shape{1, 1, 1}, {v}));
    EXPECT_EQ(from_gray(g)[0], v);
  }
}
