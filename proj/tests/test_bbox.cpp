#include <cmath>
#include <string>

#include <gtest/gtest.h>

#include "xrgen/bbox.hpp"

using namespace xrgen;

namespace {

BBoxConfig small_config(std::size_t epochs) {
  BBoxConfig cfg;
  cfg.cnn.channels = {4, 8};
  cfg.input_size = 32;
  cfg.epochs = epochs;
  cfg.learning_rate = 3e-3;
  cfg.seed = 3;
  return cfg;
}

ViewImage gradient_image(std::size_t h, std::size_t w) {
  ViewImage img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) img.at(y, x) = static_cast<double>(x + y) / static_cast<double>(h + w);
  return img;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(BBox, Validity) {
  EXPECT_TRUE(BBox{}.valid());
  EXPECT_TRUE((BBox{0.2, 0.3, 0.8, 0.7}.valid()));
  EXPECT_FALSE((BBox{0.3, 0.0, 0.8, 0.5}.valid()));
  EXPECT_FALSE((BBox{0.0, 0.0, 0.0, 0.5}.valid()));
  EXPECT_FALSE((BBox{-0.1, 0.0, 0.5, 0.5}.valid()));
  EXPECT_FALSE((BBox{0.0, 0.0, NAN, 0.5}.valid()));
}

TEST(Jitter, ZeroTranslationIsIdentity) {
  const BBox b{0.25, 0.4, 0.5, 0.3};
  EXPECT_EQ(translate_bbox(b, 0, 0, 100, 80), b);
}

TEST(Jitter, CornerBoxClampedToCorner) {
  const BBox b{0.0, 0.0, 0.4, 0.4};
  EXPECT_EQ(translate_bbox(b, -5, -5, 100, 100), b);
  const BBox far{0.6, 0.6, 0.4, 0.4};
  EXPECT_EQ(translate_bbox(far, 5, 5, 100, 100), far);
}

TEST(Jitter, StaysWithinFivePixelsAndInBounds) {
  Rng rng(1);
  const std::size_t H = 96, W = 80;
  for (int t = 0; t < 1000; ++t) {
    const double w = rng.uniform(0.05, 1.0), h = rng.uniform(0.05, 1.0);
    const BBox b{rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h), w, h};
    const BBox j = jitter_bbox(b, H, W, rng);
    EXPECT_TRUE(j.valid());
    EXPECT_EQ(j.width, b.width);
    EXPECT_EQ(j.height, b.height);
    EXPECT_LE(std::abs(j.x_min - b.x_min) * W, 5.0 + 1e-9);
    EXPECT_LE(std::abs(j.y_min - b.y_min) * H, 5.0 + 1e-9);
  }
}

TEST(CropToBox, FullBoxEqualsResizePad) {
  Rng rng(2);
  ViewImage img(70, 50);
  for (double& p : img.pixels) p = rng.uniform();
  EXPECT_EQ(crop_to_bbox(img, BBox{}, 48).pixels, resize_pad(img, 48).pixels);
}

TEST(CropToBox, LeftHalfKeepsOnlyLeftContent) {
  ViewImage img(64, 64, 1.0);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 32; ++x) img.at(y, x) = 0.25;
  const ViewImage out = crop_to_bbox(img, BBox{0.0, 0.0, 0.5, 1.0}, 64);
  // left half is 64x32, resized to 64x32 content and padded with zeros at the sides
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      const double p = out.at(y, x);
      EXPECT_TRUE(p == 0.0 || std::abs(p - 0.25) < 1e-12) << y << "," << x << " " << p;
    }
  }
}

TEST(CropToBox, MarkerKeptIffInsideBox) {
  ViewImage img(80, 80, 0.1);
  for (std::size_t y = 50; y < 56; ++y)
    for (std::size_t x = 20; x < 26; ++x) img.at(y, x) = 1.0;
  auto peak = [](const ViewImage& v) {
    double m = 0.0;
    for (double p : v.pixels) m = std::max(m, p);
    return m;
  };
  EXPECT_GT(peak(crop_to_bbox(img, BBox{0.1, 0.5, 0.4, 0.4}, 32)), 0.9);
  EXPECT_LT(peak(crop_to_bbox(img, BBox{0.5, 0.0, 0.5, 0.5}, 32)), 0.2);
  EXPECT_LT(peak(crop_to_bbox(img, BBox{0.0, 0.0, 0.5, 0.5}, 32)), 0.2);
}

TEST(CropToBox, SubPixelBoxRejected) {
  EXPECT_THROW(crop_to_bbox(ViewImage(40, 40), BBox{0.5, 0.5, 0.001, 0.001}, 32), DataError);
  EXPECT_THROW(crop_to_bbox(ViewImage(40, 40), BBox{0.5, 0.5, 0.8, 0.2}, 32), DataError);
}

TEST(BBoxTrain, ZeroEpochsReturnsInitialParams) {
  const BBoxConfig cfg = small_config(0);
  Rng rng(cfg.seed);
  const ModelParams init = init_bbox_params(cfg, rng);
  const BBoxTrainResult r = bbox_train({{"a", gradient_image(40, 40), BBox{0.2, 0.2, 0.5, 0.5}}}, cfg);
  ASSERT_EQ(r.params.size(), init.size());
  for (const auto& [name, t] : init) EXPECT_EQ(values(r.params.at(name)), values(t)) << name;
  EXPECT_TRUE(r.epoch_loss.empty());
}

TEST(BBoxTrain, InvalidBoxNamesThePair) {
  try {
    bbox_train({{"images/knee_7.pgm", gradient_image(40, 40), BBox{0.5, 0.5, 0.8, 0.2}}}, small_config(1));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("images/knee_7.pgm"), std::string::npos);
  }
  EXPECT_THROW(bbox_train({}, small_config(1)), DataError);
}

TEST(BBoxTrain, OverfitsSingleRepeatedPair) {
  const BBox target{0.15, 0.3, 0.5, 0.4};
  const ViewImage img = gradient_image(48, 40);
  const BBoxTrainResult r = bbox_train({{"a", img, target}, {"a", img, target}}, small_config(500));
  EXPECT_LT(r.final_loss, 1e-3);
  for (std::size_t e = 1; e < r.best_so_far.size(); ++e) EXPECT_LE(r.best_so_far[e], r.best_so_far[e - 1]);
  EXPECT_LT(r.best_so_far.back(), r.epoch_loss.front());
}

TEST(BBoxTrain, DeterministicGivenSeed) {
  const ViewImage img = gradient_image(40, 40);
  const std::vector<BBoxPair> pairs{{"a", img, BBox{0.1, 0.1, 0.5, 0.5}}, {"b", flip_horizontal(img), BBox{0.4, 0.1, 0.5, 0.5}}};
  const auto a = bbox_train(pairs, small_config(5)), b = bbox_train(pairs, small_config(5));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  for (const auto& [name, t] : a.params) EXPECT_EQ(values(b.params.at(name)), values(t));
}

TEST(BBoxPredict, AlwaysValid) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    BBoxConfig cfg = small_config(0);
    ModelParams p = init_bbox_params(cfg, rng);
    for (double& v : p.at("bbox.fc.b").mutable_data()) v = rng.uniform(-6.0, 6.0);
    ViewImage img(30 + rng.below(40), 30 + rng.below(40));
    for (double& v : img.pixels) v = rng.uniform();
    const BBox b = predict_bbox(img, p, cfg);
    EXPECT_TRUE(b.valid());
  }
}

TEST(BBoxPredict, SaturatedHeadRaises) {
  BBoxConfig cfg = small_config(0);
  Rng rng(5);
  ModelParams p = init_bbox_params(cfg, rng);
  p.at("bbox.fc.b").mutable_data()[0] = 100.0;  // x_min rounds to exactly 1
  EXPECT_THROW(predict_bbox(ViewImage(32, 32, 0.5), p, cfg), NumericError);
}
