#pragma once

// Knee-joint bounding-box regression and box-based cropping.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "xrgen/adam.hpp"
#include "xrgen/error.hpp"
#include "xrgen/features.hpp"
#include "xrgen/image.hpp"
#include "xrgen/params.hpp"
#include "xrgen/rng.hpp"

namespace xrgen {

/// Normalized box (fractions of image width/height).
struct BBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double width = 1.0;
  double height = 1.0;

  bool valid() const {
    return x_min >= 0.0 && y_min >= 0.0 && width > 0.0 && height > 0.0 && x_min + width <= 1.0 + 1e-12 &&
           y_min + height <= 1.0 + 1e-12 && std::isfinite(x_min + y_min + width + height);
  }

  bool operator==(const BBox&) const = default;
};

inline constexpr int kJitterPixels = 5;

/// Integer-pixel translation, clamped so the box stays inside the image.
/// Width and height are never changed.
inline BBox translate_bbox(const BBox& box, int dx, int dy, std::size_t img_h, std::size_t img_w) {
  BBox out = box;
  out.x_min = std::clamp(box.x_min + static_cast<double>(dx) / static_cast<double>(img_w), 0.0,
                         std::max(0.0, 1.0 - box.width));
  out.y_min = std::clamp(box.y_min + static_cast<double>(dy) / static_cast<double>(img_h), 0.0,
                         std::max(0.0, 1.0 - box.height));
  return out;
}

/// Uniform translation in [-5, 5] px per axis.
inline BBox jitter_bbox(const BBox& box, std::size_t img_h, std::size_t img_w, Rng& rng) {
  const int dx = static_cast<int>(rng.range(-kJitterPixels, kJitterPixels));
  const int dy = static_cast<int>(rng.range(-kJitterPixels, kJitterPixels));
  return translate_bbox(box, dx, dy, img_h, img_w);
}

/// Crops the box region (rounded to whole pixels) and resize-pads it to
/// `target`. A box covering the image reproduces resize_pad(img, target).
inline ViewImage crop_to_bbox(const ViewImage& img, const BBox& box, std::size_t target) {
  if (!box.valid()) throw DataError("crop_to_bbox: invalid box");
  auto edge = [](double frac, std::size_t n) {
    return std::min<std::size_t>(n, static_cast<std::size_t>(std::lround(frac * static_cast<double>(n))));
  };
  const std::size_t x0 = edge(box.x_min, img.width);
  const std::size_t x1 = edge(box.x_min + box.width, img.width);
  const std::size_t y0 = edge(box.y_min, img.height);
  const std::size_t y1 = edge(box.y_min + box.height, img.height);
  if (x1 <= x0 || y1 <= y0) {
    throw DataError("crop_to_bbox: box covers less than one pixel of a " + std::to_string(img.height) + "x" +
                    std::to_string(img.width) + " image");
  }
  return resize_pad(crop(img, y0, x0, y1 - y0, x1 - x0), target);
}

// ---------------------------------------------------------------------------
// Regressor
// ---------------------------------------------------------------------------

struct BBoxPair {
  std::string name;  // image path or other identifier, used in diagnostics
  ViewImage image;
  BBox box;
};

struct BBoxConfig {
  CnnConfig cnn{ExtractorKind::cnn, {8, 16, 32}, 3, 4, 8, 8};
  std::size_t input_size = 224;
  std::size_t epochs = 100;
  std::size_t batch_size = 20;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

inline ModelParams init_bbox_params(const BBoxConfig& cfg, Rng& rng) {
  CnnConfig c = cfg.cnn;
  c.out_features = 4;
  ModelParams p;
  init_cnn(p, "bbox.", c, rng);
  return p;
}

/// Raw sigmoid head output [1,4] = (x_min, y_min, width, height).
inline Tensor bbox_forward(const ViewImage& input, const ModelParams& params, const BBoxConfig& cfg) {
  CnnConfig c = cfg.cnn;
  c.out_features = 4;
  return sigmoid(cnn_forward(input.to_tensor(), params, "bbox.", c));
}

/// Predicted box for an image of any size; the head output is clamped so the
/// box stays inside the image.
inline BBox predict_bbox(const ViewImage& img, const ModelParams& params, const BBoxConfig& cfg) {
  NoGradGuard ng;
  Tensor out = bbox_forward(resize_pad(img, cfg.input_size), params, cfg);
  BBox b{out.at(0), out.at(1), out.at(2), out.at(3)};
  b.width = std::min(b.width, 1.0 - b.x_min);
  b.height = std::min(b.height, 1.0 - b.y_min);
  if (!(b.width > 0.0 && b.height > 0.0)) throw NumericError("predict_bbox: degenerate box after clamping");
  return b;
}

struct BBoxTrainResult {
  ModelParams params;
  std::vector<double> epoch_loss;       // mean MSE over pairs, measured before the epoch's updates
  std::vector<double> best_so_far;      // running minimum of epoch_loss
  double final_loss = 0.0;              // mean MSE after the last epoch
};

/// Mean squared error of the head over `inputs` (already resized).
inline double bbox_mse(const std::vector<ViewImage>& inputs, const std::vector<BBox>& boxes,
                       const ModelParams& params, const BBoxConfig& cfg) {
  NoGradGuard ng;
  double s = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const BBox& b = boxes[i];
    s += mse_loss(bbox_forward(inputs[i], params, cfg), Tensor::row({b.x_min, b.y_min, b.width, b.height})).item();
  }
  return s / static_cast<double>(inputs.size());
}

/// Trains the box regressor with mini-batch Adam on MSE of normalized
/// coordinates. Deterministic given cfg.seed.
inline BBoxTrainResult bbox_train(const std::vector<BBoxPair>& pairs, const BBoxConfig& cfg) {
  if (pairs.empty()) throw DataError("bbox_train: no training pairs");
  for (const auto& p : pairs) {
    if (!p.box.valid()) throw DataError("bbox_train: invalid ground-truth box for '" + p.name + "'");
  }
  Rng rng(cfg.seed);
  BBoxTrainResult res{init_bbox_params(cfg, rng), {}, {}};
  std::vector<ViewImage> inputs;
  std::vector<BBox> boxes;
  for (const auto& p : pairs) {
    inputs.push_back(resize_pad(p.image, cfg.input_size));
    boxes.push_back(p.box);
  }
  AdamState adam(AdamConfig{cfg.learning_rate});
  std::vector<std::size_t> order(pairs.size());
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double before = bbox_mse(inputs, boxes, res.params, cfg);
    best = std::min(best, before);
    res.epoch_loss.push_back(before);
    res.best_so_far.push_back(best);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t stop = std::min(order.size(), start + bs);
      res.params.zero_grad();
      for (std::size_t k = start; k < stop; ++k) {
        const BBox& b = boxes[order[k]];
        Tensor loss = mse_loss(bbox_forward(inputs[order[k]], res.params, cfg),
                               Tensor::row({b.x_min, b.y_min, b.width, b.height}));
        backward(mul(loss, 1.0 / static_cast<double>(stop - start)));
      }
      adam_step(res.params, adam);
    }
  }
  res.final_loss = bbox_mse(inputs, boxes, res.params, cfg);
  return res;
}

}  // namespace xrgen
