#pragma once

// Per-view feature extraction, max-aggregation across views, and projection
// to the language model input size.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "xrgen/error.hpp"
#include "xrgen/image.hpp"
#include "xrgen/params.hpp"
#include "xrgen/rng.hpp"
#include "xrgen/tensor.hpp"

namespace xrgen {

inline constexpr std::size_t kDefaultFeatureSize = 1024;
inline constexpr std::size_t kDefaultEmbeddingSize = 256;

class FeatureLengthError : public DataError {
 public:
  using DataError::DataError;
};

class UnknownExamError : public DataError {
 public:
  using DataError::DataError;
};

enum class FeatureSource { cnn, imported };

struct FeatureVector {
  std::vector<double> values;
  FeatureSource source = FeatureSource::cnn;

  Tensor to_tensor() const { return Tensor::row(values); }
  bool operator==(const FeatureVector&) const = default;
};

// ---------------------------------------------------------------------------
// Substitute CNN
// ---------------------------------------------------------------------------

enum class ExtractorKind { cnn, stub };

/// Conv blocks (k x k conv, ReLU, 2x2 max-pool) followed by a global average
/// pool and an affine map to `out_features`. The `stub` kind replaces the
/// conv stack with average-pooling to a `stub_grid` square, a tanh hidden
/// layer, and an affine output; it is smooth and cheap for gradient checks.
struct CnnConfig {
  ExtractorKind kind = ExtractorKind::cnn;
  std::vector<std::size_t> channels{8, 16, 32};
  std::size_t kernel = 3;
  std::size_t out_features = kDefaultFeatureSize;
  std::size_t stub_grid = 8;
  std::size_t stub_hidden = 8;
};

/// He-uniform initialization for the extractor; biases start at zero.
inline void init_cnn(ModelParams& params, const std::string& prefix, const CnnConfig& cfg, Rng& rng) {
  auto he = [](std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); };
  if (cfg.kind == ExtractorKind::stub) {
    const std::size_t in = cfg.stub_grid * cfg.stub_grid;
    params.add(prefix + "stub1.w", uniform_tensor({in, cfg.stub_hidden}, he(in), rng));
    params.add(prefix + "stub1.b", Tensor::zeros({1, cfg.stub_hidden}, true));
    params.add(prefix + "fc.w", uniform_tensor({cfg.stub_hidden, cfg.out_features}, he(cfg.stub_hidden), rng));
    params.add(prefix + "fc.b", Tensor::zeros({1, cfg.out_features}, true));
    return;
  }
  if (cfg.channels.empty()) throw UsageError("init_cnn: at least one conv block is required");
  std::size_t cin = 1;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::size_t cout = cfg.channels[i];
    const std::string p = prefix + "conv" + std::to_string(i + 1);
    params.add(p + ".w", uniform_tensor({cout, cin, cfg.kernel, cfg.kernel}, he(cin * cfg.kernel * cfg.kernel), rng));
    params.add(p + ".b", Tensor::zeros({cout}, true));
    cin = cout;
  }
  params.add(prefix + "fc.w", uniform_tensor({cin, cfg.out_features}, he(cin), rng));
  params.add(prefix + "fc.b", Tensor::zeros({1, cfg.out_features}, true));
}

/// Extractor forward pass on a [1,H,W] image tensor -> [1, out_features].
inline Tensor cnn_forward(const Tensor& image, const ModelParams& params, const std::string& prefix,
                          const CnnConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError("cnn_forward: expected [1,H,W] image, got " + shape_str(image.shape()));
  }
  if (cfg.kind == ExtractorKind::stub) {
    const std::size_t k = std::min(image.dim(1), image.dim(2)) / cfg.stub_grid;
    if (k == 0 || image.dim(1) / k != cfg.stub_grid || image.dim(2) / k != cfg.stub_grid) {
      throw ShapeError("cnn_forward: stub needs a square image divisible into a " +
                       std::to_string(cfg.stub_grid) + " grid, got " + shape_str(image.shape()));
    }
    Tensor pooled = reshape(avg_pool2d(image, k), {1, cfg.stub_grid * cfg.stub_grid});
    Tensor hidden = tanh(affine(pooled, params.at(prefix + "stub1.w"), params.at(prefix + "stub1.b")));
    return affine(hidden, params.at(prefix + "fc.w"), params.at(prefix + "fc.b"));
  }
  Tensor x = image;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string p = prefix + "conv" + std::to_string(i + 1);
    x = max_pool2d(relu(conv2d(x, params.at(p + ".w"), params.at(p + ".b"))), 2);
  }
  return affine(global_avg_pool(x), params.at(prefix + "fc.w"), params.at(prefix + "fc.b"));
}

/// Feature vector of one view through the substitute CNN.
inline FeatureVector cnn_extract(const ViewImage& img, const ModelParams& params, const CnnConfig& cfg,
                                 const std::string& prefix = "cnn.") {
  NoGradGuard ng;
  Tensor f = cnn_forward(img.to_tensor(), params, prefix, cfg);
  return {std::vector<double>(f.data().begin(), f.data().end()), FeatureSource::cnn};
}

// ---------------------------------------------------------------------------
// Aggregation and projection
// ---------------------------------------------------------------------------

/// Elementwise maximum over K >= 1 feature rows [1,F]. Ties route the
/// gradient to the lowest view index.
inline Tensor max_aggregate(const std::vector<Tensor>& features) {
  if (features.empty()) throw UsageError("max_aggregate: no views to aggregate");
  if (features.size() == 1) return features.front();
  return reduce_max_rows(concat_rows(features));
}

inline FeatureVector max_aggregate(const std::vector<FeatureVector>& features) {
  if (features.empty()) throw UsageError("max_aggregate: no views to aggregate");
  FeatureVector out = features.front();
  for (std::size_t k = 1; k < features.size(); ++k) {
    if (features[k].values.size() != out.values.size()) {
      throw ShapeError("max_aggregate: view " + std::to_string(k) + " has length " +
                       std::to_string(features[k].values.size()) + ", expected " +
                       std::to_string(out.values.size()));
    }
    for (std::size_t j = 0; j < out.values.size(); ++j) out.values[j] = std::max(out.values[j], features[k].values[j]);
  }
  return out;
}

inline void init_projection(ModelParams& params, std::size_t F, std::size_t E, Rng& rng) {
  params.add("proj.w", uniform_tensor({F, E}, std::sqrt(6.0 / static_cast<double>(F + E)), rng));
  params.add("proj.b", Tensor::zeros({1, E}, true));
}

/// Affine map of the aggregated features [1,F] to the exam embedding [1,E].
inline Tensor project(const Tensor& aggregated, const ModelParams& params) {
  const Tensor& w = params.at("proj.w");
  if (aggregated.rank() != 2 || aggregated.dim(0) != 1 || aggregated.dim(1) != w.dim(0)) {
    throw ShapeError("project: features " + shape_str(aggregated.shape()) + " do not match weights " +
                     shape_str(w.shape()));
  }
  return affine(aggregated, w, params.at("proj.b"));
}

// ---------------------------------------------------------------------------
// Feature files: `exam_id<TAB>view_index<TAB>f0,f1,...` per line
// ---------------------------------------------------------------------------

using FeatureTable = std::map<std::string, std::vector<FeatureVector>>;

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline void export_features(const std::string& path, const FeatureTable& table) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write feature file '" + path + "'");
  for (const auto& [id, views] : table) {
    for (std::size_t v = 0; v < views.size(); ++v) {
      f << id << '\t' << v << '\t';
      for (std::size_t j = 0; j < views[v].values.size(); ++j) f << (j ? "," : "") << format_double(views[v].values[j]);
      f << '\n';
    }
  }
}

/// Reads a feature file, validating every vector to `expected_len`. When
/// `known_ids` is given, exam ids outside it are rejected.
inline FeatureTable import_features(const std::string& path, std::size_t expected_len = kDefaultFeatureSize,
                                    const std::set<std::string>* known_ids = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open feature file '" + path + "'");
  FeatureTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw FormatError(where + ": expected exam_id<TAB>view_index<TAB>values");
    const std::string id = line.substr(0, t1);
    if (id.empty()) throw FormatError(where + ": empty exam id");
    std::size_t view = 0;
    {
      const char* b = line.data() + t1 + 1;
      const char* e = line.data() + t2;
      auto [p, ec] = std::from_chars(b, e, view);
      if (ec != std::errc() || p != e) throw FormatError(where + ": bad view index");
    }
    FeatureVector fv;
    fv.source = FeatureSource::imported;
    const char* p = line.data() + t2 + 1;
    const char* end = line.data() + line.size();
    while (p < end) {
      double v = 0.0;
      auto [q, ec] = std::from_chars(p, end, v);
      if (ec != std::errc()) throw FormatError(where + ": bad feature value");
      fv.values.push_back(v);
      p = q;
      if (p < end) {
        if (*p != ',') throw FormatError(where + ": expected ',' between values");
        ++p;
        if (p == end) throw FormatError(where + ": trailing ','");
      }
    }
    if (known_ids && !known_ids->count(id)) {
      throw UnknownExamError(where + ": unknown exam id '" + id + "'");
    }
    if (fv.values.size() != expected_len) {
      throw FeatureLengthError("exam '" + id + "' view " + std::to_string(view) + ": feature length " +
                               std::to_string(fv.values.size()) + ", expected " + std::to_string(expected_len));
    }
    auto& views = table[id];
    if (view != views.size()) {
      throw FormatError(where + ": view indices for exam '" + id + "' must be consecutive from 0");
    }
    views.push_back(std::move(fv));
  }
  return table;
}

}  // namespace xrgen
