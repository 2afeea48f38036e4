#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "xrgen/adam.hpp"
#include "xrgen/caption.hpp"
#include "xrgen/error.hpp"
#include "xrgen/params.hpp"
#include "xrgen/rng.hpp"
#include "xrgen/text.hpp"

namespace xrgen {

/// One training/evaluation unit: the views fed to the model and the target
/// sequence. In single-image mode an exam contributes one sample per view.
struct Sample {
  std::string id;
  std::vector<ViewInput> views;
  CleanedReport report;
  EncodedSequence seq;
};

/// Random-access sample provider. Implementations may synthesize samples on
/// demand (augmentation) but must be deterministic in the index.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual Sample get(std::size_t i) const = 0;
  /// True when get(i) always returns the same views (feature caching is safe).
  virtual bool fixed_views() const { return true; }
};

class VectorSource : public SampleSource {
 public:
  explicit VectorSource(std::vector<Sample> samples) : samples_(std::move(samples)) {}
  std::size_t size() const override { return samples_.size(); }
  Sample get(std::size_t i) const override { return samples_.at(i); }
  const std::vector<Sample>& samples() const { return samples_; }

 private:
  std::vector<Sample> samples_;
};

struct TrainConfig {
  std::size_t batch_size = 20;
  double learning_rate = 1e-5;
  std::size_t max_epochs = 50;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  LossNorm loss_norm = LossNorm::mean_over_steps;
  bool freeze_cnn = false;
  /// Stop once validation loss falls below this value (0 disables).
  double target_val_loss = 0.0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  ModelParams params;  // parameters at the best validation epoch
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
};

/// `epoch<TAB>train_loss<TAB>val_loss` lines.
inline std::string format_training_log(const std::vector<EpochLog>& log) {
  std::string s;
  for (const auto& e : log) {
    s += std::to_string(e.epoch) + '\t' + format_double(e.train_loss) + '\t' + format_double(e.val_loss) + '\n';
  }
  return s;
}

inline Tensor sample_loss(const Sample& s, const ModelParams& params, const ModelConfig& mcfg, LossNorm norm,
                          const std::vector<Tensor>* cached_features = nullptr) {
  Tensor emb;
  if (cached_features) {
    emb = project(max_aggregate(*cached_features), params);
  } else {
    emb = exam_embedding(s.views, params, mcfg);
  }
  return unroll_loss(emb, s.seq, LstmParams::from(params), norm);
}

namespace detail {

/// Extractor outputs for a frozen CNN, computed once per fixed sample.
class FeatureCache {
 public:
  FeatureCache(const SampleSource& src, const ModelParams& params, const ModelConfig& mcfg, bool enabled)
      : enabled_(enabled && src.fixed_views() && mcfg.feature_mode == FeatureMode::cnn) {
    if (!enabled_) return;
    NoGradGuard ng;
    CnnConfig c = mcfg.cnn;
    c.out_features = mcfg.feature_size;
    feats_.resize(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
      for (const auto& v : src.get(i).views) feats_[i].push_back(cnn_forward(v.image.to_tensor(), params, "cnn.", c));
    }
  }
  const std::vector<Tensor>* get(std::size_t i) const { return enabled_ ? &feats_[i] : nullptr; }

 private:
  bool enabled_;
  std::vector<std::vector<Tensor>> feats_;
};

inline double mean_loss(const SampleSource& src, const ModelParams& params, const ModelConfig& mcfg, LossNorm norm,
                        const FeatureCache& cache) {
  NoGradGuard ng;
  double s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) s += sample_loss(src.get(i), params, mcfg, norm, cache.get(i)).item();
  return s / static_cast<double>(src.size());
}

}  // namespace detail

/// Mini-batch Adam training with per-epoch validation and early stopping.
/// Epoch 0 of the log holds the losses of the initial parameters. The
/// returned parameters are those of the best validation epoch.
inline TrainResult train(const SampleSource& train_set, const SampleSource& val_set, ModelParams params,
                         const ModelConfig& mcfg, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (train_set.size() == 0) throw DataError("train: empty training split");
  if (val_set.size() == 0) throw DataError("train: empty validation split");
  if (cfg.batch_size == 0) throw UsageError("train: batch size must be positive");
  if (cfg.freeze_cnn) params.set_trainable("cnn.", false);

  detail::FeatureCache train_cache(train_set, params, mcfg, cfg.freeze_cnn);
  detail::FeatureCache val_cache(val_set, params, mcfg, cfg.freeze_cnn);

  Rng rng(cfg.seed);
  AdamState adam(AdamConfig{cfg.learning_rate});
  TrainResult res;
  EpochLog first{0, detail::mean_loss(train_set, params, mcfg, cfg.loss_norm, train_cache),
                 detail::mean_loss(val_set, params, mcfg, cfg.loss_norm, val_cache)};
  res.log.push_back(first);
  if (on_epoch) on_epoch(first);
  res.params = params.clone();
  double best_val = first.val_loss;
  std::size_t since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (cfg.target_val_loss > 0.0 && best_val < cfg.target_val_loss) break;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      params.zero_grad();
      for (std::size_t k = start; k < stop; ++k) {
        Tensor loss = sample_loss(train_set.get(order[k]), params, mcfg, cfg.loss_norm, train_cache.get(order[k]));
        total += loss.item();
        backward(mul(loss, scale));
      }
      adam_step(params, adam);
    }
    EpochLog e{epoch, total / static_cast<double>(order.size()),
               detail::mean_loss(val_set, params, mcfg, cfg.loss_norm, val_cache)};
    res.log.push_back(e);
    if (on_epoch) on_epoch(e);
    if (e.val_loss < best_val) {
      best_val = e.val_loss;
      res.best_epoch = epoch;
      res.params = params.clone();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (cfg.freeze_cnn) res.params.set_trainable("cnn.", true);
  return res;
}

/// Greedy or sampled token ids for one sample's views.
inline std::vector<TokenId> generate(const std::vector<ViewInput>& views, const ModelParams& params,
                                     const ModelConfig& mcfg, const DecodeOptions& opt = {}) {
  NoGradGuard ng;
  return generate_tokens(exam_embedding(views, params, mcfg), LstmParams::from(params), opt);
}

}  // namespace xrgen
