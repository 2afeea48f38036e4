#pragma once

// LSTM report generator conditioned on an exam embedding at t = 0.
//
// Naming follows the model's own equations: `h` is the memory accumulator and
// `m` the exposed output,
//   h_t = f_t * h_{t-1} + i_t * tanh(W_hx x_t + W_hm m_{t-1} + b_h)
//   m_t = o_t * tanh(h_t)
// with i, f, o = sigmoid(W_.x x_t + W_.m m_{t-1} + b_.).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "xrgen/error.hpp"
#include "xrgen/features.hpp"
#include "xrgen/params.hpp"
#include "xrgen/rng.hpp"
#include "xrgen/tensor.hpp"
#include "xrgen/text.hpp"

namespace xrgen {

enum class FeatureMode { cnn, imported };

struct ModelConfig {
  std::size_t hidden = kDefaultEmbeddingSize;        // E
  std::size_t feature_size = kDefaultFeatureSize;    // F
  std::size_t vocab_size = 0;                        // V
  FeatureMode feature_mode = FeatureMode::cnn;
  CnnConfig cnn;
  double init_range = 0.08;
  double forget_bias = 1.0;
};

inline constexpr const char* kLstmWeights[] = {"W_hx", "W_hm", "W_ix", "W_im", "W_fx", "W_fm", "W_ox", "W_om"};
inline constexpr const char* kLstmBiases[] = {"b_h", "b_i", "b_f", "b_o"};

/// Full parameter set: extractor (cnn mode only), projection, embedding,
/// LSTM gates and the output layer.
inline ModelParams init_caption_params(const ModelConfig& cfg, Rng& rng) {
  if (cfg.vocab_size <= Vocab::kReserved) throw UsageError("init_caption_params: vocabulary is empty");
  if (cfg.hidden == 0 || cfg.feature_size == 0) throw UsageError("init_caption_params: zero model size");
  ModelParams p;
  if (cfg.feature_mode == FeatureMode::cnn) {
    CnnConfig c = cfg.cnn;
    c.out_features = cfg.feature_size;
    init_cnn(p, "cnn.", c, rng);
  }
  init_projection(p, cfg.feature_size, cfg.hidden, rng);
  const double a = cfg.init_range;
  const std::size_t E = cfg.hidden, V = cfg.vocab_size;
  p.add("embed", uniform_tensor({V, E}, a, rng));
  for (const char* w : kLstmWeights) p.add(std::string("lstm.") + w, uniform_tensor({E, E}, a, rng));
  for (const char* b : kLstmBiases) {
    if (std::string(b) == "b_f") {
      p.add("lstm.b_f", Tensor::full({1, E}, cfg.forget_bias, true));
    } else {
      p.add(std::string("lstm.") + b, uniform_tensor({1, E}, a, rng));
    }
  }
  p.add("out.w", uniform_tensor({E, V}, a, rng));
  p.add("out.b", uniform_tensor({1, V}, a, rng));
  return p;
}

/// Handles onto the language-model tensors of a ModelParams.
struct LstmParams {
  Tensor W_hx, W_hm, W_ix, W_im, W_fx, W_fm, W_ox, W_om;
  Tensor b_h, b_i, b_f, b_o;
  Tensor embed, out_w, out_b;

  static LstmParams from(const ModelParams& p) {
    LstmParams l{p.at("lstm.W_hx"), p.at("lstm.W_hm"), p.at("lstm.W_ix"), p.at("lstm.W_im"),
                 p.at("lstm.W_fx"), p.at("lstm.W_fm"), p.at("lstm.W_ox"), p.at("lstm.W_om"),
                 p.at("lstm.b_h"),  p.at("lstm.b_i"),  p.at("lstm.b_f"),  p.at("lstm.b_o"),
                 p.at("embed"),     p.at("out.w"),     p.at("out.b")};
    const std::size_t E = l.W_hx.dim(0);
    for (const Tensor* w : {&l.W_hx, &l.W_hm, &l.W_ix, &l.W_im, &l.W_fx, &l.W_fm, &l.W_ox, &l.W_om}) {
      if (w->shape() != Shape{E, E}) throw ShapeError("LstmParams: gate weight shape " + shape_str(w->shape()));
    }
    for (const Tensor* b : {&l.b_h, &l.b_i, &l.b_f, &l.b_o}) {
      if (b->shape() != Shape{1, E}) throw ShapeError("LstmParams: gate bias shape " + shape_str(b->shape()));
    }
    if (l.embed.rank() != 2 || l.embed.dim(1) != E || l.out_w.rank() != 2 || l.out_w.dim(0) != E ||
        l.out_w.dim(1) != l.embed.dim(0) || l.out_b.shape() != Shape{1, l.embed.dim(0)}) {
      throw ShapeError("LstmParams: embedding/output shapes inconsistent with hidden size " + std::to_string(E));
    }
    return l;
  }

  std::size_t hidden() const { return W_hx.dim(0); }
  std::size_t vocab() const { return embed.dim(0); }
};

struct LstmState {
  Tensor h;  // memory accumulator
  Tensor m;  // exposed output

  static LstmState zeros(std::size_t E) { return {Tensor::zeros({1, E}), Tensor::zeros({1, E})}; }
};

struct StepOutput {
  LstmState state;
  Tensor logits;  // [1,V]
};

inline StepOutput lstm_step(const Tensor& x, const LstmState& prev, const LstmParams& p) {
  auto gate = [&](const Tensor& wx, const Tensor& wm, const Tensor& b) {
    return add(add(matmul(x, wx), matmul(prev.m, wm)), b);
  };
  Tensor i = sigmoid(gate(p.W_ix, p.W_im, p.b_i));
  Tensor f = sigmoid(gate(p.W_fx, p.W_fm, p.b_f));
  Tensor o = sigmoid(gate(p.W_ox, p.W_om, p.b_o));
  Tensor cand = tanh(gate(p.W_hx, p.W_hm, p.b_h));
  Tensor h = add(mul(f, prev.h), mul(i, cand));
  Tensor m = mul(o, tanh(h));
  Tensor logits = affine(m, p.out_w, p.out_b);
  return {{h, m}, logits};
}

enum class LossNorm { mean_over_steps, sum };

/// Negative log-likelihood of the sequence given the exam embedding. The
/// embedding is consumed at t = 0 without a loss term; from t = 1 the input
/// is the token at position t and the target the token at t + 1, counted
/// only where the target position is unmasked.
inline Tensor unroll_loss(const Tensor& exam_embedding, const EncodedSequence& seq, const LstmParams& p,
                          LossNorm norm = LossNorm::mean_over_steps) {
  const std::size_t E = p.hidden();
  if (exam_embedding.shape() != Shape{1, E}) {
    throw ShapeError("unroll_loss: exam embedding " + shape_str(exam_embedding.shape()) + " vs hidden size " +
                     std::to_string(E));
  }
  if (seq.ids.size() != seq.mask.size()) throw UsageError("unroll_loss: ids/mask length mismatch");
  std::size_t last = 0;
  for (std::size_t t = 2; t < seq.ids.size(); ++t) {
    if (seq.mask[t]) last = t;
  }
  if (last == 0) throw UsageError("unroll_loss: sequence has no unmasked targets");

  StepOutput step = lstm_step(exam_embedding, LstmState::zeros(E), p);
  std::vector<Tensor> terms;
  for (std::size_t t = 1; t < last; ++t) {
    step = lstm_step(row_of(p.embed, seq.ids[t]), step.state, p);
    if (seq.mask[t + 1]) terms.push_back(softmax_cross_entropy(step.logits, seq.ids[t + 1]));
  }
  Tensor total = add_n(terms);
  if (norm == LossNorm::sum) return total;
  return mul(total, 1.0 / static_cast<double>(terms.size()));
}

enum class DecodeMode { greedy, sample };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_len = 32;
};

/// Emits tokens after START until END (included) or max_len tokens. PAD and
/// START are never emitted.
inline std::vector<TokenId> generate_tokens(const Tensor& exam_embedding, const LstmParams& p,
                                            const DecodeOptions& opt = {}) {
  if (opt.mode == DecodeMode::sample && !(opt.temperature > 0.0)) {
    throw UsageError("generate: temperature must be positive");
  }
  NoGradGuard ng;
  std::vector<TokenId> out;
  if (opt.max_len == 0) return out;
  Rng rng(opt.seed);
  const std::size_t V = p.vocab();
  StepOutput step = lstm_step(exam_embedding.detach(), LstmState::zeros(p.hidden()), p);
  TokenId prev = Vocab::START;
  while (out.size() < opt.max_len) {
    step = lstm_step(row_of(p.embed, prev), step.state, p);
    auto l = step.logits.data();
    TokenId next = Vocab::END;
    if (opt.mode == DecodeMode::greedy) {
      double best = -std::numeric_limits<double>::infinity();
      for (TokenId v = 0; v < V; ++v) {
        if (v == Vocab::PAD || v == Vocab::START) continue;
        if (l[v] > best) {
          best = l[v];
          next = v;
        }
      }
    } else {
      std::vector<double> scaled;
      std::vector<TokenId> ids;
      for (TokenId v = 0; v < V; ++v) {
        if (v == Vocab::PAD || v == Vocab::START) continue;
        scaled.push_back(l[v] / opt.temperature);
        ids.push_back(v);
      }
      const auto probs = softmax_values(scaled);
      double u = rng.uniform();
      next = ids.back();
      for (std::size_t k = 0; k < probs.size(); ++k) {
        if (u < probs[k]) {
          next = ids[k];
          break;
        }
        u -= probs[k];
      }
    }
    out.push_back(next);
    if (next == Vocab::END) break;
    prev = next;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exam embedding
// ---------------------------------------------------------------------------

/// One view as seen by the model: an image (cnn mode) or a precomputed
/// feature vector (imported mode).
struct ViewInput {
  ViewImage image;
  FeatureVector features;
};

/// Per-view features -> max-aggregate -> projection to [1,E].
inline Tensor exam_embedding(const std::vector<ViewInput>& views, const ModelParams& params,
                             const ModelConfig& cfg) {
  if (views.empty()) throw UsageError("exam_embedding: exam has no views");
  std::vector<Tensor> feats;
  feats.reserve(views.size());
  CnnConfig c = cfg.cnn;
  c.out_features = cfg.feature_size;
  for (const auto& v : views) {
    if (cfg.feature_mode == FeatureMode::cnn) {
      feats.push_back(cnn_forward(v.image.to_tensor(), params, "cnn.", c));
    } else {
      if (v.features.values.size() != cfg.feature_size) {
        throw ShapeError("exam_embedding: imported feature length " + std::to_string(v.features.values.size()) +
                         ", expected " + std::to_string(cfg.feature_size));
      }
      feats.push_back(v.features.to_tensor());
    }
  }
  return project(max_aggregate(feats), params);
}

}  // namespace xrgen
