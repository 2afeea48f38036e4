#pragma once

// End-to-end flow: dataset -> cleaned/split/encoded exams -> training ->
// generation and scoring, plus the three-variant experiment matrix.

#include <algorithm>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "xrgen/bbox.hpp"
#include "xrgen/caption.hpp"
#include "xrgen/checkpoint.hpp"
#include "xrgen/config.hpp"
#include "xrgen/features.hpp"
#include "xrgen/image.hpp"
#include "xrgen/manifest.hpp"
#include "xrgen/metrics.hpp"
#include "xrgen/synth.hpp"
#include "xrgen/text.hpp"
#include "xrgen/trainer.hpp"

namespace xrgen {

// Stream ids for Rng::derive(config.seed, stream, ...).
namespace stream {
inline constexpr std::uint64_t split = 1;
inline constexpr std::uint64_t init = 2;
inline constexpr std::uint64_t shuffle = 3;
inline constexpr std::uint64_t augment = 4;
inline constexpr std::uint64_t bbox = 5;
inline constexpr std::uint64_t decode = 6;
inline constexpr std::uint64_t sentences = 7;
}  // namespace stream

/// Runs fn(0..n-1) on a bounded pool of threads. Each index must write only
/// its own output slot; the first exception is rethrown.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t max_workers = 0) {
  if (n == 0) return;
  std::size_t workers = max_workers ? max_workers : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min({workers, n, std::size_t{8}});
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr err;
  auto work = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (err || next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

struct ExamRecord {
  std::string id;
  Split split = Split::unassigned;
  std::vector<ImageRef> refs;
  std::vector<ViewImage> images;          // cnn mode
  std::vector<FeatureVector> features;    // imported mode
  CleanedReport report;

  std::size_t view_count() const { return images.empty() ? features.size() : images.size(); }
};

struct PreparedData {
  std::string dir;
  std::vector<ExamRecord> exams;
  Vocab vocab;
  std::string rules_version;

  std::vector<const ExamRecord*> split(Split s) const {
    std::vector<const ExamRecord*> out;
    for (const auto& e : exams) {
      if (e.split == s) out.push_back(&e);
    }
    return out;
  }
};

inline std::string manifest_path(const std::string& dir) {
  return (std::filesystem::path(dir) / "manifest.jsonl").string();
}

inline std::string default_rules_path() {
#ifdef XRGEN_DATA_DIR
  return std::string(XRGEN_DATA_DIR) + "/cleaning_rules.txt";
#else
  return "data/cleaning_rules.txt";
#endif
}

/// Loads the manifest under `dir`, assigns 80/10/10 splits when any exam is
/// unassigned, cleans reports, loads images (or imported features) and builds
/// the vocabulary from the training split.
inline PreparedData prepare_data(const std::string& dir, const CleaningRules& rules, const RunConfig& cfg) {
  cfg.validate();
  auto entries = load_manifest(manifest_path(dir));
  const bool needs_split = std::any_of(entries.begin(), entries.end(),
                                       [](const auto& e) { return e.split == Split::unassigned; });
  if (needs_split) {
    entries = split_dataset(std::move(entries), {0.8, 0.1, 0.1}, Rng::derive(cfg.seed, stream::split).next_u64());
  }
  PreparedData out;
  out.dir = dir;
  out.rules_version = rules.version;
  FeatureTable table;
  if (cfg.feature_mode == FeatureMode::imported) {
    std::set<std::string> ids;
    for (const auto& e : entries) ids.insert(e.exam_id);
    std::filesystem::path fp(cfg.features_path);
    if (fp.is_relative() && !std::filesystem::exists(fp)) fp = std::filesystem::path(dir) / fp;
    table = import_features(fp.string(), cfg.feature_size, &ids);
  }
  const auto base = std::filesystem::path(dir);
  for (const auto& e : entries) {
    ExamRecord r;
    r.id = e.exam_id;
    r.split = e.split;
    r.refs = e.images;
    if (cfg.feature_mode == FeatureMode::imported) {
      auto it = table.find(e.exam_id);
      if (it == table.end() || it->second.empty()) throw DataError("exam '" + e.exam_id + "' has no imported features");
      r.features = it->second;
    } else {
      for (const auto& ref : e.images) {
        ViewImage img = read_pgm((base / ref.path).string());
        img.view = ref.view;
        img.side = ref.side;
        img.weight_bearing = ref.weight_bearing;
        r.images.push_back(std::move(img));
      }
    }
    r.report = clean_report(e.report, rules);
    out.exams.push_back(std::move(r));
  }
  std::vector<CleanedReport> corpus;
  for (const auto& e : out.exams) {
    if (e.split == Split::train) corpus.push_back(e.report);
  }
  if (corpus.empty()) throw DataError("prepare_data: training split is empty");
  out.vocab = Vocab::build(corpus, cfg.min_freq);
  return out;
}

// ---------------------------------------------------------------------------
// View preparation
// ---------------------------------------------------------------------------

/// Returns the crop box for an image; empty when cropping is off.
using BoxFn = std::function<BBox(const ViewImage&)>;

/// Model input for evaluation: resize-pad to the input size, or crop to the
/// box first when a box function is given.
inline ViewImage eval_view(const ViewImage& img, std::size_t size, const BoxFn& box_fn) {
  if (box_fn) return crop_to_bbox(img, box_fn(img), size);
  return resize_pad(img, size);
}

/// One model input unit: an exam (max-aggregation) or a single view
/// (baseline). Views index into the exam's images or features.
struct Unit {
  const ExamRecord* exam = nullptr;
  std::vector<std::size_t> views;
  std::string id;
};

inline std::vector<Unit> make_units(const std::vector<const ExamRecord*>& exams, AggregationMode mode) {
  std::vector<Unit> out;
  for (const ExamRecord* e : exams) {
    if (mode == AggregationMode::max) {
      Unit u{e, {}, e->id};
      for (std::size_t v = 0; v < e->view_count(); ++v) u.views.push_back(v);
      out.push_back(std::move(u));
    } else {
      for (std::size_t v = 0; v < e->view_count(); ++v) out.push_back({e, {v}, e->id + "#" + std::to_string(v)});
    }
  }
  return out;
}

/// Samples for training. With augmentation each unit yields 8 variants:
/// 4 seeded crops x {plain, flipped}, each with its own sentence order. In
/// box mode the crops are jittered boxes instead of random offsets.
class UnitSource : public SampleSource {
 public:
  UnitSource(std::vector<Unit> units, const Vocab& vocab, const RunConfig& cfg, bool augment, BoxFn box_fn)
      : units_(std::move(units)), vocab_(vocab), cfg_(cfg), box_fn_(std::move(box_fn)) {
    imported_ = cfg.feature_mode == FeatureMode::imported;
    augment_ = augment && !imported_;
    margin_ = crop_margin_for(cfg.image_size);
    for (const Unit& u : units_) {
      std::vector<ViewImage> base;
      std::vector<BBox> boxes;
      for (std::size_t v : u.views) {
        if (imported_) continue;
        const ViewImage& img = u.exam->images[v];
        if (box_fn_) {
          boxes.push_back(box_fn_(img));
          base.push_back(augment_ ? img : crop_to_bbox(img, boxes.back(), cfg.image_size));
        } else {
          base.push_back(resize_pad(img, augment_ ? cfg.image_size + margin_ : cfg.image_size));
        }
      }
      base_.push_back(std::move(base));
      boxes_.push_back(std::move(boxes));
    }
  }

  std::size_t size() const override { return units_.size() * factor(); }
  bool fixed_views() const override { return !augment_; }
  std::size_t factor() const { return augment_ ? kAugmentFactor : 1; }
  const Unit& unit(std::size_t i) const { return units_.at(i); }
  std::size_t unit_count() const { return units_.size(); }

  Sample get(std::size_t i) const override {
    const std::size_t ui = i / factor(), variant = i % factor();
    const Unit& u = units_.at(ui);
    Sample s;
    s.id = u.id;
    for (std::size_t k = 0; k < u.views.size(); ++k) {
      ViewInput in;
      if (imported_) {
        in.features = u.exam->features[u.views[k]];
      } else if (!augment_) {
        in.image = base_[ui][k];
      } else {
        Rng rng = Rng::derive(cfg_.seed, stream::augment, (ui << 16) ^ (k << 4) ^ (variant / 2));
        if (box_fn_) {
          const ViewImage& img = base_[ui][k];
          ViewImage cropped = crop_to_bbox(img, jitter_bbox(boxes_[ui][k], img.height, img.width, rng), cfg_.image_size);
          in.image = variant % 2 ? flip_horizontal(cropped) : cropped;
        } else {
          in.image = apply_crop_variant(base_[ui][k], crop_variant(rng, margin_, variant), cfg_.image_size);
        }
      }
      s.views.push_back(std::move(in));
    }
    s.report = u.exam->report;
    if (augment_) {
      Rng rng = Rng::derive(cfg_.seed, stream::sentences, (ui << 4) ^ variant);
      s.report = shuffle_sentences(s.report, rng);
    }
    s.seq = encode_sequence(s.report, vocab_, cfg_.unroll);
    return s;
  }

 private:
  std::vector<Unit> units_;
  const Vocab& vocab_;
  RunConfig cfg_;
  BoxFn box_fn_;
  bool imported_ = false;
  bool augment_ = false;
  std::size_t margin_ = 0;
  std::vector<std::vector<ViewImage>> base_;
  std::vector<std::vector<BBox>> boxes_;
};

// ---------------------------------------------------------------------------
// Box regressor stage
// ---------------------------------------------------------------------------

/// Ground-truth pairs for training-split images listed in `bboxes.tsv`,
/// capped at cfg.bbox_max_pairs.
inline std::vector<BBoxPair> collect_bbox_pairs(const PreparedData& data, const RunConfig& cfg) {
  const auto gt = load_bbox_file((std::filesystem::path(data.dir) / "bboxes.tsv").string());
  std::vector<BBoxPair> pairs;
  for (const ExamRecord* e : data.split(Split::train)) {
    for (std::size_t v = 0; v < e->images.size() && pairs.size() < cfg.bbox_max_pairs; ++v) {
      auto it = gt.find(e->refs[v].path);
      if (it != gt.end()) pairs.push_back({e->refs[v].path, e->images[v], it->second});
    }
  }
  if (pairs.empty()) throw DataError("bbox: no ground-truth boxes for training images");
  return pairs;
}

inline BBoxConfig seeded_bbox_config(const RunConfig& cfg) {
  BBoxConfig b = cfg.bbox_config();
  b.seed = Rng::derive(cfg.seed, stream::bbox).next_u64();
  return b;
}

inline BoxFn predicted_box_fn(const ModelParams& params, const RunConfig& cfg) {
  ModelParams bp = params.subset("bbox.");
  const BBoxConfig bc = seeded_bbox_config(cfg);
  return [bp, bc](const ViewImage& img) { return predict_bbox(img, bp, bc); };
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

struct TrainedModel {
  Checkpoint checkpoint;
  TrainResult result;
  std::vector<double> bbox_loss;  // per-epoch regressor loss (bbox mode)
};

inline TrainedModel train_pipeline(const PreparedData& data, const RunConfig& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  TrainedModel out;
  BoxFn box_fn;
  ModelParams bbox_params;
  if (cfg.bbox) {
    BBoxTrainResult br = bbox_train(collect_bbox_pairs(data, cfg), seeded_bbox_config(cfg));
    out.bbox_loss = br.epoch_loss;
    bbox_params = br.params;
    box_fn = predicted_box_fn(bbox_params, cfg);
  }
  const ModelConfig mcfg = cfg.model_config(data.vocab.size());
  Rng init = Rng::derive(cfg.seed, stream::init);
  ModelParams params = init_caption_params(mcfg, init);
  UnitSource train_src(make_units(data.split(Split::train), cfg.aggregation), data.vocab, cfg, cfg.augment, box_fn);
  UnitSource val_src(make_units(data.split(Split::val), cfg.aggregation), data.vocab, cfg, false, box_fn);
  TrainConfig tc = cfg.train_config();
  tc.seed = Rng::derive(cfg.seed, stream::shuffle).next_u64();
  out.result = train(train_src, val_src, std::move(params), mcfg, tc, on_epoch);
  out.checkpoint.config = cfg;
  out.checkpoint.vocab = data.vocab;
  out.checkpoint.rules_version = data.rules_version;
  out.checkpoint.params = out.result.params.clone();
  if (cfg.bbox) out.checkpoint.params.merge(bbox_params.clone());
  return out;
}

struct Generated {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<std::string> reference;
};

/// Generates a report for every unit of `split`. Sampling seeds depend only
/// on the unit position, so results do not depend on the worker count.
inline std::vector<Generated> generate_split(const PreparedData& data, Split split, const Checkpoint& ck,
                                             const DecodeOptions& base_opt, std::size_t workers = 0) {
  const RunConfig& cfg = ck.config;
  const ModelConfig mcfg = cfg.model_config(ck.vocab.size());
  BoxFn box_fn;
  if (cfg.bbox) box_fn = predicted_box_fn(ck.params, cfg);
  const auto units = make_units(data.split(split), cfg.aggregation);
  std::vector<Generated> out(units.size());
  parallel_for(
      units.size(),
      [&](std::size_t i) {
        const Unit& u = units[i];
        std::vector<ViewInput> views;
        for (std::size_t v : u.views) {
          ViewInput in;
          if (cfg.feature_mode == FeatureMode::imported) {
            in.features = u.exam->features[v];
          } else {
            in.image = eval_view(u.exam->images[v], cfg.image_size, box_fn);
          }
          views.push_back(std::move(in));
        }
        DecodeOptions opt = base_opt;
        opt.seed = Rng::derive(base_opt.seed, stream::decode, i).next_u64();
        const auto ids = generate(views, ck.params, mcfg, opt);
        out[i] = {u.id, decode_tokens(ids, ck.vocab), u.exam->report.tokens};
      },
      workers);
  return out;
}

inline DecodeOptions decode_options(const RunConfig& cfg) {
  DecodeOptions o;
  o.mode = cfg.decode;
  o.temperature = cfg.temperature;
  o.seed = cfg.seed;
  o.max_len = cfg.max_len;
  return o;
}

inline ScoreReport score_generated(const std::vector<Generated>& gen) {
  std::vector<ScoredPair> pairs;
  pairs.reserve(gen.size());
  for (const auto& g : gen) pairs.push_back({g.id, g.tokens, g.reference});
  return score_corpus(pairs);
}

inline ScoreReport evaluate_split(const PreparedData& data, Split split, const Checkpoint& ck,
                                  std::size_t workers = 0) {
  return score_generated(generate_split(data, split, ck, decode_options(ck.config), workers));
}

// ---------------------------------------------------------------------------
// Experiment matrix
// ---------------------------------------------------------------------------

struct MatrixRow {
  std::string variant;
  ScoreReport train;
  ScoreReport test;
};

struct VariantSpec {
  std::string name;
  AggregationMode aggregation;
  bool bbox;
};

inline const std::vector<VariantSpec>& matrix_variants() {
  static const std::vector<VariantSpec> v{
      {"baseline-single", AggregationMode::single, false},
      {"max-aggregation", AggregationMode::max, false},
      {"max-aggregation+bbox", AggregationMode::max, true},
  };
  return v;
}

inline MatrixRow run_variant(const PreparedData& data, const RunConfig& base, const VariantSpec& v) {
  RunConfig cfg = base;
  cfg.aggregation = v.aggregation;
  cfg.bbox = v.bbox;
  TrainedModel m = train_pipeline(data, cfg);
  return {v.name, evaluate_split(data, Split::train, m.checkpoint), evaluate_split(data, Split::test, m.checkpoint)};
}

inline std::vector<MatrixRow> run_experiment_matrix(const PreparedData& data, const RunConfig& cfg,
                                                    const std::function<void(const MatrixRow&)>& on_row = {}) {
  std::vector<MatrixRow> rows;
  for (const auto& v : matrix_variants()) {
    rows.push_back(run_variant(data, cfg, v));
    if (on_row) on_row(rows.back());
  }
  return rows;
}

/// One row per variant; columns pair train/test per metric, scores x100.
inline std::string format_matrix(const std::vector<MatrixRow>& rows) {
  std::string s = "variant";
  for (const char* m : {"bleu1", "bleu2", "bleu3", "bleu4", "meteor_lite"}) {
    s += std::string("\t") + m + "_tr\t" + m + "_te";
  }
  s += '\n';
  for (const auto& r : rows) {
    s += r.variant;
    for (std::size_t k = 0; k < 5; ++k) {
      const double tr = k < 4 ? r.train.mean_bleu[k] : r.train.mean_meteor;
      const double te = k < 4 ? r.test.mean_bleu[k] : r.test.mean_meteor;
      s += '\t' + format_fixed(100.0 * tr) + '\t' + format_fixed(100.0 * te);
    }
    s += '\n';
  }
  return s;
}

}  // namespace xrgen
