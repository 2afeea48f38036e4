// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. `acceptance 3 5` runs only criteria 3 and 5.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "xrgen/gradcheck.hpp"

using namespace xrgen;
using namespace xrgen::testing_support;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ViewImage random_image(std::size_t h, std::size_t w, Rng& rng) {
  ViewImage img(h, w);
  for (double& p : img.pixels) p = rng.uniform();
  return img;
}

ModelConfig stub_model(std::size_t E, std::size_t V, std::size_t F) {
  ModelConfig m;
  m.hidden = E;
  m.feature_size = F;
  m.vocab_size = V;
  m.cnn.kind = ExtractorKind::stub;
  m.cnn.stub_grid = 4;
  m.cnn.stub_hidden = 6;
  return m;
}

CleanedReport report_of(std::vector<std::string> tokens) {
  CleanedReport r;
  r.tokens = std::move(tokens);
  return r;
}

// 1 ------------------------------------------------------------------------

Outcome gradient_check() {
  Rng rng(101);
  const Vocab vocab = Vocab::build({report_of({"a", "b", "c", "d"})}, 1);
  const ModelConfig m = stub_model(4, vocab.size(), 6);
  ModelParams p = init_caption_params(m, rng);
  for (auto& [_, t] : p)
    for (double& v : t.mutable_data()) v += rng.uniform(-0.3, 0.3);
  std::vector<ViewInput> views(2);
  for (auto& v : views) v.image = random_image(16, 16, rng);
  const EncodedSequence seq = encode_sequence(report_of({"b", "d", "a"}), vocab, 6);
  const auto r = finite_diff_check(
      p, [&] { return unroll_loss(exam_embedding(views, p, m), seq, LstmParams::from(p)); }, 1e-5, 100000);
  return {vocab.size() == 8 && r.max_rel_error < 1e-4,
          "E=4 V=" + std::to_string(vocab.size()) + " N=6 K=2, " + std::to_string(r.coords_checked) +
              " coordinates, max relative error " + fmt("%.3g", r.max_rel_error)};
}

// 2 ------------------------------------------------------------------------

Outcome overfit_and_regenerate() {
  SynthSpec spec;
  spec.exams = 5;
  const auto synth = synthesize(spec, 202);
  std::vector<ExamRecord> exams;
  for (const auto& s : synth) {
    ExamRecord e;
    e.id = s.entry.exam_id;
    e.split = Split::train;
    e.refs = s.entry.images;
    e.images = s.images;
    e.report = clean_report(s.entry.report, rules());
    exams.push_back(std::move(e));
  }
  std::vector<const ExamRecord*> ptrs;
  std::vector<CleanedReport> corpus;
  for (const auto& e : exams) {
    ptrs.push_back(&e);
    corpus.push_back(e.report);
  }
  const Vocab vocab = Vocab::build(corpus, 1);
  RunConfig cfg;
  cfg.hidden = 32;
  cfg.feature_size = 32;
  cfg.image_size = 48;
  cfg.cnn_channels = {4, 8, 16};
  cfg.augment = false;
  const ModelConfig mcfg = cfg.model_config(vocab.size());
  Rng init(Rng::derive(7, stream::init));
  UnitSource src(make_units(ptrs, AggregationMode::max), vocab, cfg, false, {});
  TrainConfig tc;
  tc.batch_size = 5;
  tc.learning_rate = 0.01;
  tc.max_epochs = 3000;
  tc.patience = 3000;
  tc.target_val_loss = 0.01;
  tc.seed = 7;
  const TrainResult r = train(src, src, init_caption_params(mcfg, init), mcfg, tc);
  const double loss = r.log[r.best_epoch].val_loss;
  std::vector<ScoredPair> pairs;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Sample s = src.get(i);
    const auto tokens = decode_tokens(generate(s.views, r.params, mcfg), vocab);
    exact += tokens == s.report.tokens;
    pairs.push_back({s.id, tokens, s.report.tokens});
  }
  const double b1 = score_corpus(pairs).mean_bleu[0];
  return {loss < 0.01 && exact == 5 && b1 == 1.0,
          "loss " + fmt("%.4g", loss) + " after " + std::to_string(r.best_epoch) + " epochs, " +
              std::to_string(exact) + "/5 reports reproduced, train BLEU-1 " + fmt("%.2f", 100.0 * b1)};
}

// 3 ------------------------------------------------------------------------

RunConfig contrast_config(std::uint64_t seed) {
  RunConfig c;
  c.hidden = 32;
  c.feature_size = 64;
  c.image_size = 48;
  c.cnn_channels = {8, 16, 32};
  c.learning_rate = 0.003;
  c.max_epochs = 400;
  c.patience = 40;
  c.augment = false;
  c.freeze_cnn = true;
  c.seed = seed;
  return c;
}

Outcome aggregation_contrast() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto dir = fresh_dir("acceptance_contrast_" + std::to_string(seed));
    SynthSpec spec;
    write_synth(dir.string(), spec, synthesize(spec, seed));
    const RunConfig cfg = contrast_config(seed);
    const PreparedData data = prepare_data(dir.string(), rules(), cfg);
    const auto& variants = matrix_variants();
    const MatrixRow base = run_variant(data, cfg, variants[0]);
    const MatrixRow agg = run_variant(data, cfg, variants[1]);
    const double gap = 100.0 * (agg.test.mean_bleu[0] - base.test.mean_bleu[0]);
    wins += gap >= 5.0;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": max " +
              fmt("%.2f", 100.0 * agg.test.mean_bleu[0]) + " vs single " + fmt("%.2f", 100.0 * base.test.mean_bleu[0]) +
              " (gap " + fmt("%+.2f", gap) + ")";
    fs::remove_all(dir);
  }
  return {wins >= 2, std::to_string(wins) + "/3 seeds with gap >= 5; " + detail};
}

// 4 ------------------------------------------------------------------------

NgramMatch brute_force_precision(const Tokens& cand, const Tokens& ref, std::size_t n) {
  NgramMatch r;
  if (cand.size() < n) return r;
  auto same = [n](const Tokens& a, std::size_t i, const Tokens& b, std::size_t j) {
    for (std::size_t k = 0; k < n; ++k)
      if (a[i + k] != b[j + k]) return false;
    return true;
  };
  for (std::size_t i = 0; i + n <= cand.size(); ++i) {
    bool seen = false;
    for (std::size_t p = 0; p < i && !seen; ++p) seen = same(cand, p, cand, i);
    if (seen) continue;
    std::size_t in_cand = 0, in_ref = 0;
    for (std::size_t j = 0; j + n <= cand.size(); ++j) in_cand += same(cand, i, cand, j);
    for (std::size_t j = 0; j + n <= ref.size(); ++j) in_ref += same(cand, i, ref, j);
    r.clipped += std::min(in_cand, in_ref);
  }
  r.total = cand.size() - n + 1;
  return r;
}

Outcome metric_oracle() {
  Rng rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Tokens c(rng.below(15)), r(rng.below(15));
    for (auto& t : c) t = std::string(1, static_cast<char>('a' + rng.below(4)));
    for (auto& t : r) t = std::string(1, static_cast<char>('a' + rng.below(4)));
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto got = modified_ngram_precision(c, r, n), want = brute_force_precision(c, r, n);
      const double pg = got.total ? static_cast<double>(got.clipped) / static_cast<double>(got.total) : 0.0;
      const double pw = want.total ? static_cast<double>(want.clipped) / static_cast<double>(want.total) : 0.0;
      worst = std::max(worst, std::abs(pg - pw));
      if (got.total != want.total) worst = 1.0;
    }
  }
  const auto m = modified_ngram_precision({"the", "the", "the", "the", "the", "the", "the"},
                                          {"the", "cat", "is", "on", "the", "mat"}, 1);
  const Tokens original = clean_report(
      "Joint spaces articular surfaces appear preserved. Significant degenerative erosive change seen.", rules()).tokens;
  const Tokens good = clean_report("Joint spaces articular surfaces appear preserved bilaterally.", rules()).tokens;
  const double b1 = 100.0 * bleu_n(good, original, 1, BleuOptions{false});
  const bool pass = worst < 1e-12 && m.clipped == 2 && m.total == 7 && std::abs(b1 - 87.5) < 1e-9;
  return {pass, "1000 pairs max diff " + fmt("%.3g", worst) + ", clipped unigram " + std::to_string(m.clipped) + "/" +
                    std::to_string(m.total) + ", worked example B1 " + fmt("%.2f", b1) +
                    " (cleaned tokens, '.' a token, no brevity penalty)"};
}

// 5 ------------------------------------------------------------------------

Outcome aggregation_invariants() {
  Rng rng(505);
  std::size_t violations[4] = {0, 0, 0, 0};
  const std::size_t trials = 500;
  auto model = [&](std::size_t V) {
    const ModelConfig m = stub_model(6, V, 8);
    ModelParams p = init_caption_params(m, rng);
    for (auto& [_, t] : p)
      for (double& v : t.mutable_data()) v += rng.uniform(-1.0, 1.0);
    return std::make_pair(m, p);
  };
  auto views_of = [&](std::size_t K) {
    std::vector<ViewInput> v(K);
    for (auto& x : v) x.image = random_image(16, 16, rng);
    return v;
  };
  DecodeOptions opt;
  opt.max_len = 12;
  for (std::size_t t = 0; t < trials; ++t) {
    // permutation invariance of generated reports
    {
      auto [m, p] = model(10);
      auto views = views_of(2 + rng.below(3));
      const auto base = generate(views, p, m, opt);
      rng.shuffle(views);
      violations[0] += generate(views, p, m, opt) != base;
    }
    // K=1 identity
    {
      FeatureVector f;
      for (int j = 0; j < 9; ++j) f.values.push_back(rng.normal());
      violations[1] += max_aggregate(std::vector<FeatureVector>{f}).values != f.values;
      auto [m, p] = model(10);
      const auto one = views_of(1);
      CnnConfig c = m.cnn;
      c.out_features = m.feature_size;
      NoGradGuard ng;
      const Tensor direct = project(cnn_forward(one[0].image.to_tensor(), p, "cnn.", c), p);
      const Tensor via = exam_embedding(one, p, m);
      violations[1] += !std::equal(direct.data().begin(), direct.data().end(), via.data().begin());
    }
    // duplicate-view idempotence
    {
      auto [m, p] = model(10);
      auto views = views_of(1 + rng.below(3));
      const auto base = generate(views, p, m, opt);
      views.push_back(views[rng.below(views.size())]);
      violations[2] += generate(views, p, m, opt) != base;
    }
    // monotonicity: raising any view never lowers the aggregate, which
    // dominates every view
    {
      const std::size_t K = 1 + rng.below(4);
      std::vector<FeatureVector> fv(K);
      for (auto& f : fv)
        for (int j = 0; j < 9; ++j) f.values.push_back(rng.normal());
      const FeatureVector before = max_aggregate(fv);
      for (const auto& f : fv)
        for (std::size_t j = 0; j < 9; ++j) violations[3] += before.values[j] < f.values[j];
      auto raised = fv;
      for (double& v : raised[rng.below(K)].values) v += std::abs(rng.normal());
      const FeatureVector after = max_aggregate(raised);
      for (std::size_t j = 0; j < 9; ++j) violations[3] += after.values[j] < before.values[j];
    }
  }
  const std::size_t total = violations[0] + violations[1] + violations[2] + violations[3];
  return {total == 0, std::to_string(trials) + " trials each; violations: permutation " + std::to_string(violations[0]) +
                          ", K=1 " + std::to_string(violations[1]) + ", duplicate " + std::to_string(violations[2]) +
                          ", monotonicity " + std::to_string(violations[3])};
}

// 6 ------------------------------------------------------------------------

RunConfig determinism_config() {
  RunConfig c = tiny_run_config();
  c.augment = true;
  c.freeze_cnn = false;
  c.bbox = true;
  c.max_epochs = 2;
  c.decode = DecodeMode::sample;
  c.seed = 606;
  return c;
}

Outcome pipeline_determinism() {
  const std::string dir = make_dataset("acceptance_det", 30, 606);
  const RunConfig cfg = determinism_config();
  std::string ckpt[2], table[2];
  for (int run = 0; run < 2; ++run) {
    const PreparedData data = prepare_data(dir, rules(), cfg);
    const TrainedModel m = train_pipeline(data, cfg);
    ckpt[run] = serialize_checkpoint(m.checkpoint);
    table[run] = format_score_table(evaluate_split(data, Split::test, m.checkpoint));
  }
  fs::remove_all(fs::path(dir));
  return {ckpt[0] == ckpt[1] && table[0] == table[1],
          "two runs (augmentation, bbox stage, sampled decoding): checkpoints " +
              std::string(ckpt[0] == ckpt[1] ? "identical" : "DIFFER") + " (" + std::to_string(ckpt[0].size()) +
              " bytes), score tables " + (table[0] == table[1] ? "identical" : "DIFFER")};
}

// 7 ------------------------------------------------------------------------

Outcome text_pipeline() {
  Rng rng(707);
  std::vector<std::string> words;
  for (int i = 0; i < 40; ++i) words.push_back("w" + std::to_string(i));
  words.push_back(".");
  const Vocab vocab = Vocab::build({report_of(words)}, 1);
  std::size_t failures = 0;
  for (int t = 0; t < 1000; ++t) {
    CleanedReport r;
    const std::size_t len = 1 + rng.below(kDefaultUnroll - 3);
    for (std::size_t k = 0; k < len; ++k) r.tokens.push_back(words[rng.below(words.size())]);
    const EncodedSequence s = encode_sequence(r, vocab, kDefaultUnroll);
    failures += decode_tokens(s.ids, vocab) != r.tokens;
    failures += s.ids.size() != kDefaultUnroll;
  }
  std::vector<CleanedReport> corpus;
  for (int i = 0; i < 5; ++i) corpus.push_back(report_of(i < 4 ? std::vector<std::string>{"five", "four"} : std::vector<std::string>{"five"}));
  const Vocab v = Vocab::build(corpus, 5);
  const bool boundary = v.contains("five") && !v.contains("four") && v.id("four") == Vocab::UNK;
  return {failures == 0 && boundary, "1000 random reports, " + std::to_string(failures) +
                                         " round-trip failures; min_freq 5 keeps freq-5 token: " +
                                         (v.contains("five") ? "yes" : "no") + ", drops freq-4 token: " +
                                         (!v.contains("four") ? "yes" : "no")};
}

// 8 ------------------------------------------------------------------------

Outcome checkpoint_round_trip() {
  const std::string dir = make_dataset("acceptance_ckpt", 30, 808);
  RunConfig cfg = tiny_run_config();
  cfg.max_epochs = 3;
  const PreparedData data = prepare_data(dir, rules(), cfg);
  const TrainedModel m = train_pipeline(data, cfg);
  const ScoreReport before = evaluate_split(data, Split::test, m.checkpoint);
  const auto a = fs::path(dir) / "a.ckpt", b = fs::path(dir) / "b.ckpt";
  save_checkpoint(a.string(), m.checkpoint);
  const Checkpoint loaded = load_checkpoint(a.string());
  save_checkpoint(b.string(), loaded);
  const bool bytes_equal = read_file(a) == read_file(b);
  const ScoreReport after = evaluate_split(data, Split::test, loaded);
  bool scores_equal = before.per_exam.size() == after.per_exam.size() && before.mean_meteor == after.mean_meteor;
  for (std::size_t i = 0; scores_equal && i < before.per_exam.size(); ++i) {
    scores_equal = std::equal(std::begin(before.per_exam[i].bleu), std::end(before.per_exam[i].bleu),
                              std::begin(after.per_exam[i].bleu)) &&
                   before.per_exam[i].meteor == after.per_exam[i].meteor;
  }
  fs::remove_all(fs::path(dir));
  return {bytes_equal && scores_equal, std::string("save->load->save ") + (bytes_equal ? "byte-identical" : "DIFFERS") +
                                           ", post-load scores " + (scores_equal ? "equal" : "DIFFER") +
                                           " (test BLEU-1 " + fmt("%.2f", 100.0 * after.mean_bleu[0]) + ")"};
}

// 9 ------------------------------------------------------------------------

Outcome bbox_stage() {
  Rng rng(909);
  const BoxFn full = [](const ViewImage&) { return BBox{}; };
  double worst = 0.0;
  CnnConfig cnn;
  cnn.channels = {4, 8};
  cnn.out_features = 16;
  ModelParams p;
  init_cnn(p, "cnn.", cnn, rng);
  for (int t = 0; t < 50; ++t) {
    const ViewImage img = random_image(32 + rng.below(80), 32 + rng.below(80), rng);
    const auto a = cnn_extract(eval_view(img, 48, full), p, cnn), b = cnn_extract(eval_view(img, 48, {}), p, cnn);
    for (std::size_t j = 0; j < a.values.size(); ++j) worst = std::max(worst, std::abs(a.values[j] - b.values[j]));
  }
  // the same through training samples and generation on a synthetic dataset
  const std::string dir = make_dataset("acceptance_bbox", 20, 909);
  RunConfig cfg = tiny_run_config();
  cfg.max_epochs = 1;
  const PreparedData data = prepare_data(dir, rules(), cfg);
  const TrainedModel m = train_pipeline(data, cfg);
  const auto units = make_units(data.split(Split::train), AggregationMode::max);
  UnitSource with(units, data.vocab, cfg, false, full), without(units, data.vocab, cfg, false, {});
  const ModelConfig mcfg = cfg.model_config(data.vocab.size());
  std::size_t generation_diffs = 0;
  for (std::size_t i = 0; i < with.size(); ++i) {
    const Sample a = with.get(i), b = without.get(i);
    for (std::size_t k = 0; k < a.views.size(); ++k)
      for (std::size_t j = 0; j < a.views[k].image.pixels.size(); ++j)
        worst = std::max(worst, std::abs(a.views[k].image.pixels[j] - b.views[k].image.pixels[j]));
    generation_diffs += generate(a.views, m.checkpoint.params, mcfg) != generate(b.views, m.checkpoint.params, mcfg);
  }
  fs::remove_all(fs::path(dir));

  std::size_t jitter_violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t H = 32 + rng.below(300), W = 32 + rng.below(300);
    const double w = rng.uniform(0.05, 1.0), h = rng.uniform(0.05, 1.0);
    const BBox b{rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h), w, h};
    const BBox j = jitter_bbox(b, H, W, rng);
    const double dx = std::abs(j.x_min - b.x_min) * static_cast<double>(W);
    const double dy = std::abs(j.y_min - b.y_min) * static_cast<double>(H);
    jitter_violations += !j.valid() || dx > 5.0 + 1e-9 || dy > 5.0 + 1e-9 || j.width != b.width || j.height != b.height;
  }
  return {worst <= 1e-12 && generation_diffs == 0 && jitter_violations == 0,
          "full-box vs no-box max diff " + fmt("%.3g", worst) + ", generation diffs " + std::to_string(generation_diffs) +
              ", 1000 jitters with " + std::to_string(jitter_violations) + " violations"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_check},
      {"overfit and regenerate", overfit_and_regenerate},
      {"max-aggregation beats single-image baseline", aggregation_contrast},
      {"metric oracle equivalence", metric_oracle},
      {"aggregation invariants", aggregation_invariants},
      {"pipeline determinism", pipeline_determinism},
      {"text pipeline", text_pipeline},
      {"checkpoint round-trip", checkpoint_round_trip},
      {"bbox stage", bbox_stage},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::strtoul(argv[i], nullptr, 10));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %zu %s: %s (%s; %.1f s)\n", i + 1, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
