// xrgen command-line driver.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "xrgen/checkpoint.hpp"
#include "xrgen/config.hpp"
#include "xrgen/pipeline.hpp"
#include "xrgen/synth.hpp"

namespace fs = std::filesystem;
using namespace xrgen;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string data_dir = ".";
  std::string checkpoint;
  std::string rules_path;
  std::string decode;
  std::optional<double> temperature;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run configuration");
  cmd->add_option("--seed", c.seed, "Seed (overrides config and XRGEN_SEED)");
  cmd->add_option("--data-dir", c.data_dir, "Dataset directory holding manifest.jsonl");
  cmd->add_option("--rules", c.rules_path, "Cleaning rules file");
}

void add_decode(CLI::App* cmd, Common& c) {
  cmd->add_option("--decode", c.decode, "greedy or sample")->check(CLI::IsMember({"greedy", "sample"}));
  cmd->add_option("--temperature", c.temperature, "Sampling temperature");
}

RunConfig resolve_config(const Common& c, RunConfig base = {}) {
  RunConfig cfg = c.config_path.empty() ? base : load_config(c.config_path, base);
  apply_seed_override(cfg);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.decode.empty()) cfg.decode = c.decode == "greedy" ? DecodeMode::greedy : DecodeMode::sample;
  if (c.temperature) cfg.temperature = *c.temperature;
  cfg.validate();
  return cfg;
}

CleaningRules resolve_rules(const Common& c) {
  return CleaningRules::load(c.rules_path.empty() ? default_rules_path() : c.rules_path);
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << text;
}

Split parse_cli_split(const std::string& s) {
  try {
    return parse_split(s);
  } catch (const DataError&) {
    throw UsageError("unknown split '" + s + "'");
  }
}

/// Runtime overrides (decode mode, temperature, seed) applied to a
/// checkpoint's stored config.
RunConfig checkpoint_run_config(const Common& c, const Checkpoint& ck) {
  RunConfig cfg = ck.config;
  if (!c.config_path.empty()) {
    const RunConfig want = resolve_config(c, ck.config);
    check_compatible(ck, want);
  }
  apply_seed_override(cfg);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.decode.empty()) cfg.decode = c.decode == "greedy" ? DecodeMode::greedy : DecodeMode::sample;
  if (c.temperature) cfg.temperature = *c.temperature;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xrgen: multi-view X-ray report generation"};
  app.require_subcommand(1);
  Common c;

  // synth
  auto* synth = app.add_subcommand("synth", "Write a procedural knee-exam dataset");
  SynthSpec spec;
  std::uint64_t synth_seed = 0;
  std::size_t no_pathologies = 0;
  synth->add_option("--data-dir", c.data_dir, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--exams", spec.exams, "Number of exams");
  synth->add_option("--height", spec.height, "Image height");
  synth->add_option("--width", spec.width, "Image width");
  synth->add_flag("--normal-only", no_pathologies, "Generate exams without pathologies");

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "Split, clean and build the vocabulary");
  add_common(prep, c);
  std::string prep_out;
  prep->add_option("--out", prep_out, "Output directory (default <data-dir>/preprocessed)");

  // train
  auto* trn = app.add_subcommand("train", "Train a caption model");
  add_common(trn, c);
  trn->add_option("--checkpoint", c.checkpoint, "Output checkpoint path")->required();
  std::string log_path;
  trn->add_option("--log", log_path, "Training log path (epoch, train loss, val loss)");

  // generate
  auto* gen = app.add_subcommand("generate", "Generate reports from a checkpoint");
  add_common(gen, c);
  add_decode(gen, c);
  gen->add_option("--checkpoint", c.checkpoint, "Checkpoint path")->required();
  std::string split_name = "test";
  gen->add_option("--split", split_name, "train, val or test");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score generated reports");
  add_common(ev, c);
  add_decode(ev, c);
  ev->add_option("--checkpoint", c.checkpoint, "Checkpoint path")->required();
  ev->add_option("--split", split_name, "train, val or test");
  std::string scores_out;
  ev->add_option("--out", scores_out, "Write the score table here as well");

  // matrix
  auto* mat = app.add_subcommand("matrix", "Train and score the three model variants");
  add_common(mat, c);
  std::string matrix_out;
  mat->add_option("--out", matrix_out, "Write the table here as well");

  // bbox-train
  auto* bbt = app.add_subcommand("bbox-train", "Train the knee-joint box regressor");
  add_common(bbt, c);
  std::string boxes_out;
  bbt->add_option("--out", boxes_out, "Write predicted boxes for every image (bboxes.tsv format)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      if (no_pathologies) spec.pathologies.clear();
      write_synth(c.data_dir, spec, synthesize(spec, synth_seed));
      std::cout << "wrote " << spec.exams << " exams to " << c.data_dir << '\n';
    } else if (*prep) {
      const RunConfig cfg = resolve_config(c);
      const PreparedData data = prepare_data(c.data_dir, resolve_rules(c), cfg);
      const fs::path out = prep_out.empty() ? fs::path(c.data_dir) / "preprocessed" : fs::path(prep_out);
      std::error_code ec;
      fs::create_directories(out, ec);
      if (ec) throw DataError("cannot create '" + out.string() + "': " + ec.message());
      std::vector<ExamManifestEntry> entries = load_manifest(manifest_path(c.data_dir));
      std::map<std::string, Split> splits;
      for (const auto& e : data.exams) splits[e.id] = e.split;
      std::string reports = "exam_id\tsplit\tcleaned\n";
      for (auto& e : entries) e.split = splits.at(e.exam_id);
      for (const auto& e : data.exams) reports += e.id + '\t' + to_string(e.split) + '\t' + e.report.text() + '\n';
      save_manifest((out / "splits.jsonl").string(), entries);
      write_file((out / "vocab.tsv").string(), data.vocab.serialize());
      write_file((out / "reports.tsv").string(), reports);
      write_file((out / "rules_version.txt").string(), data.rules_version + '\n');
      std::cout << "exams " << data.exams.size() << " (train " << data.split(Split::train).size() << ", val "
                << data.split(Split::val).size() << ", test " << data.split(Split::test).size() << "), vocab "
                << data.vocab.size() << ", rules " << data.rules_version << '\n';
    } else if (*trn) {
      const RunConfig cfg = resolve_config(c);
      const PreparedData data = prepare_data(c.data_dir, resolve_rules(c), cfg);
      std::ofstream log;
      if (!log_path.empty()) {
        log.open(log_path, std::ios::binary);
        if (!log) throw DataError("cannot write '" + log_path + "'");
      }
      const TrainedModel m = train_pipeline(data, cfg, [&](const EpochLog& e) {
        const std::string line = format_training_log({e});
        std::cerr << line;
        if (log) log << line << std::flush;
      });
      save_checkpoint(c.checkpoint, m.checkpoint);
      std::cout << "best epoch " << m.result.best_epoch << ", checkpoint " << c.checkpoint << '\n';
    } else if (*gen || *ev) {
      const Checkpoint loaded = load_checkpoint(c.checkpoint);
      Checkpoint ck = loaded;
      ck.config = checkpoint_run_config(c, loaded);
      const CleaningRules rules = resolve_rules(c);
      if (!ck.rules_version.empty() && rules.version != ck.rules_version) {
        std::cerr << "warning: cleaning rules " << rules.version << " differ from training rules "
                  << ck.rules_version << '\n';
      }
      const PreparedData data = prepare_data(c.data_dir, rules, ck.config);
      const auto generated = generate_split(data, parse_cli_split(split_name), ck, decode_options(ck.config));
      if (*gen) {
        for (const auto& g : generated) std::cout << g.id << '\t' << CleanedReport::join_tokens(g.tokens) << '\n';
      } else {
        const ScoreReport rep = score_generated(generated);
        const std::string table = format_score_table(rep);
        std::cout << table;
        if (rep.empty_candidates) std::cerr << "warning: " << rep.empty_candidates << " empty candidates scored 0\n";
        if (!scores_out.empty()) write_file(scores_out, table);
      }
    } else if (*mat) {
      const RunConfig cfg = resolve_config(c);
      const PreparedData data = prepare_data(c.data_dir, resolve_rules(c), cfg);
      const auto rows = run_experiment_matrix(data, cfg, [](const MatrixRow& r) {
        std::cerr << "done: " << r.variant << '\n';
      });
      const std::string table = format_matrix(rows);
      std::cout << table;
      if (!matrix_out.empty()) write_file(matrix_out, table);
    } else if (*bbt) {
      const RunConfig cfg = resolve_config(c);
      const PreparedData data = prepare_data(c.data_dir, resolve_rules(c), cfg);
      const BBoxTrainResult r = bbox_train(collect_bbox_pairs(data, cfg), seeded_bbox_config(cfg));
      for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
        std::cerr << e << '\t' << format_double(r.epoch_loss[e]) << '\n';
      }
      std::cout << "final mse " << format_double(r.final_loss) << '\n';
      if (!boxes_out.empty()) {
        const BoxFn fn = predicted_box_fn(r.params, cfg);
        std::string s;
        for (const auto& e : data.exams) {
          for (std::size_t v = 0; v < e.images.size(); ++v) {
            const BBox b = fn(e.images[v]);
            s += e.refs[v].path + '\t' + format_double(b.x_min) + '\t' + format_double(b.y_min) + '\t' +
                 format_double(b.width) + '\t' + format_double(b.height) + '\n';
          }
        }
        write_file(boxes_out, s);
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
