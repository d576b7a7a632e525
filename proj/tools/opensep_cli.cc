// opensep command-line tool.
//
//   opensep corpus   --config cfg.json
//   opensep mixgen   --config cfg.json [--count N] [--seed S] [--out DIR]
//   opensep train    --config cfg.json [--epochs N] [--checkpoint PATH]
//   opensep parse    --config cfg.json --input mix.wav
//   opensep separate --config cfg.json --input mix.wav [--out DIR]
//   opensep evaluate --config cfg.json [--report PATH]
//
// Every subcommand also takes --set key.path=value (repeatable).

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "opensep/errors.h"
#include "opensep/pipeline.h"

namespace fs = std::filesystem;
using namespace opensep;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "config JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override, e.g. train.epochs=2");
}

void write_text(const std::string& path, const std::string& text) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  os << text;
  if (!os) throw IoError(path, "write failed");
}

int cmd_corpus(const OpensepConfig& cfg) {
  if (cfg.corpus.dir.empty()) throw InvalidInput("corpus.dir is required");
  const ToyCorpus c = load_or_generate_corpus(cfg.corpus);
  std::cout << "corpus " << c.root << ": " << c.classes.size() << " classes, " << c.clips.size() << " clips, index "
            << corpus_index_hash(c) << "\n";
  return kExitOk;
}

int cmd_mixgen(const OpensepConfig& cfg) {
  const ToyCorpus c = load_or_generate_corpus(cfg.corpus);
  const auto r = run_mixgen(c, cfg.mixgen, cfg.stft);
  std::cout << "wrote " << r.manifests.size() << " mixtures, index " << r.index_path << "\n";
  if (!cfg.mixgen.registry_path.empty()) std::cout << "captions registry " << cfg.mixgen.registry_path << "\n";
  return kExitOk;
}

int cmd_train(const OpensepConfig& cfg) {
  const ToyCorpus c = load_or_generate_corpus(cfg.corpus);
  if (cfg.train_run.checkpoint.empty()) throw InvalidInput("train_run.checkpoint is required");
  const auto r = run_train(c, cfg);
  for (const auto& e : r.log)
    std::cout << "epoch " << e.epoch << " lr " << e.lr << " loss " << e.mean_loss << " (" << e.wall_seconds
              << " s)\n";
  std::cout << "checkpoint " << cfg.train_run.checkpoint << "\n";
  return kExitOk;
}

int cmd_separate(const OpensepConfig& cfg, const std::string& input, bool separate) {
  PipelineConfig p = cfg.pipeline;
  if (separate && p.checkpoint.empty()) throw InvalidInput("pipeline.checkpoint is required");
  if (!separate) p.checkpoint.clear();
  p.validate();
  const RunManifest m = run_separation(input, p, cfg.hash(), separate);
  for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
  if (m.status != "ok") std::cerr << "error in stage " << m.failed_stage << ": " << m.error << "\n";
  std::cout << "caption: " << m.caption << "\n";
  for (std::size_t i = 0; i < m.sources.size(); ++i) std::cout << "source " << i + 1 << ": " << m.sources[i] << "\n";
  for (const auto& o : m.outputs) std::cout << "wrote " << (fs::path(p.output_dir) / o.file).string() << "\n";
  std::cout << "manifest " << (fs::path(p.output_dir) / (fs::path(input).stem().string() + ".manifest.json")).string()
            << "\n";
  return m.exit_code;
}

int cmd_evaluate(const OpensepConfig& cfg) {
  const auto& s = cfg.evaluate;
  const BatchReport r = run_eval(s, cfg.stft);
  const auto j = eval_report_json(r, s);
  validate_eval_report(j);
  if (!s.report_path.empty()) {
    write_text(s.report_path, j.dump(2) + "\n");
    write_text(fs::path(s.report_path).replace_extension(".csv").string(), r.to_csv());
  }
  std::cout << "SDR " << r.mean_sdr << " +- " << r.std_sdr << " dB, SIR " << r.mean_sir << " +- " << r.std_sir
            << " dB over " << r.pair_count << " pairs";
  if (r.excluded_count > 0) std::cout << " (" << r.excluded_count << " excluded)";
  std::cout << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"opensep: text-conditioned separation of toy audio mixtures"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tool_version());

  Common common;
  std::string input, out;
  int count = -1, epochs = -1;
  std::int64_t seed = -1;
  std::string checkpoint, report;

  auto* corpus = app.add_subcommand("corpus", "generate the toy corpus into corpus.dir");
  add_common(corpus, common);
  auto* mixgen = app.add_subcommand("mixgen", "write four-source mixture trees and a captions registry");
  add_common(mixgen, common);
  mixgen->add_option("--count", count, "number of mixtures");
  mixgen->add_option("--seed", seed, "mixture seed");
  mixgen->add_option("--out", out, "output directory");
  auto* train = app.add_subcommand("train", "train a separator checkpoint");
  add_common(train, common);
  train->add_option("--epochs", epochs, "number of epochs");
  train->add_option("--checkpoint", checkpoint, "checkpoint path");
  auto* parse = app.add_subcommand("parse", "caption and parse a mixture without separating");
  add_common(parse, common);
  parse->add_option("--input", input, "mixture WAV")->required();
  parse->add_option("--out", out, "output directory");
  auto* separate = app.add_subcommand("separate", "caption, parse and separate a mixture");
  add_common(separate, common);
  separate->add_option("--input", input, "mixture WAV")->required();
  separate->add_option("--out", out, "output directory");
  auto* evaluate = app.add_subcommand("evaluate", "score separations against references");
  add_common(evaluate, common);
  evaluate->add_option("--report", report, "report JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitOther;
  }

  // Flags are sugar for --set.
  auto& ov = common.overrides;
  if (count >= 0) ov.push_back("mixgen.count=" + std::to_string(count));
  if (seed >= 0) ov.push_back("mixgen.seed=" + std::to_string(seed));
  if (epochs >= 0) ov.push_back("train.epochs=" + std::to_string(epochs));
  if (!checkpoint.empty()) ov.push_back("train_run.checkpoint=" + nlohmann::json(checkpoint).dump());
  if (!report.empty()) ov.push_back("evaluate.report=" + nlohmann::json(report).dump());
  if (!out.empty()) {
    const std::string key = *mixgen ? "mixgen.output_dir" : "pipeline.output_dir";
    ov.push_back(key + "=" + nlohmann::json(out).dump());
  }

  try {
    const OpensepConfig cfg = load_config(common.config, ov);
    if (*corpus) return cmd_corpus(cfg);
    if (*mixgen) return cmd_mixgen(cfg);
    if (*train) return cmd_train(cfg);
    if (*parse) return cmd_separate(cfg, input, false);
    if (*separate) return cmd_separate(cfg, input, true);
    if (*evaluate) return cmd_evaluate(cfg);
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged at epoch " << e.epoch() << ": " << e.what() << "\n";
    std::cerr << "last checkpoint: " << (e.checkpoint().empty() ? "(none)" : e.checkpoint()) << "\n";
    return kExitDiverged;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const ParseError& e) {
    std::cerr << "backend reply not understood: " << e.what() << "\n";
    return kExitBackend;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
