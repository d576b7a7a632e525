// pipeline.h
// Config loading and the stage runners behind the command-line tool:
// corpus, mixgen, train, parse, separate, evaluate.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "opensep/metrics.h"
#include "opensep/mixer.h"
#include "opensep/separator.h"
#include "opensep/textual_inversion.h"
#include "opensep/toy_corpus.h"
#include "opensep/training.h"

namespace opensep {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kManifestSchemaVersion = 1;
std::string tool_version();

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitOther = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitBackend = 3;
inline constexpr int kExitDiverged = 4;

struct CorpusSettings {
  // Loaded when it holds index.json, otherwise generated (and written there
  // unless empty).
  std::string dir;
  int clips_per_class = 8;
  std::uint64_t seed = 0;
  double duration_s = 1.0;
  int sample_rate = 16000;
  std::vector<std::string> classes;  // default class ids; empty means all
};

struct MixgenSettings {
  int count = 100;
  std::uint64_t seed = 0;
  std::string output_dir;
  PromptText prompts = PromptText::kEnriched;
  GainPolicy gains;
  // Captions registry for the mock captioner: root, mids and leaves.
  std::string registry_path;
};

struct TrainRunSettings {
  std::string checkpoint;
  std::string log_csv;
  bool resume = true;
};

struct PipelineConfig {
  StftConfig stft;
  int sample_rate = 16000;  // inputs at other rates are rejected
  std::string checkpoint;
  CaptionerSpec captioner;
  LlmBackendSpec llm;
  int k_source = 5;
  int k_knowledge = 5;
  int token_budget = kDefaultTokenBudget;
  std::string output_dir;
  int parallelism = 4;
  std::string data_dir = default_data_dir();

  // Referenced files must exist, k within the exemplar counts.
  void validate() const;
};

struct EvalSettings {
  // "dirs": estimates_dir/<case>/*.wav against references_dir/<case>/*.wav.
  // "mixtures": mixgen manifests in mixtures_dir; references are the
  // gain-scaled leaves, estimates come from `estimator`.
  std::string mode = "dirs";
  std::string estimates_dir;
  std::string references_dir;
  std::string mixtures_dir;
  // For "mixtures": "files" (<stem>.root.src<k>.*.wav in estimates_dir),
  // "oracle_irm" or "mixture".
  std::string estimator = "files";
  std::string report_path;  // JSON; a CSV is written next to it
  BssEvalOptions bss;
};

// The parsed config file. `doc` is the canonical document after flag
// overrides; its hash identifies a run.
struct OpensepConfig {
  nlohmann::json doc;
  StftConfig stft;
  CorpusSettings corpus;
  MixgenSettings mixgen;
  SeparatorConfig separator;
  TrainConfig train;
  TrainRunSettings train_run;
  PipelineConfig pipeline;
  EvalSettings evaluate;

  std::string hash() const;
};

// Applies "a.b.c=value" overrides (value parsed as JSON, else kept as a
// string) before validation.
OpensepConfig parse_config(nlohmann::json doc, const std::vector<std::string>& overrides = {});
OpensepConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

ToyCorpus load_or_generate_corpus(const CorpusSettings& s);

// ---- mixgen ----

struct MixgenResult {
  std::vector<std::string> manifests;
  std::vector<std::string> manifest_hashes;  // FNV of each manifest file
  std::string index_path;                    // <out>/mixtures.json
};

MixgenResult run_mixgen(const ToyCorpus& corpus, const MixgenSettings& s, const StftConfig& stft);

// ---- train ----

TrainResult run_train(const ToyCorpus& corpus, const OpensepConfig& cfg);

// ---- parse / separate ----

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct SourceOutput {
  int index = 0;  // 1-based, matches src<k>
  std::string phrase;
  std::string prompt;
  std::string file;  // relative to the manifest's directory
};

struct RunManifest {
  std::string input;
  std::string status = "ok";  // "ok" or "failed"
  std::string failed_stage;
  std::string error;
  int exit_code = kExitOk;
  std::string caption;
  std::vector<std::string> sources;
  std::vector<KnowledgeCard> knowledge;
  std::vector<SourceOutput> outputs;
  std::vector<std::string> warnings;
  std::vector<StageTiming> timings;
  std::string config_hash;
  std::string tool_version;

  nlohmann::json to_json(bool with_timings = true) const;
};

// Throws InvalidInput naming the first field that breaks the manifest schema.
void validate_manifest(const nlohmann::json& j);

// "a low steady tone" -> "a_low_steady_tone" (at most 40 characters).
std::string slugify(const std::string& phrase);
std::string output_wav_name(const std::string& input_stem, int k, const std::string& phrase);

// Caption, parse and separate one file. Never throws for stage failures: the
// manifest records them, is written to <output_dir>/<stem>.manifest.json and
// carries the exit code. Only `separate=false` skips model loading and the
// last two stages (the `parse` subcommand).
RunManifest run_separation(const std::string& input_path, const PipelineConfig& cfg,
                           const std::string& config_hash, bool separate = true);

// ---- evaluate ----

BatchReport run_eval(const EvalSettings& s, const StftConfig& stft);
// Report JSON with schema_version and the settings that produced it.
nlohmann::json eval_report_json(const BatchReport& r, const EvalSettings& s);
void validate_eval_report(const nlohmann::json& j);

}  // namespace opensep
