// pipeline.cc

#include "opensep/pipeline.h"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "opensep/errors.h"
#include "opensep/hash.h"
#include "opensep/text_util.h"
#include "opensep/wav_io.h"

namespace opensep {

namespace fs = std::filesystem;
using nlohmann::json;

std::string tool_version() { return "opensep 0.1.0"; }

namespace {

// ---- config helpers ----

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidInput(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw InvalidInput("unknown key " + where + "." + k);
}

std::set<std::string> keys_of(const std::string& json_text) {
  std::set<std::string> out;
  const json j = json::parse(json_text);
  for (const auto& [k, v] : j.items()) out.insert(k);
  return out;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InvalidInput(where + "." + key + " has the wrong type");
  }
}

StftConfig parse_stft(const json& j) {
  check_keys(j, {"window_length", "hop_length", "fft_length", "window"}, "stft");
  StftConfig s;
  s.window_length = get_or(j, "window_length", s.window_length, "stft");
  s.hop_length = get_or(j, "hop_length", s.hop_length, "stft");
  s.fft_length = get_or(j, "fft_length", s.window_length, "stft");
  const auto w = get_or<std::string>(j, "window", "hann", "stft");
  if (w != "hann" && w != "rectangular") throw InvalidInput("stft.window must be hann or rectangular");
  s.window = w == "hann" ? WindowKind::kHann : WindowKind::kRectangular;
  s.validate();
  return s;
}

json stft_to_json(const StftConfig& s) {
  return {{"window_length", s.window_length},
          {"hop_length", s.hop_length},
          {"fft_length", s.fft_length},
          {"window", s.window == WindowKind::kHann ? "hann" : "rectangular"}};
}

PromptText parse_prompt_mode(const std::string& s, const std::string& where) {
  if (s == "enriched") return PromptText::kEnriched;
  if (s == "class_only") return PromptText::kClassOnly;
  throw InvalidInput(where + " must be enriched or class_only");
}

CorpusSettings parse_corpus(const json& j) {
  check_keys(j, {"dir", "clips_per_class", "seed", "duration_s", "sample_rate", "classes"}, "corpus");
  CorpusSettings c;
  c.dir = get_or(j, "dir", c.dir, "corpus");
  c.clips_per_class = get_or(j, "clips_per_class", c.clips_per_class, "corpus");
  c.seed = get_or(j, "seed", c.seed, "corpus");
  c.duration_s = get_or(j, "duration_s", c.duration_s, "corpus");
  c.sample_rate = get_or(j, "sample_rate", c.sample_rate, "corpus");
  c.classes = get_or(j, "classes", c.classes, "corpus");
  if (c.clips_per_class < 1) throw InvalidInput("corpus.clips_per_class must be >= 1");
  if (!(c.duration_s > 0.0)) throw InvalidInput("corpus.duration_s must be positive");
  std::set<std::string> known;
  for (const auto& s : default_toy_classes()) known.insert(s.class_id);
  for (const auto& id : c.classes)
    if (!known.count(id)) throw InvalidInput("corpus.classes: unknown class " + id);
  return c;
}

MixgenSettings parse_mixgen(const json& j) {
  check_keys(j, {"count", "seed", "output_dir", "prompts", "gain_low", "gain_high", "normalize_peak", "registry"},
             "mixgen");
  MixgenSettings m;
  m.count = get_or(j, "count", m.count, "mixgen");
  m.seed = get_or(j, "seed", m.seed, "mixgen");
  m.output_dir = get_or(j, "output_dir", m.output_dir, "mixgen");
  m.prompts = parse_prompt_mode(get_or<std::string>(j, "prompts", "enriched", "mixgen"), "mixgen.prompts");
  m.gains.gain_low = get_or(j, "gain_low", m.gains.gain_low, "mixgen");
  m.gains.gain_high = get_or(j, "gain_high", m.gains.gain_high, "mixgen");
  m.gains.normalize_peak = get_or(j, "normalize_peak", m.gains.normalize_peak, "mixgen");
  m.registry_path = get_or(j, "registry", m.registry_path, "mixgen");
  if (m.count < 1) throw InvalidInput("mixgen.count must be >= 1");
  m.gains.validate();
  return m;
}

TrainRunSettings parse_train_run(const json& j) {
  check_keys(j, {"checkpoint", "log_csv", "resume"}, "train_run");
  TrainRunSettings t;
  t.checkpoint = get_or(j, "checkpoint", t.checkpoint, "train_run");
  t.log_csv = get_or(j, "log_csv", t.log_csv, "train_run");
  t.resume = get_or(j, "resume", t.resume, "train_run");
  return t;
}

RetryPolicy parse_retry(const json& j, const std::string& where) {
  RetryPolicy r;
  r.max_retries = get_or(j, "max_retries", r.max_retries, where);
  r.backoff_base_s = get_or(j, "backoff_base_s", r.backoff_base_s, where);
  return r;
}

CaptionerSpec parse_captioner(const json& j) {
  check_keys(j, {"kind", "registry", "endpoint", "timeout_s", "max_retries", "backoff_base_s"}, "pipeline.captioner");
  const auto kind = get_or<std::string>(j, "kind", "mock", "pipeline.captioner");
  if (kind != "mock" && kind != "http") throw InvalidInput("pipeline.captioner.kind must be mock or http");
  CaptionerSpec c = CaptionerSpec::from_env(kind == "mock" ? CaptionerKind::kMock : CaptionerKind::kHttp);
  c.registry_path = get_or(j, "registry", c.registry_path, "pipeline.captioner");
  c.endpoint = get_or(j, "endpoint", c.endpoint, "pipeline.captioner");
  c.timeout_s = get_or(j, "timeout_s", c.timeout_s, "pipeline.captioner");
  c.retry = parse_retry(j, "pipeline.captioner");
  return c;
}

LlmBackendSpec parse_llm(const json& j) {
  check_keys(j, {"kind", "endpoint", "model", "timeout_s", "max_retries", "backoff_base_s", "requests_per_second", "max_tokens"},
             "pipeline.llm");
  const auto kind = backend_kind_from_string(get_or<std::string>(j, "kind", "mock", "pipeline.llm"));
  LlmBackendSpec l = LlmBackendSpec::from_env(kind);
  l.endpoint = get_or(j, "endpoint", l.endpoint, "pipeline.llm");
  l.model_name = get_or(j, "model", l.model_name, "pipeline.llm");
  l.timeout_s = get_or(j, "timeout_s", l.timeout_s, "pipeline.llm");
  l.retry = parse_retry(j, "pipeline.llm");
  l.requests_per_second = get_or(j, "requests_per_second", l.requests_per_second, "pipeline.llm");
  l.max_tokens = get_or(j, "max_tokens", l.max_tokens, "pipeline.llm");
  return l;
}

PipelineConfig parse_pipeline(const json& j, const StftConfig& stft) {
  check_keys(j, {"checkpoint", "sample_rate", "captioner", "llm", "k_source", "k_knowledge", "token_budget", "output_dir",
                 "parallelism", "data_dir"},
             "pipeline");
  PipelineConfig p;
  p.stft = stft;
  p.checkpoint = get_or(j, "checkpoint", p.checkpoint, "pipeline");
  p.sample_rate = get_or(j, "sample_rate", p.sample_rate, "pipeline");
  p.captioner = parse_captioner(j.value("captioner", json::object()));
  p.llm = parse_llm(j.value("llm", json::object()));
  p.k_source = get_or(j, "k_source", p.k_source, "pipeline");
  p.k_knowledge = get_or(j, "k_knowledge", p.k_knowledge, "pipeline");
  p.token_budget = get_or(j, "token_budget", p.token_budget, "pipeline");
  p.output_dir = get_or(j, "output_dir", p.output_dir, "pipeline");
  p.parallelism = get_or(j, "parallelism", p.parallelism, "pipeline");
  p.data_dir = get_or(j, "data_dir", p.data_dir, "pipeline");
  return p;
}

EvalSettings parse_evaluate(const json& j) {
  check_keys(j, {"mode", "estimates_dir", "references_dir", "mixtures_dir", "estimator", "report", "filter_length",
                 "cap_db"},
             "evaluate");
  EvalSettings e;
  e.mode = get_or(j, "mode", e.mode, "evaluate");
  e.estimates_dir = get_or(j, "estimates_dir", e.estimates_dir, "evaluate");
  e.references_dir = get_or(j, "references_dir", e.references_dir, "evaluate");
  e.mixtures_dir = get_or(j, "mixtures_dir", e.mixtures_dir, "evaluate");
  e.estimator = get_or(j, "estimator", e.estimator, "evaluate");
  e.report_path = get_or(j, "report", e.report_path, "evaluate");
  e.bss.filter_length = get_or(j, "filter_length", e.bss.filter_length, "evaluate");
  e.bss.cap_db = get_or(j, "cap_db", e.bss.cap_db, "evaluate");
  if (e.mode != "dirs" && e.mode != "mixtures") throw InvalidInput("evaluate.mode must be dirs or mixtures");
  if (e.estimator != "files" && e.estimator != "oracle_irm" && e.estimator != "mixture")
    throw InvalidInput("evaluate.estimator must be files, oracle_irm or mixture");
  return e;
}

void set_path(json& doc, const std::string& dotted, const json& value) {
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw InvalidInput("bad override key: " + dotted);
    if (!node->is_object()) throw InvalidInput("override " + dotted + " walks into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path, "cannot open");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path, "cannot open for writing");
  os << text;
  if (!os) throw IoError(path, "write failed");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir, "cannot create directory: " + ec.message());
}

}  // namespace

// ---- config ----

void PipelineConfig::validate() const {
  stft.validate();
  if (parallelism < 1) throw InvalidInput("pipeline.parallelism must be >= 1");
  if (token_budget < 1) throw InvalidInput("pipeline.token_budget must be >= 1");
  if (output_dir.empty()) throw InvalidInput("pipeline.output_dir is required");
  captioner.validate();
  llm.validate();
  if (captioner.kind == CaptionerKind::kMock && !fs::exists(captioner.registry_path))
    throw IoError(captioner.registry_path, "captions registry not found");
  if (!checkpoint.empty() && !fs::exists(checkpoint)) throw IoError(checkpoint, "checkpoint not found");
  // Loading the prompt files checks both that they exist and the k bounds.
  build_fewshot_prompt(ParseTask::kSourceParse, k_source, data_dir);
  build_fewshot_prompt(ParseTask::kKnowledgeParse, k_knowledge, data_dir);
}

std::string OpensepConfig::hash() const { return hex64(fnv1a(doc.dump())); }

OpensepConfig parse_config(json doc, const std::vector<std::string>& overrides) {
  if (!doc.is_object()) throw InvalidInput("config must be a JSON object");
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw InvalidInput("override must look like key=value: " + o);
    const std::string value = o.substr(eq + 1);
    json v = json::parse(value, nullptr, false);
    if (v.is_discarded()) v = value;
    set_path(doc, o.substr(0, eq), v);
  }
  check_keys(doc, {"schema_version", "stft", "corpus", "mixgen", "separator", "train", "train_run", "pipeline",
                   "evaluate"},
             "config");
  if (!doc.contains("schema_version") || !doc["schema_version"].is_number_integer())
    throw InvalidInput("config.schema_version is required");
  if (doc["schema_version"].get<int>() != kConfigSchemaVersion)
    throw InvalidInput("unsupported schema_version " + doc["schema_version"].dump());

  OpensepConfig c;
  c.doc = doc;
  c.stft = parse_stft(doc.value("stft", json::object()));
  c.corpus = parse_corpus(doc.value("corpus", json::object()));
  c.mixgen = parse_mixgen(doc.value("mixgen", json::object()));

  const json sep = doc.value("separator", json::object());
  check_keys(sep, keys_of(to_json(SeparatorConfig{})), "separator");
  c.separator = separator_config_from_json(sep.dump());

  json tr = doc.value("train", json::object());
  check_keys(tr, keys_of(to_json(TrainConfig{})), "train");
  // One STFT for the whole run unless the train section names its own.
  if (!tr.contains("stft")) tr["stft"] = stft_to_json(c.stft);
  c.train = train_config_from_json(tr.dump());
  c.train_run = parse_train_run(doc.value("train_run", json::object()));
  c.pipeline = parse_pipeline(doc.value("pipeline", json::object()), c.stft);
  c.evaluate = parse_evaluate(doc.value("evaluate", json::object()));
  return c;
}

OpensepConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  const std::string text = read_file(path);
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw InvalidInput(path + ": not valid JSON");
  return parse_config(std::move(doc), overrides);
}

ToyCorpus load_or_generate_corpus(const CorpusSettings& s) {
  if (!s.dir.empty() && fs::exists(fs::path(s.dir) / "index.json")) return load_corpus(s.dir);
  std::vector<ToyClassSpec> classes = default_toy_classes();
  if (!s.classes.empty()) {
    std::vector<ToyClassSpec> picked;
    for (const auto& id : s.classes)
      for (const auto& c : classes)
        if (c.class_id == id) picked.push_back(c);
    classes = picked;
  }
  CorpusOptions o;
  o.duration_s = s.duration_s;
  o.sample_rate = s.sample_rate;
  return generate_corpus(classes, s.clips_per_class, s.seed, o,
                         s.dir.empty() ? std::nullopt : std::optional<std::string>(s.dir));
}

// ---- mixgen ----

MixgenResult run_mixgen(const ToyCorpus& corpus, const MixgenSettings& s, const StftConfig& stft) {
  if (corpus.classes.size() < 4)
    throw InvalidInput("mixgen needs at least 4 classes, corpus has " + std::to_string(corpus.classes.size()));
  if (s.output_dir.empty()) throw InvalidInput("mixgen.output_dir is required");
  ensure_dir(s.output_dir);

  TrainConfig tc;
  tc.prompts = s.prompts;
  tc.gains = s.gains;
  tc.stft = stft;
  tc.crop_frames = 0;

  MixgenResult res;
  CaptionRegistry registry;
  json index = json::array();
  for (int i = 0; i < s.count; ++i) {
    const MixtureTree tree = sample_tree(corpus, tc, mix_seed(s.seed, static_cast<std::uint64_t>(i)));
    char stem[32];
    std::snprintf(stem, sizeof stem, "mix%05d", i);
    const auto path = write_mixture_manifest(tree, s.output_dir, stem);
    const auto hash = hex64(fnv1a(read_file(path)));
    res.manifests.push_back(path);
    res.manifest_hashes.push_back(hash);
    index.push_back({{"manifest", fs::path(path).filename().string()}, {"fnv1a", hash}});

    if (!s.registry_path.empty()) {
      // Fingerprints of what was written, since WAV storage rounds samples.
      const auto m = read_mixture_manifest(path);
      std::vector<std::string> labels;
      for (const auto& l : tree.leaves) labels.push_back(l.class_label);
      registry.add(read_wav(m.root_wav), labels);
      registry.add(read_wav(m.mid_wavs[0]), {labels[0], labels[1]});
      registry.add(read_wav(m.mid_wavs[1]), {labels[2], labels[3]});
      for (int k = 0; k < 4; ++k) registry.add(read_wav(m.leaf_wavs[k]), {labels[k]});
    }
  }
  res.index_path = (fs::path(s.output_dir) / "mixtures.json").string();
  write_file(res.index_path, json{{"schema_version", 1}, {"mixtures", index}}.dump(2) + "\n");
  if (!s.registry_path.empty()) registry.merge_into(s.registry_path);
  return res;
}

// ---- train ----

TrainResult run_train(const ToyCorpus& corpus, const OpensepConfig& cfg) {
  SeparatorModel model(cfg.separator, corpus_vocabulary(corpus.classes));
  TrainOptions opts;
  opts.checkpoint_path = cfg.train_run.checkpoint;
  opts.log_csv_path = cfg.train_run.log_csv;
  opts.resume = cfg.train_run.resume;
  if (!opts.checkpoint_path.empty()) {
    const auto parent = fs::path(opts.checkpoint_path).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
  }
  return train(model, corpus, cfg.train, opts);
}

// ---- manifest ----

json RunManifest::to_json(bool with_timings) const {
  json j;
  j["schema_version"] = kManifestSchemaVersion;
  j["tool_version"] = tool_version;
  j["config_hash"] = config_hash;
  j["input"] = input;
  j["status"] = status;
  j["failed_stage"] = failed_stage.empty() ? json(nullptr) : json(failed_stage);
  j["error"] = error.empty() ? json(nullptr) : json(error);
  j["exit_code"] = exit_code;
  j["caption"] = caption;
  j["sources"] = sources;
  j["knowledge"] = json::array();
  for (const auto& k : knowledge) {
    json cats = json::array();
    for (const auto& [c, text] : k.properties) cats.push_back(to_string(c));
    j["knowledge"].push_back(
        {{"phrase", k.source_phrase}, {"full_text", k.full_text}, {"categories", cats}, {"truncated", k.truncated}});
  }
  j["outputs"] = json::array();
  for (const auto& o : outputs)
    j["outputs"].push_back({{"index", o.index}, {"phrase", o.phrase}, {"prompt", o.prompt}, {"file", o.file}});
  j["warnings"] = warnings;
  if (with_timings) {
    j["timings"] = json::object();
    for (const auto& t : timings) j["timings"][t.stage] = t.seconds;
  }
  return j;
}

void validate_manifest(const json& j) {
  auto need = [&](const char* key, auto pred, const char* what) {
    if (!j.contains(key) || !pred(j.at(key))) throw InvalidInput(std::string("manifest.") + key + " must be " + what);
  };
  auto is_str = [](const json& v) { return v.is_string(); };
  auto is_str_or_null = [](const json& v) { return v.is_string() || v.is_null(); };
  auto is_int = [](const json& v) { return v.is_number_integer(); };
  auto is_arr = [](const json& v) { return v.is_array(); };
  if (!j.is_object()) throw InvalidInput("manifest must be an object");
  need("schema_version", is_int, "an integer");
  if (j.at("schema_version") != kManifestSchemaVersion) throw InvalidInput("manifest.schema_version mismatch");
  need("tool_version", is_str, "a string");
  need("config_hash", is_str, "a string");
  need("input", is_str, "a string");
  need("status", [](const json& v) { return v == "ok" || v == "failed"; }, "ok or failed");
  need("failed_stage", is_str_or_null, "a string or null");
  need("error", is_str_or_null, "a string or null");
  need("exit_code", is_int, "an integer");
  need("caption", is_str, "a string");
  need("sources", is_arr, "an array");
  need("knowledge", is_arr, "an array");
  need("outputs", is_arr, "an array");
  need("warnings", is_arr, "an array");
  for (const auto& s : j.at("sources"))
    if (!s.is_string()) throw InvalidInput("manifest.sources holds a non-string");
  for (const auto& k : j.at("knowledge"))
    if (!k.is_object() || !k.contains("phrase") || !k.contains("full_text") || !k.at("phrase").is_string() ||
        !k.at("full_text").is_string())
      throw InvalidInput("manifest.knowledge entries need phrase and full_text strings");
  for (const auto& o : j.at("outputs"))
    if (!o.is_object() || !o.contains("index") || !o.at("index").is_number_integer() || !o.contains("file") ||
        !o.at("file").is_string() || !o.contains("phrase") || !o.at("phrase").is_string())
      throw InvalidInput("manifest.outputs entries need index, phrase and file");
  if (j.at("status") == "ok") {
    if (!j.at("failed_stage").is_null()) throw InvalidInput("manifest: ok status with a failed stage");
    if (j.at("outputs").size() != j.at("sources").size() && !j.at("outputs").empty())
      throw InvalidInput("manifest: output count differs from source count");
  } else if (j.at("failed_stage").is_null()) {
    throw InvalidInput("manifest: failed status without failed_stage");
  }
  if (j.contains("timings") && !j.at("timings").is_object()) throw InvalidInput("manifest.timings must be an object");
}

std::string slugify(const std::string& phrase) {
  std::string out;
  bool gap = false;
  for (char ch : to_lower(phrase)) {
    const bool alnum = (ch >= 'a' && ch <= 'z') || (ch >= '0' && ch <= '9');
    if (!alnum) {
      gap = !out.empty();
      continue;
    }
    if (gap) out += '_';
    gap = false;
    out += ch;
    if (out.size() >= 40) break;
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "source" : out;
}

std::string output_wav_name(const std::string& input_stem, int k, const std::string& phrase) {
  return input_stem + ".src" + std::to_string(k) + "." + slugify(phrase) + ".wav";
}

// ---- separate ----

namespace {

enum class Failure { kIo, kBackend, kOther };

struct StageError {
  Failure kind;
  std::string message;
};

int exit_code_for(Failure f) {
  switch (f) {
    case Failure::kIo:
      return kExitIo;
    case Failure::kBackend:
      return kExitBackend;
    default:
      return kExitOther;
  }
}

// Runs fn, classifying any exception. Backend replies that cannot be read
// count as backend failures.
template <typename Fn>
std::optional<StageError> guarded(Fn&& fn) {
  try {
    fn();
    return std::nullopt;
  } catch (const IoError& e) {
    return StageError{Failure::kIo, e.what()};
  } catch (const BackendError& e) {
    return StageError{Failure::kBackend, e.what()};
  } catch (const ParseError& e) {
    return StageError{Failure::kBackend, e.what()};
  } catch (const UnknownClip& e) {
    return StageError{Failure::kBackend, e.what()};
  } catch (const std::exception& e) {
    return StageError{Failure::kOther, e.what()};
  }
}

}  // namespace

RunManifest run_separation(const std::string& input_path, const PipelineConfig& cfg,
                           const std::string& config_hash, bool separate_sources) {
  RunManifest m;
  m.input = input_path;
  m.config_hash = config_hash;
  m.tool_version = tool_version();
  const std::string stem = fs::path(input_path).stem().string();
  const fs::path out_dir(cfg.output_dir);
  const std::string manifest_path = (out_dir / (stem + ".manifest.json")).string();

  auto finish = [&]() {
    // A manifest that cannot be written leaves the caller with the exit code.
    const auto err = guarded([&] {
      ensure_dir(out_dir.string());
      write_file(manifest_path, m.to_json().dump(2) + "\n");
    });
    if (err && m.exit_code == kExitOk) {
      m.status = "failed";
      m.failed_stage = "write_manifest";
      m.error = err->message;
      m.exit_code = kExitIo;
    }
    return m;
  };
  auto run_stage = [&](const std::string& stage, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto err = guarded(fn);
    m.timings.push_back({stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    if (err) {
      m.status = "failed";
      m.failed_stage = stage;
      m.error = err->message;
      m.exit_code = exit_code_for(err->kind);
    }
    return !err;
  };

  Waveform mix;
  if (!run_stage("load_input", [&] {
        try {
          mix = read_wav(input_path, cfg.sample_rate);
        } catch (const InvalidInput& e) {
          throw IoError(input_path, e.what());
        }
      }))
    return finish();

  SeparatorModel model;
  if (separate_sources && !run_stage("load_model", [&] { model = load_checkpoint(cfg.checkpoint); }))
    return finish();

  std::unique_ptr<Captioner> captioner;
  std::unique_ptr<LlmBackend> llm;
  Caption caption;
  if (!run_stage("caption", [&] {
        captioner = make_captioner(cfg.captioner);
        caption = captioner->caption(mix);
      }))
    return finish();
  m.caption = caption.text;
  if (trim(caption.text).empty()) {
    m.warnings.push_back("captioner reported no sources; nothing to separate");
    return finish();
  }

  ParsedSourceList parsed;
  if (!run_stage("parse_sources", [&] {
        caption.validate();
        llm = make_llm_backend(cfg.llm);
        parsed = parse_sources(caption, build_fewshot_prompt(ParseTask::kSourceParse, cfg.k_source, cfg.data_dir),
                               *llm);
      }))
    return finish();
  m.sources = parsed.sources;

  // One backend, one call at a time, so its rate limit holds.
  if (!run_stage("parse_knowledge", [&] {
        const auto prompt = build_fewshot_prompt(ParseTask::kKnowledgeParse, cfg.k_knowledge, cfg.data_dir);
        for (const auto& phrase : parsed.sources)
          m.knowledge.push_back(parse_knowledge(phrase, prompt, *llm, cfg.token_budget));
      }))
    return finish();
  for (const auto& k : m.knowledge)
    if (k.truncated) m.warnings.push_back("knowledge for \"" + k.source_phrase + "\" truncated to the token budget");

  if (!separate_sources) return finish();

  std::vector<std::string> prompts;
  for (const auto& k : m.knowledge) prompts.push_back(trim(k.full_text).empty() ? k.source_phrase : k.full_text);
  std::vector<Waveform> estimates;
  if (!run_stage("separate", [&] { estimates = separate(mix, prompts, model, cfg.stft, cfg.parallelism); }))
    return finish();

  std::vector<SourceOutput> outputs;
  if (!run_stage("write_outputs", [&] {
        ensure_dir(out_dir.string());
        for (std::size_t i = 0; i < estimates.size(); ++i) {
          SourceOutput o;
          o.index = static_cast<int>(i) + 1;
          o.phrase = parsed.sources[i];
          o.prompt = prompts[i];
          o.file = output_wav_name(stem, o.index, o.phrase);
          write_wav((out_dir / o.file).string(), estimates[i]);
          outputs.push_back(o);
        }
      })) {
    m.outputs = outputs;
    return finish();
  }
  m.outputs = outputs;
  return finish();
}

// ---- evaluate ----

namespace {

std::vector<std::string> wav_files(const fs::path& dir, const std::string& prefix = "") {
  if (!fs::is_directory(dir)) throw IoError(dir.string(), "directory not found");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && e.path().extension() == ".wav" && name.rfind(prefix, 0) == 0)
      out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Waveform> read_all(const std::vector<std::string>& paths) {
  std::vector<Waveform> out;
  for (const auto& p : paths) out.push_back(read_wav(p));
  return out;
}

Waveform scaled(const Waveform& w, double g) {
  Waveform out = w;
  for (auto& v : out.samples) v *= g;
  return out;
}

}  // namespace

BatchReport run_eval(const EvalSettings& s, const StftConfig& stft_cfg) {
  std::vector<EvalCase> cases;
  if (s.mode == "dirs") {
    if (!fs::is_directory(s.references_dir)) throw IoError(s.references_dir, "references directory not found");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(s.references_dir))
      if (e.is_directory()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) {
      EvalCase c;
      c.name = n;
      c.references = read_all(wav_files(fs::path(s.references_dir) / n));
      c.estimates = read_all(wav_files(fs::path(s.estimates_dir) / n));
      cases.push_back(std::move(c));
    }
  } else {
    if (!fs::is_directory(s.mixtures_dir)) throw IoError(s.mixtures_dir, "mixtures directory not found");
    std::vector<std::string> manifests;
    for (const auto& e : fs::directory_iterator(s.mixtures_dir)) {
      const auto name = e.path().filename().string();
      if (e.path().extension() == ".json" && name != "mixtures.json" && name.find(".manifest.") == std::string::npos)
        manifests.push_back(e.path().string());
    }
    std::sort(manifests.begin(), manifests.end());
    for (const auto& path : manifests) {
      const auto mm = read_mixture_manifest(path);
      EvalCase c;
      c.name = fs::path(path).stem().string();
      for (int k = 0; k < 4; ++k) c.references.push_back(scaled(read_wav(mm.leaf_wavs[k]), mm.gains[k]));
      const Waveform root = read_wav(mm.root_wav);
      if (s.estimator == "files") {
        const auto prefix = fs::path(mm.root_wav).stem().string() + ".src";
        c.estimates = read_all(wav_files(s.estimates_dir, prefix));
        if (c.estimates.empty()) throw IoError((fs::path(s.estimates_dir) / (prefix + "*.wav")).string(), "no estimates");
      } else if (s.estimator == "mixture") {
        c.estimates.assign(4, root);
      } else {
        const auto spec = stft(root, stft_cfg);
        std::vector<MagnitudeSpectrogram> mags;
        for (const auto& r : c.references) mags.push_back(magnitude(stft(r, stft_cfg)));
        for (const auto& mask : ideal_ratio_mask(mags)) c.estimates.push_back(apply_mask_and_reconstruct(spec, mask));
      }
      cases.push_back(std::move(c));
    }
  }
  if (cases.empty()) throw InvalidInput("evaluate found no cases");
  return evaluate_batch(cases, s.bss);
}

json eval_report_json(const BatchReport& r, const EvalSettings& s) {
  json j = json::parse(r.to_json());
  j["tool_version"] = tool_version();
  j["settings"] = {{"mode", s.mode}, {"estimator", s.estimator}, {"filter_length", s.bss.filter_length},
                   {"cap_db", s.bss.cap_db}};
  return j;
}

void validate_eval_report(const json& j) {
  auto fail = [](const std::string& what) { throw InvalidInput("eval report: " + what); };
  if (!j.is_object()) fail("not an object");
  if (!j.contains("schema_version") || j.at("schema_version") != 1) fail("schema_version must be 1");
  for (const char* k : {"mean_sdr", "std_sdr", "mean_sir", "std_sir"})
    if (!j.contains(k) || !j.at(k).is_number()) fail(std::string(k) + " must be a number");
  for (const char* k : {"pair_count", "excluded_count"})
    if (!j.contains(k) || !j.at(k).is_number_integer()) fail(std::string(k) + " must be an integer");
  if (!j.contains("cases") || !j.at("cases").is_array()) fail("cases must be an array");
  for (const auto& c : j.at("cases")) {
    if (!c.contains("name") || !c.at("name").is_string()) fail("case without a name");
    for (const char* k : {"assignment", "sdr", "sir"})
      if (!c.contains(k) || !c.at(k).is_array()) fail(std::string("case.") + k + " must be an array");
    if (c.at("sdr").size() != c.at("assignment").size()) fail("case.sdr length differs from assignment");
  }
}

}  // namespace opensep
