// textual_inversion.cc

#include "opensep/textual_inversion.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "opensep/errors.h"
#include "opensep/hash.h"
#include "opensep/text_util.h"
#include "opensep/wav_io.h"

namespace opensep {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path, "cannot open");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path, "cannot open for writing");
  os << text;
  if (!os) throw IoError(path, "write failed");
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

ParseTask task_from_string(const std::string& s) {
  if (s == "source-parse") return ParseTask::kSourceParse;
  if (s == "knowledge-parse") return ParseTask::kKnowledgeParse;
  throw InvalidInput("unknown parse task: " + s);
}

}  // namespace

// ---- prompts ---------------------------------------------------------------

std::string to_string(ParseTask t) { return t == ParseTask::kSourceParse ? "source-parse" : "knowledge-parse"; }

void FewShotPrompt::validate() const {
  if (k < 1) throw InvalidInput("few-shot prompt needs k >= 1");
  if (static_cast<int>(exemplars.size()) != k) throw InvalidInput("few-shot prompt exemplar count differs from k");
  if (trim(instruction).empty()) throw InvalidInput("few-shot prompt has no instruction");
}

std::string default_data_dir() {
#ifdef OPENSEP_DATA_DIR
  return env_or("OPENSEP_DATA_DIR", OPENSEP_DATA_DIR);
#else
  return env_or("OPENSEP_DATA_DIR", "data");
#endif
}

std::string prompt_file_path(ParseTask task, const std::string& data_dir) {
  const char* name = task == ParseTask::kSourceParse ? "source_parse.v1.json" : "knowledge_parse.v1.json";
  return (fs::path(data_dir) / "prompts" / name).string();
}

PromptFile load_prompt_file(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    const auto j = json::parse(text);
    PromptFile f;
    f.task = task_from_string(j.at("task").get<std::string>());
    f.instruction = j.at("instruction").get<std::string>();
    for (const auto& e : j.at("exemplars"))
      f.exemplars.push_back({e.at("input").get<std::string>(), e.at("output").get<std::string>()});
    if (f.exemplars.empty()) throw InvalidInput("no exemplars");
    return f;
  } catch (const json::exception& e) {
    throw IoError(path, std::string("malformed prompt file: ") + e.what());
  } catch (const InvalidInput& e) {
    throw IoError(path, std::string("malformed prompt file: ") + e.what());
  }
}

FewShotPrompt build_fewshot_prompt(const PromptFile& file, int k) {
  if (k < 1 || k > static_cast<int>(file.exemplars.size()))
    throw InvalidInput("k must be in [1, " + std::to_string(file.exemplars.size()) + "], got " + std::to_string(k));
  FewShotPrompt p;
  p.task = file.task;
  p.instruction = file.instruction;
  p.exemplars.assign(file.exemplars.begin(), file.exemplars.begin() + k);
  p.k = k;
  return p;
}

FewShotPrompt build_fewshot_prompt(ParseTask task, int k, const std::string& data_dir) {
  const auto file = load_prompt_file(prompt_file_path(task, data_dir));
  if (file.task != task) throw InvalidInput("prompt file holds the wrong task");
  return build_fewshot_prompt(file, k);
}

// ---- rate limiting ---------------------------------------------------------

TokenBucket::TokenBucket(double rate_per_second, double burst)
    : rate_(rate_per_second), burst_(std::max(1.0, burst)), tokens_(burst_), last_(std::chrono::steady_clock::now()) {}

void TokenBucket::acquire() {
  if (rate_ <= 0.0) return;
  std::unique_lock lock(mu_);
  for (;;) {
    const auto now = std::chrono::steady_clock::now();
    tokens_ = std::min(burst_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_);
    last_ = now;
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return;
    }
    const double wait = (1.0 - tokens_) / rate_;
    // sleeping under the lock keeps waiters in arrival order
    std::this_thread::sleep_for(std::chrono::duration<double>(wait));
  }
}

// ---- LLM backends ----------------------------------------------------------

std::string to_string(BackendKind k) { return k == BackendKind::kMockRules ? "mock-rules" : "http-chat"; }

BackendKind backend_kind_from_string(const std::string& s) {
  if (s == "mock-rules" || s == "mock") return BackendKind::kMockRules;
  if (s == "http-chat" || s == "http") return BackendKind::kHttpChat;
  throw InvalidInput("unknown LLM backend kind: " + s);
}

void LlmBackendSpec::validate() const {
  if (kind != BackendKind::kHttpChat) return;
  if (endpoint.empty()) throw InvalidInput("http-chat backend needs an endpoint (OPENSEP_LLM_ENDPOINT)");
  if (api_key.empty()) throw InvalidInput("http-chat backend needs a credential (OPENSEP_LLM_API_KEY)");
  if (!(timeout_s > 0.0)) throw InvalidInput("timeout must be positive");
  if (retry.max_retries < 0) throw InvalidInput("max_retries must be >= 0");
}

LlmBackendSpec LlmBackendSpec::from_env(BackendKind kind) {
  LlmBackendSpec s;
  s.kind = kind;
  s.endpoint = env_or("OPENSEP_LLM_ENDPOINT", "");
  s.api_key = env_or("OPENSEP_LLM_API_KEY", "");
  s.model_name = env_or("OPENSEP_LLM_MODEL", "");
  return s;
}

namespace {

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

Url split_url(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw InvalidInput("not an http(s) URL: " + url);
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

}  // namespace

std::string http_post_json(const std::string& url, const std::string& body,
                           const std::vector<std::pair<std::string, std::string>>& headers, double timeout_s,
                           const RetryPolicy& retry) {
  const Url u = split_url(url);
  httplib::Headers hdrs;
  for (const auto& [k, v] : headers) hdrs.emplace(k, v);
  const auto secs = static_cast<time_t>(timeout_s);
  const auto usecs = static_cast<time_t>((timeout_s - static_cast<double>(secs)) * 1e6);

  std::string last_error;
  const int total = retry.max_retries + 1;
  for (int attempt = 1; attempt <= total; ++attempt) {
    httplib::Client cli(u.origin);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    auto res = cli.Post(u.path, hdrs, body, "application/json");
    if (!res) {
      last_error = "request to " + u.origin + " failed: " + httplib::to_string(res.error());
    } else if (res->status >= 200 && res->status < 300) {
      return res->body;
    } else if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status) + " from " + u.origin;
    } else {
      throw BackendError("HTTP " + std::to_string(res->status) + " from " + u.origin + ": " +
                             res->body.substr(0, 200),
                         attempt);
    }
    if (attempt < total) {
      const double wait = retry.backoff_base_s * std::pow(retry.backoff_factor, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    }
  }
  throw BackendError(last_error, total);
}

std::string extract_chat_text(const std::string& response_body) {
  json j;
  try {
    j = json::parse(response_body);
  } catch (const json::exception&) {
    throw ParseError("chat reply is not JSON", response_body);
  }
  try {
    if (j.contains("content") && j["content"].is_array() && !j["content"].empty()) {
      const auto& block = j["content"][0];
      if (block.contains("text")) return block["text"].get<std::string>();
    }
    if (j.contains("choices") && j["choices"].is_array() && !j["choices"].empty())
      return j["choices"][0].at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
  }
  throw ParseError("chat reply has no text content", response_body);
}

HttpChatBackend::HttpChatBackend(LlmBackendSpec spec)
    : spec_(std::move(spec)), bucket_(spec_.requests_per_second) {
  spec_.validate();
}

std::string HttpChatBackend::request_body(const FewShotPrompt& prompt) const {
  json messages = json::array();
  messages.push_back({{"role", "system"}, {"content", prompt.instruction}});
  for (const auto& e : prompt.exemplars) {
    messages.push_back({{"role", "user"}, {"content", e.input}});
    messages.push_back({{"role", "assistant"}, {"content", e.output}});
  }
  messages.push_back({{"role", "user"}, {"content", prompt.query}});
  json body = {{"messages", messages}, {"max_tokens", spec_.max_tokens}, {"temperature", 0}};
  if (!spec_.model_name.empty()) body["model"] = spec_.model_name;
  return body.dump();
}

std::string HttpChatBackend::complete(const FewShotPrompt& prompt) {
  prompt.validate();
  bucket_.acquire();
  const auto reply = http_post_json(spec_.endpoint, request_body(prompt),
                                    {{"Authorization", "Bearer " + spec_.api_key}}, spec_.timeout_s, spec_.retry);
  return extract_chat_text(reply);
}

std::unique_ptr<LlmBackend> make_llm_backend(const LlmBackendSpec& spec) {
  spec.validate();
  if (spec.kind == BackendKind::kMockRules) return std::make_unique<MockLlmBackend>();
  return std::make_unique<HttpChatBackend>(spec);
}

// ---- captioning ------------------------------------------------------------

void Caption::validate() const {
  if (trim(text).empty()) throw InvalidInput("caption is empty");
  if (text.find("\n\n") != std::string::npos) throw InvalidInput("caption spans several paragraphs");
}

void CaptionRegistry::add(const Waveform& audio, std::vector<std::string> labels) {
  add_fingerprint(audio_fingerprint(audio.samples), std::move(labels));
}

void CaptionRegistry::add_fingerprint(const std::string& fingerprint, std::vector<std::string> labels) {
  // An empty label list records audio in which nothing was heard.
  entries_[fingerprint] = std::move(labels);
}

const std::vector<std::string>* CaptionRegistry::find(const Waveform& audio) const {
  auto it = entries_.find(audio_fingerprint(audio.samples));
  return it == entries_.end() ? nullptr : &it->second;
}

std::string CaptionRegistry::to_json() const {
  json entries = json::array();
  for (const auto& [fp, labels] : entries_) entries.push_back({{"fingerprint", fp}, {"labels", labels}});
  return json{{"schema_version", 1}, {"entries", entries}}.dump(2);
}

CaptionRegistry CaptionRegistry::from_json(const std::string& text) {
  CaptionRegistry r;
  try {
    const auto j = json::parse(text);
    for (const auto& e : j.at("entries"))
      r.add_fingerprint(e.at("fingerprint").get<std::string>(), e.at("labels").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed caption registry: ") + e.what());
  }
  return r;
}

void CaptionRegistry::save(const std::string& path) const { write_text_file(path, to_json()); }

CaptionRegistry CaptionRegistry::load(const std::string& path) { return from_json(read_text_file(path)); }

void CaptionRegistry::merge_into(const std::string& path) const {
  CaptionRegistry merged = fs::exists(path) ? load(path) : CaptionRegistry{};
  for (const auto& [fp, labels] : entries_) merged.entries_[fp] = labels;
  merged.save(path);
}

std::string render_caption(const std::vector<std::string>& labels) {
  if (labels.empty()) throw InvalidInput("caption needs at least one label");
  std::string out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i > 0) out += i + 1 == labels.size() ? " and " : ", ";
    out += trim(labels[i]);
  }
  return capitalize_first(out) + ".";
}

void CaptionerSpec::validate() const {
  if (kind == CaptionerKind::kMock) {
    if (registry_path.empty()) throw InvalidInput("mock captioner needs a registry path");
    return;
  }
  if (endpoint.empty()) throw InvalidInput("http captioner needs an endpoint (OPENSEP_CAPTIONER_ENDPOINT)");
  if (api_key.empty()) throw InvalidInput("http captioner needs a credential (OPENSEP_CAPTIONER_API_KEY)");
}

CaptionerSpec CaptionerSpec::from_env(CaptionerKind kind) {
  CaptionerSpec s;
  s.kind = kind;
  s.endpoint = env_or("OPENSEP_CAPTIONER_ENDPOINT", "");
  s.api_key = env_or("OPENSEP_CAPTIONER_API_KEY", "");
  return s;
}

Caption MockCaptioner::caption(const Waveform& x) {
  x.validate();
  const auto* labels = registry_.find(x);
  if (!labels) throw UnknownClip("mock captioner has no labels for audio " + audio_fingerprint(x.samples));
  if (labels->empty()) return {"", "mock"};
  return {render_caption(*labels), "mock"};
}

Caption HttpCaptioner::caption(const Waveform& x) {
  x.validate();
  const json body = {{"audio_wav_base64", httplib::detail::base64_encode(encode_wav(x))},
                     {"sample_rate", x.sample_rate}};
  const auto reply = http_post_json(spec_.endpoint, body.dump(), {{"Authorization", "Bearer " + spec_.api_key}},
                                    spec_.timeout_s, spec_.retry);
  std::string text;
  try {
    const auto j = json::parse(reply);
    if (j.contains("caption") && j["caption"].is_string()) text = j["caption"].get<std::string>();
  } catch (const json::exception&) {
    throw ParseError("captioner reply is not JSON", reply);
  }
  if (text.empty()) text = extract_chat_text(reply);
  std::replace(text.begin(), text.end(), '\n', ' ');
  Caption c{trim(text), "http"};
  if (c.text.empty()) throw ParseError("captioner returned an empty caption", reply);
  return c;
}

std::unique_ptr<Captioner> make_captioner(const CaptionerSpec& spec) {
  spec.validate();
  if (spec.kind == CaptionerKind::kMock) return std::make_unique<MockCaptioner>(CaptionRegistry::load(spec.registry_path));
  return std::make_unique<HttpCaptioner>(spec);
}

Caption caption_audio(const Waveform& x, Captioner& captioner) {
  Caption c = captioner.caption(x);
  c.validate();
  return c;
}

// ---- parsing ---------------------------------------------------------------

ParsedSourceList sources_from_response(const std::string& response) {
  // One phrase per line or per sentence; list markers are dropped.
  static const std::regex marker(R"(^\s*(?:[-*•]|\d+[.)])\s*)");
  ParsedSourceList out;
  std::istringstream lines(response);
  std::string line;
  auto add = [&](std::string phrase) {
    phrase = capitalize_first(trim(phrase));
    while (!phrase.empty() && std::string(".!?;,").find(phrase.back()) != std::string::npos) phrase.pop_back();
    if (phrase.size() >= 2 && phrase.front() == '"' && phrase.back() == '"') phrase = phrase.substr(1, phrase.size() - 2);
    phrase = trim(phrase);
    if (word_tokens(phrase).empty()) return;
    const auto norm = normalize_phrase(phrase);
    for (const auto& p : out.sources)
      if (normalize_phrase(p) == norm || ngram_cosine(p, phrase) >= kDuplicateSimilarity) return;
    out.sources.push_back(phrase);
  };
  while (std::getline(lines, line)) {
    line = std::regex_replace(line, marker, "");
    std::string cur;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if ((c == '.' || c == '!' || c == '?' || c == ';') && (i + 1 == line.size() || line[i + 1] == ' ')) {
        add(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    add(cur);
  }
  if (out.sources.empty()) throw ParseError("no source phrases in reply", response);
  return out;
}

ParsedSourceList parse_sources(const Caption& c, FewShotPrompt prompt, LlmBackend& backend) {
  c.validate();
  if (prompt.task != ParseTask::kSourceParse) throw InvalidInput("parse_sources needs a source-parse prompt");
  prompt.query = c.text;
  return sources_from_response(backend.complete(prompt));
}

ParsedSourceList parse_sources(const Caption& c, const FewShotPrompt& prompt, const LlmBackendSpec& spec) {
  auto backend = make_llm_backend(spec);
  return parse_sources(c, prompt, *backend);
}

std::string to_string(PropertyCategory c) {
  switch (c) {
    case PropertyCategory::kFrequency: return "frequency";
    case PropertyCategory::kAmplitude: return "amplitude";
    case PropertyCategory::kTimbre: return "timbre";
    case PropertyCategory::kDuration: return "duration";
    case PropertyCategory::kAttackDecay: return "attack_decay";
    case PropertyCategory::kEnvelope: return "envelope";
    case PropertyCategory::kSpectral: return "spectral";
  }
  return "unknown";
}

namespace {

const std::vector<std::pair<PropertyCategory, std::set<std::string>>>& property_keywords() {
  static const std::vector<std::pair<PropertyCategory, std::set<std::string>>> k = {
      {PropertyCategory::kFrequency, {"hz", "khz", "frequency", "frequencies", "pitch", "pitched", "fundamental"}},
      {PropertyCategory::kAmplitude, {"amplitude", "loud", "loudness", "quiet", "level", "volume", "intense", "forceful"}},
      {PropertyCategory::kTimbre, {"timbre", "timbral", "tonal"}},
      {PropertyCategory::kDuration, {"duration", "seconds", "second", "milliseconds", "lasting", "lasts", "minutes"}},
      {PropertyCategory::kAttackDecay, {"attack", "decay", "onset", "release"}},
      {PropertyCategory::kEnvelope, {"envelope", "sustained", "tremolo", "vibrato", "swells", "pulsed"}},
      {PropertyCategory::kSpectral,
       {"spectral", "spectrum", "harmonic", "harmonics", "overtone", "overtones", "partial", "partials", "broadband",
        "sidebands"}},
  };
  return k;
}

bool mentions(const std::vector<std::string>& words, const std::set<std::string>& keys) {
  return std::any_of(words.begin(), words.end(), [&](const std::string& w) { return keys.count(w) > 0; });
}

}  // namespace

std::vector<PropertyCategory> detect_properties(const std::string& text) {
  const auto words = word_tokens(text);
  std::vector<PropertyCategory> out;
  for (const auto& [cat, keys] : property_keywords())
    if (mentions(words, keys)) out.push_back(cat);
  return out;
}

KnowledgeCard knowledge_card_from_response(const std::string& phrase, const std::string& response, int token_budget) {
  std::string text = trim(response);
  if (text.size() >= 2 && text.front() == '"' && text.back() == '"') text = trim(text.substr(1, text.size() - 2));
  std::replace(text.begin(), text.end(), '\n', ' ');
  if (word_tokens(text).empty()) throw ParseError("knowledge reply is empty", response);

  KnowledgeCard card;
  card.source_phrase = phrase;
  card.token_budget = token_budget;
  auto cut = truncate_to_budget(text, token_budget);
  card.full_text = std::move(cut.text);
  card.truncated = cut.truncated;

  std::vector<std::string> clauses;
  std::string cur;
  for (char c : card.full_text) {
    if (c == ',') {
      clauses.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  clauses.push_back(trim(cur));
  for (const auto& clause : clauses) {
    const auto words = word_tokens(clause);
    for (const auto& [cat, keys] : property_keywords()) {
      if (!mentions(words, keys)) continue;
      auto& slot = card.properties[cat];
      if (!slot.empty()) slot += ", ";
      slot += clause;
    }
  }
  return card;
}

KnowledgeCard parse_knowledge(const std::string& phrase, FewShotPrompt prompt, LlmBackend& backend, int token_budget) {
  if (trim(phrase).empty()) throw InvalidInput("knowledge parsing needs a non-empty phrase");
  if (prompt.task != ParseTask::kKnowledgeParse) throw InvalidInput("parse_knowledge needs a knowledge-parse prompt");
  prompt.query = trim(phrase);
  return knowledge_card_from_response(prompt.query, backend.complete(prompt), token_budget);
}

KnowledgeCard parse_knowledge(const std::string& phrase, const FewShotPrompt& prompt, const LlmBackendSpec& spec,
                              int token_budget) {
  if (trim(phrase).empty()) throw InvalidInput("knowledge parsing needs a non-empty phrase");
  auto backend = make_llm_backend(spec);
  return parse_knowledge(phrase, prompt, *backend, token_budget);
}

// ---- label matching --------------------------------------------------------

TextSimilarity ngram_similarity() {
  return [](const std::string& a, const std::string& b) { return ngram_cosine(a, b); };
}

LabelMatch match_sources_to_labels(const std::vector<std::string>& parsed, const std::vector<std::string>& labels,
                                   const TextSimilarity& sim, double threshold) {
  if (labels.empty()) throw InvalidInput("label matching needs at least one label");
  const std::size_t nl = labels.size(), np = parsed.size();
  LabelMatch m;
  m.assignment.assign(nl, -1);
  m.similarity.assign(nl, 0.0);
  m.correct.assign(nl, false);
  if (np == 0) return m;

  std::vector<std::vector<double>> s(nl, std::vector<double>(np));
  struct Cand {
    double sim;
    std::size_t label, phrase;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < nl; ++i)
    for (std::size_t j = 0; j < np; ++j) {
      s[i][j] = sim(labels[i], parsed[j]);
      cands.push_back({s[i][j], i, j});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.sim > b.sim; });
  std::vector<bool> phrase_used(np, false);
  for (const auto& c : cands) {
    if (c.sim <= 0.0) break;
    if (m.assignment[c.label] >= 0 || phrase_used[c.phrase]) continue;
    m.assignment[c.label] = static_cast<int>(c.phrase);
    m.similarity[c.label] = c.sim;
    phrase_used[c.phrase] = true;
  }
  int correct = 0;
  for (std::size_t i = 0; i < nl; ++i) {
    const int j = m.assignment[i];
    if (j < 0 || m.similarity[i] < threshold) continue;
    bool best = true;
    for (std::size_t o = 0; o < nl && best; ++o) best = s[o][j] <= s[i][j];
    if (best) {
      m.correct[i] = true;
      ++correct;
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(nl);
  return m;
}

// ---- per-clip output -------------------------------------------------------

std::string ParseOutput::to_json() const {
  json k = json::array();
  for (const auto& card : knowledge) {
    json cats = json::array();
    for (const auto& [cat, text] : card.properties) cats.push_back(to_string(cat));
    k.push_back({{"phrase", card.source_phrase},
                 {"full_text", card.full_text},
                 {"truncated", card.truncated},
                 {"categories", cats}});
  }
  return json{{"caption", caption.text},
              {"caption_backend", caption.source_backend},
              {"sources", sources.sources},
              {"knowledge", k}}
      .dump(2);
}

ParseOutput textual_inversion(const Waveform& mixture, Captioner& captioner, LlmBackend& llm,
                              const ParseOptions& opts) {
  ParseOutput out;
  out.caption = caption_audio(mixture, captioner);
  out.sources = parse_sources(out.caption, build_fewshot_prompt(ParseTask::kSourceParse, opts.k_shots, opts.data_dir), llm);
  const auto kprompt = build_fewshot_prompt(ParseTask::kKnowledgeParse, opts.k_shots, opts.data_dir);
  for (const auto& phrase : out.sources.sources)
    out.knowledge.push_back(parse_knowledge(phrase, kprompt, llm, opts.token_budget));
  return out;
}

}  // namespace opensep
