// textual_inversion.h
// Mixture -> caption -> source phrases -> knowledge cards.
//
// Every stage has a deterministic mock backend (rule-based, offline) and an
// HTTP backend for hosted captioning / chat-completion services.

#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "opensep/dsp.h"
#include "opensep/toy_corpus.h"

namespace opensep {

// ---- prompts ---------------------------------------------------------------

enum class ParseTask { kSourceParse, kKnowledgeParse };
std::string to_string(ParseTask t);

struct Exemplar {
  std::string input;
  std::string output;
};

struct PromptFile {
  ParseTask task = ParseTask::kSourceParse;
  std::string instruction;
  std::vector<Exemplar> exemplars;
};

struct FewShotPrompt {
  ParseTask task = ParseTask::kSourceParse;
  std::string instruction;
  std::vector<Exemplar> exemplars;
  int k = 0;
  std::string query;

  void validate() const;
};

// $OPENSEP_DATA_DIR if set, else the data/ directory of the source tree.
std::string default_data_dir();
std::string prompt_file_path(ParseTask task, const std::string& data_dir = default_data_dir());
PromptFile load_prompt_file(const std::string& path);

// First k curated exemplars plus the instruction; query left empty.
FewShotPrompt build_fewshot_prompt(ParseTask task, int k, const std::string& data_dir = default_data_dir());
FewShotPrompt build_fewshot_prompt(const PromptFile& file, int k);

// ---- rate limiting ---------------------------------------------------------

// Blocking token bucket. rate <= 0 disables limiting.
class TokenBucket {
 public:
  explicit TokenBucket(double rate_per_second, double burst = 1.0);
  void acquire();

 private:
  double rate_;
  double burst_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
  std::mutex mu_;
};

struct RetryPolicy {
  int max_retries = 3;
  double backoff_base_s = 1.0;
  double backoff_factor = 2.0;
};

// ---- LLM backends ----------------------------------------------------------

enum class BackendKind { kMockRules, kHttpChat };
std::string to_string(BackendKind k);
BackendKind backend_kind_from_string(const std::string& s);

struct LlmBackendSpec {
  BackendKind kind = BackendKind::kMockRules;
  std::string endpoint;  // full URL, e.g. https://host/v1/chat/completions
  std::string api_key;
  std::string model_name;
  double timeout_s = 30.0;
  RetryPolicy retry;
  double requests_per_second = 0.0;
  int max_tokens = 512;

  // Throws InvalidInput when the http kind lacks an endpoint or credential.
  void validate() const;
  // Fills endpoint, key and model from OPENSEP_LLM_ENDPOINT,
  // OPENSEP_LLM_API_KEY and OPENSEP_LLM_MODEL where they are set.
  static LlmBackendSpec from_env(BackendKind kind);
};

class LlmBackend {
 public:
  virtual ~LlmBackend() = default;
  virtual std::string complete(const FewShotPrompt& prompt) = 0;
  virtual std::string name() const = 0;
};

// Rule-based stand-in for an instruction-tuned LLM. Exemplar inputs in the
// prompt are answered verbatim; other queries go through the parsing rules
// (source task) or the toy-class descriptor table (knowledge task).
class MockLlmBackend : public LlmBackend {
 public:
  explicit MockLlmBackend(std::vector<ToyClassSpec> classes = default_toy_classes());
  std::string complete(const FewShotPrompt& prompt) override;
  std::string name() const override { return "mock-rules"; }

 private:
  std::vector<ToyClassSpec> classes_;
};

// Chat-completion client: a system message with the instruction, k
// user/assistant exemplar pairs, then the query. Reads either
// content[0].text or choices[0].message.content from the reply.
class HttpChatBackend : public LlmBackend {
 public:
  explicit HttpChatBackend(LlmBackendSpec spec);
  std::string complete(const FewShotPrompt& prompt) override;
  std::string name() const override { return "http-chat"; }
  std::string request_body(const FewShotPrompt& prompt) const;

 private:
  LlmBackendSpec spec_;
  TokenBucket bucket_;
};

std::unique_ptr<LlmBackend> make_llm_backend(const LlmBackendSpec& spec);

// POSTs body to url with retries on network errors, 5xx and 429.
// Throws BackendError carrying the attempt count once retries run out.
std::string http_post_json(const std::string& url, const std::string& body,
                           const std::vector<std::pair<std::string, std::string>>& headers, double timeout_s,
                           const RetryPolicy& retry);

// Text of the first content block in a chat reply; ParseError otherwise.
std::string extract_chat_text(const std::string& response_body);

// The rule set behind MockLlmBackend's source task, exposed for tests.
std::vector<std::string> mock_parse_sources(const std::string& caption);

// ---- captioning ------------------------------------------------------------

struct Caption {
  std::string text;
  std::string source_backend;

  void validate() const;
};

// Fingerprint -> class phrases of the sources known to be in that audio.
class CaptionRegistry {
 public:
  void add(const Waveform& audio, std::vector<std::string> labels);
  void add_fingerprint(const std::string& fingerprint, std::vector<std::string> labels);
  const std::vector<std::string>* find(const Waveform& audio) const;
  std::size_t size() const { return entries_.size(); }

  std::string to_json() const;
  static CaptionRegistry from_json(const std::string& text);
  void save(const std::string& path) const;
  static CaptionRegistry load(const std::string& path);
  // Merges into an existing registry file, creating it when absent.
  void merge_into(const std::string& path) const;

 private:
  std::map<std::string, std::vector<std::string>> entries_;
};

// "A low steady tone and a rising chirp." from the class phrases.
std::string render_caption(const std::vector<std::string>& labels);

enum class CaptionerKind { kMock, kHttp };

struct CaptionerSpec {
  CaptionerKind kind = CaptionerKind::kMock;
  std::string registry_path;  // mock
  std::string endpoint;       // http
  std::string api_key;
  double timeout_s = 60.0;
  RetryPolicy retry;

  void validate() const;
  // OPENSEP_CAPTIONER_ENDPOINT and OPENSEP_CAPTIONER_API_KEY.
  static CaptionerSpec from_env(CaptionerKind kind);
};

class Captioner {
 public:
  virtual ~Captioner() = default;
  virtual Caption caption(const Waveform& x) = 0;
};

class MockCaptioner : public Captioner {
 public:
  explicit MockCaptioner(CaptionRegistry registry) : registry_(std::move(registry)) {}
  // Throws UnknownClip when the audio is not registered.
  Caption caption(const Waveform& x) override;

 private:
  CaptionRegistry registry_;
};

// Sends {"audio_wav_base64", "sample_rate"}; accepts {"caption": ...} or a
// chat-style reply.
class HttpCaptioner : public Captioner {
 public:
  explicit HttpCaptioner(CaptionerSpec spec) : spec_(std::move(spec)) {}
  Caption caption(const Waveform& x) override;

 private:
  CaptionerSpec spec_;
};

std::unique_ptr<Captioner> make_captioner(const CaptionerSpec& spec);

Caption caption_audio(const Waveform& x, Captioner& captioner);

// ---- parsing ---------------------------------------------------------------

struct ParsedSourceList {
  std::vector<std::string> sources;
};

inline constexpr double kDuplicateSimilarity = 0.9;

// Splits a reply into phrases (sentences, lines or list items), strips list
// markers and final periods, and collapses duplicates. Throws ParseError when
// nothing usable is left.
ParsedSourceList sources_from_response(const std::string& response);

ParsedSourceList parse_sources(const Caption& c, FewShotPrompt prompt, LlmBackend& backend);
ParsedSourceList parse_sources(const Caption& c, const FewShotPrompt& prompt, const LlmBackendSpec& spec);

enum class PropertyCategory { kFrequency, kAmplitude, kTimbre, kDuration, kAttackDecay, kEnvelope, kSpectral };
inline constexpr int kNumPropertyCategories = 7;
std::string to_string(PropertyCategory c);

// Categories whose keywords appear in the text.
std::vector<PropertyCategory> detect_properties(const std::string& text);

inline constexpr int kDefaultTokenBudget = 512;

struct KnowledgeCard {
  std::string source_phrase;
  // Clauses of full_text filed under each category they mention.
  std::map<PropertyCategory, std::string> properties;
  std::string full_text;
  int token_budget = kDefaultTokenBudget;
  bool truncated = false;

  int category_count() const { return static_cast<int>(properties.size()); }
};

KnowledgeCard knowledge_card_from_response(const std::string& phrase, const std::string& response,
                                           int token_budget = kDefaultTokenBudget);

KnowledgeCard parse_knowledge(const std::string& phrase, FewShotPrompt prompt, LlmBackend& backend,
                              int token_budget = kDefaultTokenBudget);
KnowledgeCard parse_knowledge(const std::string& phrase, const FewShotPrompt& prompt,
                              const LlmBackendSpec& spec, int token_budget = kDefaultTokenBudget);

// ---- label matching --------------------------------------------------------

using TextSimilarity = std::function<double(const std::string&, const std::string&)>;
TextSimilarity ngram_similarity();

inline constexpr double kLabelMatchThreshold = 0.3;

struct LabelMatch {
  std::vector<int> assignment;     // per label: index into parsed, or -1
  std::vector<double> similarity;  // per label, 0 when unmatched
  std::vector<bool> correct;
  double accuracy = 0.0;
};

// Greedy one-to-one matching by descending similarity. A label counts as
// correct when its match reaches the threshold and the label is also the
// best label for that phrase.
LabelMatch match_sources_to_labels(const std::vector<std::string>& parsed,
                                   const std::vector<std::string>& labels,
                                   const TextSimilarity& sim = ngram_similarity(),
                                   double threshold = kLabelMatchThreshold);

// ---- per-clip output -------------------------------------------------------

struct ParseOutput {
  Caption caption;
  ParsedSourceList sources;
  std::vector<KnowledgeCard> knowledge;

  // {caption, sources:[...], knowledge:[{phrase, full_text}]}
  std::string to_json() const;
};

struct ParseOptions {
  int k_shots = 5;
  int token_budget = kDefaultTokenBudget;
  std::string data_dir = default_data_dir();
};

// Caption, then source parse, then one knowledge call per phrase.
ParseOutput textual_inversion(const Waveform& mixture, Captioner& captioner, LlmBackend& llm,
                              const ParseOptions& opts = {});

}  // namespace opensep
