#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <thread>

#include "doctest.h"
#include "parse_goldens.h"
#include "httplib.h"
#include "json.hpp"
#include "opensep/errors.h"
#include "opensep/text_util.h"
#include "opensep/textual_inversion.h"
#include "opensep/toy_corpus.h"
#include "opensep/wav_io.h"

using namespace opensep;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ParsedSourceList mock_parse(const std::string& caption, int k = 5) {
  MockLlmBackend llm;
  return parse_sources(Caption{caption, "test"}, build_fewshot_prompt(ParseTask::kSourceParse, k), llm);
}

// Local HTTP server on an ephemeral port, stopped on scope exit.
struct TestServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;

  void start() {
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port) + path; }
  ~TestServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
};

LlmBackendSpec http_spec(const std::string& endpoint) {
  LlmBackendSpec s;
  s.kind = BackendKind::kHttpChat;
  s.endpoint = endpoint;
  s.api_key = "test-key";
  s.model_name = "test-model";
  s.timeout_s = 5.0;
  s.retry.backoff_base_s = 0.01;
  return s;
}

Waveform toy_mixture(const std::vector<std::string>& ids, std::uint64_t seed) {
  const auto classes = default_toy_classes();
  Waveform mix(std::vector<double>(16000, 0.0), 16000);
  for (const auto& id : ids)
    for (const auto& c : classes)
      if (c.class_id == id) {
        const auto clip = generate_clip(c, 1.0, seed++);
        for (std::size_t i = 0; i < mix.size(); ++i) mix.samples[i] += 0.5 * clip.audio.samples[i];
      }
  return mix;
}

}  // namespace

TEST_CASE("source parsing goldens") {
  for (const auto& g : testing::kParseGoldens) {
    CAPTURE(g.caption);
    CHECK(mock_parse(g.caption).sources == g.sources);
  }
}

TEST_CASE("source parsing is idempotent on its own output") {
  for (const auto& g : testing::kParseGoldens) {
    std::string joined;
    for (const auto& s : g.sources) joined += s + ". ";
    CAPTURE(joined);
    CHECK(mock_parse(joined).sources == g.sources);
  }
}

TEST_CASE("source parsing of single sources and errors") {
  CHECK(mock_parse("A dog barks.").sources == std::vector<std::string>{"A dog barks"});
  CHECK(mock_parse("A low steady tone and a rising chirp.").sources ==
        std::vector<std::string>{"A low steady tone", "A rising chirp"});
  CHECK(mock_parse("A low steady tone, a band of static and a falling chirp.").sources ==
        std::vector<std::string>{"A low steady tone", "A band of static", "A falling chirp"});
  CHECK_THROWS_AS(mock_parse("   "), InvalidInput);
  try {
    mock_parse("...");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.raw_response().empty());
  }
  // exemplar inputs come back verbatim, and only when the exemplar is in the prompt
  CHECK(mock_parse("Traffic rumbling while a siren wails in the distance.", 2).sources ==
        std::vector<std::string>{"Traffic rumbling", "Siren wailing"});
}

TEST_CASE("mock backends are deterministic") {
  MockLlmBackend a, b;
  auto p = build_fewshot_prompt(ParseTask::kSourceParse, 5);
  p.query = testing::kParseGoldens.back().caption;
  CHECK(a.complete(p) == b.complete(p));
  auto kp = build_fewshot_prompt(ParseTask::kKnowledgeParse, 5);
  kp.query = "Owl hooting";
  CHECK(a.complete(kp) == b.complete(kp));
}

TEST_CASE("reply post-processing") {
  CHECK(sources_from_response("1. Dog barking\n2. Car horn honking\n").sources ==
        std::vector<std::string>{"Dog barking", "Car horn honking"});
  CHECK(sources_from_response("- dog barking.\n* Dog barking\n").sources == std::vector<std::string>{"Dog barking"});
  CHECK(sources_from_response("A bell rings; a goose honks.").sources ==
        std::vector<std::string>{"A bell rings", "A goose honks"});
  // near-duplicates merge
  CHECK(sources_from_response("A cat meows. A cat meows loudly.").sources.size() == 2);
  CHECK(sources_from_response("Dog barking. Dog  barking!").sources.size() == 1);
  try {
    sources_from_response("... --- ...");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.raw_response() == "... --- ...");
  }
}

TEST_CASE("few-shot prompts") {
  const auto p5 = build_fewshot_prompt(ParseTask::kKnowledgeParse, 5);
  CHECK(p5.k == 5);
  CHECK(p5.exemplars.size() == 5);
  CHECK_FALSE(p5.instruction.empty());
  const auto p1 = build_fewshot_prompt(ParseTask::kSourceParse, 1);
  CHECK(p1.exemplars.size() == 1);
  CHECK_THROWS_AS(build_fewshot_prompt(ParseTask::kSourceParse, 0), InvalidInput);
  const auto file = load_prompt_file(prompt_file_path(ParseTask::kSourceParse));
  CHECK(file.exemplars.size() >= 5);
  CHECK_THROWS_AS(build_fewshot_prompt(file, static_cast<int>(file.exemplars.size()) + 1), InvalidInput);
  for (auto task : {ParseTask::kSourceParse, ParseTask::kKnowledgeParse}) {
    const auto f = load_prompt_file(prompt_file_path(task));
    for (int k = 1; k < static_cast<int>(f.exemplars.size()); ++k) {
      const auto a = build_fewshot_prompt(f, k), b = build_fewshot_prompt(f, k + 1);
      for (int i = 0; i < k; ++i) {
        CHECK(a.exemplars[i].input == b.exemplars[i].input);
        CHECK(a.exemplars[i].output == b.exemplars[i].output);
      }
      CHECK(a.instruction == b.instruction);
    }
  }
  CHECK_THROWS_AS(load_prompt_file("/nonexistent/prompt.json"), IoError);
}

TEST_CASE("knowledge parsing with the mock backend") {
  MockLlmBackend llm;
  const auto kp = build_fewshot_prompt(ParseTask::kKnowledgeParse, 5);

  const auto cat = parse_knowledge("Cat hissing", kp, llm);
  CHECK(cat.full_text.find("2-4 kHz") != std::string::npos);
  CHECK(cat.full_text.find("0.1-0.3 seconds") != std::string::npos);
  CHECK(cat.category_count() >= 3);
  CHECK_FALSE(cat.truncated);

  const auto tone = parse_knowledge("tone_low", kp, llm);
  CHECK(tone.full_text.rfind("a steady pure tone between 200 and 400 Hz", 0) == 0);
  CHECK(parse_knowledge("A low steady tone", kp, llm).full_text == tone.full_text);

  for (const auto& c : default_toy_classes()) {
    const auto card = parse_knowledge(c.class_phrase, kp, llm);
    CAPTURE(c.class_id);
    CHECK(card.full_text == knowledge_text_for_class(c, KnowledgeMode::kEnriched));
    CHECK(card.category_count() >= 3);
    CHECK(count_words(card.full_text) <= card.token_budget);
  }
  const auto other = parse_knowledge("Owl hooting", kp, llm);
  CHECK(other.full_text.rfind("Owl hooting", 0) == 0);
  CHECK(other.category_count() >= 3);

  CHECK_THROWS_AS(parse_knowledge("  ", kp, llm), InvalidInput);
  CHECK_THROWS_AS(parse_knowledge("Cat hissing", build_fewshot_prompt(ParseTask::kSourceParse, 5), llm),
                  InvalidInput);
}

TEST_CASE("property keywords") {
  const auto cats = detect_properties("a loud bark at 1 kHz with a fast attack");
  CHECK(cats == std::vector<PropertyCategory>{PropertyCategory::kFrequency, PropertyCategory::kAmplitude,
                                              PropertyCategory::kAttackDecay});
  CHECK(detect_properties("nothing relevant here").empty());
  for (const auto& e : load_prompt_file(prompt_file_path(ParseTask::kKnowledgeParse)).exemplars) {
    CAPTURE(e.input);
    CHECK(detect_properties(e.output).size() >= 3);
  }
}

TEST_CASE("knowledge budget truncation") {
  std::string text;
  for (int s = 0; s < 60; ++s) text += "The tone sits near 500 Hz and stays loud for about two seconds. ";
  const auto card = knowledge_card_from_response("tone", text, 512);
  CHECK(card.truncated);
  CHECK(count_words(card.full_text) <= 512);
  CHECK(card.full_text.back() == '.');
  CHECK(count_words(card.full_text) % 13 == 0);  // whole sentences only

  // one long sentence falls back to a clause boundary
  std::string one = "A long sound";
  for (int i = 0; i < 600; ++i) one += ", with detail " + std::to_string(i);
  one += ".";
  const auto cut = truncate_to_budget(one, 512);
  CHECK(cut.truncated);
  CHECK(count_words(cut.text) <= 512);
  CHECK(cut.text.back() == '.');
  CHECK(cut.text.find(",.") == std::string::npos);

  const auto fits = truncate_to_budget("Short and sweet.", 512);
  CHECK_FALSE(fits.truncated);
  CHECK(fits.text == "Short and sweet.");
  CHECK(truncate_to_budget("one two three four", 2).text == "one two.");
  CHECK_THROWS_AS(knowledge_card_from_response("x", "  \n ", 512), ParseError);
}

TEST_CASE("n-gram cosine by hand") {
  // {dog, barking, dog barking} vs {a, dog, barking, loudly, a dog, dog barking, barking loudly}
  CHECK(ngram_cosine("dog barking", "a dog barking loudly") == doctest::Approx(3.0 / std::sqrt(21.0)));
  CHECK(ngram_cosine("Dog barking!", "dog barking") == doctest::Approx(1.0));
  CHECK(ngram_cosine("violin", "dog barking") == 0.0);
  CHECK(ngram_cosine("", "dog") == 0.0);
  CHECK(word_tokens("2-4 kHz, 0.1-0.3 s") == std::vector<std::string>{"2-4", "khz", "0.1-0.3", "s"});
}

TEST_CASE("label matching") {
  const std::vector<std::string> labels{"dog barking", "violin"};
  auto m = match_sources_to_labels(labels, labels);
  CHECK(m.accuracy == 1.0);
  CHECK(m.assignment == std::vector<int>{0, 1});

  m = match_sources_to_labels({"dog barking"}, labels);
  CHECK(m.accuracy == doctest::Approx(0.5));
  CHECK(m.assignment == std::vector<int>{0, -1});

  m = match_sources_to_labels({"thunder rumbling"}, labels);
  CHECK(m.accuracy == 0.0);
  CHECK(match_sources_to_labels({}, labels).accuracy == 0.0);
  CHECK_THROWS_AS(match_sources_to_labels({"x"}, {}), InvalidInput);

  // one-to-one: the second label cannot reuse the phrase
  m = match_sources_to_labels({"a dog barking"}, {"dog barking", "dog barking loudly"});
  CHECK(m.assignment[0] == 0);
  CHECK(m.assignment[1] == -1);

  // pluggable similarity
  auto exact = [](const std::string& a, const std::string& b) { return a == b ? 1.0 : 0.0; };
  CHECK(match_sources_to_labels({"violin", "piano"}, {"piano", "violin", "flute"}, exact).accuracy ==
        doctest::Approx(2.0 / 3.0));
}

TEST_CASE("mock captioner") {
  const auto classes = default_toy_classes();
  const auto mix = toy_mixture({"tone_low", "chirp_up"}, 7);
  CaptionRegistry reg;
  reg.add(mix, {"a low steady tone", "a rising chirp"});
  const auto single = toy_mixture({"noise_hiss"}, 9);
  reg.add(single, {"a bright airy hiss"});
  MockCaptioner cap(reg);
  CHECK(caption_audio(mix, cap).text == "A low steady tone and a rising chirp.");
  const auto one = caption_audio(single, cap);
  CHECK(one.text == "A bright airy hiss.");
  CHECK(mock_parse(one.text).sources.size() == 1);
  CHECK_THROWS_AS(caption_audio(toy_mixture({"tone_high"}, 1), cap), UnknownClip);
  CHECK(render_caption({"a x", "a y", "a z"}) == "A x, a y and a z.");

  // float32 WAV round trip keeps the fingerprint
  const auto dir = fs::temp_directory_path() / "opensep_ti_test";
  fs::create_directories(dir);
  write_wav((dir / "mix.wav").string(), mix);
  CHECK(caption_audio(read_wav((dir / "mix.wav").string()), cap).text == "A low steady tone and a rising chirp.");

  reg.save((dir / "reg.json").string());
  CaptionRegistry extra;
  extra.add(toy_mixture({"tone_high"}, 1), {"a high steady tone"});
  extra.merge_into((dir / "reg.json").string());
  const auto loaded = CaptionRegistry::load((dir / "reg.json").string());
  CHECK(loaded.size() == 3);
  CHECK(*loaded.find(mix) == std::vector<std::string>{"a low steady tone", "a rising chirp"});
  fs::remove_all(dir);
}

TEST_CASE("end-to-end toy textual inversion") {
  const auto mix = toy_mixture({"tone_low", "chirp_up"}, 3);
  CaptionRegistry reg;
  reg.add(mix, {"a low steady tone", "a rising chirp"});
  MockCaptioner cap(reg);
  MockLlmBackend llm;
  const auto out = textual_inversion(mix, cap, llm);
  CHECK(out.sources.sources == std::vector<std::string>{"A low steady tone", "A rising chirp"});
  REQUIRE(out.knowledge.size() == 2);
  const auto classes = default_toy_classes();
  CHECK(out.knowledge[0].full_text == knowledge_text_for_class(classes[0], KnowledgeMode::kEnriched));
  CHECK(out.knowledge[1].full_text == knowledge_text_for_class(classes[2], KnowledgeMode::kEnriched));
  const auto j = json::parse(out.to_json());
  CHECK(j["caption"] == "A low steady tone and a rising chirp.");
  CHECK(j["sources"].size() == 2);
  CHECK(j["knowledge"][0]["phrase"] == "A low steady tone");
  CHECK(textual_inversion(mix, cap, llm).to_json() == out.to_json());
}

TEST_CASE("backend spec validation") {
  LlmBackendSpec s;
  s.kind = BackendKind::kHttpChat;
  CHECK_THROWS_AS(s.validate(), InvalidInput);
  s.endpoint = "http://127.0.0.1:1/v1/chat";
  CHECK_THROWS_AS(s.validate(), InvalidInput);  // no credential
  s.api_key = "k";
  CHECK_NOTHROW(s.validate());
  CHECK(backend_kind_from_string("mock-rules") == BackendKind::kMockRules);
  CHECK_THROWS_AS(backend_kind_from_string("carrier-pigeon"), InvalidInput);
  CaptionerSpec c;
  CHECK_THROWS_AS(c.validate(), InvalidInput);
}

TEST_CASE("http chat backend request and replies") {
  TestServer srv;
  json last_request;
  std::string last_auth;
  std::atomic<int> style{0};
  srv.server.Post("/v1/chat", [&](const httplib::Request& req, httplib::Response& res) {
    last_request = json::parse(req.body);
    last_auth = req.get_header_value("Authorization");
    if (style == 0)
      res.set_content(R"({"content":[{"type":"text","text":"Dog barking. Car horn honking."}]})", "application/json");
    else if (style == 1)
      res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"Dog barking."}}]})",
                      "application/json");
    else
      res.set_content("not json", "text/plain");
  });
  srv.start();

  HttpChatBackend backend(http_spec(srv.url("/v1/chat")));
  const auto prompt = build_fewshot_prompt(ParseTask::kSourceParse, 3);
  const auto parsed = parse_sources(Caption{"a dog barks and a car horn honks", "t"}, prompt, backend);
  CHECK(parsed.sources == std::vector<std::string>{"Dog barking", "Car horn honking"});
  CHECK(last_auth == "Bearer test-key");
  REQUIRE(last_request["messages"].size() == 1 + 2 * 3 + 1);
  CHECK(last_request["messages"][0]["role"] == "system");
  CHECK(last_request["messages"][0]["content"] == prompt.instruction);
  CHECK(last_request["messages"][1]["role"] == "user");
  CHECK(last_request["messages"][2]["role"] == "assistant");
  CHECK(last_request["messages"][2]["content"] == prompt.exemplars[0].output);
  CHECK(last_request["messages"][7]["content"] == "a dog barks and a car horn honks");
  CHECK(last_request["model"] == "test-model");

  style = 1;
  CHECK(parse_sources(Caption{"a dog barks", "t"}, prompt, backend).sources ==
        std::vector<std::string>{"Dog barking"});
  style = 2;
  try {
    parse_sources(Caption{"a dog barks", "t"}, prompt, backend);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.raw_response() == "not json");
  }
}

TEST_CASE("http retries and failures") {
  TestServer srv;
  std::atomic<int> hits{0}, flaky_hits{0}, bad_hits{0};
  srv.server.Post("/flaky", [&](const httplib::Request&, httplib::Response& res) {
    if (++flaky_hits <= 2) {
      res.status = flaky_hits == 1 ? 503 : 429;
      return;
    }
    res.set_content(R"({"content":[{"text":"ok"}]})", "application/json");
  });
  srv.server.Post("/down", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 500;
  });
  srv.server.Post("/bad", [&](const httplib::Request&, httplib::Response& res) {
    ++bad_hits;
    res.status = 400;
    res.set_content("bad request", "text/plain");
  });
  srv.start();

  RetryPolicy fast{3, 0.01, 2.0};
  CHECK(extract_chat_text(http_post_json(srv.url("/flaky"), "{}", {}, 5.0, fast)) == "ok");
  CHECK(flaky_hits == 3);

  try {
    http_post_json(srv.url("/down"), "{}", {}, 5.0, fast);
    FAIL("expected BackendError");
  } catch (const BackendError& e) {
    CHECK(e.attempts() == 4);
  }
  CHECK(hits == 4);

  try {
    http_post_json(srv.url("/bad"), "{}", {}, 5.0, fast);
    FAIL("expected BackendError");
  } catch (const BackendError& e) {
    CHECK(e.attempts() == 1);
  }
  CHECK(bad_hits == 1);

  // nothing listening
  RetryPolicy once{1, 0.01, 2.0};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    http_post_json("http://127.0.0.1:1/x", "{}", {}, 1.0, once);
    FAIL("expected BackendError");
  } catch (const BackendError& e) {
    CHECK(e.attempts() == 2);
  }
  CHECK(std::chrono::steady_clock::now() - t0 >= std::chrono::milliseconds(10));
  CHECK_THROWS_AS(http_post_json("ftp://host/x", "{}", {}, 1.0, once), InvalidInput);
}

TEST_CASE("http captioner") {
  TestServer srv;
  std::size_t wav_bytes = 0;
  srv.server.Post("/caption", [&](const httplib::Request& req, httplib::Response& res) {
    const auto j = json::parse(req.body);
    wav_bytes = j["audio_wav_base64"].get<std::string>().size();
    res.set_content(R"({"caption":"A dog barks\nand a bell rings."})", "application/json");
  });
  srv.start();
  CaptionerSpec spec;
  spec.kind = CaptionerKind::kHttp;
  spec.endpoint = srv.url("/caption");
  spec.api_key = "k";
  auto cap = make_captioner(spec);
  const auto c = caption_audio(Waveform(std::vector<double>(1000, 0.1), 16000), *cap);
  CHECK(c.text == "A dog barks and a bell rings.");
  CHECK(c.source_backend == "http");
  CHECK(wav_bytes == (44 + 4000 + 2) / 3 * 4);
}

TEST_CASE("token bucket spaces requests") {
  TokenBucket bucket(50.0);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 6; ++i) bucket.acquire();
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(elapsed >= 0.09);
  TokenBucket open(0.0);
  const auto t1 = std::chrono::steady_clock::now();
  for (int i = 0; i < 1000; ++i) open.acquire();
  CHECK(std::chrono::steady_clock::now() - t1 < std::chrono::milliseconds(50));
}
