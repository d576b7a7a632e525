#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>
#include <regex>
#include <set>

#include "doctest.h"
#include "opensep/errors.h"
#include "opensep/mixer.h"
#include "opensep/toy_corpus.h"
#include "opensep/wav_io.h"

using namespace opensep;
namespace fs = std::filesystem;

namespace {

// Fraction of signal energy in [lo, hi] Hz: brute-force DFT over the band
// bins, total from Parseval.
double band_energy_fraction(const Waveform& w, double lo, double hi) {
  const std::size_t n = w.size();
  double total = 0.0;
  for (double v : w.samples) total += v * v;
  double band = 0.0;
  const auto k_lo = static_cast<std::size_t>(std::ceil(lo * n / w.sample_rate));
  const auto k_hi = static_cast<std::size_t>(std::floor(hi * n / w.sample_rate));
  for (std::size_t k = k_lo; k <= k_hi; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      acc += w.samples[i] * std::polar(1.0, -2.0 * std::numbers::pi * double(k) * double(i) / double(n));
    band += 2.0 * std::norm(acc);
  }
  return band / (static_cast<double>(n) * total);
}

Waveform random_wave(std::size_t n, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  Waveform w;
  w.samples.resize(n);
  for (auto& v : w.samples) v = d(rng);
  return w;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("pure tone clip energy sits at its frequency") {
  auto spec = default_toy_classes()[0];
  spec.freq_low_hz = spec.freq_high_hz = 300.0;
  auto clip = generate_clip(spec, 1.0, 42);
  CHECK(clip.audio.size() == 16000);
  CHECK(clip.frequency_hz == 300.0);
  CHECK(band_energy_fraction(clip.audio, 280.0, 320.0) >= 0.99);
}

TEST_CASE("every default class has its energy inside its declared band") {
  for (const auto& spec : default_toy_classes()) {
    auto clip = generate_clip(spec, 0.5, 3);
    CHECK(clip.audio.peak() <= 0.9 + 1e-12);
    const double lo = spec.generator == GeneratorKind::kAmBurst ? spec.freq_low_hz - spec.am_rate_hz
                                                                 : spec.freq_low_hz;
    // 60 Hz slack for onset/offset ramps
    CHECK_MESSAGE(band_energy_fraction(clip.audio, lo - 60.0, spec.top_frequency_hz() + 60.0) >= 0.98,
                  spec.class_id);
  }
}

TEST_CASE("clip generation errors and determinism") {
  auto spec = default_toy_classes()[2];
  CHECK_THROWS_AS(generate_clip(spec, 0.0, 1), InvalidInput);
  auto a = generate_clip(spec, 0.25, 9), b = generate_clip(spec, 0.25, 9), c = generate_clip(spec, 0.25, 10);
  CHECK(a.audio.samples == b.audio.samples);
  CHECK(a.audio.samples != c.audio.samples);
  auto high = spec;
  high.freq_high_hz = 9000.0;
  CHECK_THROWS_AS(generate_clip(high, 0.25, 1), InvalidInput);
  auto hum = default_toy_classes()[1];
  hum.harmonics = 60;  // 160 * 60 Hz
  CHECK_THROWS_AS(generate_clip(hum, 0.25, 1), InvalidInput);
}

TEST_CASE("default classes: unique ids, exactly two overlapping pairs") {
  auto classes = default_toy_classes();
  REQUIRE(classes.size() == 8);
  std::set<std::string> ids;
  for (const auto& c : classes) ids.insert(c.class_id);
  CHECK(ids.size() == 8);
  int overlaps = 0;
  for (std::size_t i = 0; i < classes.size(); ++i)
    for (std::size_t j = i + 1; j < classes.size(); ++j) overlaps += bands_overlap(classes[i], classes[j]);
  CHECK(overlaps == 2);
}

TEST_CASE("knowledge text for classes") {
  const auto tone_low = default_toy_classes()[0];
  CHECK(knowledge_text_for_class(tone_low, KnowledgeMode::kClassOnly) == "a low steady tone");
  const auto enriched = knowledge_text_for_class(tone_low, KnowledgeMode::kEnriched);
  CHECK(enriched.rfind("a steady pure tone between 200 and 400 Hz", 0) == 0);

  for (const auto& spec : default_toy_classes()) {
    const auto text = knowledge_text_for_class(spec, KnowledgeMode::kEnriched);
    CHECK(text.find('{') == std::string::npos);
    int categories = 0;
    for (const char* kw : {"Hz", "amplitude", "timbre", "duration", "attack", "envelope", "spectral"})
      categories += text.find(kw) != std::string::npos;
    CHECK(categories >= 3);

    // every number in the descriptor is one of the generating parameters
    const std::set<std::string> params = {
        format_number(spec.freq_low_hz), format_number(spec.freq_high_hz),
        format_number(spec.harmonics),   format_number(spec.am_rate_hz),
        format_number(spec.amplitude),   format_number(spec.attack_ms),
        format_number(spec.decay_ms),    format_number(spec.typical_duration_s),
        format_number(spec.top_frequency_hz())};
    const std::regex number(R"(\d+(\.\d+)?)");
    for (auto it = std::sregex_iterator(text.begin(), text.end(), number); it != std::sregex_iterator(); ++it)
      CHECK_MESSAGE(params.count(it->str()) == 1, spec.class_id << ": " << it->str());
  }
}

TEST_CASE("corpus on disk") {
  const auto dir = temp_dir("opensep_corpus_test");
  CorpusOptions opts;
  opts.duration_s = 0.25;
  auto corpus = generate_corpus(default_toy_classes(), 10, 123, opts, dir.string());
  std::size_t wavs = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) wavs += e.path().extension() == ".wav";
  CHECK(wavs == 80);
  CHECK(fs::exists(dir / "index.json"));
  CHECK(fs::exists(dir / "descriptors" / "tone_low.txt"));

  auto again = generate_corpus(default_toy_classes(), 10, 123, opts);
  CHECK(corpus_index_hash(again) == corpus_index_hash(corpus));
  auto other = generate_corpus(default_toy_classes(), 10, 124, opts);
  CHECK(corpus_index_hash(other) != corpus_index_hash(corpus));

  auto loaded = load_corpus(dir.string());
  CHECK(corpus_index_hash(loaded) == corpus_index_hash(corpus));
  CHECK(loaded.clips_of("chirp_up").size() == 10);

  auto empty = generate_corpus(default_toy_classes(), 0, 5, opts, (dir / "empty").string());
  CHECK(empty.clips.empty());
  CHECK(load_corpus((dir / "empty").string()).classes.size() == 8);
  CHECK_THROWS_AS(load_corpus((dir / "nope").string()), IoError);
}

TEST_CASE("seen/unseen split") {
  std::vector<std::string> ids;
  for (const auto& c : default_toy_classes()) ids.push_back(c.class_id);
  auto s = split_seen_unseen(ids, 77);
  CHECK(s.seen.size() == 4);
  CHECK(s.unseen.size() == 4);
  std::set<std::string> all(s.seen.begin(), s.seen.end());
  for (const auto& u : s.unseen) CHECK(all.insert(u).second);
  CHECK(all.size() == 8);
  auto again = split_seen_unseen(ids, 77);
  CHECK(again.seen == s.seen);
  auto two = split_seen_unseen({"a", "b"}, 1);
  CHECK(two.seen.size() == 1);
  CHECK(two.unseen.size() == 1);
  CHECK_THROWS_AS(split_seen_unseen({"a"}, 1), InvalidInput);
}

TEST_CASE("rescale_and_mix") {
  Waveform a, b;
  for (int i = 0; i < 1000; ++i) {
    a.samples.push_back(std::sin(0.05 * i));
    b.samples.push_back(std::sin(0.13 * i));
  }
  GainPolicy unit{1.0, 1.0, false, 0};
  std::vector<Waveform> ab{a, b};
  auto r = rescale_and_mix(ab, unit);
  for (int i = 0; i < 1000; ++i) CHECK(r.mixture.samples[i] == a.samples[i] + b.samples[i]);
  CHECK(r.gains == std::vector<double>{1.0, 1.0});

  Waveform silent;
  silent.samples.assign(1000, 0.0);
  std::vector<Waveform> sb{silent, b};
  GainPolicy p{0.25, 1.0, false, 8};
  auto r2 = rescale_and_mix(sb, p);
  for (int i = 0; i < 1000; ++i) CHECK(r2.mixture.samples[i] == r2.gains[1] * b.samples[i]);

  std::vector<Waveform> four;
  for (std::uint64_t s = 0; s < 4; ++s) four.push_back(random_wave(2000, s, 0.9));
  GainPolicy norm{0.25, 1.0, true, 99};
  auto r4 = rescale_and_mix(four, norm);
  for (double g : r4.gains) CHECK(g > 0.0);
  for (std::size_t i = 0; i < 2000; ++i) {
    double brute = 0.0;
    for (int k = 0; k < 4; ++k) brute += r4.gains[k] * four[k].samples[i];
    CHECK(std::abs(brute - r4.mixture.samples[i]) <= 1e-12);
  }
  CHECK(r4.mixture.peak() <= 1.0);
  CHECK(rescale_and_mix(four, norm).mixture.samples == r4.mixture.samples);

  std::vector<Waveform> bad{a, random_wave(999, 1)};
  CHECK_THROWS_AS(rescale_and_mix(bad, unit), InvalidInput);
  Waveform c = b;
  c.sample_rate = 8000;
  std::vector<Waveform> bad_rate{a, c};
  CHECK_THROWS_AS(rescale_and_mix(bad_rate, unit), InvalidInput);
  std::vector<Waveform> one{a};
  CHECK_THROWS_AS(rescale_and_mix(one, unit), InvalidInput);
  CHECK_THROWS_AS(rescale_and_mix(ab, GainPolicy{0.0, 1.0, false, 0}), InvalidInput);
}

TEST_CASE("mixture tree") {
  const StftConfig cfg;
  auto classes = default_toy_classes();
  std::array<SourceClip, 4> leaves;
  for (int i = 0; i < 4; ++i) leaves[i] = generate_clip(classes[2 * i], 0.5, 100 + i);

  SUBCASE("identical clips with unit gains normalize to 0.99") {
    std::array<SourceClip, 4> same = {leaves[0], leaves[0], leaves[0], leaves[0]};
    auto raw = build_mixture_tree(same, GainPolicy{1.0, 1.0, false, 0}, cfg);
    for (std::size_t i = 0; i < raw.root.size(); ++i)
      CHECK(raw.root.samples[i] == doctest::Approx(4.0 * same[0].audio.samples[i]));
    auto norm = build_mixture_tree(same, GainPolicy{1.0, 1.0, true, 0}, cfg);
    CHECK(norm.root.peak() == doctest::Approx(0.99).epsilon(1e-12));
  }

  SUBCASE("tree invariants") {
    auto t = build_mixture_tree(leaves, GainPolicy{0.25, 1.0, true, 5}, cfg);
    CHECK(t.prompts.size() == 6);
    for (const auto& node : kTreeNodes) CHECK(t.prompts.count(node) == 1);
    CHECK(t.targets.size() == 6);
    CHECK(t.prompts.at("M1") == t.prompts.at("S1") + " and " + t.prompts.at("S2"));
    CHECK(t.root.peak() <= 1.0);

    for (std::size_t i = 0; i < t.root.size(); ++i) {
      double all = 0.0;
      for (int k = 0; k < 4; ++k) all += t.gains[k] * leaves[k].audio.samples[i];
      CHECK(std::abs(t.root.samples[i] - (t.mid[0].samples[i] + t.mid[1].samples[i])) <= 1e-9);
      CHECK(std::abs(t.mid[0].samples[i] - (t.gains[0] * leaves[0].audio.samples[i] +
                                            t.gains[1] * leaves[1].audio.samples[i])) <= 1e-9);
      CHECK(std::abs(t.root.samples[i] - all) <= 1e-12);
    }

    auto z = stft(t.root, cfg), y1 = stft(t.mid[0], cfg), y2 = stft(t.mid[1], cfg);
    double max_z = 0.0, max_err = 0.0;
    for (std::size_t i = 0; i < z.bins.size(); ++i) {
      max_z = std::max(max_z, std::abs(z.bins[i]));
      max_err = std::max(max_err, std::abs(z.bins[i] - y1.bins[i] - y2.bins[i]));
    }
    CHECK(max_err <= 1e-9 * max_z);

    for (int k = 0; k < 4; ++k) {
      const auto leaf = t.node_waveform(kTreeNodes[k]);
      auto [mag, phase] = magnitude_phase(stft(leaf, cfg));
      CHECK(mag.bins == t.targets.at(kTreeNodes[k]).bins);
      CHECK(snr_db(leaf.samples, istft(combine(t.targets.at(kTreeNodes[k]), phase)).samples) >= 60.0);
    }

    auto again = build_mixture_tree(leaves, GainPolicy{0.25, 1.0, true, 5}, cfg);
    CHECK(again.gains == t.gains);
    CHECK(again.root.samples == t.root.samples);
  }

  SUBCASE("class-only prompts") {
    auto t = build_mixture_tree(leaves, GainPolicy{}, cfg, PromptText::kClassOnly);
    CHECK(t.prompts.at("S1") == "a low steady tone");
    CHECK(t.prompts.at("M1") == "a low steady tone and a rising chirp");
  }

  SUBCASE("manifest round trip") {
    auto t = build_mixture_tree(leaves, GainPolicy{0.25, 1.0, true, 5}, cfg);
    const auto dir = temp_dir("opensep_tree_test");
    const auto path = write_mixture_manifest(t, dir.string(), "tree0");
    auto m = read_mixture_manifest(path);
    CHECK(m.gains[2] == t.gains[2]);
    CHECK(m.prompts == t.prompts);
    CHECK(m.leaf_classes[1] == leaves[1].class_id);
    auto root = read_wav(m.root_wav);
    auto y1 = read_wav(m.mid_wavs[0]), y2 = read_wav(m.mid_wavs[1]);
    for (std::size_t i = 0; i < root.size(); ++i)
      CHECK(std::abs(root.samples[i] - y1.samples[i] - y2.samples[i]) <= 1e-6);
  }
}
