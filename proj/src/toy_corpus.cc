// toy_corpus.cc

#include "opensep/toy_corpus.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "json.hpp"
#include "opensep/errors.h"
#include "opensep/hash.h"
#include "opensep/wav_io.h"

namespace opensep {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(GeneratorKind kind) {
  switch (kind) {
    case GeneratorKind::kPureTone: return "pure_tone";
    case GeneratorKind::kHarmonicTone: return "harmonic_tone";
    case GeneratorKind::kChirp: return "chirp";
    case GeneratorKind::kNoiseBand: return "noise_band";
    case GeneratorKind::kAmBurst: return "am_burst";
  }
  return "unknown";
}

GeneratorKind generator_from_string(const std::string& name) {
  for (auto k : {GeneratorKind::kPureTone, GeneratorKind::kHarmonicTone, GeneratorKind::kChirp,
                 GeneratorKind::kNoiseBand, GeneratorKind::kAmBurst})
    if (to_string(k) == name) return k;
  throw InvalidInput("unknown generator kind: " + name);
}

std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double ToyClassSpec::top_frequency_hz() const {
  switch (generator) {
    case GeneratorKind::kHarmonicTone: return freq_high_hz * harmonics;
    case GeneratorKind::kAmBurst: return freq_high_hz + am_rate_hz;
    default: return freq_high_hz;
  }
}

void ToyClassSpec::validate(int sample_rate) const {
  if (class_id.empty()) throw InvalidInput("class id must be non-empty");
  if (!(freq_low_hz > 0.0 && freq_low_hz <= freq_high_hz))
    throw InvalidInput(class_id + ": invalid frequency range");
  if (top_frequency_hz() >= sample_rate / 2.0)
    throw InvalidInput(class_id + ": content at " + format_number(top_frequency_hz()) +
                       " Hz exceeds Nyquist for " + std::to_string(sample_rate) + " Hz");
  if (!(amplitude > 0.0 && amplitude <= 0.9)) throw InvalidInput(class_id + ": amplitude must be in (0, 0.9]");
  if (harmonics < 1) throw InvalidInput(class_id + ": harmonics must be >= 1");
}

namespace {

constexpr const char* kCommonTail =
    "a usual duration of {duration} seconds, a {attack_ms} ms attack and a {decay_ms} ms decay";

ToyClassSpec make_class(std::string id, GeneratorKind g, double lo, double hi, std::string phrase,
                        std::string tmpl) {
  ToyClassSpec s;
  s.class_id = std::move(id);
  s.generator = g;
  s.freq_low_hz = lo;
  s.freq_high_hz = hi;
  s.class_phrase = std::move(phrase);
  s.descriptor_template = std::move(tmpl);
  return s;
}

}  // namespace

std::vector<ToyClassSpec> default_toy_classes() {
  const std::string tail = kCommonTail;
  std::vector<ToyClassSpec> c;

  c.push_back(make_class("tone_low", GeneratorKind::kPureTone, 200, 400, "a low steady tone",
                         "a steady pure tone between {freq_low} and {freq_high} Hz with a peak amplitude of "
                         "{amplitude}, a clean sinusoidal timbre, " + tail +
                         ", a flat dynamic envelope, and spectral content of one narrow peak without harmonics"));

  auto hum = make_class("harmonic_low", GeneratorKind::kHarmonicTone, 100, 160, "a low buzzing hum",
                        "a buzzing harmonic tone with a fundamental between {freq_low} and {freq_high} Hz and "
                        "{harmonics} harmonics reaching {top_freq} Hz, a peak amplitude of {amplitude}, a rich "
                        "reedy timbre, " + tail +
                        ", a sustained dynamic envelope, and spectral content of evenly spaced harmonic peaks");
  hum.harmonics = 5;
  hum.amplitude = 0.7;
  c.push_back(hum);

  auto up = make_class("chirp_up", GeneratorKind::kChirp, 900, 1500, "a rising chirp",
                       "a rising chirp sweeping from {freq_low} to {freq_high} Hz with a peak amplitude of "
                       "{amplitude}, a whistling timbre, " + tail +
                       ", a smooth dynamic envelope, and spectral content of a single gliding peak");
  up.amplitude = 0.6;
  c.push_back(up);

  auto beep = make_class("am_burst", GeneratorKind::kAmBurst, 1100, 1400, "a pulsing beep",
                         "a pulsing beep with a carrier between {freq_low} and {freq_high} Hz gated {am_rate} "
                         "times per second, a peak amplitude of {amplitude}, an electronic timbre, " + tail +
                         ", a pulsed dynamic envelope, and spectral content of a carrier peak with close sidebands");
  beep.am_rate_hz = 6.0;
  beep.attack_ms = 10.0;
  beep.decay_ms = 10.0;
  c.push_back(beep);

  auto high = make_class("tone_high", GeneratorKind::kPureTone, 2200, 2800, "a high steady tone",
                         "a steady pure tone between {freq_low} and {freq_high} Hz with a peak amplitude of "
                         "{amplitude}, a piercing sinusoidal timbre, " + tail +
                         ", a flat dynamic envelope, and spectral content of one narrow peak without harmonics");
  high.amplitude = 0.5;
  c.push_back(high);

  auto band = make_class("noise_band", GeneratorKind::kNoiseBand, 3200, 3800, "a band of static",
                         "a band of static noise spread evenly between {freq_low} and {freq_high} Hz with a peak "
                         "amplitude of {amplitude}, a rough noisy timbre, " + tail +
                         ", a steady dynamic envelope, and spectral content of a flat noise band without peaks");
  band.amplitude = 0.6;
  c.push_back(band);

  auto down = make_class("chirp_down", GeneratorKind::kChirp, 4200, 5000, "a falling chirp",
                         "a falling chirp sweeping down from {freq_high} to {freq_low} Hz with a peak amplitude of "
                         "{amplitude}, a bright whistling timbre, " + tail +
                         ", a smooth dynamic envelope, and spectral content of a single gliding peak");
  down.descending = true;
  down.amplitude = 0.6;
  c.push_back(down);

  auto hiss = make_class("noise_hiss", GeneratorKind::kNoiseBand, 6000, 7500, "a bright airy hiss",
                         "an airy hiss of noise spread between {freq_low} and {freq_high} Hz with a peak amplitude "
                         "of {amplitude}, a breathy timbre, " + tail +
                         ", a steady dynamic envelope, and spectral content of a wide flat noise band");
  hiss.amplitude = 0.5;
  hiss.attack_ms = 40.0;
  c.push_back(hiss);
  return c;
}

bool bands_overlap(const ToyClassSpec& a, const ToyClassSpec& b) {
  auto low = [](const ToyClassSpec& s) {
    return s.generator == GeneratorKind::kAmBurst ? s.freq_low_hz - s.am_rate_hz : s.freq_low_hz;
  };
  return low(a) <= b.top_frequency_hz() && low(b) <= a.top_frequency_hz();
}

SourceClip generate_clip(const ToyClassSpec& spec, double duration_s, std::uint64_t seed,
                         int sample_rate) {
  if (!(duration_s > 0.0)) throw InvalidInput("clip duration must be positive");
  if (sample_rate <= 0) throw InvalidInput("sample rate must be positive");
  spec.validate(sample_rate);

  const auto n = static_cast<std::size_t>(std::llround(duration_s * sample_rate));
  if (n == 0) throw InvalidInput("clip duration shorter than one sample");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  const double sr = sample_rate;

  SourceClip clip;
  clip.class_id = spec.class_id;
  clip.class_label = spec.class_phrase;
  clip.seed = seed;
  clip.clip_id = spec.class_id + "-" + hex64(seed).substr(8);
  clip.descriptor = knowledge_text_for_class(spec, KnowledgeMode::kEnriched);

  std::vector<double> x(n, 0.0);
  const double phase0 = two_pi * unit(rng);
  switch (spec.generator) {
    case GeneratorKind::kPureTone: {
      const double f = spec.freq_low_hz + (spec.freq_high_hz - spec.freq_low_hz) * unit(rng);
      clip.frequency_hz = f;
      for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(two_pi * f * i / sr + phase0);
      break;
    }
    case GeneratorKind::kHarmonicTone: {
      const double f0 = spec.freq_low_hz + (spec.freq_high_hz - spec.freq_low_hz) * unit(rng);
      clip.frequency_hz = f0;
      for (int h = 1; h <= spec.harmonics; ++h) {
        const double ph = two_pi * unit(rng);
        for (std::size_t i = 0; i < n; ++i) x[i] += std::sin(two_pi * h * f0 * i / sr + ph) / h;
      }
      break;
    }
    case GeneratorKind::kChirp: {
      const double f_start = spec.descending ? spec.freq_high_hz : spec.freq_low_hz;
      const double f_end = spec.descending ? spec.freq_low_hz : spec.freq_high_hz;
      const double rate = (f_end - f_start) / duration_s;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i / sr;
        x[i] = std::sin(two_pi * (f_start * t + 0.5 * rate * t * t) + phase0);
      }
      break;
    }
    case GeneratorKind::kNoiseBand: {
      std::normal_distribution<double> g(0.0, 1.0);
      Waveform w;
      w.sample_rate = sample_rate;
      w.samples.resize(n);
      for (auto& v : w.samples) v = g(rng);
      x = band_limit(w, spec.freq_low_hz, spec.freq_high_hz).samples;
      break;
    }
    case GeneratorKind::kAmBurst: {
      const double fc = spec.freq_low_hz + (spec.freq_high_hz - spec.freq_low_hz) * unit(rng);
      clip.frequency_hz = fc;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i / sr;
        const double env = 0.5 - 0.5 * std::cos(two_pi * spec.am_rate_hz * t);
        x[i] = env * std::sin(two_pi * fc * t + phase0);
      }
      break;
    }
  }

  // raised-cosine onset/offset ramps
  const auto attack = static_cast<std::size_t>(spec.attack_ms * 1e-3 * sr);
  const auto decay = static_cast<std::size_t>(spec.decay_ms * 1e-3 * sr);
  for (std::size_t i = 0; i < std::min(attack, n); ++i)
    x[i] *= 0.5 - 0.5 * std::cos(std::numbers::pi * i / attack);
  for (std::size_t i = 0; i < std::min(decay, n); ++i)
    x[n - 1 - i] *= 0.5 - 0.5 * std::cos(std::numbers::pi * i / decay);

  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (auto& v : x) v *= spec.amplitude / peak;
  clip.audio = Waveform(std::move(x), sample_rate);
  return clip;
}

std::string knowledge_text_for_class(const ToyClassSpec& spec, KnowledgeMode mode) {
  if (mode == KnowledgeMode::kClassOnly) return spec.class_phrase;
  const std::pair<std::string, double> slots[] = {
      {"{freq_low}", spec.freq_low_hz},   {"{freq_high}", spec.freq_high_hz},
      {"{harmonics}", spec.harmonics},    {"{am_rate}", spec.am_rate_hz},
      {"{amplitude}", spec.amplitude},    {"{attack_ms}", spec.attack_ms},
      {"{decay_ms}", spec.decay_ms},      {"{duration}", spec.typical_duration_s},
      {"{top_freq}", spec.top_frequency_hz()},
  };
  std::string out = spec.descriptor_template;
  for (const auto& [slot, value] : slots) {
    const std::string text = format_number(value);
    for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot, pos + text.size()))
      out.replace(pos, slot.size(), text);
  }
  return out;
}

const ToyClassSpec& ToyCorpus::spec(const std::string& class_id) const {
  for (const auto& c : classes)
    if (c.class_id == class_id) return c;
  throw InvalidInput("unknown class id: " + class_id);
}

std::vector<const SourceClip*> ToyCorpus::clips_of(const std::string& class_id) const {
  std::vector<const SourceClip*> out;
  for (const auto& c : clips)
    if (c.class_id == class_id) out.push_back(&c);
  return out;
}

std::vector<std::string> ToyCorpus::class_ids() const {
  std::vector<std::string> ids;
  for (const auto& c : classes) ids.push_back(c.class_id);
  return ids;
}

namespace {

json spec_to_json(const ToyClassSpec& s) {
  return json{{"class_id", s.class_id},
              {"generator", to_string(s.generator)},
              {"freq_low_hz", s.freq_low_hz},
              {"freq_high_hz", s.freq_high_hz},
              {"descending", s.descending},
              {"harmonics", s.harmonics},
              {"am_rate_hz", s.am_rate_hz},
              {"amplitude", s.amplitude},
              {"attack_ms", s.attack_ms},
              {"decay_ms", s.decay_ms},
              {"typical_duration_s", s.typical_duration_s},
              {"class_phrase", s.class_phrase},
              {"descriptor_template", s.descriptor_template},
              {"descriptor", knowledge_text_for_class(s, KnowledgeMode::kEnriched)}};
}

ToyClassSpec spec_from_json(const json& j) {
  ToyClassSpec s;
  s.class_id = j.at("class_id").get<std::string>();
  s.generator = generator_from_string(j.at("generator").get<std::string>());
  s.freq_low_hz = j.at("freq_low_hz").get<double>();
  s.freq_high_hz = j.at("freq_high_hz").get<double>();
  s.descending = j.at("descending").get<bool>();
  s.harmonics = j.at("harmonics").get<int>();
  s.am_rate_hz = j.at("am_rate_hz").get<double>();
  s.amplitude = j.at("amplitude").get<double>();
  s.attack_ms = j.at("attack_ms").get<double>();
  s.decay_ms = j.at("decay_ms").get<double>();
  s.typical_duration_s = j.at("typical_duration_s").get<double>();
  s.class_phrase = j.at("class_phrase").get<std::string>();
  s.descriptor_template = j.at("descriptor_template").get<std::string>();
  return s;
}

std::string clip_checksum(const Waveform& w) {
  std::uint64_t h = kFnvOffset;
  for (double v : w.samples) {
    const float f = static_cast<float>(v);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(&f), sizeof f), h);
  }
  return hex64(h);
}

json index_json(const ToyCorpus& corpus) {
  json j;
  j["schema_version"] = 1;
  j["seed"] = corpus.seed;
  j["clips_per_class"] = corpus.clips_per_class;
  j["sample_rate"] = corpus.sample_rate;
  j["duration_s"] = corpus.duration_s;
  j["classes"] = json::array();
  for (const auto& c : corpus.classes) j["classes"].push_back(spec_to_json(c));
  j["clips"] = json::array();
  for (const auto& c : corpus.clips)
    j["clips"].push_back({{"clip_id", c.clip_id},
                          {"class_id", c.class_id},
                          {"path", c.class_id + "/" + c.clip_id + ".wav"},
                          {"seed", c.seed},
                          {"frequency_hz", c.frequency_hz},
                          {"checksum", clip_checksum(c.audio)}});
  return j;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw IoError(p.string(), "cannot open for writing");
  os << text;
  if (!os) throw IoError(p.string(), "write failed");
}

}  // namespace

ToyCorpus generate_corpus(const std::vector<ToyClassSpec>& classes, int clips_per_class,
                          std::uint64_t seed, const CorpusOptions& opts,
                          const std::optional<std::string>& out_dir) {
  if (clips_per_class < 0) throw InvalidInput("clips_per_class must be >= 0");
  std::set<std::string> ids;
  for (const auto& c : classes) {
    c.validate(opts.sample_rate);
    if (!ids.insert(c.class_id).second) throw InvalidInput("duplicate class id: " + c.class_id);
  }

  ToyCorpus corpus;
  corpus.classes = classes;
  corpus.seed = seed;
  corpus.clips_per_class = clips_per_class;
  corpus.sample_rate = opts.sample_rate;
  corpus.duration_s = opts.duration_s;
  for (std::size_t ci = 0; ci < classes.size(); ++ci)
    for (int k = 0; k < clips_per_class; ++k)
      corpus.clips.push_back(generate_clip(classes[ci], opts.duration_s,
                                           mix_seed(seed, (ci << 20) + static_cast<std::uint64_t>(k)),
                                           opts.sample_rate));

  if (out_dir) {
    const fs::path root(*out_dir);
    std::error_code ec;
    fs::create_directories(root / "descriptors", ec);
    if (ec) throw IoError(root.string(), "cannot create directory: " + ec.message());
    for (const auto& c : classes) {
      fs::create_directories(root / c.class_id, ec);
      if (ec) throw IoError((root / c.class_id).string(), "cannot create directory: " + ec.message());
      write_text(root / "descriptors" / (c.class_id + ".txt"),
                 knowledge_text_for_class(c, KnowledgeMode::kEnriched) + "\n");
    }
    for (const auto& clip : corpus.clips)
      write_wav((root / clip.class_id / (clip.clip_id + ".wav")).string(), clip.audio, WavEncoding::kFloat32);
    write_text(root / "index.json", index_json(corpus).dump(2) + "\n");
    corpus.root = root.string();
  }
  return corpus;
}

ToyCorpus load_corpus(const std::string& dir) {
  const fs::path root(dir);
  const auto index_path = root / "index.json";
  std::ifstream is(index_path);
  if (!is) throw IoError(index_path.string(), "cannot open corpus index");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw IoError(index_path.string(), std::string("malformed index: ") + e.what());
  }
  ToyCorpus corpus;
  corpus.seed = j.at("seed").get<std::uint64_t>();
  corpus.clips_per_class = j.at("clips_per_class").get<int>();
  corpus.sample_rate = j.at("sample_rate").get<int>();
  corpus.duration_s = j.at("duration_s").get<double>();
  corpus.root = root.string();
  for (const auto& c : j.at("classes")) corpus.classes.push_back(spec_from_json(c));
  for (const auto& c : j.at("clips")) {
    SourceClip clip;
    clip.clip_id = c.at("clip_id").get<std::string>();
    clip.class_id = c.at("class_id").get<std::string>();
    clip.seed = c.at("seed").get<std::uint64_t>();
    clip.frequency_hz = c.at("frequency_hz").get<double>();
    const auto& spec = corpus.spec(clip.class_id);
    clip.class_label = spec.class_phrase;
    clip.descriptor = knowledge_text_for_class(spec, KnowledgeMode::kEnriched);
    clip.audio = read_wav((root / c.at("path").get<std::string>()).string(), corpus.sample_rate);
    if (clip_checksum(clip.audio) != c.at("checksum").get<std::string>())
      throw IoError((root / c.at("path").get<std::string>()).string(), "checksum mismatch");
    corpus.clips.push_back(std::move(clip));
  }
  return corpus;
}

std::string corpus_index_json(const ToyCorpus& corpus) { return index_json(corpus).dump(2); }

std::string corpus_index_hash(const ToyCorpus& corpus) { return hex64(fnv1a(index_json(corpus).dump())); }

SplitSpec split_seen_unseen(const std::vector<std::string>& class_ids, std::uint64_t seed) {
  if (class_ids.size() < 2) throw InvalidInput("seen/unseen split needs at least two classes");
  std::vector<std::string> ids = class_ids;
  std::mt19937_64 rng(seed);
  // Fisher-Yates; std::shuffle's draw sequence is implementation-defined.
  for (std::size_t i = ids.size() - 1; i > 0; --i) {
    const std::size_t j = rng() % (i + 1);
    std::swap(ids[i], ids[j]);
  }
  SplitSpec split;
  split.rng_seed = seed;
  const std::size_t half = (ids.size() + 1) / 2;
  split.seen.assign(ids.begin(), ids.begin() + static_cast<long>(half));
  split.unseen.assign(ids.begin() + static_cast<long>(half), ids.end());
  return split;
}

}  // namespace opensep
