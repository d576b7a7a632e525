// toy_corpus.h
// Deterministic synthetic source classes with descriptors rendered from
// their synthesis parameters.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "opensep/dsp.h"

namespace opensep {

enum class GeneratorKind { kPureTone, kHarmonicTone, kChirp, kNoiseBand, kAmBurst };

std::string to_string(GeneratorKind kind);
GeneratorKind generator_from_string(const std::string& name);

struct ToyClassSpec {
  std::string class_id;
  GeneratorKind generator = GeneratorKind::kPureTone;
  // Meaning depends on the generator: tone frequency range, fundamental
  // range, sweep endpoints, noise band edges, or carrier range.
  double freq_low_hz = 200.0;
  double freq_high_hz = 400.0;
  bool descending = false;  // chirp direction
  int harmonics = 1;
  double am_rate_hz = 0.0;
  double amplitude = 0.8;  // clip peak, <= 0.9
  double attack_ms = 20.0;
  double decay_ms = 50.0;
  double typical_duration_s = 1.0;
  std::string class_phrase;  // "a low steady tone"
  // Slots: {freq_low} {freq_high} {harmonics} {am_rate} {amplitude}
  // {attack_ms} {decay_ms} {duration} {top_freq}
  std::string descriptor_template;

  // Highest frequency with non-negligible energy.
  double top_frequency_hz() const;
  void validate(int sample_rate) const;
};

// The 8 default classes. Two pairs overlap in frequency on purpose
// (tone_low/harmonic_low and chirp_up/am_burst); all other pairs are disjoint.
std::vector<ToyClassSpec> default_toy_classes();
bool bands_overlap(const ToyClassSpec& a, const ToyClassSpec& b);

struct SourceClip {
  Waveform audio;
  std::string class_id;
  std::string class_label;  // class phrase, e.g. "a rising chirp"
  std::string clip_id;
  std::string descriptor;   // enriched knowledge text
  std::uint64_t seed = 0;
  double frequency_hz = 0.0;  // sampled tone/fundamental/carrier, 0 if n/a
};

SourceClip generate_clip(const ToyClassSpec& spec, double duration_s, std::uint64_t seed,
                         int sample_rate = 16000);

enum class KnowledgeMode { kClassOnly, kEnriched };
std::string knowledge_text_for_class(const ToyClassSpec& spec, KnowledgeMode mode);

struct ToyCorpus {
  std::vector<ToyClassSpec> classes;
  std::vector<SourceClip> clips;
  std::uint64_t seed = 0;
  int clips_per_class = 0;
  int sample_rate = 16000;
  double duration_s = 1.0;
  std::string root;  // empty for in-memory corpora

  const ToyClassSpec& spec(const std::string& class_id) const;
  std::vector<const SourceClip*> clips_of(const std::string& class_id) const;
  std::vector<std::string> class_ids() const;
};

struct CorpusOptions {
  double duration_s = 1.0;
  int sample_rate = 16000;
};

// When out_dir is set, writes <out_dir>/<class_id>/<clip_id>.wav,
// <out_dir>/index.json and <out_dir>/descriptors/<class_id>.txt.
ToyCorpus generate_corpus(const std::vector<ToyClassSpec>& classes, int clips_per_class,
                          std::uint64_t seed, const CorpusOptions& opts = {},
                          const std::optional<std::string>& out_dir = std::nullopt);
ToyCorpus load_corpus(const std::string& dir);

std::string corpus_index_json(const ToyCorpus& corpus);
std::string corpus_index_hash(const ToyCorpus& corpus);

struct SplitSpec {
  std::vector<std::string> seen;
  std::vector<std::string> unseen;
  std::uint64_t rng_seed = 0;
};

SplitSpec split_seen_unseen(const std::vector<std::string>& class_ids, std::uint64_t seed);

// Shortest round-trip decimal for descriptor numbers ("200", "0.8").
std::string format_number(double v);

}  // namespace opensep
