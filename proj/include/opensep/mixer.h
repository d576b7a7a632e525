// mixer.h
// Amplitude-rescaled mixing and the two-level mixture hierarchy
// x1..x4 -> y1 = Mix(x1, x2), y2 = Mix(x3, x4) -> z = y1 + y2.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "opensep/dsp.h"
#include "opensep/toy_corpus.h"

namespace opensep {

struct GainPolicy {
  double gain_low = 0.25;
  double gain_high = 1.0;
  bool normalize_peak = true;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

inline constexpr double kNormalizedPeak = 0.99;

struct MixResult {
  Waveform mixture;
  std::vector<double> gains;
};

// Draws one gain per source from U[gain_low, gain_high] and returns the
// weighted sum. If normalize_peak is set and the peak exceeds 1, all gains
// are scaled so the peak is 0.99; the returned gains are the final ones.
MixResult rescale_and_mix(std::span<const Waveform> sources, const GainPolicy& policy);

// Weighted sum with explicit gains, no normalization.
Waveform weighted_sum(std::span<const Waveform> sources, std::span<const double> gains);

// Node names in prompt order.
inline const std::array<std::string, 6> kTreeNodes = {"S1", "S2", "S3", "S4", "M1", "M2"};

enum class PromptText { kEnriched, kClassOnly };

struct MixtureTree {
  std::array<SourceClip, 4> leaves;
  std::array<double, 4> gains{};
  std::array<Waveform, 2> mid;
  Waveform root;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> prompts;              // node -> text
  std::map<std::string, MagnitudeSpectrogram> targets;     // node -> |STFT|
  ComplexSpectrogram root_spec;

  // g_i * x_i for i < 4, y1/y2 for M1/M2.
  Waveform node_waveform(const std::string& node) const;
};

std::string leaf_prompt(const SourceClip& clip, PromptText mode);
std::string pair_prompt(const std::string& a, const std::string& b);

// Peak normalization happens at the root only: gains of all four leaves are
// scaled together, so targets stay exactly g_i * x_i and z = y1 + y2.
MixtureTree build_mixture_tree(const std::array<SourceClip, 4>& leaves, const GainPolicy& policy,
                               const StftConfig& stft_cfg, PromptText mode = PromptText::kEnriched);

// Writes <dir>/<stem>.root.wav, .mid{1,2}.wav, .leaf{1..4}.wav (raw, pre-gain)
// and <dir>/<stem>.json. Returns the manifest path.
std::string write_mixture_manifest(const MixtureTree& tree, const std::string& dir,
                                   const std::string& stem);

struct MixtureManifest {
  std::string root_wav;
  std::array<std::string, 2> mid_wavs;
  std::array<std::string, 4> leaf_wavs;
  std::array<double, 4> gains{};
  std::map<std::string, std::string> prompts;
  std::array<std::string, 4> leaf_classes;
  std::uint64_t seed = 0;
};

MixtureManifest read_mixture_manifest(const std::string& path);

}  // namespace opensep
