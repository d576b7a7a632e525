// hash.h
// FNV-1a digests used for manifest/config fingerprints and mock lookups.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace opensep {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v);

// Digest of samples rounded to float32, so a waveform and its float32 WAV
// round trip (or any 16-bit PCM read) share a fingerprint.
std::string audio_fingerprint(std::span<const double> samples);

// splitmix64 step; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace opensep
