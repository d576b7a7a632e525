// wav_io.h
// Mono RIFF/WAVE reading and writing: 16-bit PCM and 32-bit IEEE float.

#pragma once

#include <optional>
#include <string>

#include "opensep/dsp.h"

namespace opensep {

enum class WavEncoding { kPcm16, kFloat32 };

// Reads a mono WAV file. When expected_rate is set and differs from the
// file's rate, throws InvalidInput (no resampling is done).
Waveform read_wav(const std::string& path, std::optional<int> expected_rate = std::nullopt);

// Samples outside [-1, 1] are clipped for kPcm16.
std::string encode_wav(const Waveform& w, WavEncoding encoding = WavEncoding::kFloat32);
void write_wav(const std::string& path, const Waveform& w,
               WavEncoding encoding = WavEncoding::kFloat32);

}  // namespace opensep
