// dsp.h
// Time-frequency analysis/synthesis and mask arithmetic.
//
// Spectrogram grids are stored frequency-major: bin (f, t) lives at
// f * num_frames + t. This is the same [H, W] layout the separator network
// consumes, with H = frequency and W = frame.

#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace opensep {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  Waveform() = default;
  Waveform(std::vector<double> s, int sr) : samples(std::move(s)), sample_rate(sr) {}

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  double peak() const;
  // Throws InvalidInput on a non-positive rate or a non-finite sample.
  void validate() const;
};

enum class WindowKind { kHann, kRectangular };

struct StftConfig {
  int window_length = 1022;
  int hop_length = 256;
  WindowKind window = WindowKind::kHann;
  int fft_length = 1022;

  int num_bins() const { return fft_length / 2 + 1; }
  void validate() const;
  bool operator==(const StftConfig&) const = default;
};

std::vector<double> make_window(WindowKind kind, int length);

struct ComplexSpectrogram {
  std::vector<std::complex<double>> bins;
  StftConfig config;
  int sample_rate = 16000;
  std::size_t original_length = 0;
  int num_bins = 0;
  int num_frames = 0;

  std::complex<double>& at(int f, int t) { return bins[static_cast<std::size_t>(f) * num_frames + t]; }
  const std::complex<double>& at(int f, int t) const {
    return bins[static_cast<std::size_t>(f) * num_frames + t];
  }
  bool same_grid(const ComplexSpectrogram& o) const {
    return num_bins == o.num_bins && num_frames == o.num_frames && config == o.config &&
           original_length == o.original_length;
  }
};

struct MagnitudeSpectrogram {
  std::vector<double> bins;
  StftConfig config;
  int sample_rate = 16000;
  std::size_t original_length = 0;
  int num_bins = 0;
  int num_frames = 0;

  double& at(int f, int t) { return bins[static_cast<std::size_t>(f) * num_frames + t]; }
  double at(int f, int t) const { return bins[static_cast<std::size_t>(f) * num_frames + t]; }
  bool same_shape(const MagnitudeSpectrogram& o) const {
    return num_bins == o.num_bins && num_frames == o.num_frames;
  }
};

using PhaseGrid = std::vector<double>;

struct Mask {
  std::vector<double> bins;
  int num_bins = 0;
  int num_frames = 0;

  static Mask filled(int num_bins, int num_frames, double value);
  double at(int f, int t) const { return bins[static_cast<std::size_t>(f) * num_frames + t]; }
  // Throws InvalidInput when any entry leaves [0, 1] or the size is wrong.
  void validate() const;
};

ComplexSpectrogram stft(const Waveform& x, const StftConfig& cfg);
Waveform istft(const ComplexSpectrogram& s);

std::pair<MagnitudeSpectrogram, PhaseGrid> magnitude_phase(const ComplexSpectrogram& s);
MagnitudeSpectrogram magnitude(const ComplexSpectrogram& s);
ComplexSpectrogram combine(const MagnitudeSpectrogram& mag, const PhaseGrid& phase);

// istft((m * |mix|) * exp(i * angle(mix))), trimmed to the mixture length.
Waveform apply_mask_and_reconstruct(const ComplexSpectrogram& mix, const Mask& m);

inline constexpr double kRatioMaskEps = 1e-8;
std::vector<Mask> ideal_ratio_mask(std::span<const MagnitudeSpectrogram> sources,
                                   double eps = kRatioMaskEps);

// Sum over frames of the two-sided spectral energy, divided by the per-sample
// overlap gain (fft_length * sum(w^2) / hop). Approximates sum(x^2) for
// steady-state signals.
double spectrogram_energy(const ComplexSpectrogram& s);

// Zeroes every DFT bin of the whole signal outside [low_hz, high_hz].
Waveform band_limit(const Waveform& x, double low_hz, double high_hz);

// 10 log10(|ref|^2 / |ref - est|^2), +inf when identical.
double snr_db(std::span<const double> reference, std::span<const double> estimate);

}  // namespace opensep
