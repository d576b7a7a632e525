// dsp.cc

#include "opensep/dsp.h"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <limits>
#include <numbers>

#include "opensep/errors.h"

namespace opensep {

double Waveform::peak() const {
  double p = 0.0;
  for (double v : samples) p = std::max(p, std::abs(v));
  return p;
}

void Waveform::validate() const {
  if (sample_rate <= 0) throw InvalidInput("waveform sample rate must be positive");
  for (double v : samples)
    if (!std::isfinite(v)) throw InvalidInput("waveform contains a non-finite sample");
}

void StftConfig::validate() const {
  if (hop_length <= 0 || window_length < hop_length || fft_length < window_length)
    throw InvalidInput("stft config requires 0 < hop <= window <= fft (got hop=" +
                       std::to_string(hop_length) + ", window=" + std::to_string(window_length) +
                       ", fft=" + std::to_string(fft_length) + ")");
}

std::vector<double> make_window(WindowKind kind, int length) {
  std::vector<double> w(static_cast<std::size_t>(length), 1.0);
  if (kind == WindowKind::kHann) {
    // periodic Hann
    for (int n = 0; n < length; ++n)
      w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / length);
  }
  return w;
}

Mask Mask::filled(int num_bins, int num_frames, double value) {
  Mask m;
  m.num_bins = num_bins;
  m.num_frames = num_frames;
  m.bins.assign(static_cast<std::size_t>(num_bins) * num_frames, value);
  return m;
}

void Mask::validate() const {
  if (bins.size() != static_cast<std::size_t>(num_bins) * num_frames)
    throw InvalidInput("mask storage does not match its shape");
  for (double v : bins)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("mask entry outside [0, 1]");
}

namespace {

// FFTW planning is not thread-safe; execution with the new-array interface
// is. Plans are created once per size and never destroyed.
class FftPlans {
 public:
  struct Pair {
    fftw_plan forward;
    fftw_plan inverse;
  };

  static const Pair& get(int n) {
    static FftPlans instance;
    std::lock_guard<std::mutex> lock(instance.mu_);
    auto it = instance.plans_.find(n);
    if (it != instance.plans_.end()) return it->second;
    std::vector<double> real(static_cast<std::size_t>(n));
    std::vector<fftw_complex> cplx(static_cast<std::size_t>(n / 2 + 1));
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    Pair p{fftw_plan_dft_r2c_1d(n, real.data(), cplx.data(), flags),
           fftw_plan_dft_c2r_1d(n, cplx.data(), real.data(), flags)};
    return instance.plans_.emplace(n, p).first->second;
  }

 private:
  std::mutex mu_;
  std::map<int, Pair> plans_;
};

// Reflection about the signal edges without repeating the edge sample,
// folded as many times as needed for very short signals.
std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const long long period = 2 * static_cast<long long>(n) - 2;
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<long long>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

int frame_count(std::size_t length, const StftConfig& cfg) {
  const long long pad = cfg.window_length / 2;
  const long long padded = static_cast<long long>(length) + 2 * pad;
  const long long span = std::max<long long>(0, padded - cfg.window_length);
  return static_cast<int>(1 + (span + cfg.hop_length - 1) / cfg.hop_length);
}

}  // namespace

ComplexSpectrogram stft(const Waveform& x, const StftConfig& cfg) {
  if (x.empty()) throw InvalidInput("stft of an empty waveform");
  x.validate();
  cfg.validate();

  const std::size_t n = x.size();
  const int pad = cfg.window_length / 2;
  const int frames = frame_count(n, cfg);
  const int bins = cfg.num_bins();
  const auto window = make_window(cfg.window, cfg.window_length);
  const auto& plan = FftPlans::get(cfg.fft_length);

  ComplexSpectrogram out;
  out.config = cfg;
  out.sample_rate = x.sample_rate;
  out.original_length = n;
  out.num_bins = bins;
  out.num_frames = frames;
  out.bins.assign(static_cast<std::size_t>(bins) * frames, {0.0, 0.0});

  const long long padded_len = static_cast<long long>(n) + 2 * pad;
  std::vector<double> frame(static_cast<std::size_t>(cfg.fft_length));
  std::vector<fftw_complex> spec(static_cast<std::size_t>(bins));
  for (int t = 0; t < frames; ++t) {
    std::fill(frame.begin(), frame.end(), 0.0);
    const long long start = static_cast<long long>(t) * cfg.hop_length;
    for (int k = 0; k < cfg.window_length; ++k) {
      const long long p = start + k;
      if (p >= padded_len) break;
      frame[k] = window[k] * x.samples[reflect_index(p - pad, n)];
    }
    fftw_execute_dft_r2c(plan.forward, frame.data(), spec.data());
    for (int f = 0; f < bins; ++f) out.at(f, t) = {spec[f][0], spec[f][1]};
  }
  return out;
}

Waveform istft(const ComplexSpectrogram& s) {
  const auto& cfg = s.config;
  cfg.validate();
  if (s.num_bins != cfg.num_bins() || s.bins.size() != static_cast<std::size_t>(s.num_bins) * s.num_frames)
    throw InvalidInput("spectrogram shape does not match its stft config");
  if (s.num_frames != frame_count(s.original_length, cfg))
    throw InvalidInput("spectrogram frame count does not match its original length");
  if (s.sample_rate <= 0) throw InvalidInput("spectrogram sample rate must be positive");
  for (const auto& c : s.bins)
    if (!std::isfinite(c.real()) || !std::isfinite(c.imag()))
      throw InvalidInput("spectrogram contains a non-finite bin");

  const int pad = cfg.window_length / 2;
  const auto window = make_window(cfg.window, cfg.window_length);
  const auto& plan = FftPlans::get(cfg.fft_length);
  const std::size_t total =
      static_cast<std::size_t>(s.num_frames - 1) * cfg.hop_length + cfg.window_length;

  std::vector<double> acc(total, 0.0), norm(total, 0.0);
  std::vector<fftw_complex> spec(static_cast<std::size_t>(s.num_bins));
  std::vector<double> frame(static_cast<std::size_t>(cfg.fft_length));
  const double scale = 1.0 / cfg.fft_length;
  for (int t = 0; t < s.num_frames; ++t) {
    for (int f = 0; f < s.num_bins; ++f) {
      spec[f][0] = s.at(f, t).real();
      spec[f][1] = s.at(f, t).imag();
    }
    // real input signals have real DC and Nyquist bins
    spec[0][1] = 0.0;
    if (cfg.fft_length % 2 == 0) spec[s.num_bins - 1][1] = 0.0;
    fftw_execute_dft_c2r(plan.inverse, spec.data(), frame.data());
    const std::size_t start = static_cast<std::size_t>(t) * cfg.hop_length;
    for (int k = 0; k < cfg.window_length; ++k) {
      acc[start + k] += window[k] * frame[k] * scale;
      norm[start + k] += window[k] * window[k];
    }
  }

  Waveform out;
  out.sample_rate = s.sample_rate;
  out.samples.assign(s.original_length, 0.0);
  for (std::size_t i = 0; i < s.original_length; ++i) {
    const std::size_t p = i + pad;
    if (p < total && norm[p] > 1e-10) out.samples[i] = acc[p] / norm[p];
  }
  return out;
}

std::pair<MagnitudeSpectrogram, PhaseGrid> magnitude_phase(const ComplexSpectrogram& s) {
  MagnitudeSpectrogram mag = magnitude(s);
  PhaseGrid phase(s.bins.size(), 0.0);
  for (std::size_t i = 0; i < s.bins.size(); ++i)
    if (s.bins[i] != std::complex<double>(0.0, 0.0)) phase[i] = std::arg(s.bins[i]);
  return {std::move(mag), std::move(phase)};
}

MagnitudeSpectrogram magnitude(const ComplexSpectrogram& s) {
  MagnitudeSpectrogram mag;
  mag.config = s.config;
  mag.sample_rate = s.sample_rate;
  mag.original_length = s.original_length;
  mag.num_bins = s.num_bins;
  mag.num_frames = s.num_frames;
  mag.bins.resize(s.bins.size());
  for (std::size_t i = 0; i < s.bins.size(); ++i) {
    if (!std::isfinite(s.bins[i].real()) || !std::isfinite(s.bins[i].imag()))
      throw InvalidInput("spectrogram contains a non-finite bin");
    mag.bins[i] = std::abs(s.bins[i]);
  }
  return mag;
}

ComplexSpectrogram combine(const MagnitudeSpectrogram& mag, const PhaseGrid& phase) {
  if (phase.size() != mag.bins.size()) throw InvalidInput("magnitude/phase size mismatch");
  ComplexSpectrogram s;
  s.config = mag.config;
  s.sample_rate = mag.sample_rate;
  s.original_length = mag.original_length;
  s.num_bins = mag.num_bins;
  s.num_frames = mag.num_frames;
  s.bins.resize(mag.bins.size());
  for (std::size_t i = 0; i < mag.bins.size(); ++i) s.bins[i] = std::polar(mag.bins[i], phase[i]);
  return s;
}

Waveform apply_mask_and_reconstruct(const ComplexSpectrogram& mix, const Mask& m) {
  if (m.num_bins != mix.num_bins || m.num_frames != mix.num_frames ||
      m.bins.size() != mix.bins.size())
    throw InvalidInput("mask shape " + std::to_string(m.num_bins) + "x" +
                       std::to_string(m.num_frames) + " does not match spectrogram " +
                       std::to_string(mix.num_bins) + "x" + std::to_string(mix.num_frames));
  m.validate();
  auto [mag, phase] = magnitude_phase(mix);
  for (std::size_t i = 0; i < mag.bins.size(); ++i) mag.bins[i] *= m.bins[i];
  return istft(combine(mag, phase));
}

std::vector<Mask> ideal_ratio_mask(std::span<const MagnitudeSpectrogram> sources, double eps) {
  if (sources.size() < 2) throw InvalidInput("ideal ratio mask needs at least two sources");
  for (const auto& s : sources)
    if (!s.same_shape(sources[0]) || s.bins.size() != sources[0].bins.size())
      throw InvalidInput("ideal ratio mask sources differ in shape");

  const std::size_t n = sources[0].bins.size();
  std::vector<double> total(n, 0.0);
  for (const auto& s : sources)
    for (std::size_t i = 0; i < n; ++i) total[i] += std::abs(s.bins[i]);

  std::vector<Mask> masks;
  masks.reserve(sources.size());
  for (const auto& s : sources) {
    Mask m = Mask::filled(s.num_bins, s.num_frames, 0.0);
    for (std::size_t i = 0; i < n; ++i) m.bins[i] = std::abs(s.bins[i]) / (total[i] + eps);
    masks.push_back(std::move(m));
  }
  return masks;
}

double spectrogram_energy(const ComplexSpectrogram& s) {
  const auto& cfg = s.config;
  const auto window = make_window(cfg.window, cfg.window_length);
  double wsq = 0.0;
  for (double w : window) wsq += w * w;
  const bool even = cfg.fft_length % 2 == 0;
  double e = 0.0;
  for (int f = 0; f < s.num_bins; ++f) {
    const double weight = (f == 0 || (even && f == s.num_bins - 1)) ? 1.0 : 2.0;
    for (int t = 0; t < s.num_frames; ++t) e += weight * std::norm(s.at(f, t));
  }
  return e / (static_cast<double>(cfg.fft_length) * wsq / cfg.hop_length);
}

Waveform band_limit(const Waveform& x, double low_hz, double high_hz) {
  if (x.empty()) throw InvalidInput("band_limit of an empty waveform");
  x.validate();
  const int n = static_cast<int>(x.size());
  const auto& plan = FftPlans::get(n);
  std::vector<double> buf = x.samples;
  std::vector<fftw_complex> spec(static_cast<std::size_t>(n / 2 + 1));
  fftw_execute_dft_r2c(plan.forward, buf.data(), spec.data());
  for (int k = 0; k <= n / 2; ++k) {
    const double f = static_cast<double>(k) * x.sample_rate / n;
    if (f < low_hz || f > high_hz) spec[k][0] = spec[k][1] = 0.0;
  }
  fftw_execute_dft_c2r(plan.inverse, spec.data(), buf.data());
  for (auto& v : buf) v /= n;
  return Waveform(std::move(buf), x.sample_rate);
}

double snr_db(std::span<const double> reference, std::span<const double> estimate) {
  if (reference.size() != estimate.size()) throw InvalidInput("snr: length mismatch");
  double sig = 0.0, err = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    sig += reference[i] * reference[i];
    const double d = reference[i] - estimate[i];
    err += d * d;
  }
  if (err == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(sig / err);
}

}  // namespace opensep
