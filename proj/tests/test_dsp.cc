#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>

#include "doctest.h"
#include "opensep/dsp.h"
#include "opensep/errors.h"
#include "opensep/wav_io.h"

using namespace opensep;

namespace {

// Direct O(N^2) DFT, independent of the FFT backend.
std::vector<std::complex<double>> brute_dft(const std::vector<double>& x, int bins) {
  const int n = static_cast<int>(x.size());
  std::vector<std::complex<double>> out(static_cast<std::size_t>(bins));
  for (int k = 0; k < bins; ++k) {
    std::complex<double> acc = 0.0;
    for (int i = 0; i < n; ++i)
      acc += x[i] * std::polar(1.0, -2.0 * std::numbers::pi * k * i / n);
    out[k] = acc;
  }
  return out;
}

Waveform noise(std::size_t n, unsigned seed, int sr = 16000) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 0.3);
  Waveform w;
  w.sample_rate = sr;
  w.samples.resize(n);
  for (auto& v : w.samples) v = d(rng);
  return w;
}

Waveform sine(std::size_t n, double freq, int sr = 16000, double amp = 0.5) {
  Waveform w;
  w.sample_rate = sr;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) w.samples[i] = amp * std::sin(2 * std::numbers::pi * freq * i / sr);
  return w;
}

StftConfig small_cfg() { return StftConfig{64, 16, WindowKind::kHann, 64}; }

}  // namespace

TEST_CASE("stft shape uses fft_length/2+1 bins") {
  const StftConfig cfg;  // 1022 / 256
  auto s = stft(sine(160000, 440.0), cfg);
  CHECK(s.num_bins == 512);
  CHECK(s.original_length == 160000);
  CHECK(s.bins.size() == static_cast<std::size_t>(512) * s.num_frames);
}

TEST_CASE("stft rejects bad input") {
  CHECK_THROWS_AS(stft(Waveform{}, StftConfig{}), InvalidInput);
  auto w = sine(2000, 100.0);
  w.samples[10] = std::nan("");
  CHECK_THROWS_AS(stft(w, StftConfig{}), InvalidInput);
  CHECK_THROWS_AS(stft(sine(2000, 100.0), StftConfig{256, 300, WindowKind::kHann, 256}), InvalidInput);
  CHECK_THROWS_AS(stft(sine(2000, 100.0), StftConfig{256, 64, WindowKind::kHann, 128}), InvalidInput);
}

TEST_CASE("zero waveform gives zero spectrogram and back") {
  Waveform z;
  z.samples.assign(4000, 0.0);
  auto s = stft(z, StftConfig{});
  for (const auto& c : s.bins) CHECK(std::abs(c) == 0.0);
  auto back = istft(s);
  CHECK(back.size() == 4000);
  for (double v : back.samples) CHECK(v == 0.0);
}

TEST_CASE("stft frames match a brute-force DFT of the padded, windowed frame") {
  const auto cfg = small_cfg();
  auto x = noise(300, 7);
  auto s = stft(x, cfg);
  const auto win = make_window(cfg.window, cfg.window_length);
  const int pad = cfg.window_length / 2;
  for (int t : {0, 3, s.num_frames - 1}) {
    std::vector<double> frame(cfg.fft_length, 0.0);
    for (int k = 0; k < cfg.window_length; ++k) {
      long long p = static_cast<long long>(t) * cfg.hop_length + k - pad;
      if (p >= static_cast<long long>(x.size()) + pad) break;
      // reflect padding
      if (p < 0) p = -p;
      if (p >= static_cast<long long>(x.size())) p = 2 * (static_cast<long long>(x.size()) - 1) - p;
      frame[k] = win[k] * x.samples[p];
    }
    auto ref = brute_dft(frame, cfg.num_bins());
    for (int f = 0; f < cfg.num_bins(); ++f) CHECK(std::abs(ref[f] - s.at(f, t)) < 1e-9);
  }
}

TEST_CASE("bin-centred sinusoid concentrates energy within one bin") {
  const StftConfig cfg;
  const double df = 16000.0 / cfg.fft_length;
  const int k0 = 40;
  auto s = stft(sine(16000, k0 * df), cfg);
  // steady-state frames only (skip those touching the reflected edges)
  for (int t = 4; t < s.num_frames - 4; ++t) {
    double total = 0.0, near = 0.0;
    for (int f = 0; f < s.num_bins; ++f) {
      const double e = std::norm(s.at(f, t));
      total += e;
      if (std::abs(f - k0) <= 1) near += e;
    }
    CHECK(near / total >= 0.99);
  }
}

TEST_CASE("round trip reconstructs random noise above 60 dB") {
  for (const auto& cfg : {StftConfig{}, small_cfg(), StftConfig{100, 30, WindowKind::kHann, 128}}) {
    for (unsigned seed = 0; seed < 5; ++seed) {
      auto x = noise(3 * cfg.window_length + 17 * seed + 5, seed);
      auto y = istft(stft(x, cfg));
      REQUIRE(y.size() == x.size());
      CHECK(snr_db(x.samples, y.samples) >= 60.0);
    }
  }
}

TEST_CASE("impulse is recovered at its offset") {
  const auto cfg = small_cfg();
  Waveform x;
  x.samples.assign(200, 0.0);
  x.samples[77] = 1.0;
  auto y = istft(stft(x, cfg));
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.samples[i] == doctest::Approx(i == 77 ? 1.0 : 0.0).epsilon(1e-12));
}

TEST_CASE("single-frame windowed impulse lands at frame offset") {
  const auto cfg = small_cfg();
  auto s = stft(noise(200, 1), cfg);
  for (auto& c : s.bins) c = 0.0;
  const int t = 5, k0 = 20;
  const auto win = make_window(cfg.window, cfg.window_length);
  std::vector<double> frame(cfg.fft_length, 0.0);
  frame[k0] = win[k0];
  auto spec = brute_dft(frame, cfg.num_bins());
  for (int f = 0; f < cfg.num_bins(); ++f) s.at(f, t) = spec[f];
  auto y = istft(s);

  // Overlap-add oracle: w[k0]^2 / sum over frames of w^2 at that sample.
  const int pad = cfg.window_length / 2;
  const int pos = t * cfg.hop_length + k0;
  double norm = 0.0;
  for (int u = 0; u < s.num_frames; ++u) {
    const int k = pos - u * cfg.hop_length;
    if (k >= 0 && k < cfg.window_length) norm += win[k] * win[k];
  }
  const std::size_t expect_at = static_cast<std::size_t>(pos - pad);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y.samples[i] == doctest::Approx(i == expect_at ? win[k0] * win[k0] / norm : 0.0).epsilon(1e-12));
}

TEST_CASE("istft rejects mismatched shapes") {
  auto s = stft(noise(500, 2), small_cfg());
  s.num_frames -= 1;
  CHECK_THROWS_AS(istft(s), InvalidInput);
  auto s2 = stft(noise(500, 2), small_cfg());
  s2.config.fft_length = 128;
  CHECK_THROWS_AS(istft(s2), InvalidInput);
}

TEST_CASE("stft is linear") {
  const StftConfig cfg;
  auto x = noise(5000, 11), y = noise(5000, 12);
  const double a = 0.7, b = -1.3;
  Waveform mix = x;
  for (std::size_t i = 0; i < mix.size(); ++i) mix.samples[i] = a * x.samples[i] + b * y.samples[i];
  auto sx = stft(x, cfg), sy = stft(y, cfg), sm = stft(mix, cfg);
  double max_ref = 0.0, max_err = 0.0;
  for (std::size_t i = 0; i < sm.bins.size(); ++i) {
    max_ref = std::max(max_ref, std::abs(sm.bins[i]));
    max_err = std::max(max_err, std::abs(sm.bins[i] - (a * sx.bins[i] + b * sy.bins[i])));
  }
  CHECK(max_err <= 1e-9 * max_ref);
}

TEST_CASE("windowed spectral energy matches waveform energy for steady signals") {
  const StftConfig cfg;
  for (double f : {313.0, 1250.0, 4000.0}) {
    auto x = sine(32000, f);
    double e = 0.0;
    for (double v : x.samples) e += v * v;
    CHECK(spectrogram_energy(stft(x, cfg)) == doctest::Approx(e).epsilon(0.01));
  }
}

TEST_CASE("magnitude/phase split") {
  ComplexSpectrogram s;
  s.config = small_cfg();
  s.num_bins = 1;
  s.num_frames = 2;
  s.bins = {{3.0, 4.0}, {0.0, 0.0}};
  auto [mag, phase] = magnitude_phase(s);
  CHECK(mag.bins[0] == doctest::Approx(5.0));
  CHECK(phase[0] == doctest::Approx(std::atan2(4.0, 3.0)));
  CHECK(mag.bins[1] == 0.0);
  CHECK(phase[1] == 0.0);

  auto r = stft(noise(3000, 5), StftConfig{});
  auto [m2, p2] = magnitude_phase(r);
  auto back = combine(m2, p2);
  double max_s = 0.0, max_err = 0.0;
  for (std::size_t i = 0; i < r.bins.size(); ++i) {
    max_s = std::max(max_s, std::abs(r.bins[i]));
    max_err = std::max(max_err, std::abs(r.bins[i] - back.bins[i]));
  }
  CHECK(max_err < 1e-12 * max_s);
}

TEST_CASE("mask application") {
  const StftConfig cfg;
  auto x = noise(8000, 3);
  auto s = stft(x, cfg);

  auto ones = apply_mask_and_reconstruct(s, Mask::filled(s.num_bins, s.num_frames, 1.0));
  auto plain = istft(s);
  CHECK(snr_db(x.samples, ones.samples) >= 60.0);
  double max_p = 0.0, max_d = 0.0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    max_p = std::max(max_p, std::abs(plain.samples[i]));
    max_d = std::max(max_d, std::abs(plain.samples[i] - ones.samples[i]));
  }
  CHECK(max_d <= 1e-9 * max_p);

  auto zeros = apply_mask_and_reconstruct(s, Mask::filled(s.num_bins, s.num_frames, 0.0));
  CHECK(zeros.peak() < 1e-9);

  CHECK_THROWS_AS(apply_mask_and_reconstruct(s, Mask::filled(s.num_bins - 1, s.num_frames, 1.0)),
                  InvalidInput);
  auto bad = Mask::filled(s.num_bins, s.num_frames, 1.0);
  bad.bins[3] = 1.5;
  CHECK_THROWS_AS(apply_mask_and_reconstruct(s, bad), InvalidInput);
}

TEST_CASE("ideal ratio mask separates disjoint-band sinusoids") {
  const StftConfig cfg;
  auto a = sine(16000, 300.0), b = sine(16000, 3000.0, 16000, 0.3);
  Waveform mix = a;
  for (std::size_t i = 0; i < mix.size(); ++i) mix.samples[i] += b.samples[i];
  auto sm = stft(mix, cfg);
  std::vector<MagnitudeSpectrogram> mags{magnitude(stft(a, cfg)), magnitude(stft(b, cfg))};
  auto masks = ideal_ratio_mask(mags);
  CHECK(snr_db(a.samples, apply_mask_and_reconstruct(sm, masks[0]).samples) >= 30.0);
  CHECK(snr_db(b.samples, apply_mask_and_reconstruct(sm, masks[1]).samples) >= 30.0);
}

TEST_CASE("ideal ratio mask edge cases") {
  const StftConfig cfg;
  auto a = magnitude(stft(noise(3000, 1), cfg));
  SUBCASE("identical sources split evenly") {
    std::vector<MagnitudeSpectrogram> m{a, a};
    auto masks = ideal_ratio_mask(m);
    for (std::size_t i = 0; i < a.bins.size(); ++i)
      if (a.bins[i] > 1e-3) CHECK(masks[0].bins[i] == doctest::Approx(0.5).epsilon(1e-6));
  }
  SUBCASE("silent source gets nothing") {
    auto silent = a;
    for (auto& v : silent.bins) v = 0.0;
    std::vector<MagnitudeSpectrogram> m{silent, a};
    auto masks = ideal_ratio_mask(m);
    for (std::size_t i = 0; i < a.bins.size(); ++i) {
      CHECK(masks[0].bins[i] == 0.0);
      if (a.bins[i] > 1e-3) CHECK(masks[1].bins[i] == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  SUBCASE("three sources sum to one where energy exists") {
    std::vector<MagnitudeSpectrogram> m{a, magnitude(stft(noise(3000, 2), cfg)),
                                        magnitude(stft(noise(3000, 3), cfg))};
    auto masks = ideal_ratio_mask(m);
    for (std::size_t i = 0; i < a.bins.size(); ++i) {
      const double total = m[0].bins[i] + m[1].bins[i] + m[2].bins[i];
      const double sum = masks[0].bins[i] + masks[1].bins[i] + masks[2].bins[i];
      for (const auto& mk : masks) CHECK((mk.bins[i] >= 0.0 && mk.bins[i] <= 1.0));
      if (total > 1e-6) {
        CHECK(sum >= 1.0 - 1e-6);
        CHECK(sum <= 1.0);
      }
    }
  }
  SUBCASE("errors") {
    std::vector<MagnitudeSpectrogram> one{a};
    CHECK_THROWS_AS(ideal_ratio_mask(one), InvalidInput);
    auto other = magnitude(stft(noise(5000, 1), cfg));
    std::vector<MagnitudeSpectrogram> two{a, other};
    CHECK_THROWS_AS(ideal_ratio_mask(two), InvalidInput);
  }
}

TEST_CASE("wav round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "opensep_test_wav";
  std::filesystem::create_directories(dir);
  auto x = noise(1234, 9);
  for (auto& v : x.samples) v = std::clamp(v, -0.99, 0.99);

  const auto fpath = (dir / "f.wav").string();
  write_wav(fpath, x, WavEncoding::kFloat32);
  auto y = read_wav(fpath, 16000);
  REQUIRE(y.size() == x.size());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.samples[i] == static_cast<double>(static_cast<float>(x.samples[i])));

  const auto ipath = (dir / "i.wav").string();
  write_wav(ipath, x, WavEncoding::kPcm16);
  auto z = read_wav(ipath);
  REQUIRE(z.size() == x.size());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(z.samples[i] - x.samples[i]) <= 1.0 / 32768.0);
  // re-encoding a 16-bit file is lossless
  write_wav(ipath, z, WavEncoding::kPcm16);
  CHECK(read_wav(ipath).samples == z.samples);

  CHECK_THROWS_AS(read_wav(fpath, 8000), InvalidInput);
  CHECK_THROWS_AS(read_wav((dir / "missing.wav").string()), IoError);
}
