// wav_io.cc

#include "opensep/wav_io.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "opensep/errors.h"

namespace opensep {

static_assert(std::endian::native == std::endian::little, "wav io assumes a little-endian host");

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

template <typename T>
T read_le(const std::vector<char>& buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

template <typename T>
void put_le(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

Waveform read_wav(const std::string& path, std::optional<int> expected_rate) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path, "cannot open for reading");
  std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw IoError(path, "not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t off = 12;
  while (off + 8 <= buf.size()) {
    const std::uint32_t size = read_le<std::uint32_t>(buf, off + 4);
    const std::size_t body = off + 8;
    if (body + size > buf.size() && std::memcmp(buf.data() + off, "data", 4) != 0)
      throw IoError(path, "truncated chunk");
    if (std::memcmp(buf.data() + off, "fmt ", 4) == 0) {
      if (size < 16) throw IoError(path, "fmt chunk too small");
      format = read_le<std::uint16_t>(buf, body);
      channels = read_le<std::uint16_t>(buf, body + 2);
      rate = read_le<std::uint32_t>(buf, body + 4);
      bits = read_le<std::uint16_t>(buf, body + 14);
      if (format == kFormatExtensible && size >= 26) format = read_le<std::uint16_t>(buf, body + 24);
    } else if (std::memcmp(buf.data() + off, "data", 4) == 0) {
      data = buf.data() + body;
      data_size = std::min<std::size_t>(size, buf.size() - body);
    }
    off = body + size + (size & 1u);
  }
  if (channels == 0) throw IoError(path, "missing fmt chunk");
  if (!data) throw IoError(path, "missing data chunk");
  if (channels != 1) throw IoError(path, "only mono files are supported");

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  if (format == kFormatPcm && bits == 16) {
    const std::size_t n = data_size / 2;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::int16_t v;
      std::memcpy(&v, data + 2 * i, 2);
      w.samples[i] = v / 32768.0;
    }
  } else if (format == kFormatFloat && bits == 32) {
    const std::size_t n = data_size / 4;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, data + 4 * i, 4);
      w.samples[i] = v;
    }
  } else {
    throw IoError(path, "unsupported encoding (format " + std::to_string(format) + ", " +
                            std::to_string(bits) + " bits)");
  }
  if (expected_rate && *expected_rate != w.sample_rate)
    throw InvalidInput(path + ": sample rate " + std::to_string(w.sample_rate) +
                       " Hz does not match configured " + std::to_string(*expected_rate) + " Hz");
  return w;
}

std::string encode_wav(const Waveform& w, WavEncoding encoding) {
  w.validate();
  const bool pcm = encoding == WavEncoding::kPcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const std::uint16_t block = bits / 8;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.size() * block);

  std::string os;
  os.reserve(44 + data_bytes);
  os.append("RIFF", 4);
  put_le<std::uint32_t>(os, 36 + data_bytes);
  os.append("WAVE", 4);
  os.append("fmt ", 4);
  put_le<std::uint32_t>(os, 16);
  put_le<std::uint16_t>(os, pcm ? kFormatPcm : kFormatFloat);
  put_le<std::uint16_t>(os, 1);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate) * block);
  put_le<std::uint16_t>(os, block);
  put_le<std::uint16_t>(os, bits);
  os.append("data", 4);
  put_le<std::uint32_t>(os, data_bytes);
  for (double v : w.samples) {
    if (pcm) {
      const double c = std::clamp(v, -1.0, 1.0);
      put_le<std::int16_t>(os, static_cast<std::int16_t>(std::lround(std::min(c * 32768.0, 32767.0))));
    } else {
      put_le<float>(os, static_cast<float>(v));
    }
  }
  return os;
}

void write_wav(const std::string& path, const Waveform& w, WavEncoding encoding) {
  const std::string bytes = encode_wav(w, encoding);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path, "cannot open for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError(path, "write failed");
}

}  // namespace opensep
