// hash.cc

#include "opensep/hash.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace opensep {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string audio_fingerprint(std::span<const double> samples) {
  std::uint64_t h = kFnvOffset;
  for (double v : samples) {
    const float f = static_cast<float>(v) + 0.0f;  // folds -0 into +0
    char bytes[sizeof(float)];
    std::memcpy(bytes, &f, sizeof(float));
    h = fnv1a(std::string_view(bytes, sizeof(float)), h);
  }
  return hex64(h);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace opensep
