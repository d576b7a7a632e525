// text_encoder.cc
// Word-level tokenizer and the frequency features shared by prompts and
// spectrogram rows.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <set>

#include "json.hpp"

#include "opensep/errors.h"
#include "opensep/hash.h"
#include "opensep/separator.h"
#include "opensep/text_util.h"

namespace opensep {

using json = nlohmann::json;

int SeparatorConfig::channels(int level) const {
  return std::min(base_channels << level, 4 * base_channels);
}

bool SeparatorConfig::has_attention(int level) const {
  return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
}

void SeparatorConfig::validate() const {
  if (levels < 2 || levels > 10) throw InvalidInput("separator levels must be in [2, 10]");
  if (base_channels < 1) throw InvalidInput("base_channels must be positive");
  if (attention_levels.empty()) throw InvalidInput("at least one attention level is required");
  for (int l : attention_levels)
    if (l < levels - 1 || l > levels)
      throw InvalidInput("attention level " + std::to_string(l) + " is not one of the two deepest levels");
  if (attention_heads < 1 || embed_dim < 1 || embed_dim % attention_heads)
    throw InvalidInput("attention_heads must divide embed_dim");
  if (context_window < 1) throw InvalidInput("context_window must be positive");
  if (hash_buckets < 1) throw InvalidInput("hash_buckets must be positive");
}

SeparatorConfig SeparatorConfig::paper_preset() {
  SeparatorConfig c;
  c.levels = 7;
  c.base_channels = 32;
  c.attention_levels = {6, 7};
  c.attention_heads = 8;
  c.embed_dim = 256;
  return c;
}

std::string to_json(const SeparatorConfig& c) {
  json j = {{"levels", c.levels},
            {"base_channels", c.base_channels},
            {"attention_levels", c.attention_levels},
            {"attention_heads", c.attention_heads},
            {"embed_dim", c.embed_dim},
            {"context_window", c.context_window},
            {"hash_buckets", c.hash_buckets},
            {"rng_seed", c.rng_seed}};
  return j.dump();
}

SeparatorConfig separator_config_from_json(const std::string& text) {
  SeparatorConfig c;
  try {
    const json j = json::parse(text);
    c.levels = j.value("levels", c.levels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.attention_levels = j.value("attention_levels", c.attention_levels);
    c.attention_heads = j.value("attention_heads", c.attention_heads);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.context_window = j.value("context_window", c.context_window);
    c.hash_buckets = j.value("hash_buckets", c.hash_buckets);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("bad separator config: ") + e.what());
  }
  c.validate();
  return c;
}

double log_frequency_coordinate(double hz) {
  return std::log(std::max(hz, 20.0) / 20.0) / std::log(400.0);
}

Eigen::VectorXd frequency_features(double hz) {
  const double u = log_frequency_coordinate(hz);
  Eigen::VectorXd phi(kNumericFeatures);
  for (int k = 0; k < kNumericFeatures / 2; ++k) {
    const double f = 0.25 * std::pow(64.0, k / 7.0);
    phi(2 * k) = std::sin(2 * std::numbers::pi * f * u);
    phi(2 * k + 1) = std::cos(2 * std::numbers::pi * f * u);
  }
  return phi;
}

namespace {

bool parse_number(const std::string& s, double& out) {
  if (s.empty() || !std::isdigit(static_cast<unsigned char>(s[0]))) return false;
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

// "200" -> 200, "2-4" -> geometric mean of the ends.
bool numeric_value(const std::string& tok, double& out) {
  if (parse_number(tok, out)) return true;
  const auto dash = tok.find('-');
  if (dash == std::string::npos) return false;
  double a = 0, b = 0;
  if (!parse_number(tok.substr(0, dash), a) || !parse_number(tok.substr(dash + 1), b)) return false;
  out = a > 0 && b > 0 ? std::sqrt(a * b) : 0.5 * (a + b);
  return true;
}

// Looks past "and", "to" and further numbers for a hz/khz unit.
double hertz_of(const std::vector<std::string>& toks, std::size_t i, double value) {
  for (std::size_t j = i + 1; j < toks.size() && j <= i + 3; ++j) {
    if (toks[j] == "hz") return value;
    if (toks[j] == "khz") return value * 1000.0;
    double dummy = 0;
    if (toks[j] != "and" && toks[j] != "to" && !numeric_value(toks[j], dummy)) break;
  }
  return 0.0;
}

}  // namespace

std::vector<std::string> build_vocabulary(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts)
    for (auto& w : word_tokens(t)) {
      double v = 0;
      if (!numeric_value(w, v)) words.insert(std::move(w));
    }
  return {words.begin(), words.end()};
}

TextEmbedding tokenize(const std::string& text, const std::vector<std::string>& vocab,
                       const SeparatorConfig& cfg) {
  auto toks = word_tokens(text);
  if (toks.empty()) throw InvalidInput("cannot encode an empty prompt");
  TextEmbedding e;
  const std::size_t n = std::min<std::size_t>(toks.size(), static_cast<std::size_t>(cfg.context_window));
  e.tokens.reserve(n);
  e.hertz.reserve(n);
  const int v = static_cast<int>(vocab.size());
  for (std::size_t i = 0; i < n; ++i) {
    double value = 0;
    if (numeric_value(toks[i], value)) {
      e.tokens.push_back(0);
      // the unit may sit just past the window edge; still use it
      e.hertz.push_back(hertz_of(toks, i, value));
      continue;
    }
    e.hertz.push_back(0.0);
    auto it = std::lower_bound(vocab.begin(), vocab.end(), toks[i]);
    if (it != vocab.end() && *it == toks[i]) {
      e.tokens.push_back(1 + static_cast<int>(it - vocab.begin()));
    } else {
      e.tokens.push_back(1 + v + static_cast<int>(fnv1a(toks[i]) % static_cast<std::uint64_t>(cfg.hash_buckets)));
    }
  }
  return e;
}

}  // namespace opensep
