// text_util.cc

#include "opensep/text_util.h"

#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "opensep/errors.h"

namespace opensep {

namespace {

bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::map<std::string, int> ngram_counts(std::string_view s) {
  const auto words = word_tokens(s);
  std::map<std::string, int> counts;
  for (std::size_t i = 0; i < words.size(); ++i) {
    ++counts[words[i]];
    if (i + 1 < words.size()) ++counts[words[i] + ' ' + words[i + 1]];
  }
  return counts;
}

}  // namespace

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && is_space(s[a])) ++a;
  while (b > a && is_space(s[b - 1])) --b;
  return std::string(s.substr(a, b - a));
}

std::vector<std::string> word_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (is_alnum(c)) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      continue;
    }
    // keep "2.5" and "2-4" together
    const bool joins = (c == '.' || c == '-') && !cur.empty() && is_digit(cur.back()) && i + 1 < s.size() &&
                       is_digit(s[i + 1]);
    if (joins) {
      cur += c;
      continue;
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

int count_words(std::string_view s) {
  std::istringstream is{std::string(s)};
  std::string w;
  int n = 0;
  while (is >> w) ++n;
  return n;
}

std::string normalize_phrase(std::string_view s) {
  std::string out;
  bool space = false;
  for (char c : trim(s)) {
    if (is_space(c)) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out += ' ';
    space = false;
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  while (!out.empty() && (out.back() == '.' || out.back() == '!' || out.back() == '?' || out.back() == ',' ||
                          out.back() == ';' || out.back() == ':'))
    out.pop_back();
  return trim(out);
}

double ngram_cosine(std::string_view a, std::string_view b) {
  const auto ca = ngram_counts(a), cb = ngram_counts(b);
  if (ca.empty() || cb.empty()) return 0.0;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [k, v] : ca) {
    na += static_cast<double>(v) * v;
    if (auto it = cb.find(k); it != cb.end()) dot += static_cast<double>(v) * it->second;
  }
  for (const auto& [k, v] : cb) nb += static_cast<double>(v) * v;
  return dot / std::sqrt(na * nb);
}

Truncation truncate_to_budget(std::string_view text, int max_words) {
  if (max_words < 1) throw InvalidInput("token budget must be at least 1");
  if (count_words(text) <= max_words) return {std::string(text), false};

  // Byte offset just past the max_words-th word.
  std::size_t end = 0;
  int words = 0;
  std::size_t i = 0;
  while (i < text.size() && words < max_words) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i >= text.size()) break;
    while (i < text.size() && !is_space(text[i])) ++i;
    ++words;
    end = i;
  }
  const std::string_view head = text.substr(0, end);

  auto cut_after = [&](std::string_view marks) -> std::size_t {
    for (std::size_t k = head.size(); k > 0; --k) {
      const char c = head[k - 1];
      if (marks.find(c) == std::string_view::npos) continue;
      // a sentence end is punctuation followed by whitespace or the cut
      if (k == head.size() || is_space(head[k])) return k;
    }
    return 0;
  };

  std::string out;
  if (const auto k = cut_after(".!?"); k > 0) {
    out = trim(head.substr(0, k));
  } else if (const auto c = cut_after(",;"); c > 0) {
    out = trim(head.substr(0, c - 1)) + ".";
  } else {
    out = trim(head);
    while (!out.empty() && !is_alnum(out.back())) out.pop_back();
    out += ".";
  }
  return {out, true};
}

std::string capitalize_first(std::string s) {
  for (auto& c : s) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      break;
    }
  }
  return s;
}

}  // namespace opensep
