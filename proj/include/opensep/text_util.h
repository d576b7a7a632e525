// text_util.h
// Small text helpers shared by the parsers, the label matcher and the
// separator's tokenizer.

#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace opensep {

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);

// Lowercase alphanumeric runs. Decimal numbers and ranges stay whole
// ("2.5", "2-4"), every other character separates words.
std::vector<std::string> word_tokens(std::string_view s);

// Whitespace-delimited word count; this is the unit of the knowledge budget.
int count_words(std::string_view s);

// Lowercased, trimmed, inner whitespace collapsed, trailing punctuation dropped.
std::string normalize_phrase(std::string_view s);

// Cosine similarity between unigram+bigram count vectors of word_tokens.
// 0 when either side has no tokens.
double ngram_cosine(std::string_view a, std::string_view b);

struct Truncation {
  std::string text;
  bool truncated = false;
};

// Cuts text to at most max_words words. The cut lands after the last
// sentence end inside the budget, else the last clause comma, else at a word;
// a cut text always ends in a period.
Truncation truncate_to_budget(std::string_view text, int max_words);

std::string capitalize_first(std::string s);

}  // namespace opensep
