// mock_rules.cc
// Offline stand-in for the parser LLM.

#include <algorithm>
#include <map>
#include <set>

#include "opensep/errors.h"
#include "opensep/text_util.h"
#include "opensep/textual_inversion.h"

namespace opensep {

namespace {

const std::set<std::string> kArticles = {"a", "an", "the"};
const std::set<std::string> kAux = {"is", "are", "was", "were", "be", "being", "been"};

// Third-person forms the rules know how to turn into gerunds.
const std::map<std::string, std::string> kVerbGerund = {
    {"barks", "barking"},       {"beeps", "beeping"},       {"blows", "blowing"},
    {"buzzes", "buzzing"},      {"chatters", "chattering"}, {"cheers", "cheering"},
    {"chirps", "chirping"},     {"claps", "clapping"},      {"coos", "cooing"},
    {"coughs", "coughing"},     {"crackles", "crackling"},  {"cries", "crying"},
    {"drips", "dripping"},      {"falls", "falling"},       {"flows", "flowing"},
    {"flushes", "flushing"},    {"growls", "growling"},     {"hisses", "hissing"},
    {"honks", "honking"},       {"howls", "howling"},       {"hums", "humming"},
    {"idles", "idling"},        {"knocks", "knocking"},     {"laughs", "laughing"},
    {"meows", "meowing"},       {"plays", "playing"},       {"pours", "pouring"},
    {"pulses", "pulsing"},      {"purrs", "purring"},       {"quacks", "quacking"},
    {"revs", "revving"},        {"rings", "ringing"},       {"rises", "rising"},
    {"roars", "roaring"},       {"rumbles", "rumbling"},    {"runs", "running"},
    {"rustles", "rustling"},    {"screams", "screaming"},   {"shouts", "shouting"},
    {"sings", "singing"},       {"sizzles", "sizzling"},    {"snores", "snoring"},
    {"speaks", "speaking"},     {"splashes", "splashing"},  {"squeaks", "squeaking"},
    {"talks", "talking"},       {"ticks", "ticking"},       {"wails", "wailing"},
    {"whistles", "whistling"},  {"yells", "yelling"},       {"yelps", "yelping"},
};

const std::set<std::string> kNotGerund = {"something", "nothing", "anything", "everything", "ceiling",
                                          "evening",   "morning", "building", "string",     "spring"};

// Multi-word adverbials first so "in the background" wins over shorter ones.
const std::vector<std::vector<std::string>> kAdverbials = {
    {"in", "the", "background"}, {"in", "the", "distance"}, {"in", "the", "foreground"},
    {"over", "and", "over"},     {"from", "afar"},          {"afterwards"},
    {"afterward"},               {"nearby"},                {"repeatedly"},
    {"loudly"},                  {"quietly"},               {"softly"},
    {"continuously"},            {"constantly"},            {"occasionally"},
    {"briefly"},                 {"then"},                  {"again"},
};

// Bare nouns that stand for a whole source.
const std::map<std::string, std::string> kNounSources = {
    {"laughter", "Someone laughs"},
    {"laughing", "Someone laughs"},
    {"whistling", "A whistling sound"},
    {"applause", "People clap"},
    {"clapping", "People clap"},
    {"music", "Music plays"},
    {"speech", "Someone speaks"},
    {"talking", "People talk"},
    {"cheering", "A crowd cheers"},
    {"beeping", "A beeping sound"},
};

const std::set<std::string> kPluralSubjects = {"people", "children", "men", "women", "geese", "mice", "sheep"};

struct Separator {
  std::string text;
  bool followed_by;
};

const std::vector<Separator> kSeparators = {
    {" followed by ", true}, {", and then ", false}, {" and then ", false}, {", then ", false},
    {", while ", false},     {" while ", false},     {", and ", false},     {" and ", false},
    {", ", false},
};

struct Clause {
  std::vector<std::string> words;  // original case, punctuation stripped
  bool followed_by = false;
};

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    while (!cur.empty() && std::string(".,;:!?\"").find(cur.back()) != std::string::npos) cur.pop_back();
    while (!cur.empty() && cur.front() == '"') cur.erase(cur.begin());
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r')
      flush();
    else
      cur += c;
  }
  flush();
  return out;
}

std::vector<Clause> split_clauses(const std::string& sentence) {
  std::vector<Clause> out;
  const std::string lower = to_lower(sentence);
  std::size_t start = 0;
  bool followed = false;
  std::size_t pos = 0;
  while (pos < lower.size()) {
    const Separator* hit = nullptr;
    for (const auto& sep : kSeparators)
      if (lower.compare(pos, sep.text.size(), sep.text) == 0) {
        hit = &sep;
        break;
      }
    if (!hit) {
      ++pos;
      continue;
    }
    Clause c{split_words(sentence.substr(start, pos - start)), followed};
    if (!c.words.empty()) out.push_back(std::move(c));
    followed = hit->followed_by;
    pos += hit->text.size();
    start = pos;
  }
  Clause last{split_words(sentence.substr(start)), followed};
  if (!last.words.empty()) out.push_back(std::move(last));
  return out;
}

// Sentences of the caption. A period only ends a sentence before whitespace
// or at the end, so "2.5" survives.
std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    const bool end = (c == '.' || c == '!' || c == '?' || c == ';') &&
                     (i + 1 == text.size() || text[i + 1] == ' ' || text[i + 1] == '\n');
    if (c == '\n' || end) {
      if (!trim(cur).empty()) out.push_back(trim(cur));
      cur.clear();
      continue;
    }
    cur += c;
  }
  if (!trim(cur).empty()) out.push_back(trim(cur));
  return out;
}

std::string lw(const std::string& w) { return to_lower(w); }

bool is_gerund(const std::string& w) {
  const auto l = lw(w);
  if (kNotGerund.count(l)) return false;
  for (const auto& [v, g] : kVerbGerund)
    if (g == l) return true;
  return l.size() >= 6 && l.ends_with("ing");
}

bool is_finite(const std::string& w) { return kVerbGerund.count(lw(w)) > 0; }
bool is_aux(const std::string& w) { return kAux.count(lw(w)) > 0; }
bool is_verb(const std::string& w) { return is_aux(w) || is_finite(w) || is_gerund(w); }

std::size_t first_verb(const std::vector<std::string>& words) {
  for (std::size_t i = 0; i < words.size(); ++i)
    if (is_verb(words[i])) return i;
  return words.size();
}

bool plural(const std::vector<std::string>& subject) {
  if (subject.empty()) return false;
  const auto last = lw(subject.back());
  if (kPluralSubjects.count(last)) return true;
  return last.size() > 2 && last.ends_with('s') && !last.ends_with("ss");
}

std::string join(const std::vector<std::string>& w) {
  std::string out;
  for (const auto& x : w) {
    if (!out.empty()) out += ' ';
    out += x;
  }
  return out;
}

std::vector<std::string> drop_leading_article(std::vector<std::string> w) {
  if (!w.empty() && kArticles.count(lw(w.front()))) w.erase(w.begin());
  return w;
}

std::vector<std::string> drop_adverbials(const std::vector<std::string>& w) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < w.size();) {
    bool matched = false;
    for (const auto& adv : kAdverbials) {
      if (i + adv.size() > w.size()) continue;
      bool eq = true;
      for (std::size_t k = 0; k < adv.size() && eq; ++k) eq = lw(w[i + k]) == adv[k];
      if (eq) {
        i += adv.size();
        matched = true;
        break;
      }
    }
    if (!matched) out.push_back(w[i++]);
  }
  return out;
}

std::vector<std::string> headline(std::vector<std::string> w) {
  w = drop_adverbials(drop_leading_article(std::move(w)));
  std::vector<std::string> out;
  for (const auto& x : w) {
    if (is_aux(x)) continue;
    if (auto it = kVerbGerund.find(lw(x)); it != kVerbGerund.end())
      out.push_back(it->second);
    else
      out.push_back(x);
  }
  return out;
}

struct Context {
  std::vector<std::string> subject;
  std::string aux;  // auxiliary of the previous clause, if it had one
};

std::string rewrite_clause(const Clause& clause, bool headline_style, Context& ctx) {
  std::vector<std::string> w = clause.words;
  const std::size_t v = first_verb(w);

  // a bare noun standing for a whole source ("laughter")
  const std::string bare = normalize_phrase(join(drop_leading_article(w)));
  if (auto it = kNounSources.find(bare); it != kNounSources.end() && (clause.followed_by || v == 0 || v == w.size()))
    return it->second;

  if (v == 0 && !ctx.subject.empty()) {
    // no subject: borrow the previous clause's
    std::vector<std::string> full = ctx.subject;
    if (!headline_style && is_gerund(w[0]) && !ctx.aux.empty()) full.push_back(ctx.aux);
    full.insert(full.end(), w.begin(), w.end());
    w = std::move(full);
  } else if (v < w.size()) {
    ctx.subject.assign(w.begin(), w.begin() + v);
    ctx.aux = is_aux(w[v]) ? w[v] : "";
  } else {
    ctx.subject = w;
    ctx.aux.clear();
  }

  if (headline_style) return join(headline(std::move(w)));

  if (clause.followed_by) {
    // "a woman speaking" -> "a woman is speaking"
    const std::size_t fv = first_verb(w);
    if (fv > 0 && fv < w.size() && is_gerund(w[fv])) {
      const std::vector<std::string> subj(w.begin(), w.begin() + fv);
      w.insert(w.begin() + fv, plural(subj) ? "are" : "is");
    }
  }
  return join(w);
}

bool headline_caption(const std::vector<std::string>& first) {
  if (first.empty() || kArticles.count(lw(first.front()))) return false;
  bool gerund = false;
  for (const auto& w : first) {
    if (is_aux(w)) return false;
    gerund = gerund || is_gerund(w);
  }
  return gerund;
}

void add_unique(std::vector<std::string>& out, std::string phrase) {
  phrase = capitalize_first(trim(phrase));
  if (phrase.empty()) return;
  const auto norm = normalize_phrase(phrase);
  for (const auto& p : out)
    if (normalize_phrase(p) == norm || ngram_cosine(p, phrase) >= kDuplicateSimilarity) return;
  out.push_back(std::move(phrase));
}

const Exemplar* find_exemplar(const FewShotPrompt& prompt) {
  const auto q = normalize_phrase(prompt.query);
  for (const auto& e : prompt.exemplars)
    if (normalize_phrase(e.input) == q) return &e;
  return nullptr;
}

std::string strip_article(const std::string& s) {
  auto w = split_words(normalize_phrase(s));
  return join(drop_leading_article(std::move(w)));
}

std::string generic_knowledge(const std::string& phrase) {
  return capitalize_first(trim(phrase)) +
         " has most of its energy between roughly 300 Hz and 3 kHz, a moderate loudness, a mixed timbre, "
         "a usual duration of about 1 second, a quick attack and a gradual decay, a fairly even dynamic "
         "envelope, and a spectrum with a few strong partials over a noise floor.";
}

}  // namespace

std::vector<std::string> mock_parse_sources(const std::string& caption) {
  std::vector<std::string> out;
  bool style_known = false, headline_style = false;
  for (const auto& sentence : split_sentences(caption)) {
    const auto clauses = split_clauses(sentence);
    if (clauses.empty()) continue;
    if (!style_known) {
      headline_style = headline_caption(clauses.front().words);
      style_known = true;
    }
    Context ctx;
    for (const auto& c : clauses) add_unique(out, rewrite_clause(c, headline_style, ctx));
  }
  return out;
}

MockLlmBackend::MockLlmBackend(std::vector<ToyClassSpec> classes) : classes_(std::move(classes)) {}

std::string MockLlmBackend::complete(const FewShotPrompt& prompt) {
  prompt.validate();
  if (const auto* e = find_exemplar(prompt)) return e->output;

  if (prompt.task == ParseTask::kSourceParse) {
    std::string out;
    for (const auto& p : mock_parse_sources(prompt.query)) {
      if (!out.empty()) out += ' ';
      out += p + ".";
    }
    return out;
  }

  const auto q = strip_article(prompt.query);
  for (const auto& c : classes_)
    if (q == strip_article(c.class_phrase) || q == to_lower(c.class_id))
      return knowledge_text_for_class(c, KnowledgeMode::kEnriched);
  return generic_knowledge(prompt.query);
}

}  // namespace opensep
