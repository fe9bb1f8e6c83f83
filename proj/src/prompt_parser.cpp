#include "spd/prompt_parser.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <unordered_set>

namespace spd {

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Span over words [first, last] (inclusive) in word-index space.
TokenSpan word_span(std::string_view text, const std::vector<Word>& words, std::size_t first,
                    std::size_t last) {
  TokenSpan s;
  s.start = static_cast<int>(first);
  s.end = static_cast<int>(last) + 1;
  s.chars = {words[first].chars.begin, words[last].chars.end};
  s.surface = std::string(text.substr(s.chars.begin, s.chars.end - s.chars.begin));
  return s;
}

bool is_function_word(const std::string& lowered);
bool is_shade_modifier(const std::string& lowered);

class WordCursor {
 public:
  WordCursor(std::string_view text, const std::vector<Word>& words, std::string_view grammar)
      : text_(text), words_(words), grammar_(grammar) {}

  bool done() const { return pos_ >= words_.size(); }
  std::size_t pos() const { return pos_; }
  const Word& peek() const { return words_[pos_]; }

  [[noreturn]] void fail(std::string_view expected) const { fail_at(pos_, expected); }

  [[noreturn]] void fail_at(std::size_t word, std::string_view expected) const {
    const bool end = word >= words_.size();
    const std::size_t at = end ? text_.size() : static_cast<std::size_t>(words_[word].chars.begin);
    std::string got = end ? "end of prompt" : "'" + words_[word].text + "'";
    throw TemplateMismatch(std::string(grammar_) + ": expected " + std::string(expected) + ", got " + got,
                           at);
  }

  void expect_any(std::initializer_list<std::string_view> options, std::string_view what) {
    if (done()) fail(what);
    const std::string w = lower(peek().text);
    for (auto o : options)
      if (w == o) {
        ++pos_;
        return;
      }
    fail(what);
  }

  bool accept(std::string_view word) {
    if (!done() && lower(peek().text) == word) {
      ++pos_;
      return true;
    }
    return false;
  }

  // Consume content words up to (not including) a stop word / punctuation.
  std::pair<std::size_t, std::size_t> content_run(std::string_view stop_word) {
    const std::size_t first = pos_;
    while (!done() && !peek().punctuation) {
      const std::string w = lower(peek().text);
      if (w == stop_word || is_function_word(w)) break;
      ++pos_;
    }
    return {first, pos_};
  }

  void expect_end() {
    if (!done()) fail("end of prompt");
  }

 private:
  std::string_view text_;
  const std::vector<Word>& words_;
  std::string_view grammar_;
  std::size_t pos_ = 0;
};

// "[color...] [noun]" or "[color...] [clothing] [noun]" over words [first, last).
ConceptSpan group_concept(std::string_view text, const std::vector<Word>& words, std::size_t first,
                          std::size_t last, int trailing_attributes, WordCursor& cursor,
                          std::string_view what) {
  const std::size_t needed = static_cast<std::size_t>(trailing_attributes) + 2;
  if (last < first + needed) cursor.fail(what);
  ConceptSpan c;
  c.noun = word_span(text, words, last - 1, last - 1);
  const std::size_t colour_end = last - 1 - trailing_attributes;
  // a colour is one word, optionally preceded by a shade ("light blue")
  if (colour_end - first > 2 || (colour_end - first == 2 && !is_shade_modifier(lower(words[first].text)))) {
    cursor.fail_at(first + 1, what);
  }
  c.attributes.push_back(word_span(text, words, first, colour_end - 1));
  for (std::size_t w = colour_end; w < last - 1; ++w) c.attributes.push_back(word_span(text, words, w, w));
  return c;
}

ParsedPrompt finish(std::string_view prompt, const std::vector<Word>& words,
                    std::vector<ConceptSpan> concepts) {
  ParsedPrompt p;
  p.raw = std::string(prompt);
  p.token_count = static_cast<int>(words.size());
  for (std::size_t k = 0; k < concepts.size(); ++k) concepts[k].index = static_cast<int>(k) + 1;
  p.concepts = std::move(concepts);
  return p;
}

const std::unordered_set<std::string>& determiners() {
  static const std::unordered_set<std::string> s{
      "a",     "an",   "the",  "some",  "this",    "that",  "these",   "those", "my",
      "his",   "her",  "its",  "their", "our",     "your",  "one",     "two",   "three",
      "four",  "five", "six",  "seven", "several", "many",  "each",    "every", "another",
      "any",   "no",   "few",  "both",  "all"};
  return s;
}

const std::unordered_set<std::string>& breakers() {
  static const std::unordered_set<std::string> s{
      // conjunctions
      "and", "or", "but", "nor", "while", "as",
      // prepositions
      "of", "in", "on", "at", "with", "by", "near", "under", "over", "beside", "behind", "next",
      "to", "from", "into", "onto", "above", "below", "between", "across", "through", "against",
      "inside", "outside", "around", "for", "beneath", "among", "along", "without", "within",
      // verbs and auxiliaries
      "is", "are", "was", "were", "be", "been", "has", "have", "had", "wears", "holds", "sits",
      "stands", "looks", "eats", "rides", "who", "which", "there"};
  return s;
}

// -ing words that are usually nouns.
const std::unordered_set<std::string>& ing_nouns() {
  static const std::unordered_set<std::string> s{
      "clothing", "building", "painting", "drawing", "ring", "king", "wing", "thing", "string",
      "ceiling", "pudding", "evening", "morning", "earring", "swing", "spring", "sibling",
      "duckling", "wedding", "stocking", "frosting", "icing", "lightning", "dumpling", "railing"};
  return s;
}

const std::unordered_set<std::string>& shade_modifiers() {
  static const std::unordered_set<std::string> s{"light", "dark", "pale", "bright", "deep", "hot", "pastel"};
  return s;
}

bool is_function_word(const std::string& lowered) {
  return determiners().contains(lowered) || breakers().contains(lowered);
}

bool is_shade_modifier(const std::string& lowered) { return shade_modifiers().contains(lowered); }

bool is_breaker(const Word& w) {
  if (w.punctuation) return true;
  const std::string l = lower(w.text);
  if (determiners().contains(l) || breakers().contains(l)) return true;
  return l.size() > 4 && l.ends_with("ing") && !ing_nouns().contains(l);
}

}  // namespace

std::vector<int> ConceptSpan::token_indices() const {
  std::vector<int> out;
  for (int t = noun.start; t < noun.end; ++t) out.push_back(t);
  for (const auto& a : attributes)
    for (int t = a.start; t < a.end; ++t) out.push_back(t);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void ParsedPrompt::validate() const {
  std::vector<int> owner(static_cast<std::size_t>(std::max(token_count, 0)), 0);
  auto check_span = [&](const TokenSpan& s, int k) {
    if (s.start < 0 || s.start >= s.end || s.end > token_count) {
      throw AlignmentError("span '" + s.surface + "' [" + std::to_string(s.start) + "," +
                           std::to_string(s.end) + ") outside token count " + std::to_string(token_count));
    }
    for (int t = s.start; t < s.end; ++t) {
      if (special_token_indices.contains(t)) {
        throw AlignmentError("span '" + s.surface + "' covers special token " + std::to_string(t));
      }
      if (owner[t] != 0 && owner[t] != k) {
        throw AlignmentError("token " + std::to_string(t) + " belongs to concepts " +
                             std::to_string(owner[t]) + " and " + std::to_string(k));
      }
      owner[t] = k;
    }
  };
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    const auto& c = concepts[i];
    if (c.index != static_cast<int>(i) + 1) throw AlignmentError("concept indices must be 1..n in order");
    check_span(c.noun, c.index);
    for (const auto& a : c.attributes) {
      if (a.start < c.noun.end && c.noun.start < a.end) {
        throw AlignmentError("attribute '" + a.surface + "' overlaps its concept");
      }
      check_span(a, c.index);
    }
  }
}

std::string_view template_name(Template t) {
  switch (t) {
    case Template::CC500: return "CC500";
    case Template::Wearing100: return "Wearing100";
    case Template::Animals100: return "Animals100";
  }
  return "?";
}

std::optional<Template> template_from_name(std::string_view name) {
  const std::string l = lower(name);
  if (l == "cc500" || l == "cc-500") return Template::CC500;
  if (l == "wearing100" || l == "wearing-100") return Template::Wearing100;
  if (l == "animals100" || l == "animals-100") return Template::Animals100;
  return std::nullopt;
}

std::vector<Word> split_words(std::string_view text) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (is_word_char(c)) {
      std::size_t j = i + 1;
      while (j < text.size() &&
             (is_word_char(text[j]) ||
              ((text[j] == '\'' || text[j] == '-') && j + 1 < text.size() && is_word_char(text[j + 1]))))
        ++j;
      words.push_back({std::string(text.substr(i, j - i)), {int(i), int(j)}, false});
      i = j;
    } else {
      words.push_back({std::string(1, c), {int(i), int(i + 1)}, true});
      ++i;
    }
  }
  return words;
}

ParsedPrompt parse_template(std::string_view prompt, Template grammar) {
  const auto words = split_words(prompt);
  WordCursor cur(prompt, words, template_name(grammar));
  std::vector<ConceptSpan> concepts;

  switch (grammar) {
    case Template::CC500: {
      for (int part = 0; part < 2; ++part) {
        cur.expect_any({"a", "an"}, "article 'a'");
        auto [first, last] = cur.content_run("and");
        concepts.push_back(group_concept(prompt, words, first, last, 0, cur, "[color] [object]"));
        if (part == 0) cur.expect_any({"and"}, "'and'");
      }
      cur.expect_end();
      break;
    }
    case Template::Wearing100: {
      cur.expect_any({"a", "an"}, "article 'a'");
      if (cur.done() || cur.peek().punctuation) cur.fail("person noun");
      cur.content_run("");
      if (cur.pos() != 2) cur.fail("','");  // exactly one person word
      for (int item = 0; item < 4; ++item) {
        cur.expect_any({","}, "','");
        auto [first, last] = cur.content_run("");
        concepts.push_back(group_concept(prompt, words, first, last, 0, cur, "[color] [clothing]"));
      }
      cur.expect_end();
      break;
    }
    case Template::Animals100: {
      cur.expect_any({"a", "an"}, "article 'a'");
      for (int part = 0; part < 2; ++part) {
        if (part == 1) {
          cur.expect_any({"and"}, "'and'");
          if (!cur.accept("a")) cur.accept("an");
        }
        auto [first, last] = cur.content_run("and");
        concepts.push_back(
            group_concept(prompt, words, first, last, 1, cur, "[color] [clothing] [animal]"));
      }
      cur.expect_end();
      break;
    }
  }
  return finish(prompt, words, std::move(concepts));
}

ParsedPrompt HeuristicChunker::parse(std::string_view prompt) const {
  const auto words = split_words(prompt);
  std::vector<ConceptSpan> concepts;
  std::size_t i = 0;
  while (i < words.size()) {
    if (is_breaker(words[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < words.size() && !is_breaker(words[j])) ++j;
    // chunk is words [i, j); head is the last word
    ConceptSpan c;
    c.noun = word_span(prompt, words, j - 1, j - 1);
    std::size_t m = i;
    while (m + 1 < j) {
      const bool shade = shade_modifiers().contains(lower(words[m].text)) && m + 2 < j;
      const std::size_t end = shade ? m + 1 : m;
      c.attributes.push_back(word_span(prompt, words, m, end));
      m = end + 1;
    }
    concepts.push_back(std::move(c));
    i = j;
  }
  return finish(prompt, words, std::move(concepts));
}

ParsedPrompt parse_freeform(std::string_view prompt, const ConceptParser* fallback) {
  for (Template t : {Template::CC500, Template::Wearing100, Template::Animals100}) {
    try {
      return parse_template(prompt, t);
    } catch (const TemplateMismatch&) {
    }
  }
  static const HeuristicChunker chunker;
  return (fallback ? *fallback : static_cast<const ConceptParser&>(chunker)).parse(prompt);
}

ParsedPrompt map_to_tokens(const ParsedPrompt& parsed, std::span<const Token> tokens) {
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const auto& prev = tokens[i - 1].chars;
    const auto& cur = tokens[i].chars;
    if (!prev.empty() && !cur.empty() && cur.begin < prev.end) {
      throw AlignmentError("tokenization char ranges overlap or are unsorted at token " +
                           std::to_string(i));
    }
  }
  auto remap = [&](const TokenSpan& s) {
    int first = -1, last = -1;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (tokens[t].special || tokens[t].chars.empty()) continue;
      if (tokens[t].chars.intersects(s.chars)) {
        if (first < 0) first = static_cast<int>(t);
        last = static_cast<int>(t);
      }
    }
    if (first < 0) throw AlignmentError("no token covers '" + s.surface + "'");
    TokenSpan out = s;
    out.start = first;
    out.end = last + 1;
    return out;
  };

  ParsedPrompt out;
  out.raw = parsed.raw;
  out.token_count = static_cast<int>(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t)
    if (tokens[t].special) out.special_token_indices.insert(static_cast<int>(t));
  for (const auto& c : parsed.concepts) {
    ConceptSpan m;
    m.index = c.index;
    m.noun = remap(c.noun);
    for (const auto& a : c.attributes) m.attributes.push_back(remap(a));
    out.concepts.push_back(std::move(m));
  }
  out.validate();
  return out;
}

std::vector<Token> word_tokens(std::string_view prompt) {
  std::vector<Token> out;
  const auto words = split_words(prompt);
  for (std::size_t i = 0; i < words.size(); ++i) out.push_back({static_cast<int>(i), words[i].chars, false});
  return out;
}

std::vector<GoldConcept> surfaces_of(const ParsedPrompt& parsed) {
  std::vector<GoldConcept> out;
  for (const auto& c : parsed.concepts) {
    GoldConcept g{c.noun.surface, {}};
    for (const auto& a : c.attributes) g.attributes.push_back(a.surface);
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<GoldAnnotation> read_gold_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open gold annotation file " + path);
  std::vector<GoldAnnotation> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GoldAnnotation g;
      g.prompt = j.at("prompt").get<std::string>();
      for (const auto& c : j.at("concepts")) {
        g.concepts.push_back(
            {c.at("surface").get<std::string>(), c.at("attributes").get<std::vector<std::string>>()});
      }
      out.push_back(std::move(g));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_gold_annotations(const std::string& path, std::span<const GoldAnnotation> records) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  for (const auto& g : records) {
    nlohmann::json concepts = nlohmann::json::array();
    for (const auto& c : g.concepts) concepts.push_back({{"surface", c.surface}, {"attributes", c.attributes}});
    out << nlohmann::json{{"prompt", g.prompt}, {"concepts", concepts}}.dump() << '\n';
  }
}

}  // namespace spd
