#pragma once

// Concept/attribute extraction from prompts and alignment of word spans to
// text-encoder token positions.

#include "spd/errors.hpp"

#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace spd {

/// Half-open character range [begin, end) into the prompt text.
struct CharRange {
  int begin = 0;
  int end = 0;

  bool empty() const { return end <= begin; }
  bool intersects(CharRange o) const { return begin < o.end && o.begin < end; }
  bool operator==(const CharRange&) const = default;
};

/// Half-open run of token indices [start, end). Before map_to_tokens the
/// indices count words; afterwards they count encoder tokens.
struct TokenSpan {
  int start = 0;
  int end = 0;
  std::string surface;
  CharRange chars;

  int size() const { return end - start; }
  bool contains(int token) const { return token >= start && token < end; }
  bool operator==(const TokenSpan&) const = default;
};

struct ConceptSpan {
  int index = 0;  // 1-based k
  TokenSpan noun;
  std::vector<TokenSpan> attributes;

  /// Concept and attribute token indices, ascending.
  std::vector<int> token_indices() const;
  bool operator==(const ConceptSpan&) const = default;
};

struct ParsedPrompt {
  std::string raw;
  std::vector<ConceptSpan> concepts;
  int token_count = 0;
  std::set<int> special_token_indices;

  /// Throws AlignmentError when a span invariant is broken.
  void validate() const;
};

/// One encoder token. Special tokens (start/end of sequence, padding) carry
/// an empty character range.
struct Token {
  int id = 0;
  CharRange chars;
  bool special = false;
};

enum class Template { CC500, Wearing100, Animals100 };

std::string_view template_name(Template t);
std::optional<Template> template_from_name(std::string_view name);

/// Word-level lexing: runs of letters/digits (with inner ' or -) and single
/// punctuation characters.
struct Word {
  std::string text;
  CharRange chars;
  bool punctuation = false;
};
std::vector<Word> split_words(std::string_view text);

/// Parse a prompt under one of the benchmark grammars:
///   CC500       a [color] [obj] and a [color] [obj]
///   Wearing100  a man/woman, [c1] [cl1], [c2] [cl2], [c3] [cl3], [c4] [cl4]
///   Animals100  a [color] [clothing] [animal] and [color] [clothing] [animal]
/// Multi-word colours ("light blue") become one attribute span. Indices in
/// the result are word indices.
ParsedPrompt parse_template(std::string_view prompt, Template grammar);

/// Best-effort extraction for prompts outside the benchmark grammars.
class ConceptParser {
 public:
  virtual ~ConceptParser() = default;
  virtual ParsedPrompt parse(std::string_view prompt) const = 0;
};

/// Lexicon-driven noun-chunk heuristic. A chunk is a maximal run of content
/// words between determiners, conjunctions, prepositions, verbs and
/// punctuation; its last word is the head, earlier words its modifiers.
class HeuristicChunker final : public ConceptParser {
 public:
  ParsedPrompt parse(std::string_view prompt) const override;
};

/// Template parse when any grammar matches, otherwise `fallback` (the
/// heuristic chunker by default).
ParsedPrompt parse_freeform(std::string_view prompt, const ConceptParser* fallback = nullptr);

/// Re-index word spans onto encoder tokens. A span covers every token whose
/// character range intersects it. Throws AlignmentError when a concept or
/// attribute has no covering token.
ParsedPrompt map_to_tokens(const ParsedPrompt& parsed, std::span<const Token> tokens);

/// Word-level tokenization (one token per word, no specials).
std::vector<Token> word_tokens(std::string_view prompt);

/// Gold annotation record: {"prompt", "concepts": [{"surface", "attributes": [...]}]}.
struct GoldConcept {
  std::string surface;
  std::vector<std::string> attributes;
  bool operator==(const GoldConcept&) const = default;
};
struct GoldAnnotation {
  std::string prompt;
  std::vector<GoldConcept> concepts;
};

std::vector<GoldConcept> surfaces_of(const ParsedPrompt& parsed);
std::vector<GoldAnnotation> read_gold_annotations(const std::string& path);
void write_gold_annotations(const std::string& path, std::span<const GoldAnnotation> records);

}  // namespace spd
