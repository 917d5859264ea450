// lexicon.hpp: object-mention extraction from captions.
//
// A Lexicon maps lowercased surface forms (including multi-word ones) to
// canonical categories. Extraction tokenizes the caption, applies
// longest-match-wins over surface forms with plural normalization on lookup,
// and records word / sentence positions for every mention.

#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "capval/errors.hpp"

namespace capval {

using json = nlohmann::json;

enum class LexiconProvenance { predefined, offline_built };

inline const char* to_string(LexiconProvenance p) {
  return p == LexiconProvenance::predefined ? "predefined" : "offline_built";
}

struct Lexicon {
  std::set<std::string> canonical_categories;
  std::map<std::string, std::string> surface_map;  // lowercased surface -> category
  LexiconProvenance provenance = LexiconProvenance::predefined;
  int max_surface_words = 1;

  void add_surface(const std::string& surface, const std::string& category) {
    if (surface.empty()) throw ParseError("empty surface form");
    auto [it, inserted] = surface_map.emplace(surface, category);
    if (!inserted && it->second != category) {
      throw ParseError("duplicate surface form '" + surface + "' maps to both '" + it->second +
                       "' and '" + category + "'");
    }
    int words = 1 + static_cast<int>(std::count(surface.begin(), surface.end(), ' '));
    max_surface_words = std::max(max_surface_words, words);
  }

  const std::string* lookup(const std::string& surface) const {
    auto it = surface_map.find(surface);
    return it == surface_map.end() ? nullptr : &it->second;
  }
};

struct Sentence {
  int index = 0;
  std::size_t start = 0;  // char span into the caption, [start, end)
  std::size_t end = 0;
  std::string text;
};

struct WordToken {
  std::string raw;   // as written, edge punctuation stripped
  std::string norm;  // lowercased raw
  std::size_t char_start = 0;
  int word_index = 0;
  int sentence_index = 0;
};

struct ObjectMention {
  std::string surface;  // matched text as written in the caption
  std::string canonical;
  int caption_index = 0;
  int sentence_index = 0;
  int word_position = 0;           // index of the mention's first word
  double relative_position = 0.0;  // word_position / caption word count
};

// ---------------------------------------------------------------------------
// Plural normalization: irregular table, then "es"/"s" stripping. Lookup
// order is exact first, so lexicon entries like "glasses" win over stripping.
// ---------------------------------------------------------------------------

inline const std::map<std::string, std::string>& irregular_plurals() {
  static const std::map<std::string, std::string> table = {
      {"people", "person"}, {"men", "man"},     {"women", "woman"},  {"children", "child"},
      {"mice", "mouse"},    {"geese", "goose"}, {"feet", "foot"},    {"teeth", "tooth"},
      {"leaves", "leaf"},   {"knives", "knife"}, {"wolves", "wolf"}, {"shelves", "shelf"},
      {"loaves", "loaf"},   {"scarves", "scarf"}, {"calves", "calf"},
  };
  return table;
}

// Candidate singular forms of a word, most specific first.
inline std::vector<std::string> singular_candidates(const std::string& word) {
  std::vector<std::string> out{word};
  auto it = irregular_plurals().find(word);
  if (it != irregular_plurals().end()) out.push_back(it->second);
  if (word.size() > 3 && word.ends_with("es")) out.push_back(word.substr(0, word.size() - 2));
  if (word.size() > 2 && word.ends_with("s") && !word.ends_with("ss")) {
    out.push_back(word.substr(0, word.size() - 1));
  }
  return out;
}

// Best-effort singular form without a lexicon to consult (offline counting).
inline std::string blind_singular(const std::string& word) {
  auto it = irregular_plurals().find(word);
  if (it != irregular_plurals().end()) return it->second;
  for (const char* suffix : {"ses", "xes", "zes", "ches", "shes"}) {
    if (word.size() > std::char_traits<char>::length(suffix) && word.ends_with(suffix)) {
      return word.substr(0, word.size() - 2);
    }
  }
  if (word.size() > 2 && word.ends_with("s") && !word.ends_with("ss")) {
    return word.substr(0, word.size() - 1);
  }
  return word;
}

// ---------------------------------------------------------------------------
// Sentence segmentation: split on . ! ? followed by whitespace or end, with
// an abbreviation stop-list and an initials rule. Spans tile the caption's
// non-whitespace text.
// ---------------------------------------------------------------------------

inline bool is_abbreviation(const std::string& word_before_dot) {
  static const std::set<std::string> kStopList = {"mr",  "mrs", "ms",  "dr",  "prof", "sr",
                                                  "jr",  "st",  "vs",  "fig", "no",   "etc",
                                                  "e.g", "i.e", "inc", "ltd"};
  std::string lower;
  for (char c : word_before_dot) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (kStopList.count(lower)) return true;
  // Single-letter initials such as "J."
  if (lower.size() == 1 && std::isalpha(static_cast<unsigned char>(lower[0]))) return true;
  return false;
}

inline std::vector<Sentence> segment_sentences(const std::string& caption) {
  std::vector<Sentence> sentences;
  const std::size_t n = caption.size();
  auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  auto is_term = [](char c) { return c == '.' || c == '!' || c == '?'; };

  std::size_t i = 0;
  while (i < n) {
    while (i < n && is_ws(caption[i])) ++i;
    if (i >= n) break;
    const std::size_t start = i;
    std::size_t end = n;

    for (std::size_t j = i; j < n; ++j) {
      if (!is_term(caption[j])) continue;
      if (caption[j] == '.') {
        // Word immediately before the dot, for the abbreviation check.
        std::size_t w = j;
        while (w > start && !is_ws(caption[w - 1])) --w;
        std::string before = caption.substr(w, j - w);
        if (is_abbreviation(before)) continue;
        if (j + 1 < n && std::isdigit(static_cast<unsigned char>(caption[j + 1]))) continue;
      }
      std::size_t k = j;
      while (k + 1 < n && is_term(caption[k + 1])) ++k;  // group "?!" and "..."
      while (k + 1 < n && (caption[k + 1] == '"' || caption[k + 1] == '\'' ||
                           caption[k + 1] == ')' || caption[k + 1] == ']')) {
        ++k;
      }
      if (k + 1 >= n || is_ws(caption[k + 1])) {
        end = k + 1;
        break;
      }
      j = k;
    }

    Sentence s;
    s.index = static_cast<int>(sentences.size());
    s.start = start;
    s.end = end;
    // Trim trailing whitespace so spans cover only non-whitespace text.
    while (s.end > s.start && is_ws(caption[s.end - 1])) --s.end;
    s.text = caption.substr(s.start, s.end - s.start);
    sentences.push_back(std::move(s));
    i = end;
  }
  return sentences;
}

// ---------------------------------------------------------------------------
// Word tokenization: whitespace split, edge punctuation stripped, lowercased
// norm, with sentence indices assigned by char offset.
// ---------------------------------------------------------------------------

inline std::vector<WordToken> tokenize_words(const std::string& caption) {
  const std::vector<Sentence> sentences = segment_sentences(caption);
  std::vector<WordToken> tokens;
  const std::size_t n = caption.size();
  auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  auto is_word_char = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '\'' || c == '-';
  };

  std::size_t i = 0;
  int word_index = 0;
  int sentence_cursor = 0;
  while (i < n) {
    while (i < n && is_ws(caption[i])) ++i;
    if (i >= n) break;
    std::size_t end = i;
    while (end < n && !is_ws(caption[end])) ++end;

    std::size_t a = i, b = end;
    while (a < b && !is_word_char(caption[a])) ++a;
    while (b > a && !is_word_char(caption[b - 1])) --b;

    WordToken t;
    t.raw = caption.substr(a, b - a);
    for (char c : t.raw) t.norm += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (t.norm.ends_with("'s")) t.norm.resize(t.norm.size() - 2);
    if (t.norm.ends_with("'")) t.norm.resize(t.norm.size() - 1);
    t.char_start = a < b ? a : i;
    t.word_index = word_index++;
    while (sentence_cursor + 1 < static_cast<int>(sentences.size()) &&
           t.char_start >= sentences[static_cast<std::size_t>(sentence_cursor)].end) {
      ++sentence_cursor;
    }
    t.sentence_index = sentences.empty() ? 0 : sentence_cursor;
    tokens.push_back(std::move(t));
    i = end;
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Rule-based extraction: longest-match-wins over surface forms, left to
// right, plural normalization applied to the final word of each candidate.
// All occurrences are returned; scoring-time deduplication happens in the
// verifier.
// ---------------------------------------------------------------------------

inline std::vector<ObjectMention> extract_objects(const std::string& caption,
                                                  const Lexicon& lexicon) {
  const std::vector<WordToken> tokens = tokenize_words(caption);
  const int word_count = static_cast<int>(tokens.size());
  std::vector<ObjectMention> mentions;

  for (std::size_t i = 0; i < tokens.size();) {
    bool matched = false;
    const int max_span = std::min<int>(lexicon.max_surface_words,
                                       static_cast<int>(tokens.size() - i));
    for (int span = max_span; span >= 1 && !matched; --span) {
      const WordToken& last = tokens[i + static_cast<std::size_t>(span) - 1];
      if (last.norm.empty() || tokens[i].norm.empty()) continue;
      std::string head;
      for (int w = 0; w < span - 1; ++w) {
        head += tokens[i + static_cast<std::size_t>(w)].norm;
        head += ' ';
      }
      for (const std::string& last_form : singular_candidates(last.norm)) {
        const std::string* category = lexicon.lookup(head + last_form);
        if (!category) continue;
        ObjectMention m;
        std::string surface;
        for (int w = 0; w < span; ++w) {
          if (w) surface += ' ';
          surface += tokens[i + static_cast<std::size_t>(w)].raw;
        }
        m.surface = std::move(surface);
        m.canonical = *category;
        m.sentence_index = tokens[i].sentence_index;
        m.word_position = tokens[i].word_index;
        m.relative_position =
            word_count > 0 ? static_cast<double>(m.word_position) / word_count : 0.0;
        mentions.push_back(std::move(m));
        i += static_cast<std::size_t>(span);
        matched = true;
        break;
      }
    }
    if (!matched) ++i;
  }
  return mentions;
}

// ---------------------------------------------------------------------------
// Lexicon file: JSON {"categories": [...], "synonyms": {"surface": category}}.
// Every category is implicitly a surface form of itself.
// ---------------------------------------------------------------------------

inline Lexicon lexicon_from_json(const json& j, LexiconProvenance provenance) {
  Lexicon lex;
  lex.provenance = provenance;
  if (!j.contains("categories") || !j.at("categories").is_array() || j.at("categories").empty()) {
    throw ParseError("lexicon needs a non-empty 'categories' array");
  }
  for (const auto& c : j.at("categories")) {
    lex.canonical_categories.insert(c.get<std::string>());
  }
  for (const auto& c : lex.canonical_categories) lex.add_surface(c, c);
  const json synonyms = j.value("synonyms", json::object());
  for (const auto& [surface, category] : synonyms.items()) {
    const std::string cat = category.get<std::string>();
    if (!lex.canonical_categories.count(cat)) {
      throw ParseError("orphan synonym '" + surface + "' maps to unknown category '" + cat + "'");
    }
    std::string lower;
    for (char ch : surface) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    lex.add_surface(lower, cat);
  }
  return lex;
}

inline Lexicon load_lexicon(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open lexicon file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("lexicon file " + path + " does not parse: " + e.what());
  }
  return lexicon_from_json(j, LexiconProvenance::predefined);
}

inline json to_json(const Lexicon& lex) {
  json categories = json::array();
  for (const auto& c : lex.canonical_categories) categories.push_back(c);
  json synonyms = json::object();
  for (const auto& [surface, category] : lex.surface_map) {
    if (surface != category) synonyms[surface] = category;
  }
  return json{{"categories", categories}, {"synonyms", synonyms}};
}

inline json to_json(const ObjectMention& m) {
  return json{{"surface", m.surface},
              {"canonical", m.canonical},
              {"caption_index", m.caption_index},
              {"sentence_index", m.sentence_index},
              {"word_position", m.word_position},
              {"relative_position", m.relative_position}};
}

inline ObjectMention mention_from_json(const json& j) {
  ObjectMention m;
  m.surface = j.at("surface").get<std::string>();
  m.canonical = j.at("canonical").get<std::string>();
  m.caption_index = j.value("caption_index", 0);
  m.sentence_index = j.value("sentence_index", 0);
  m.word_position = j.value("word_position", 0);
  m.relative_position = j.value("relative_position", 0.0);
  return m;
}

}  // namespace capval
