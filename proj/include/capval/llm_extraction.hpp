// llm_extraction.hpp: model-assisted object extraction.
//
// Two modes beyond the predefined lexicon: offline builds a frequency-ranked
// noun lexicon from a caption corpus ahead of time; online asks the model to
// extract objects from one caption during testing. Both share a few-shot
// prompt template with a {caption} placeholder.

#pragma once

#include <map>

#include "capval/backend.hpp"
#include "capval/lexicon.hpp"

namespace capval {

// Reconstructed few-shot template; override via file or flag when the target
// model needs different phrasing.
inline const char* default_extraction_template() {
  return
      "Extract every object noun mentioned in the caption. Reply with one line that starts "
      "with \"Objects:\" followed by the nouns, comma-separated, lowercase, singular.\n"
      "\n"
      "Caption: A man riding a horse on the beach.\n"
      "Objects: man, horse, beach\n"
      "\n"
      "Caption: Two cats sleep on a red couch near a window.\n"
      "Objects: cat, couch, window\n"
      "\n"
      "Caption: {caption}\n"
      "Objects:";
}

inline std::string render_template(const std::string& tmpl, const std::string& placeholder,
                                   const std::string& value) {
  std::string out = tmpl;
  const std::string token = "{" + placeholder + "}";
  std::size_t pos = 0;
  while ((pos = out.find(token, pos)) != std::string::npos) {
    out.replace(pos, token.size(), value);
    pos += value.size();
  }
  return out;
}

// Parses a delimited noun list out of an extraction reply. Accepts replies
// with or without the "Objects:" marker; returns lowercase entries.
inline std::vector<std::string> parse_noun_list(const std::string& reply) {
  std::string body = reply;
  const std::size_t marker = body.rfind("Objects:");
  if (marker != std::string::npos) body = body.substr(marker + 8);
  const std::size_t newline = body.find('\n');
  if (newline != std::string::npos) body = body.substr(0, newline);

  std::vector<std::string> nouns;
  std::string current;
  auto flush = [&] {
    std::size_t a = 0, b = current.size();
    while (a < b && !std::isalpha(static_cast<unsigned char>(current[a]))) ++a;
    while (b > a && !std::isalnum(static_cast<unsigned char>(current[b - 1]))) --b;
    std::string noun;
    for (std::size_t i = a; i < b; ++i) {
      noun += static_cast<char>(std::tolower(static_cast<unsigned char>(current[i])));
    }
    bool ok = !noun.empty();
    for (char c : noun) {
      if (!std::isalpha(static_cast<unsigned char>(c)) && c != ' ' && c != '-' && c != '\'') {
        ok = false;
      }
    }
    if (ok) nouns.push_back(noun);
    current.clear();
  };
  for (char c : body) {
    if (c == ',' || c == ';') {
      flush();
    } else {
      current += c;
    }
  }
  flush();
  return nouns;
}

inline PromptContext extraction_context(const std::string& tmpl, const std::string& caption) {
  PromptContext ctx;
  ctx.user_text = render_template(tmpl, "caption", caption);
  ctx.params.temperature = 0.0;
  ctx.params.max_new_tokens = 128;
  ctx.params.top_logprobs = 1;
  return ctx;
}

struct OfflineBuildStats {
  int captions_processed = 0;
  int unparseable_replies = 0;
};

// Frequency-ranked lexicon from a caption corpus: prompt per caption, count
// normalized nouns, keep the top_n most common with identity canonical
// mapping. Ties break lexicographically so builds are reproducible.
inline Lexicon build_offline_lexicon(const std::vector<std::string>& captions, Backend& backend,
                                     int top_n,
                                     const std::string& tmpl = default_extraction_template(),
                                     OfflineBuildStats* stats = nullptr) {
  if (captions.empty()) throw ConfigError("build_offline_lexicon needs at least one caption");
  if (top_n < 1) throw ConfigError("top_n must be >= 1");

  std::map<std::string, long> counts;
  OfflineBuildStats local;
  for (const auto& caption : captions) {
    const GenerationResult reply = backend.generate(extraction_context(tmpl, caption));
    const std::vector<std::string> nouns = parse_noun_list(reply.text);
    ++local.captions_processed;
    if (nouns.empty()) {
      ++local.unparseable_replies;
      continue;
    }
    for (const auto& noun : nouns) counts[blind_singular(noun)]++;
  }
  if (stats) *stats = local;
  if (counts.empty()) {
    throw ParseError("offline lexicon build produced an empty lexicon (" +
                     std::to_string(local.unparseable_replies) + " unparseable replies)");
  }

  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (static_cast<int>(ranked.size()) > top_n) ranked.resize(static_cast<std::size_t>(top_n));

  Lexicon lex;
  lex.provenance = LexiconProvenance::offline_built;
  for (const auto& [noun, _] : ranked) {
    lex.canonical_categories.insert(noun);
    lex.add_surface(noun, noun);
  }
  return lex;
}

struct OnlineExtraction {
  std::vector<ObjectMention> mentions;
  bool parse_warning = false;  // reply was fully unparseable
  int dropped_nouns = 0;       // extracted nouns absent from the caption
};

// Per-caption extraction at test time. Each reported noun is located at its
// first occurrence in the caption to assign positions; nouns that do not
// occur are dropped.
inline OnlineExtraction extract_online(const std::string& caption, Backend& backend,
                                       const std::string& tmpl = default_extraction_template()) {
  OnlineExtraction result;
  const GenerationResult reply = backend.generate(extraction_context(tmpl, caption));
  const std::vector<std::string> nouns = parse_noun_list(reply.text);
  if (nouns.empty()) {
    result.parse_warning = true;
    return result;
  }

  const std::vector<WordToken> tokens = tokenize_words(caption);
  const int word_count = static_cast<int>(tokens.size());
  std::set<std::string> seen;
  for (const auto& noun : nouns) {
    if (!seen.insert(noun).second) continue;
    std::vector<std::string> noun_words;
    {
      std::string w;
      for (char c : noun + " ") {
        if (c == ' ') {
          if (!w.empty()) noun_words.push_back(blind_singular(w));
          w.clear();
        } else {
          w += c;
        }
      }
    }
    if (noun_words.empty()) continue;

    bool placed = false;
    for (std::size_t i = 0; i + noun_words.size() <= tokens.size() && !placed; ++i) {
      bool match = true;
      for (std::size_t w = 0; w < noun_words.size() && match; ++w) {
        match = blind_singular(tokens[i + w].norm) == noun_words[w];
      }
      if (!match) continue;
      ObjectMention m;
      std::string surface;
      for (std::size_t w = 0; w < noun_words.size(); ++w) {
        if (w) surface += ' ';
        surface += tokens[i + w].raw;
      }
      m.surface = std::move(surface);
      m.canonical = noun;
      m.sentence_index = tokens[i].sentence_index;
      m.word_position = tokens[i].word_index;
      m.relative_position =
          word_count > 0 ? static_cast<double>(m.word_position) / word_count : 0.0;
      result.mentions.push_back(std::move(m));
      placed = true;
    }
    if (!placed) ++result.dropped_nouns;
  }
  std::stable_sort(result.mentions.begin(), result.mentions.end(),
                   [](const ObjectMention& a, const ObjectMention& b) {
                     return a.word_position < b.word_position;
                   });
  return result;
}

}  // namespace capval
