// probe.hpp: per-token divergence between image-conditioned and text-only
// next-token distributions, rolled up to words and relative-position bins.
//
// Full-vocabulary distributions are not available over the wire, so both
// sides are reconstructed from their top-k logprob lists: union support,
// renormalize, then JSD in base 2 (values land in [0,1]).

#pragma once

#include "capval/lexicon.hpp"
#include "capval/metrics.hpp"
#include "capval/verifier.hpp"

namespace capval {

// ---------------------------------------------------------------------------
// Jensen-Shannon divergence over aligned supports.
// ---------------------------------------------------------------------------

inline void validate_distribution(const std::vector<double>& p, const char* name) {
  double sum = 0.0;
  for (double v : p) {
    if (v < 0.0 || !std::isfinite(v)) throw Error(std::string(name) + ": negative or non-finite mass");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw Error(std::string(name) + ": probabilities sum to " + std::to_string(sum) + ", not 1");
  }
}

inline double jsd(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw Error("jsd: distributions have different support sizes");
  validate_distribution(p, "p");
  validate_distribution(q, "q");
  auto kl_to_mixture = [&](const std::vector<double>& a) {
    double kl = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] <= 0.0) continue;  // zero-probability terms contribute 0
      const double m = (p[i] + q[i]) / 2.0;
      kl += a[i] * std::log2(a[i] / m);
    }
    return kl;
  };
  return 0.5 * kl_to_mixture(p) + 0.5 * kl_to_mixture(q);
}

// Aligns two top-k (token, logprob) lists on their token union and
// renormalizes each over it. When both lists already share a support that
// sums to 1, renormalization changes nothing.
inline double jsd_topk(const std::vector<TokenAlt>& a, const std::vector<TokenAlt>& b) {
  std::map<std::string, std::pair<double, double>> unioned;
  for (const auto& t : a) unioned[t.token].first += std::exp(t.logprob);
  for (const auto& t : b) unioned[t.token].second += std::exp(t.logprob);

  std::vector<double> p, q;
  double sp = 0.0, sq = 0.0;
  for (const auto& [_, masses] : unioned) {
    p.push_back(masses.first);
    q.push_back(masses.second);
    sp += masses.first;
    sq += masses.second;
  }
  if (sp <= 0.0 || sq <= 0.0) throw Error("jsd_topk: a top-k list carries no probability mass");
  for (auto& v : p) v /= sp;
  for (auto& v : q) v /= sq;
  return jsd(p, q);
}

// ---------------------------------------------------------------------------
// Caption probing.
// ---------------------------------------------------------------------------

struct TokenJsd {
  int token_index = 0;
  std::string token_text;
  double jsd = 0.0;
};

struct ProbeConfig {
  std::string prompt = default_captioning_prompt();
  int top_logprobs = 50;
  int top_k = 50;
};

inline PromptContext probe_step_context(const std::optional<ImageRef>& image,
                                        const ProbeConfig& config, const std::string& prefix) {
  PromptContext ctx;
  ctx.image = image;
  ctx.user_text = config.prompt;
  if (!prefix.empty()) ctx.assistant_prefix = prefix;
  ctx.params = scoring_params(config.top_logprobs, config.top_k);
  return ctx;
}

inline std::vector<TokenAlt> next_token_distribution(Backend& backend, const PromptContext& ctx) {
  const GenerationResult r = backend.generate(ctx);
  if (r.tokens.empty() || r.tokens.front().alternatives.empty()) {
    throw MalformedReplyError("probe step returned no token alternatives", r.text);
  }
  return r.tokens.front().alternatives;
}

// Walks the caption one backend token at a time. At each position the top-k
// list is fetched under both conditionings (with and without the image), the
// JSD of the two renormalized lists is recorded, and the walk advances by the
// longest alternative that prefixes the remaining caption text.
inline std::vector<TokenJsd> probe_caption(Backend& backend, const ImageRef& image,
                                           const std::string& caption,
                                           const ProbeConfig& config = {}) {
  const BackendDescriptor desc = backend.descriptor();
  if (!desc.supports_text_only) {
    throw CapabilityError("backend '" + desc.name + "' cannot drop the image conditioning");
  }
  if (!desc.supports_forced_decode) {
    throw CapabilityError("backend '" + desc.name + "' cannot condition on a forced prefix");
  }

  std::vector<TokenJsd> out;
  std::size_t consumed = 0;
  while (consumed < caption.size()) {
    const std::string prefix = caption.substr(0, consumed);
    const std::string remaining = caption.substr(consumed);

    const std::vector<TokenAlt> with_image =
        next_token_distribution(backend, probe_step_context(image, config, prefix));
    const std::vector<TokenAlt> text_only =
        next_token_distribution(backend, probe_step_context(std::nullopt, config, prefix));

    TokenJsd record;
    record.token_index = static_cast<int>(out.size());
    record.jsd = jsd_topk(with_image, text_only);

    // Advance: longest alternative from either list that matches the text.
    std::string advance;
    for (const auto* list : {&with_image, &text_only}) {
      for (const auto& alt : *list) {
        if (alt.token.size() > advance.size() && remaining.starts_with(alt.token)) {
          advance = alt.token;
        }
      }
    }
    if (advance.empty()) {
      throw Error("probe tokenization mismatch at offset " + std::to_string(consumed) +
                  ": no top-k alternative matches \"" + remaining.substr(0, 24) + "\"");
    }
    record.token_text = advance;
    consumed += advance.size();
    out.push_back(std::move(record));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Word-level rollup: a word takes the JSD of its first constituent token.
// ---------------------------------------------------------------------------

struct WordJsd {
  int word_index = 0;
  std::string word_text;
  double jsd = 0.0;
  double relative_position = 0.0;
  bool is_object = false;
  std::optional<bool> is_hallucinated;
};

inline std::vector<WordJsd> word_level(const std::vector<TokenJsd>& tokens,
                                       const std::string& caption, const Lexicon& lexicon,
                                       const GroundTruth* ground_truth = nullptr) {
  std::string joined;
  for (const auto& t : tokens) joined += t.token_text;
  if (joined != caption) {
    const std::size_t n = std::min(joined.size(), caption.size());
    std::size_t d = 0;
    while (d < n && joined[d] == caption[d]) ++d;
    throw Error("token texts do not reassemble the caption (diverge at offset " +
                std::to_string(d) + ", near \"" + caption.substr(d, 24) + "\")");
  }

  const std::vector<WordToken> words = tokenize_words(caption);
  const int word_count = static_cast<int>(words.size());
  std::vector<WordJsd> out;
  out.reserve(words.size());
  for (const auto& w : words) {
    WordJsd wj;
    wj.word_index = w.word_index;
    wj.word_text = w.raw;
    wj.relative_position = word_count > 0 ? static_cast<double>(w.word_index) / word_count : 0.0;
    out.push_back(std::move(wj));
  }

  // Word spans begin at each word's first character; a token belongs to the
  // word containing its first non-space character.
  auto word_at = [&](std::size_t char_pos) {
    int idx = 0;
    for (const auto& w : words) {
      if (w.char_start <= char_pos) {
        idx = w.word_index;
      } else {
        break;
      }
    }
    return idx;
  };

  std::vector<bool> word_seen(words.size(), false);
  std::size_t offset = 0;
  for (const auto& t : tokens) {
    std::size_t first_char = offset;
    while (first_char < offset + t.token_text.size() &&
           std::isspace(static_cast<unsigned char>(caption[first_char]))) {
      ++first_char;
    }
    if (first_char == offset + t.token_text.size()) first_char = offset;  // all-whitespace token
    if (!words.empty()) {
      const int w = word_at(first_char);
      if (!word_seen[static_cast<std::size_t>(w)]) {
        out[static_cast<std::size_t>(w)].jsd = t.jsd;  // first-token rule
        word_seen[static_cast<std::size_t>(w)] = true;
      }
    }
    offset += t.token_text.size();
  }

  for (const auto& mention : extract_objects(caption, lexicon)) {
    const int span_words = 1 + static_cast<int>(std::count(mention.surface.begin(),
                                                           mention.surface.end(), ' '));
    for (int w = mention.word_position; w < mention.word_position + span_words; ++w) {
      if (w < 0 || w >= word_count) continue;
      auto& wj = out[static_cast<std::size_t>(w)];
      wj.is_object = true;
      if (ground_truth) wj.is_hallucinated = !ground_truth->objects.count(mention.canonical);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Position-binned report over object words.
// ---------------------------------------------------------------------------

struct JsdBin {
  double lo = 0.0;
  double hi = 1.0;
  bool closed_lo = false;
  long total = 0;
  long labeled = 0;
  long hallucinated = 0;
  double jsd_sum = 0.0;

  std::optional<double> mean_jsd() const {
    if (total == 0) return std::nullopt;
    return jsd_sum / static_cast<double>(total);
  }
  std::optional<double> hallucination_rate() const {
    if (labeled == 0) return std::nullopt;
    return static_cast<double>(hallucinated) / static_cast<double>(labeled);
  }
};

struct JsdBinReport {
  std::vector<double> boundaries;
  std::vector<JsdBin> bins;
};

inline JsdBinReport bin_report(const std::vector<WordJsd>& words,
                               const std::vector<double>& boundaries = {0.2}) {
  const std::vector<PositionBin> shape = make_bins(boundaries);
  JsdBinReport report;
  report.boundaries = boundaries;
  for (const auto& b : shape) report.bins.push_back({b.lo, b.hi, b.closed_lo, 0, 0, 0, 0.0});
  for (const auto& w : words) {
    if (!w.is_object) continue;
    auto& bin = report.bins[static_cast<std::size_t>(bin_index(w.relative_position, shape))];
    ++bin.total;
    bin.jsd_sum += w.jsd;
    if (w.is_hallucinated.has_value()) {
      ++bin.labeled;
      if (*w.is_hallucinated) ++bin.hallucinated;
    }
  }
  return report;
}

inline json to_json(const std::vector<TokenJsd>& tokens) {
  json arr = json::array();
  for (const auto& t : tokens) {
    arr.push_back({{"token_index", t.token_index}, {"token", t.token_text}, {"jsd", t.jsd}});
  }
  return arr;
}

inline json to_json(const std::vector<WordJsd>& words) {
  json arr = json::array();
  for (const auto& w : words) {
    json j{{"word_index", w.word_index},
           {"word", w.word_text},
           {"jsd", w.jsd},
           {"relative_position", w.relative_position},
           {"is_object", w.is_object}};
    if (w.is_hallucinated) j["is_hallucinated"] = *w.is_hallucinated;
    arr.push_back(std::move(j));
  }
  return arr;
}

inline json to_json(const JsdBinReport& r) {
  json bins = json::array();
  for (const auto& b : r.bins) {
    json j{{"lo", b.lo},
           {"hi", b.hi},
           {"closed_lo", b.closed_lo},
           {"total", b.total},
           {"labeled", b.labeled},
           {"hallucinated", b.hallucinated}};
    if (auto m = b.mean_jsd()) j["mean_jsd"] = *m;
    if (auto h = b.hallucination_rate()) j["hallucination_rate"] = *h;
    bins.push_back(std::move(j));
  }
  return {{"boundaries", r.boundaries}, {"bins", bins}, {"log_base", 2}};
}

// Plot-data CSV: one row per word.
inline std::string probe_csv(const std::vector<WordJsd>& words) {
  std::ostringstream out;
  out << "position,jsd,is_object,is_hallucinated\n";
  for (const auto& w : words) {
    out << w.relative_position << ',' << w.jsd << ',' << (w.is_object ? 1 : 0) << ',';
    if (w.is_hallucinated.has_value()) {
      out << (*w.is_hallucinated ? 1 : 0);
    } else {
      out << "";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace capval
