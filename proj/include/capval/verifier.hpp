// verifier.hpp: existence confidence for object mentions.
//
// Primary method scores each mention's surface form under a context-free
// "one word or phrase" prompt via forced decode, so the score depends only
// on (image, surface). The original-probability baseline scores the mention
// in its caption context; embedding similarity is an optional third route.

#pragma once

#include <functional>
#include <mutex>

#include "capval/backend.hpp"
#include "capval/lexicon.hpp"
#include "capval/llm_extraction.hpp"

namespace capval {

// Context-free verification prompt. Overridable by flag.
inline const char* default_lpfv_prompt() {
  return "Describe any element of the image with only one word or phrase";
}

inline const char* default_captioning_prompt() { return "Please describe this image in detail."; }

enum class VerifierMethod { lpfv, original, clip_object, clip_sentence };

inline const char* to_string(VerifierMethod m) {
  switch (m) {
    case VerifierMethod::lpfv: return "lpfv";
    case VerifierMethod::original: return "original";
    case VerifierMethod::clip_object: return "clip_object";
    case VerifierMethod::clip_sentence: return "clip_sentence";
  }
  return "lpfv";
}

inline VerifierMethod verifier_method_from_string(const std::string& s) {
  if (s == "lpfv") return VerifierMethod::lpfv;
  if (s == "original") return VerifierMethod::original;
  if (s == "clip_object") return VerifierMethod::clip_object;
  if (s == "clip_sentence") return VerifierMethod::clip_sentence;
  throw ConfigError("unknown verifier method '" + s + "'");
}

// Whether a multi-token surface is scored by the product of its token
// conditionals or by the first token's probability alone.
enum class LpfvAggregation { all_tokens_product, first_token_only };

inline const char* to_string(LpfvAggregation a) {
  return a == LpfvAggregation::all_tokens_product ? "all_tokens_product" : "first_token_only";
}

struct ConfidenceScore {
  double value = 0.0;  // in [0,1]
  VerifierMethod method = VerifierMethod::lpfv;
  std::optional<ContinuationScore> detail;  // forced-decode methods
  std::optional<double> similarity;         // embedding methods, raw cosine
};

struct VerifiedCandidate {
  std::string caption;
  std::vector<ObjectMention> mentions;  // deduplicated per (canonical, sentence)
  std::vector<ConfidenceScore> confidences;
};

class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual std::vector<double> embed_text(const std::string& text) = 0;
  virtual std::vector<double> embed_image(const ImageRef& image) = 0;
};

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw Error("embedding dimension mismatch: " + std::to_string(a.size()) + " vs " +
                std::to_string(b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) throw Error("zero-norm embedding");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Decoding parameters used for forced-decode scoring requests. Only top_k /
// top_logprobs matter for the scores; the rest pins the request identity.
inline DecodingParams scoring_params(int top_logprobs = 50, int top_k = 50) {
  DecodingParams p;
  p.temperature = 0.0;
  p.top_k = top_k;
  p.max_new_tokens = 1;
  p.top_logprobs = top_logprobs;
  return p;
}

struct VerifyConfig {
  std::string lpfv_prompt = default_lpfv_prompt();
  std::string captioning_prompt = default_captioning_prompt();
  DecodingParams score_params = scoring_params();
  LpfvAggregation aggregation = LpfvAggregation::all_tokens_product;
  EmbeddingBackend* embeddings = nullptr;
};

inline double confidence_value(const ContinuationScore& score, LpfvAggregation aggregation) {
  if (aggregation == LpfvAggregation::first_token_only) {
    if (score.per_token.empty()) return 0.0;
    const auto& t = score.per_token.front();
    return t.in_topk ? t.probability : 0.0;
  }
  return score.aggregate_probability;
}

inline ConfidenceScore lpfv_confidence(Backend& backend, const std::optional<ImageRef>& image,
                                       const ObjectMention& mention, const VerifyConfig& config) {
  backend.require_forced_decode();
  PromptContext ctx;
  ctx.image = image;
  ctx.user_text = config.lpfv_prompt;
  ctx.params = config.score_params;
  ConfidenceScore out;
  out.method = VerifierMethod::lpfv;
  try {
    ContinuationScore score = backend.score_continuation(ctx, mention.surface);
    out.value = confidence_value(score, config.aggregation);
    out.detail = std::move(score);
  } catch (const Error& e) {
    throw Error("scoring mention '" + mention.surface + "': " + e.what());
  }
  return out;
}

// Baseline: the mention's probability in its original caption context,
// conditioned on everything the model had generated before it.
inline ConfidenceScore original_confidence(Backend& backend, const std::optional<ImageRef>& image,
                                           const std::string& caption,
                                           const ObjectMention& mention,
                                           const VerifyConfig& config) {
  backend.require_forced_decode();

  const std::vector<WordToken> tokens = tokenize_words(caption);
  if (mention.word_position < 0 || mention.word_position >= static_cast<int>(tokens.size())) {
    throw Error("mention '" + mention.surface + "' at word " +
                std::to_string(mention.word_position) + " not found in caption");
  }
  const WordToken& first = tokens[static_cast<std::size_t>(mention.word_position)];

  PromptContext ctx;
  ctx.image = image;
  ctx.user_text = config.captioning_prompt;
  if (first.char_start > 0) ctx.assistant_prefix = caption.substr(0, first.char_start);
  ctx.params = config.score_params;

  ConfidenceScore out;
  out.method = VerifierMethod::original;
  try {
    ContinuationScore score = backend.score_continuation(ctx, mention.surface);
    out.value = confidence_value(score, config.aggregation);
    out.detail = std::move(score);
  } catch (const Error& e) {
    throw Error("scoring mention '" + mention.surface + "': " + e.what());
  }
  return out;
}

// Cosine similarity rescaled from [-1,1] to [0,1] so every verifier meets the
// same value contract. Not threshold-comparable with forced-decode scores.
inline ConfidenceScore clip_confidence(EmbeddingBackend& embeddings, const ImageRef& image,
                                       const std::string& text, VerifierMethod method) {
  const double s = cosine_similarity(embeddings.embed_image(image), embeddings.embed_text(text));
  ConfidenceScore out;
  out.method = method;
  out.similarity = s;
  out.value = (s + 1.0) / 2.0;
  return out;
}

// Per-run memo: context-free methods score each (image, surface) once.
// Disabled for the original method, whose score depends on the prefix.
class ScoreMemo {
 public:
  ConfidenceScore get_or_compute(const std::string& image_id, VerifierMethod method,
                                 const std::string& surface,
                                 const std::function<ConfidenceScore()>& compute) {
    if (method == VerifierMethod::original) return compute();
    const std::string key = image_id + "\x1f" + to_string(method) + "\x1f" + surface;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = table_.find(key);
      if (it != table_.end()) return it->second;
    }
    ConfidenceScore score = compute();
    std::lock_guard<std::mutex> lock(mutex_);
    return table_.emplace(key, std::move(score)).first->second;
  }

 private:
  std::mutex mutex_;
  std::map<std::string, ConfidenceScore> table_;
};

enum class ExtractionMode { predefined, offline, online };

inline const char* to_string(ExtractionMode m) {
  switch (m) {
    case ExtractionMode::predefined: return "predefined";
    case ExtractionMode::offline: return "offline";
    case ExtractionMode::online: return "online";
  }
  return "predefined";
}

inline ExtractionMode extraction_mode_from_string(const std::string& s) {
  if (s == "predefined") return ExtractionMode::predefined;
  if (s == "offline") return ExtractionMode::offline;
  if (s == "online") return ExtractionMode::online;
  throw ConfigError("unknown extraction mode '" + s + "'");
}

// Keeps the first occurrence of each (canonical, sentence) pair so one object
// cannot double-weight a caption's score or its sentence filter decision.
inline std::vector<ObjectMention> dedup_for_scoring(const std::vector<ObjectMention>& mentions) {
  std::vector<ObjectMention> out;
  std::set<std::pair<std::string, int>> seen;
  for (const auto& m : mentions) {
    if (seen.emplace(m.canonical, m.sentence_index).second) out.push_back(m);
  }
  return out;
}

inline ConfidenceScore score_mention(Backend& backend, const std::optional<ImageRef>& image,
                                     const std::string& caption, const ObjectMention& mention,
                                     VerifierMethod method, const VerifyConfig& config) {
  switch (method) {
    case VerifierMethod::lpfv:
      return lpfv_confidence(backend, image, mention, config);
    case VerifierMethod::original:
      return original_confidence(backend, image, caption, mention, config);
    case VerifierMethod::clip_object:
    case VerifierMethod::clip_sentence: {
      if (!config.embeddings) {
        throw CapabilityError("no embedding endpoint configured for clip verification");
      }
      if (!image.has_value()) throw CapabilityError("clip verification requires an image");
      std::string text = mention.surface;
      if (method == VerifierMethod::clip_sentence) {
        const auto sentences = segment_sentences(caption);
        if (mention.sentence_index < static_cast<int>(sentences.size())) {
          text = sentences[static_cast<std::size_t>(mention.sentence_index)].text;
        }
      }
      return clip_confidence(*config.embeddings, *image, text, method);
    }
  }
  throw Error("unreachable verifier method");
}

// Extracts mentions per candidate, scores each with the chosen method, and
// returns index-aligned VerifiedCandidates.
inline std::vector<VerifiedCandidate> verify_candidates(
    Backend& backend, const std::optional<ImageRef>& image,
    const std::vector<std::string>& candidates, const Lexicon& lexicon, VerifierMethod method,
    const VerifyConfig& config, ExtractionMode extraction = ExtractionMode::predefined,
    ScoreMemo* memo = nullptr) {
  ScoreMemo local_memo;
  ScoreMemo& memo_ref = memo ? *memo : local_memo;
  const std::string image_id = image.has_value() ? image->id : "";

  std::vector<VerifiedCandidate> out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    try {
      VerifiedCandidate vc;
      vc.caption = candidates[i];
      std::vector<ObjectMention> mentions =
          extraction == ExtractionMode::online
              ? extract_online(candidates[i], backend).mentions
              : extract_objects(candidates[i], lexicon);
      for (auto& m : mentions) m.caption_index = static_cast<int>(i);
      vc.mentions = dedup_for_scoring(mentions);
      vc.confidences.reserve(vc.mentions.size());
      const auto sentences = segment_sentences(vc.caption);
      for (const auto& m : vc.mentions) {
        // Memo key is the text actually scored; for sentence-level
        // similarity that is the containing sentence, not the surface.
        std::string memo_key = m.surface;
        if (method == VerifierMethod::clip_sentence &&
            m.sentence_index < static_cast<int>(sentences.size())) {
          memo_key = sentences[static_cast<std::size_t>(m.sentence_index)].text;
        }
        vc.confidences.push_back(memo_ref.get_or_compute(image_id, method, memo_key, [&] {
          return score_mention(backend, image, vc.caption, m, method, config);
        }));
      }
      out.push_back(std::move(vc));
    } catch (const CapabilityError&) {
      throw;  // a setup problem, not a per-candidate one
    } catch (const Error& e) {
      throw Error("candidate " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace capval
