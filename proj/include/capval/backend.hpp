// backend.hpp: uniform interface to an image-conditioned text model.
//
// Two operations cover everything the rest of the library needs: free
// generation with per-token top-k logprob alternatives, and forced-decode
// scoring of a fixed continuation. Probabilities are linear values in [0,1]
// internally; logprobs are natural logs on the wire.

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "capval/errors.hpp"
#include "capval/hash.hpp"

namespace capval {

using json = nlohmann::json;

struct DecodingParams {
  double temperature = 0.0;  // 0 means deterministic argmax decoding
  int top_k = 50;
  int max_new_tokens = 512;
  int top_logprobs = 50;  // alternatives returned per step
  std::optional<std::int64_t> seed;
};

// An image is carried by reference: `id` is the identity used for hashing,
// caching, and mock lookup; `path` (when set) is read and encoded only at
// request time. Payload bytes are never stored in records.
struct ImageRef {
  std::string id;
  std::string path;

  static ImageRef from_path(const std::string& p) { return ImageRef{p, p}; }
  static ImageRef from_id(const std::string& i) { return ImageRef{i, ""}; }
};

struct PromptContext {
  std::optional<ImageRef> image;
  std::optional<std::string> system_text;
  std::string user_text;
  // Already-generated text the backend conditions on verbatim.
  std::optional<std::string> assistant_prefix;
  DecodingParams params;
};

struct TokenAlt {
  std::string token;
  double logprob;  // natural log, <= 0
};

struct TokenLogprobs {
  std::string token_text;
  double logprob;
  std::vector<TokenAlt> alternatives;  // sorted by logprob descending
};

enum class FinishReason { stop, length };

inline const char* to_string(FinishReason fr) {
  return fr == FinishReason::stop ? "stop" : "length";
}

struct GenerationResult {
  std::string text;
  std::vector<TokenLogprobs> tokens;
  FinishReason finish_reason = FinishReason::stop;
};

struct ContinuationToken {
  std::string token;
  double probability;  // in [0,1]
  bool in_topk;
};

struct ContinuationScore {
  std::string continuation_text;
  std::vector<ContinuationToken> per_token;
  double aggregate_probability = 1.0;
};

// Product over per-token probabilities; a token outside the returned top-k
// list contributes an exact factor of 0, not a floor.
inline double aggregate_probability(const std::vector<ContinuationToken>& toks) {
  double p = 1.0;
  for (const auto& t : toks) p *= t.in_topk ? t.probability : 0.0;
  return p;
}

struct BackendDescriptor {
  std::string name;
  bool supports_text_only = false;
  bool supports_forced_decode = false;
  int max_top_logprobs = 50;
};

inline void validate_params(const DecodingParams& p) {
  if (p.temperature < 0) throw ConfigError("temperature must be >= 0");
  if (p.top_k < 1) throw ConfigError("top_k must be >= 1");
  if (p.max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (p.top_logprobs < 1) throw ConfigError("top_logprobs must be >= 1");
}

inline void validate_context(const PromptContext& ctx) {
  if (ctx.user_text.empty()) throw ConfigError("PromptContext.user_text must be non-empty");
  validate_params(ctx.params);
}

class Backend {
 public:
  virtual ~Backend() = default;

  virtual BackendDescriptor descriptor() const = 0;

  // Free generation with per-token top-k logprob alternatives.
  virtual GenerationResult generate(const PromptContext& ctx) = 0;

  // Forced-decode probability of `continuation` given ctx. Token t is
  // conditioned on ctx plus continuation tokens < t; its probability is read
  // from the top-k alternatives at that position, 0 if absent.
  virtual ContinuationScore score_continuation(const PromptContext& ctx,
                                               const std::string& continuation) = 0;

  void require_image_support(const PromptContext& ctx) const {
    if (!ctx.image.has_value() && !descriptor().supports_text_only) {
      throw CapabilityError("backend '" + descriptor().name +
                            "' does not support text-only prompts");
    }
  }

  void require_forced_decode() const {
    if (!descriptor().supports_forced_decode) {
      throw CapabilityError("backend '" + descriptor().name +
                            "' does not support forced-decode scoring");
    }
  }
};

using BackendPtr = std::shared_ptr<Backend>;

// ---------------------------------------------------------------------------
// Request keys
//
// A request is identified by the canonical JSON of (kind, ctx[, continuation]).
// nlohmann::json orders object keys, so the dump is stable.
// ---------------------------------------------------------------------------

inline json context_json(const PromptContext& ctx) {
  json j;
  j["image"] = ctx.image.has_value() ? json(ctx.image->id) : json(nullptr);
  j["system"] = ctx.system_text.has_value() ? json(*ctx.system_text) : json(nullptr);
  j["user"] = ctx.user_text;
  j["prefix"] = ctx.assistant_prefix.has_value() ? json(*ctx.assistant_prefix) : json(nullptr);
  j["params"] = {
      {"temperature", ctx.params.temperature},
      {"top_k", ctx.params.top_k},
      {"max_new_tokens", ctx.params.max_new_tokens},
      {"top_logprobs", ctx.params.top_logprobs},
      {"seed", ctx.params.seed.has_value() ? json(*ctx.params.seed) : json(nullptr)},
  };
  return j;
}

inline json request_payload(const std::string& kind, const PromptContext& ctx,
                            const std::string& continuation = "") {
  json j;
  j["kind"] = kind;
  j["ctx"] = context_json(ctx);
  if (kind == "score") j["continuation"] = continuation;
  return j;
}

inline std::string request_key_generate(const PromptContext& ctx) {
  return content_hash(request_payload("generate", ctx).dump());
}

inline std::string request_key_score(const PromptContext& ctx, const std::string& continuation) {
  return content_hash(request_payload("score", ctx, continuation).dump());
}

// ---------------------------------------------------------------------------
// JSON (de)serialization of backend results, shared by the cache store and
// the mock fixture format.
// ---------------------------------------------------------------------------

inline json to_json(const GenerationResult& r) {
  json toks = json::array();
  for (const auto& t : r.tokens) {
    json top = json::array();
    for (const auto& a : t.alternatives) top.push_back({{"token", a.token}, {"logprob", a.logprob}});
    toks.push_back({{"token", t.token_text}, {"logprob", t.logprob}, {"top", top}});
  }
  return json{{"text", r.text}, {"finish_reason", to_string(r.finish_reason)}, {"tokens", toks}};
}

inline GenerationResult generation_from_json(const json& j) {
  GenerationResult r;
  r.text = j.at("text").get<std::string>();
  r.finish_reason =
      j.value("finish_reason", "stop") == std::string("length") ? FinishReason::length : FinishReason::stop;
  for (const auto& t : j.value("tokens", json::array())) {
    TokenLogprobs tl;
    tl.token_text = t.at("token").get<std::string>();
    tl.logprob = t.value("logprob", 0.0);
    for (const auto& a : t.value("top", json::array())) {
      tl.alternatives.push_back({a.at("token").get<std::string>(), a.at("logprob").get<double>()});
    }
    r.tokens.push_back(std::move(tl));
  }
  return r;
}

inline json to_json(const ContinuationScore& s) {
  json toks = json::array();
  for (const auto& t : s.per_token) {
    toks.push_back({{"token", t.token}, {"probability", t.probability}, {"in_topk", t.in_topk}});
  }
  return json{{"continuation", s.continuation_text},
              {"aggregate", s.aggregate_probability},
              {"per_token", toks}};
}

inline ContinuationScore continuation_from_json(const json& j) {
  ContinuationScore s;
  s.continuation_text = j.at("continuation").get<std::string>();
  for (const auto& t : j.at("per_token")) {
    s.per_token.push_back({t.at("token").get<std::string>(), t.at("probability").get<double>(),
                           t.at("in_topk").get<bool>()});
  }
  s.aggregate_probability = j.at("aggregate").get<double>();
  return s;
}

}  // namespace capval
