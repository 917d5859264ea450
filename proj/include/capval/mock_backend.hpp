// mock_backend.hpp: a deterministic scripted backend.
//
// Every answer comes from a fixture keyed by the request hash. Unknown
// requests fail loudly with the key so the missing entry can be scripted.
// The mock also counts calls, which tests use as an oracle for caching and
// deduplication contracts.

#pragma once

#include <algorithm>
#include <atomic>
#include <fstream>
#include <mutex>
#include <sstream>
#include <unordered_map>

#include "capval/backend.hpp"

namespace capval {

class ScriptedBackend : public Backend {
 public:
  explicit ScriptedBackend(std::string name = "mock") : name_(std::move(name)) {}

  BackendDescriptor descriptor() const override {
    return BackendDescriptor{name_, supports_text_only_, supports_forced_decode_,
                             max_top_logprobs_};
  }

  void set_max_top_logprobs(int k) { max_top_logprobs_ = k; }
  void set_supports_text_only(bool v) { supports_text_only_ = v; }
  void set_supports_forced_decode(bool v) { supports_forced_decode_ = v; }

  void add_record(const json& record) {
    const std::string key = record.at("key").get<std::string>();
    const std::string kind = record.at("kind").get<std::string>();
    if (kind != "generate" && kind != "score") {
      throw ParseError("fixture record kind must be 'generate' or 'score', got '" + kind + "'");
    }
    auto& table = kind == "generate" ? generate_records_ : score_records_;
    if (!table.emplace(key, record).second) {
      throw ParseError("duplicate fixture key " + key);
    }
  }

  GenerationResult generate(const PromptContext& ctx) override {
    validate_context(ctx);
    require_image_support(ctx);
    const std::string key = request_key_generate(ctx);
    count_call(key, generate_calls_);

    auto it = generate_records_.find(key);
    if (it == generate_records_.end()) {
      throw FixtureMissError("no scripted generate entry for request " + key +
                                 " (user_text: \"" + ctx.user_text + "\")",
                             key);
    }
    GenerationResult r = generation_from_json(it->second);
    if (!r.tokens.empty()) {
      if (static_cast<int>(r.tokens.size()) > ctx.params.max_new_tokens) {
        r.tokens.resize(static_cast<std::size_t>(ctx.params.max_new_tokens));
        r.finish_reason = FinishReason::length;
        std::string text;
        for (const auto& t : r.tokens) text += t.token_text;
        r.text = std::move(text);
      }
      for (auto& t : r.tokens) {
        if (static_cast<int>(t.alternatives.size()) > ctx.params.top_logprobs) {
          t.alternatives.resize(static_cast<std::size_t>(ctx.params.top_logprobs));
        }
      }
    }
    return r;
  }

  ContinuationScore score_continuation(const PromptContext& ctx,
                                       const std::string& continuation) override {
    validate_context(ctx);
    require_forced_decode();
    if (continuation.empty()) throw ConfigError("continuation must be non-empty");
    const std::string key = request_key_score(ctx, continuation);
    count_call(key, score_calls_);

    auto it = score_records_.find(key);
    if (it == score_records_.end()) {
      throw FixtureMissError("no scripted score entry for request " + key + " (continuation: \"" +
                                 continuation + "\")",
                             key);
    }
    const json& rec = it->second;

    ContinuationScore score;
    score.continuation_text = continuation;
    std::string joined;
    for (const auto& t : rec.at("tokens")) {
      const std::string tok = t.at("token").get<std::string>();
      joined += tok;

      std::vector<TokenAlt> top;
      for (const auto& a : t.value("top", json::array())) {
        top.push_back({a.at("token").get<std::string>(), a.at("logprob").get<double>()});
      }
      std::stable_sort(top.begin(), top.end(),
                       [](const TokenAlt& x, const TokenAlt& y) { return x.logprob > y.logprob; });
      if (static_cast<int>(top.size()) > ctx.params.top_logprobs) {
        top.resize(static_cast<std::size_t>(ctx.params.top_logprobs));
      }

      ContinuationToken ct{tok, 0.0, false};
      for (const auto& a : top) {
        if (a.token == tok) {
          ct.in_topk = true;
          ct.probability = std::exp(a.logprob);
          break;
        }
      }
      score.per_token.push_back(std::move(ct));
    }
    if (joined != continuation) {
      throw ParseError("tokenizer mismatch in fixture " + key + ": scripted tokens join to \"" +
                       joined + "\" but continuation is \"" + continuation + "\"");
    }
    score.aggregate_probability = aggregate_probability(score.per_token);
    return score;
  }

  long generate_calls() const { return generate_calls_.load(); }
  long score_calls() const { return score_calls_.load(); }
  long total_calls() const { return generate_calls() + score_calls(); }

  int calls_for_key(const std::string& key) const {
    std::lock_guard<std::mutex> lock(counter_mutex_);
    auto it = per_key_calls_.find(key);
    return it == per_key_calls_.end() ? 0 : it->second;
  }

 private:
  void count_call(const std::string& key, std::atomic<long>& counter) {
    counter.fetch_add(1);
    std::lock_guard<std::mutex> lock(counter_mutex_);
    per_key_calls_[key]++;
  }

  std::string name_;
  bool supports_text_only_ = true;
  bool supports_forced_decode_ = true;
  int max_top_logprobs_ = 50;
  std::unordered_map<std::string, json> generate_records_;
  std::unordered_map<std::string, json> score_records_;
  std::atomic<long> generate_calls_{0};
  std::atomic<long> score_calls_{0};
  mutable std::mutex counter_mutex_;
  mutable std::unordered_map<std::string, int> per_key_calls_;
};

// Loads a JSONL fixture, one scripted request per line.
inline std::shared_ptr<ScriptedBackend> load_mock(const std::string& fixture_path) {
  std::ifstream in(fixture_path);
  if (!in) throw ParseError("cannot open mock fixture: " + fixture_path);
  auto backend = std::make_shared<ScriptedBackend>();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("malformed fixture " + fixture_path + " line " + std::to_string(lineno) +
                       ": " + e.what());
    }
    backend->add_record(rec);
  }
  return backend;
}

// ---------------------------------------------------------------------------
// FixtureBuilder: programmatic construction of fixture records, used by tests
// and by anyone scripting a mock run. Token lists for generate entries can be
// spelled out or derived by whitespace chunking.
// ---------------------------------------------------------------------------

class FixtureBuilder {
 public:
  // Scripted caption with auto-derived tokens (one per whitespace chunk, each
  // carrying its leading space). Token logprob defaults to ln(0.9).
  FixtureBuilder& add_generate(const PromptContext& ctx, const std::string& text) {
    GenerationResult r;
    r.text = text;
    for (const auto& chunk : chunk_text(text)) {
      TokenLogprobs t;
      t.token_text = chunk;
      t.logprob = std::log(0.9);
      t.alternatives = {{chunk, t.logprob}};
      r.tokens.push_back(std::move(t));
    }
    return add_generate_result(ctx, r);
  }

  FixtureBuilder& add_generate_result(const PromptContext& ctx, const GenerationResult& r) {
    std::string joined;
    for (const auto& t : r.tokens) joined += t.token_text;
    if (!r.tokens.empty() && joined != r.text) {
      throw ParseError("generate fixture tokens join to \"" + joined + "\" but text is \"" +
                       r.text + "\"");
    }
    json rec = to_json(r);
    rec["key"] = request_key_generate(ctx);
    rec["kind"] = "generate";
    records_.push_back(std::move(rec));
    return *this;
  }

  // Scripted forced-decode entry: one top-k list per continuation token.
  FixtureBuilder& add_score(const PromptContext& ctx, const std::string& continuation,
                            const std::vector<std::string>& tokens,
                            const std::vector<std::vector<TokenAlt>>& tops) {
    if (tokens.size() != tops.size()) {
      throw ParseError("add_score: tokens and tops must align");
    }
    std::string joined;
    for (const auto& t : tokens) joined += t;
    if (joined != continuation) {
      throw ParseError("add_score: tokens join to \"" + joined + "\" but continuation is \"" +
                       continuation + "\"");
    }
    json toks = json::array();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      json top = json::array();
      for (const auto& a : tops[i]) top.push_back({{"token", a.token}, {"logprob", a.logprob}});
      toks.push_back({{"token", tokens[i]}, {"logprob", 0.0}, {"top", top}});
    }
    json rec{{"key", request_key_score(ctx, continuation)},
             {"kind", "score"},
             {"text", continuation},
             {"tokens", toks}};
    records_.push_back(std::move(rec));
    return *this;
  }

  // Single-token-per-word convenience: scores each whitespace chunk of the
  // continuation with the given probability, present in the top-k list.
  FixtureBuilder& add_score_simple(const PromptContext& ctx, const std::string& continuation,
                                   const std::vector<double>& probabilities) {
    std::vector<std::string> tokens = chunk_text(continuation);
    if (tokens.size() != probabilities.size()) {
      throw ParseError("add_score_simple: need one probability per whitespace chunk of \"" +
                       continuation + "\"");
    }
    std::vector<std::vector<TokenAlt>> tops;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      tops.push_back({{tokens[i], std::log(probabilities[i])}});
    }
    return add_score(ctx, continuation, tokens, tops);
  }

  std::shared_ptr<ScriptedBackend> build() const {
    auto backend = std::make_shared<ScriptedBackend>();
    for (const auto& rec : records_) backend->add_record(rec);
    return backend;
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write fixture: " + path);
    for (const auto& rec : records_) out << rec.dump() << "\n";
  }

  static std::vector<std::string> chunk_text(const std::string& text) {
    std::vector<std::string> chunks;
    std::string current;
    for (char c : text) {
      if (c == ' ' && !current.empty()) {
        chunks.push_back(current);
        current.clear();
      }
      current += c;
    }
    if (!current.empty()) chunks.push_back(current);
    return chunks;
  }

 private:
  std::vector<json> records_;
};

}  // namespace capval
