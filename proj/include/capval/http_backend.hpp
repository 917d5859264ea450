// http_backend.hpp: client for an OpenAI-compatible chat-completions endpoint
// exposing per-token top-k logprobs.
//
// Forced-decode scoring is realized by incremental assistant-prefix
// extension: each continuation token is read from the top-k alternatives at
// the next position, so any logprob-exposing server works without a
// prompt-echo feature. A token that no alternative matches is outside the
// visible top-k and scores exactly 0.

#pragma once

#include <httplib.h>

#include <regex>

#include "capval/backend.hpp"
#include "capval/config.hpp"
#include "capval/verifier.hpp"

#include <condition_variable>
#include <thread>

namespace capval {

inline std::string base64_encode(const std::string& data) {
  static const char* alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 2 < data.size()) {
    const unsigned v = (static_cast<unsigned char>(data[i]) << 16) |
                       (static_cast<unsigned char>(data[i + 1]) << 8) |
                       static_cast<unsigned char>(data[i + 2]);
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += alphabet[(v >> 6) & 63];
    out += alphabet[v & 63];
    i += 3;
  }
  if (i + 1 == data.size()) {
    const unsigned v = static_cast<unsigned char>(data[i]) << 16;
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == data.size()) {
    const unsigned v = (static_cast<unsigned char>(data[i]) << 16) |
                       (static_cast<unsigned char>(data[i + 1]) << 8);
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += alphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::string image_data_url(const ImageRef& image) {
  if (image.path.empty()) {
    throw ConfigError("image '" + image.id + "' has no file path to encode");
  }
  std::ifstream in(image.path, std::ios::binary);
  if (!in) throw ConfigError("cannot read image file: " + image.path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::string mime = "image/jpeg";
  const auto dot = image.path.rfind('.');
  if (dot != std::string::npos) {
    std::string ext = image.path.substr(dot + 1);
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == "png") mime = "image/png";
    if (ext == "gif") mime = "image/gif";
    if (ext == "webp") mime = "image/webp";
  }
  return "data:" + mime + ";base64," + base64_encode(bytes);
}

// Simple counted gate bounding in-flight requests per backend handle.
class InflightGate {
 public:
  explicit InflightGate(int limit) : limit_(limit > 0 ? limit : 1) {}

  void acquire() {
    std::unique_lock<std::mutex> lock(mutex_);
    cv_.wait(lock, [&] { return active_ < limit_; });
    ++active_;
  }
  void release() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      --active_;
    }
    cv_.notify_one();
  }

 private:
  int limit_;
  int active_ = 0;
  std::mutex mutex_;
  std::condition_variable cv_;
};

class OpenAiBackend : public Backend {
 public:
  explicit OpenAiBackend(BackendSettings settings)
      : settings_(std::move(settings)), gate_(settings_.max_in_flight) {
    const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(settings_.url, m, url_re)) {
      throw ConfigError("backend url must look like http://host:port[/path], got: " +
                        settings_.url);
    }
    host_ = m[1].str();
    path_prefix_ = m[2].matched ? m[2].str() : "";
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  }

  BackendDescriptor descriptor() const override {
    return BackendDescriptor{"openai:" + settings_.model, settings_.supports_text_only,
                             settings_.continue_final_message, settings_.max_top_logprobs};
  }

  GenerationResult generate(const PromptContext& ctx) override {
    validate_context(ctx);
    require_image_support(ctx);
    if (ctx.assistant_prefix.has_value() && !settings_.continue_final_message) {
      throw CapabilityError("backend is not configured to continue an assistant prefix");
    }
    const json reply = post_chat(build_request(ctx));
    return parse_generation(reply);
  }

  ContinuationScore score_continuation(const PromptContext& ctx,
                                       const std::string& continuation) override {
    validate_context(ctx);
    require_forced_decode();
    if (continuation.empty()) throw ConfigError("continuation must be non-empty");

    ContinuationScore score;
    score.continuation_text = continuation;
    std::string consumed;
    while (consumed.size() < continuation.size()) {
      PromptContext step = ctx;
      step.assistant_prefix = ctx.assistant_prefix.value_or("") + consumed;
      if (step.assistant_prefix->empty()) step.assistant_prefix.reset();
      step.params.max_new_tokens = 1;

      const GenerationResult next = generate(step);
      if (next.tokens.empty()) {
        throw MalformedReplyError("server returned no logprobs for a forced-decode step",
                                  next.text);
      }
      const std::string remaining = continuation.substr(consumed.size());
      const TokenAlt* best = nullptr;
      for (const auto& alt : next.tokens.front().alternatives) {
        if (remaining.starts_with(alt.token) &&
            (!best || alt.token.size() > best->token.size())) {
          best = &alt;
        }
      }
      if (!best) {
        // The next continuation token is not among the visible top-k.
        score.per_token.push_back({remaining, 0.0, false});
        break;
      }
      score.per_token.push_back({best->token, std::exp(best->logprob), true});
      consumed += best->token;
    }
    score.aggregate_probability = aggregate_probability(score.per_token);
    return score;
  }

  long transport_retries() const { return transport_retries_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  json build_request(const PromptContext& ctx) {
    int top_logprobs = ctx.params.top_logprobs;
    if (top_logprobs > settings_.max_top_logprobs) {
      top_logprobs = settings_.max_top_logprobs;
      record_warning("requested top_logprobs " + std::to_string(ctx.params.top_logprobs) +
                     " exceeds backend limit " + std::to_string(settings_.max_top_logprobs) +
                     "; clamped");
    }

    json messages = json::array();
    if (ctx.system_text.has_value()) {
      messages.push_back({{"role", "system"}, {"content", *ctx.system_text}});
    }
    json user_content = json::array();
    user_content.push_back({{"type", "text"}, {"text", ctx.user_text}});
    if (ctx.image.has_value()) {
      user_content.push_back(
          {{"type", "image_url"}, {"image_url", {{"url", image_data_url(*ctx.image)}}}});
    }
    messages.push_back({{"role", "user"}, {"content", user_content}});

    json request{{"model", settings_.model},
                 {"messages", messages},
                 {"temperature", ctx.params.temperature},
                 {"max_tokens", ctx.params.max_new_tokens},
                 {"logprobs", true},
                 {"top_logprobs", top_logprobs}};
    if (ctx.assistant_prefix.has_value()) {
      messages.push_back({{"role", "assistant"}, {"content", *ctx.assistant_prefix}});
      request["messages"] = messages;
      request["continue_final_message"] = true;
      request["add_generation_prompt"] = false;
    }
    request["top_k"] = ctx.params.top_k;  // extension field, ignored by servers without it
    if (ctx.params.seed.has_value()) request["seed"] = *ctx.params.seed;
    return request;
  }

  json post_chat(const json& request) {
    gate_.acquire();
    struct Release {
      InflightGate& gate;
      ~Release() { gate.release(); }
    } release{gate_};

    const std::string body = request.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= kMaxRetries; ++attempt) {
      if (attempt > 0) {
        ++transport_retries_;
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms_ << (attempt - 1)));
      }
      httplib::Client client(host_);
      client.set_connection_timeout(settings_.timeout_seconds, 0);
      client.set_read_timeout(settings_.timeout_seconds, 0);
      httplib::Headers headers;
      if (!settings_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + settings_.api_key);
      }
      auto res = client.Post(path_prefix_ + "/chat/completions", headers, body,
                             "application/json");
      if (!res) {
        last_error = "transport failure: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500 || res->status == 429) {
        last_error = "server status " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        // Request-level rejection; retrying cannot change the outcome.
        throw MalformedReplyError("backend rejected request with status " +
                                      std::to_string(res->status),
                                  res->body);
      }
      try {
        return json::parse(res->body);
      } catch (const json::exception& e) {
        throw MalformedReplyError(std::string("backend reply is not JSON: ") + e.what(),
                                  res->body);
      }
    }
    throw TransportError("backend unreachable after " + std::to_string(kMaxRetries + 1) +
                         " attempts: " + last_error);
  }

  GenerationResult parse_generation(const json& reply) {
    try {
      const json& choice = reply.at("choices").at(0);
      GenerationResult result;
      result.text = choice.at("message").at("content").get<std::string>();
      result.finish_reason = choice.value("finish_reason", "stop") == std::string("length")
                                 ? FinishReason::length
                                 : FinishReason::stop;
      if (choice.contains("logprobs") && choice.at("logprobs").is_object()) {
        for (const auto& entry : choice.at("logprobs").value("content", json::array())) {
          TokenLogprobs t;
          t.token_text = entry.at("token").get<std::string>();
          t.logprob = entry.at("logprob").get<double>();
          for (const auto& alt : entry.value("top_logprobs", json::array())) {
            t.alternatives.push_back(
                {alt.at("token").get<std::string>(), alt.at("logprob").get<double>()});
          }
          std::stable_sort(
              t.alternatives.begin(), t.alternatives.end(),
              [](const TokenAlt& a, const TokenAlt& b) { return a.logprob > b.logprob; });
          result.tokens.push_back(std::move(t));
        }
      }
      return result;
    } catch (const json::exception& e) {
      throw MalformedReplyError(std::string("unexpected chat-completions shape: ") + e.what(),
                                reply.dump());
    }
  }

  void record_warning(const std::string& message) {
    std::lock_guard<std::mutex> lock(warning_mutex_);
    if (warnings_.empty() || warnings_.back() != message) warnings_.push_back(message);
  }

  static constexpr int kMaxRetries = 3;
  long backoff_ms_ = 500;

  BackendSettings settings_;
  std::string host_;
  std::string path_prefix_;
  InflightGate gate_;
  std::atomic<long> transport_retries_{0};
  std::mutex warning_mutex_;
  std::vector<std::string> warnings_;
};

// Optional embedding endpoints for similarity-based verification: a text
// /embeddings endpoint plus an image-embedding URL taking a data URL input.
class OpenAiEmbeddings : public EmbeddingBackend {
 public:
  OpenAiEmbeddings(std::string text_url, std::string image_url, std::string model,
                   std::string api_key = "", int timeout_seconds = 60)
      : text_url_(std::move(text_url)),
        image_url_(std::move(image_url)),
        model_(std::move(model)),
        api_key_(std::move(api_key)),
        timeout_seconds_(timeout_seconds) {}

  std::vector<double> embed_text(const std::string& text) override {
    return post_embedding(text_url_, text);
  }

  std::vector<double> embed_image(const ImageRef& image) override {
    if (image_url_.empty()) {
      throw CapabilityError("no image-embedding endpoint configured");
    }
    return post_embedding(image_url_, image_data_url(image));
  }

 private:
  std::vector<double> post_embedding(const std::string& url, const std::string& input) {
    const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, url_re)) {
      throw ConfigError("embedding url must look like http://host:port/path, got: " + url);
    }
    httplib::Client client(m[1].str());
    client.set_read_timeout(timeout_seconds_, 0);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    const json request{{"model", model_}, {"input", input}};
    auto res = client.Post(m[2].matched ? m[2].str() : "/", headers, request.dump(),
                           "application/json");
    if (!res || res->status != 200) {
      throw TransportError("embedding request failed: " +
                           (res ? "status " + std::to_string(res->status)
                                : httplib::to_string(res.error())));
    }
    try {
      const json reply = json::parse(res->body);
      return reply.at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw MalformedReplyError(std::string("unexpected embeddings shape: ") + e.what(),
                                res->body);
    }
  }

  std::string text_url_;
  std::string image_url_;
  std::string model_;
  std::string api_key_;
  int timeout_seconds_;
};

}  // namespace capval
