// cache.hpp: persistent content-addressed response cache.
//
// Entries live one-per-file under the store directory, named by the request
// hash and written via temp-file + rename. Each entry stores the full
// canonical request payload, which is verified on read; a corrupt or
// colliding entry makes the cache step aside rather than answer wrongly.
// Concurrent identical requests within a process are coalesced so the inner
// backend sees at most one call per key.

#pragma once

#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <mutex>
#include <random>
#include <unordered_map>

#include "capval/backend.hpp"

namespace capval {

class CachingBackend : public Backend {
 public:
  CachingBackend(BackendPtr inner, std::filesystem::path store_dir)
      : inner_(std::move(inner)), dir_(std::move(store_dir)) {
    std::filesystem::create_directories(dir_);
  }

  BackendDescriptor descriptor() const override { return inner_->descriptor(); }

  GenerationResult generate(const PromptContext& ctx) override {
    const json payload = request_payload("generate", ctx);
    const json response = cached(payload, [&] { return to_json(inner_->generate(ctx)); });
    return generation_from_json(response);
  }

  ContinuationScore score_continuation(const PromptContext& ctx,
                                       const std::string& continuation) override {
    const json payload = request_payload("score", ctx, continuation);
    const json response =
        cached(payload, [&] { return to_json(inner_->score_continuation(ctx, continuation)); });
    return continuation_from_json(response);
  }

  long hits() const { return hits_; }
  long misses() const { return misses_; }
  long warnings() const { return warnings_; }

 private:
  std::filesystem::path entry_path(const std::string& key) const {
    return dir_ / key.substr(0, 2) / (key + ".json");
  }

  // Returns the stored response for `payload`, or nullopt on miss.
  // `writable` comes back false when the slot is unusable (hash collision).
  std::optional<json> read_entry(const std::string& key, const std::string& payload_dump,
                                 bool& writable) {
    writable = true;
    const auto path = entry_path(key);
    std::ifstream in(path);
    if (!in) return std::nullopt;
    json entry;
    try {
      entry = json::parse(in);
      if (entry.at("request").dump() != payload_dump) {
        // Digest collision: leave the resident entry alone and bypass.
        warn("cache entry " + key + " holds a different request; bypassing cache for this key");
        writable = false;
        return std::nullopt;
      }
      return entry.at("response");
    } catch (const json::exception& e) {
      warn("corrupt cache entry " + path.string() + " (" + e.what() + "); recomputing");
      return std::nullopt;
    }
  }

  void write_entry(const std::string& key, const json& payload, const json& response) {
    const auto path = entry_path(key);
    std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.parent_path() / (key + ".tmp." + std::to_string(random_suffix()));
    {
      std::ofstream out(tmp);
      out << json{{"request", payload}, {"response", response}}.dump();
      if (!out) {
        warn("cannot write cache entry " + tmp.string());
        std::error_code ec;
        std::filesystem::remove(tmp, ec);
        return;
      }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
      warn("cannot publish cache entry " + path.string() + ": " + ec.message());
      std::filesystem::remove(tmp, ec);
    }
  }

  template <typename Fn>
  json cached(const json& payload, Fn&& compute) {
    const std::string payload_dump = payload.dump();
    const std::string key = content_hash(payload_dump);

    std::shared_future<json> result;
    bool leader = false;
    {
      std::unique_lock<std::mutex> lock(mutex_);
      auto it = inflight_.find(key);
      if (it != inflight_.end()) {
        result = it->second;
      } else {
        std::promise<json> promise;
        result = promise.get_future().share();
        inflight_.emplace(key, result);
        leader = true;
        lock.unlock();
        fulfill(std::move(promise), key, payload, payload_dump, std::forward<Fn>(compute));
      }
    }
    auto release = [&] {
      if (!leader) return;
      std::lock_guard<std::mutex> lock(mutex_);
      inflight_.erase(key);
    };
    try {
      json value = result.get();  // rethrows the leader's exception for everyone
      release();
      return value;
    } catch (...) {
      release();
      throw;
    }
  }

  template <typename Fn>
  void fulfill(std::promise<json> promise, const std::string& key, const json& payload,
               const std::string& payload_dump, Fn&& compute) {
    try {
      bool writable = true;
      if (auto stored = read_entry(key, payload_dump, writable)) {
        ++hits_;
        promise.set_value(std::move(*stored));
        return;
      }
      ++misses_;
      json response = compute();
      if (writable) write_entry(key, payload, response);
      promise.set_value(std::move(response));
    } catch (...) {
      promise.set_exception(std::current_exception());
    }
  }

  void warn(const std::string& message) {
    ++warnings_;
    std::cerr << "[capval] warning: " << message << "\n";
  }

  static std::uint64_t random_suffix() {
    static std::atomic<std::uint64_t> counter{std::random_device{}()};
    return counter.fetch_add(1);
  }

  BackendPtr inner_;
  std::filesystem::path dir_;
  std::mutex mutex_;
  std::unordered_map<std::string, std::shared_future<json>> inflight_;
  std::atomic<long> hits_{0};
  std::atomic<long> misses_{0};
  std::atomic<long> warnings_{0};
};

inline std::shared_ptr<CachingBackend> with_cache(BackendPtr backend,
                                                  const std::filesystem::path& store_path) {
  return std::make_shared<CachingBackend>(std::move(backend), store_path);
}

}  // namespace capval
