// runner.hpp: batch orchestration over an image list.
//
// Images are processed by a worker pool with per-image isolation: a failure
// is recorded in the manifest and the run continues. Every artifact write is
// atomic (temp + rename). Rerunning with the same output directory resumes
// images that are not marked done, and the final records.jsonl is assembled
// in dataset order so resumed and fresh runs serialize identically.

#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <thread>

#include "capval/pipeline.hpp"
#include "capval/version.hpp"

namespace capval {

struct DatasetEntry {
  std::string image_id;
  std::string image_path;
};

inline std::vector<DatasetEntry> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset list: " + path);
  std::vector<DatasetEntry> entries;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("dataset list " + path + " line " + std::to_string(lineno) + ": " +
                       e.what());
    }
    DatasetEntry entry;
    entry.image_id = j.at("image_id").is_string() ? j.at("image_id").get<std::string>()
                                                  : std::to_string(j.at("image_id").get<long>());
    entry.image_path = j.value("image_path", "");
    if (!seen.insert(entry.image_id).second) {
      throw ParseError("dataset list has duplicate image_id '" + entry.image_id + "'");
    }
    entries.push_back(std::move(entry));
  }
  if (entries.empty()) throw ParseError("dataset list is empty: " + path);
  return entries;
}

inline std::string sanitize_id(const std::string& id) {
  std::string out;
  for (char c : id) {
    out += std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_'
               ? c
               : '_';
  }
  return out + "-" + content_hash(id).substr(0, 8);
}

inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.parent_path() / (path.filename().string() + ".tmp");
  {
    std::ofstream out(tmp);
    out << content;
    if (!out) throw Error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct RunnerOptions {
  std::filesystem::path out_dir;
  int workers = 1;
};

struct RunSummary {
  int processed = 0;
  int skipped = 0;
  int failed = 0;
  std::filesystem::path records_path;
  std::filesystem::path manifest_path;
};

class RunManifest {
 public:
  RunManifest(std::filesystem::path path, const RunConfig& config,
              const BackendDescriptor& backend, LexiconProvenance lexicon_provenance)
      : path_(std::move(path)) {
    state_["tool_version"] = kVersion;
    state_["config_digest"] = config_digest(config);
    state_["config"] = semantic_json(config);
    state_["backend"] = json{{"name", backend.name},
                             {"supports_text_only", backend.supports_text_only},
                             {"supports_forced_decode", backend.supports_forced_decode},
                             {"max_top_logprobs", backend.max_top_logprobs}};
    state_["lexicon_provenance"] = to_string(lexicon_provenance);
    state_["lpfv_aggregation"] = to_string(config.aggregation);
    state_["images"] = json::object();
    state_["stage_totals_ms"] =
        json{{"sampling", 0.0}, {"verification", 0.0}, {"aggregation", 0.0}};
    state_["warnings"] = json::array();
  }

  // Reconciles with an existing manifest: completed images stay done.
  void load_existing() {
    std::ifstream in(path_);
    if (!in) return;
    json previous;
    try {
      previous = json::parse(in);
    } catch (const json::exception&) {
      return;  // unreadable manifest: treat as fresh
    }
    if (previous.value("config_digest", "") != state_["config_digest"].get<std::string>()) {
      throw ConfigError("output directory holds a run with a different config digest (" +
                        previous.value("config_digest", "?") + "); use a fresh --out");
    }
    state_["images"] = previous.value("images", json::object());
    if (previous.contains("stage_totals_ms")) {
      state_["stage_totals_ms"] = previous["stage_totals_ms"];
    }
  }

  bool is_done(const std::string& image_id) const {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto& images = state_.at("images");
    auto it = images.find(image_id);
    return it != images.end() && it->at("status") == "done";
  }

  void mark(const std::string& image_id, const std::string& status,
            const std::string& error = "") {
    std::lock_guard<std::mutex> lock(mutex_);
    json entry{{"status", status}};
    if (!error.empty()) entry["error"] = error;
    state_["images"][image_id] = std::move(entry);
    flush_locked();
  }

  void add_timings(const StageTimings& t) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto& totals = state_["stage_totals_ms"];
    totals["sampling"] = totals["sampling"].get<double>() + t.sampling_ms;
    totals["verification"] = totals["verification"].get<double>() + t.verification_ms;
    totals["aggregation"] = totals["aggregation"].get<double>() + t.aggregation_ms;
  }

  void add_warning(const std::string& message) {
    std::lock_guard<std::mutex> lock(mutex_);
    state_["warnings"].push_back(message);
    flush_locked();
  }

  void flush() {
    std::lock_guard<std::mutex> lock(mutex_);
    flush_locked();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  void flush_locked() { write_atomic(path_, state_.dump(1)); }

  std::filesystem::path path_;
  mutable std::mutex mutex_;
  json state_;
};

inline RunSummary run_batch(Backend& backend, const Lexicon& lexicon, const RunConfig& config,
                            const std::vector<DatasetEntry>& dataset,
                            const RunnerOptions& options) {
  config.validate();
  std::filesystem::create_directories(options.out_dir / "records");

  RunManifest manifest(options.out_dir / "manifest.json", config, backend.descriptor(),
                       lexicon.provenance);
  manifest.load_existing();

  RunSummary summary;
  summary.records_path = options.out_dir / "records.jsonl";
  summary.manifest_path = manifest.path();

  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (manifest.is_done(dataset[i].image_id)) {
      ++summary.skipped;
    } else {
      queue.push_back(i);
    }
  }

  std::mutex queue_mutex;
  std::atomic<int> processed{0}, failed{0};
  ScoreMemo memo;

  auto worker = [&] {
    while (true) {
      std::size_t index;
      {
        std::lock_guard<std::mutex> lock(queue_mutex);
        if (queue.empty()) return;
        index = queue.front();
        queue.pop_front();
      }
      const DatasetEntry& entry = dataset[index];
      try {
        ImageRef image = entry.image_path.empty() ? ImageRef::from_id(entry.image_id)
                                                  : ImageRef{entry.image_id, entry.image_path};
        const RunRecord record =
            run_pipeline(backend, image, entry.image_id, lexicon, config, &memo);
        write_atomic(options.out_dir / "records" / (sanitize_id(entry.image_id) + ".json"),
                     to_json(record).dump());
        manifest.add_timings(record.timings);
        manifest.mark(entry.image_id, "done");
        ++processed;
      } catch (const std::exception& e) {
        manifest.mark(entry.image_id, "failed", e.what());
        ++failed;
      }
    }
  };

  const int n_workers = std::max(1, std::min<int>(options.workers,
                                                  static_cast<int>(queue.size() ? queue.size() : 1)));
  std::vector<std::thread> pool;
  for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  summary.processed = processed.load();
  summary.failed = failed.load();

  // Assemble records.jsonl in dataset order from the per-image files.
  std::string assembled;
  for (const auto& entry : dataset) {
    const auto path = options.out_dir / "records" / (sanitize_id(entry.image_id) + ".json");
    std::ifstream in(path);
    if (!in) continue;  // failed image
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    assembled += content;
    assembled += '\n';
  }
  write_atomic(summary.records_path, assembled);
  manifest.flush();
  return summary;
}

// ---------------------------------------------------------------------------
// Reading runs back for evaluation.
// ---------------------------------------------------------------------------

struct StoredRecord {
  std::string image_id;
  std::string final_text;
  std::string strategy;
  std::vector<std::vector<ObjectMention>> mentions;      // per candidate
  std::vector<std::vector<ConfidenceScore>> confidences;  // per candidate
  json raw;
};

inline std::vector<StoredRecord> load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open records file: " + path);
  std::vector<StoredRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("records file " + path + " line " + std::to_string(lineno) + ": " +
                       e.what());
    }
    StoredRecord rec;
    try {
      rec.image_id = j.at("image_id").get<std::string>();
      rec.final_text = j.at("final").at("text").get<std::string>();
      rec.strategy = j.at("final").value("strategy", "");
      if (!j.contains("mentions")) {
        throw ParseError("records file " + path + " line " + std::to_string(lineno) +
                         ": missing 'mentions' field");
      }
      for (const auto& per_candidate : j.at("mentions")) {
        std::vector<ObjectMention> ms;
        for (const auto& m : per_candidate) ms.push_back(mention_from_json(m));
        rec.mentions.push_back(std::move(ms));
      }
      for (const auto& per_candidate : j.value("confidences", json::array())) {
        std::vector<ConfidenceScore> cs;
        for (const auto& c : per_candidate) {
          ConfidenceScore score;
          score.value = c.at("value").get<double>();
          score.method = verifier_method_from_string(c.value("method", "lpfv"));
          cs.push_back(score);
        }
        rec.confidences.push_back(std::move(cs));
      }
    } catch (const json::exception& e) {
      throw ParseError("records file " + path + " line " + std::to_string(lineno) +
                       ": schema error: " + e.what());
    }
    rec.raw = std::move(j);
    out.push_back(std::move(rec));
  }
  if (out.empty()) throw ParseError("records file is empty: " + path);
  return out;
}

}  // namespace capval
