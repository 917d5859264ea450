// pipeline.hpp: sample candidates, verify their objects, and produce the
// final caption by best-of-N selection or filter-then-aggregate.

#pragma once

#include <chrono>
#include <numeric>

#include "capval/metrics.hpp"
#include "capval/verifier.hpp"

namespace capval {

enum class Strategy { best_of_n, filter_then_aggregate, baseline_greedy };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::best_of_n: return "best_of_n";
    case Strategy::filter_then_aggregate: return "filter_then_aggregate";
    case Strategy::baseline_greedy: return "baseline_greedy";
  }
  return "best_of_n";
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "best_of_n" || s == "bon") return Strategy::best_of_n;
  if (s == "filter_then_aggregate" || s == "fta") return Strategy::filter_then_aggregate;
  if (s == "baseline_greedy" || s == "baseline") return Strategy::baseline_greedy;
  throw ConfigError("unknown strategy '" + s + "'");
}

inline DecodingParams default_candidate_params() {
  DecodingParams p;
  p.temperature = 0.5;  // diversity during candidate sampling
  p.top_k = 50;
  p.max_new_tokens = 512;
  p.top_logprobs = 50;
  return p;
}

inline DecodingParams default_final_params() {
  DecodingParams p;
  p.temperature = 0.0;
  p.top_k = 50;
  p.max_new_tokens = 512;
  p.top_logprobs = 1;
  return p;
}

struct RunConfig {
  std::string captioning_prompt = default_captioning_prompt();
  std::string lpfv_prompt = default_lpfv_prompt();
  int n_candidates = 3;
  double alpha = 0.01;
  Strategy strategy = Strategy::filter_then_aggregate;
  DecodingParams candidate_params = default_candidate_params();
  DecodingParams final_params = default_final_params();
  ExtractionMode extraction_mode = ExtractionMode::predefined;
  VerifierMethod verifier_method = VerifierMethod::lpfv;
  LpfvAggregation aggregation = LpfvAggregation::all_tokens_product;
  bool aggregate_with_image = true;
  std::int64_t base_seed = 0;
  int score_top_logprobs = 50;
  // Runtime wiring for the embedding-similarity verifiers; not part of the
  // semantic digest (the method choice is).
  EmbeddingBackend* embeddings = nullptr;

  void validate() const {
    if (n_candidates < 1) throw ConfigError("n_candidates must be >= 1");
    if (alpha < 0) throw ConfigError("alpha must be >= 0");
    validate_params(candidate_params);
    validate_params(final_params);
  }

  VerifyConfig verify_config() const {
    VerifyConfig vc;
    vc.lpfv_prompt = lpfv_prompt;
    vc.captioning_prompt = captioning_prompt;
    vc.score_params = scoring_params(score_top_logprobs, candidate_params.top_k);
    vc.aggregation = aggregation;
    vc.embeddings = embeddings;
    return vc;
  }
};

inline json semantic_json(const DecodingParams& p) {
  return {{"temperature", p.temperature},
          {"top_k", p.top_k},
          {"max_new_tokens", p.max_new_tokens},
          {"top_logprobs", p.top_logprobs}};
}

// Every field that can change an output belongs here; run metadata (worker
// counts, paths, timeouts) does not.
inline json semantic_json(const RunConfig& c) {
  return {{"captioning_prompt", c.captioning_prompt},
          {"lpfv_prompt", c.lpfv_prompt},
          {"n_candidates", c.n_candidates},
          {"alpha", c.alpha},
          {"strategy", to_string(c.strategy)},
          {"candidate_params", semantic_json(c.candidate_params)},
          {"final_params", semantic_json(c.final_params)},
          {"extraction_mode", to_string(c.extraction_mode)},
          {"verifier_method", to_string(c.verifier_method)},
          {"aggregation", to_string(c.aggregation)},
          {"aggregate_with_image", c.aggregate_with_image},
          {"base_seed", c.base_seed},
          {"score_top_logprobs", c.score_top_logprobs}};
}

inline std::string config_digest(const RunConfig& c) { return content_hash(semantic_json(c).dump()); }

// Per-image seed: a pure function of (base seed, image id), so partial reruns
// derive exactly the seeds a full run would.
inline std::int64_t derive_image_seed(std::int64_t base_seed, const std::string& image_id) {
  const std::uint64_t h = fnv1a64(image_id, 14695981039346656037ULL) ^
                          static_cast<std::uint64_t>(base_seed) * 0x9E3779B97F4A7C15ULL;
  return static_cast<std::int64_t>(h & 0x7FFFFFFFFFFFFFFFULL);
}

struct CandidateSet {
  std::string image_id;
  std::vector<std::string> candidates;
  std::vector<std::int64_t> seeds;
};

// N independent generate calls with derived seeds; candidate order is by
// seed index regardless of completion order.
inline CandidateSet sample_candidates(Backend& backend, const std::optional<ImageRef>& image,
                                      const RunConfig& config, std::int64_t image_seed) {
  CandidateSet set;
  set.image_id = image.has_value() ? image->id : "";
  for (int i = 0; i < config.n_candidates; ++i) {
    PromptContext ctx;
    ctx.image = image;
    ctx.user_text = config.captioning_prompt;
    ctx.params = config.candidate_params;
    ctx.params.seed = image_seed + i;
    set.candidates.push_back(backend.generate(ctx).text);
    set.seeds.push_back(image_seed + i);
  }
  return set;
}

struct CaptionScore {
  double value = 0.0;
  bool empty_objects = false;
};

// Caption-level score: mean confidence over the candidate's examined objects.
// A candidate with nothing to examine scores a flagged sentinel 0.
inline CaptionScore caption_score(const VerifiedCandidate& vc) {
  if (vc.mentions.empty()) return {0.0, true};
  double sum = 0.0;
  for (const auto& c : vc.confidences) sum += c.value;
  return {sum / static_cast<double>(vc.confidences.size()), false};
}

struct FinalCaption {
  std::string text;
  Strategy strategy = Strategy::best_of_n;
  bool fallback = false;
  // Best-of-N provenance
  std::optional<int> selected_index;
  std::optional<double> selected_score;
  bool selected_empty_objects = false;
  // Filter-then-aggregate provenance
  std::vector<std::string> aggregation_materials;  // retained source texts, index order
  std::optional<std::string> aggregation_prompt;
};

// Highest mean confidence wins; ties break to the lowest index; candidates
// with no examined objects lose to any candidate that has some.
inline FinalCaption select_best_of_n(const std::vector<VerifiedCandidate>& vcs) {
  if (vcs.empty()) throw Error("select_best_of_n needs at least one candidate");
  int best = 0;
  CaptionScore best_score = caption_score(vcs[0]);
  for (int i = 1; i < static_cast<int>(vcs.size()); ++i) {
    const CaptionScore s = caption_score(vcs[static_cast<std::size_t>(i)]);
    const bool better = (best_score.empty_objects && !s.empty_objects) ||
                        (best_score.empty_objects == s.empty_objects && s.value > best_score.value);
    if (better) {
      best = i;
      best_score = s;
    }
  }
  FinalCaption final;
  final.text = vcs[static_cast<std::size_t>(best)].caption;
  final.strategy = Strategy::best_of_n;
  final.selected_index = best;
  final.selected_score = best_score.value;
  final.selected_empty_objects = best_score.empty_objects;
  return final;
}

struct DroppedSentence {
  Sentence sentence;
  std::vector<ObjectMention> offending;
};

struct FilteredCaption {
  int source_index = 0;
  std::vector<Sentence> retained;
  std::vector<DroppedSentence> dropped;

  std::string retained_text() const {
    std::string out;
    for (const auto& s : retained) {
      if (!out.empty()) out += ' ';
      out += s.text;
    }
    return out;
  }
};

// Drops every sentence containing a mention with confidence <= alpha
// (inclusive, so alpha = 0 still removes outside-top-k objects). Sentences
// without mentions are always retained.
inline FilteredCaption filter_candidate(const VerifiedCandidate& vc, double alpha,
                                        int source_index = 0) {
  FilteredCaption out;
  out.source_index = source_index;
  const std::vector<Sentence> sentences = segment_sentences(vc.caption);
  for (const auto& sentence : sentences) {
    std::vector<ObjectMention> offending;
    for (std::size_t i = 0; i < vc.mentions.size(); ++i) {
      if (vc.mentions[i].sentence_index == sentence.index &&
          vc.confidences[i].value <= alpha) {
        offending.push_back(vc.mentions[i]);
      }
    }
    if (offending.empty()) {
      out.retained.push_back(sentence);
    } else {
      out.dropped.push_back({sentence, std::move(offending)});
    }
  }
  return out;
}

inline std::string aggregation_prompt_text(const std::vector<std::string>& materials) {
  std::string prompt = "Description from different sources:\n";
  for (std::size_t i = 0; i < materials.size(); ++i) {
    prompt += std::to_string(i + 1) + ". " + materials[i] + "\n";
  }
  prompt += "Given the materials above, give the final description:";
  return prompt;
}

// One aggregation call over the retained texts. When everything was filtered
// away there is nothing to aggregate; fall back to best-of-N so the pipeline
// always emits a caption.
inline FinalCaption aggregate(Backend& backend, const std::optional<ImageRef>& image,
                              const std::vector<FilteredCaption>& filtered,
                              const std::vector<VerifiedCandidate>& vcs,
                              const RunConfig& config) {
  std::vector<std::string> materials;
  for (const auto& f : filtered) {
    const std::string text = f.retained_text();
    if (!text.empty()) materials.push_back(text);
  }
  if (materials.empty()) {
    FinalCaption final = select_best_of_n(vcs);
    final.strategy = Strategy::filter_then_aggregate;
    final.fallback = true;
    return final;
  }

  PromptContext ctx;
  if (config.aggregate_with_image) ctx.image = image;
  ctx.user_text = aggregation_prompt_text(materials);
  ctx.params = config.final_params;

  FinalCaption final;
  final.strategy = Strategy::filter_then_aggregate;
  final.aggregation_materials = materials;
  final.aggregation_prompt = ctx.user_text;
  final.text = backend.generate(ctx).text;
  return final;
}

struct StageTimings {
  double sampling_ms = 0.0;
  double verification_ms = 0.0;
  double aggregation_ms = 0.0;
};

struct RunRecord {
  std::string image_id;
  std::string config_digest;
  CandidateSet candidates;
  std::vector<VerifiedCandidate> verified;
  std::vector<FilteredCaption> filtered;
  FinalCaption final;
  StageTimings timings;
  // Per-candidate hallucination labels, present when ground truth was given.
  std::optional<std::vector<std::vector<bool>>> hallucinated;
};

inline json to_json(const ConfidenceScore& c) {
  json j{{"value", c.value}, {"method", to_string(c.method)}};
  if (c.similarity) j["similarity"] = *c.similarity;
  return j;
}

inline json to_json(const RunRecord& r) {
  json mentions = json::array();
  json confidences = json::array();
  for (const auto& vc : r.verified) {
    json ms = json::array();
    for (const auto& m : vc.mentions) ms.push_back(to_json(m));
    mentions.push_back(std::move(ms));
    json cs = json::array();
    for (const auto& c : vc.confidences) cs.push_back(to_json(c));
    confidences.push_back(std::move(cs));
  }

  json filtered = json::array();
  for (const auto& f : r.filtered) {
    json retained = json::array();
    for (const auto& s : f.retained) retained.push_back({{"index", s.index}, {"text", s.text}});
    json dropped = json::array();
    for (const auto& d : f.dropped) {
      json offending = json::array();
      for (const auto& m : d.offending) offending.push_back(m.canonical);
      dropped.push_back(
          {{"index", d.sentence.index}, {"text", d.sentence.text}, {"offending", offending}});
    }
    filtered.push_back({{"source_index", f.source_index},
                        {"retained", retained},
                        {"dropped", dropped},
                        {"retained_text", f.retained_text()}});
  }

  json provenance;
  if (r.final.selected_index) {
    provenance["selected_index"] = *r.final.selected_index;
    provenance["selected_score"] = *r.final.selected_score;
    provenance["selected_empty_objects"] = r.final.selected_empty_objects;
  }
  if (!r.final.aggregation_materials.empty()) {
    provenance["materials"] = r.final.aggregation_materials;
  }
  if (r.final.aggregation_prompt) provenance["aggregation_prompt"] = *r.final.aggregation_prompt;

  json out{{"image_id", r.image_id},
              {"config_digest", r.config_digest},
              {"candidates", r.candidates.candidates},
              {"seeds", r.candidates.seeds},
              {"mentions", mentions},
              {"confidences", confidences},
              {"filtered", filtered},
              {"final",
               {{"text", r.final.text},
                {"strategy", to_string(r.final.strategy)},
                {"provenance", provenance},
                {"fallback", r.final.fallback}}},
              {"timings",
               {{"sampling_ms", r.timings.sampling_ms},
                {"verification_ms", r.timings.verification_ms},
                {"aggregation_ms", r.timings.aggregation_ms}}}};
  if (r.hallucinated.has_value()) out["hallucinated"] = *r.hallucinated;
  return out;
}

// Executes sample -> extract -> verify -> (BoN | FtA) for one image. When
// ground truth is supplied, mention-level hallucination labels land in the
// record for later verifier analysis.
inline RunRecord run_pipeline(Backend& backend, const std::optional<ImageRef>& image,
                              const std::string& image_id, const Lexicon& lexicon,
                              const RunConfig& config, ScoreMemo* memo = nullptr,
                              const GroundTruth* ground_truth = nullptr) {
  config.validate();
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point start) {
    return std::chrono::duration<double, std::milli>(clock::now() - start).count();
  };

  RunRecord record;
  record.image_id = image_id;
  record.config_digest = config_digest(config);
  record.candidates.image_id = image_id;

  if (config.strategy == Strategy::baseline_greedy) {
    const auto t0 = clock::now();
    PromptContext ctx;
    ctx.image = image;
    ctx.user_text = config.captioning_prompt;
    ctx.params = config.candidate_params;
    ctx.params.temperature = 0.0;  // vanilla greedy decoding
    const GenerationResult greedy = backend.generate(ctx);
    record.timings.sampling_ms = ms_since(t0);
    record.candidates.candidates = {greedy.text};
    record.final.text = greedy.text;
    record.final.strategy = Strategy::baseline_greedy;
    return record;
  }

  const auto t_sample = clock::now();
  record.candidates =
      sample_candidates(backend, image, config, derive_image_seed(config.base_seed, image_id));
  record.timings.sampling_ms = ms_since(t_sample);

  const auto t_verify = clock::now();
  record.verified =
      verify_candidates(backend, image, record.candidates.candidates, lexicon,
                        config.verifier_method, config.verify_config(), config.extraction_mode,
                        memo);
  record.timings.verification_ms = ms_since(t_verify);

  if (ground_truth) {
    std::vector<std::vector<bool>> labels;
    for (const auto& vc : record.verified) {
      std::vector<bool> per_candidate;
      for (const auto& m : vc.mentions) {
        per_candidate.push_back(ground_truth->objects.count(m.canonical) == 0);
      }
      labels.push_back(std::move(per_candidate));
    }
    record.hallucinated = std::move(labels);
  }

  if (config.strategy == Strategy::best_of_n) {
    record.final = select_best_of_n(record.verified);
    return record;
  }

  const auto t_aggregate = clock::now();
  for (std::size_t i = 0; i < record.verified.size(); ++i) {
    record.filtered.push_back(
        filter_candidate(record.verified[i], config.alpha, static_cast<int>(i)));
  }
  record.final = aggregate(backend, image, record.filtered, record.verified, config);
  record.timings.aggregation_ms = ms_since(t_aggregate);
  return record;
}

}  // namespace capval
