#include <gtest/gtest.h>

#include <random>

#include <capval/pipeline.hpp>

#include "support/pipeline_fixture.hpp"

namespace {

using namespace capval;
using testsupport::ImageScript;
using testsupport::script_image;

VerifiedCandidate make_vc(const std::string& caption, const std::vector<double>& confidences) {
  VerifiedCandidate vc;
  vc.caption = caption;
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    ObjectMention m;
    m.surface = "object" + std::to_string(i);
    m.canonical = m.surface;
    vc.mentions.push_back(m);
    ConfidenceScore c;
    c.value = confidences[i];
    vc.confidences.push_back(c);
  }
  return vc;
}

// Builds a VerifiedCandidate whose mentions carry real sentence indices.
VerifiedCandidate verified_from(const std::string& caption,
                                const std::map<std::string, double>& canonical_probs) {
  json categories = json::array();
  for (const auto& [canonical, _] : canonical_probs) categories.push_back(canonical);
  const Lexicon lex =
      lexicon_from_json(json{{"categories", categories}}, LexiconProvenance::predefined);
  VerifiedCandidate vc;
  vc.caption = caption;
  vc.mentions = dedup_for_scoring(extract_objects(caption, lex));
  for (const auto& m : vc.mentions) {
    ConfidenceScore c;
    c.value = canonical_probs.at(m.canonical);
    vc.confidences.push_back(c);
  }
  return vc;
}

TEST(CaptionScore, ArithmeticMean) {
  EXPECT_DOUBLE_EQ(caption_score(make_vc("c", {0.2, 0.4, 0.6})).value, 0.4);
  EXPECT_DOUBLE_EQ(caption_score(make_vc("c", {0.9})).value, 0.9);
  EXPECT_DOUBLE_EQ(caption_score(make_vc("c", {0.0, 1.0})).value, 0.5);
}

TEST(CaptionScore, EmptyObjectsFlagged) {
  const CaptionScore s = caption_score(make_vc("c", {}));
  EXPECT_EQ(s.value, 0.0);
  EXPECT_TRUE(s.empty_objects);
}

TEST(BestOfN, PicksArgmax) {
  const auto final = select_best_of_n(
      {make_vc("a", {0.3}), make_vc("b", {0.7}), make_vc("c", {0.5})});
  EXPECT_EQ(*final.selected_index, 1);
  EXPECT_EQ(final.text, "b");
  EXPECT_DOUBLE_EQ(*final.selected_score, 0.7);
}

TEST(BestOfN, TiesBreakToLowestIndex) {
  const auto final = select_best_of_n({make_vc("a", {0.7}), make_vc("b", {0.7})});
  EXPECT_EQ(*final.selected_index, 0);
}

TEST(BestOfN, EmptyObjectCandidatesLose) {
  const auto final = select_best_of_n({make_vc("a", {}), make_vc("b", {0.1})});
  EXPECT_EQ(*final.selected_index, 1);
}

TEST(BestOfN, ArgmaxMatchesOracleOnRandomFixtures) {
  std::mt19937 rng(23);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 8);
    std::vector<VerifiedCandidate> vcs;
    int expected = -1;
    double best_mean = -1.0;
    for (int i = 0; i < n; ++i) {
      const int m = 1 + static_cast<int>(rng() % 5);
      std::vector<double> confs;
      double sum = 0.0;
      for (int j = 0; j < m; ++j) {
        confs.push_back(unif(rng));
        sum += confs.back();
      }
      vcs.push_back(make_vc("caption " + std::to_string(i), confs));
      const double mean = sum / m;
      if (mean > best_mean) {
        best_mean = mean;
        expected = i;
      }
    }
    EXPECT_EQ(*select_best_of_n(vcs).selected_index, expected);
  }
}

TEST(BestOfN, InvariantUnderUniformPositiveRescaling) {
  std::mt19937 rng(29);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_real_distribution<double> scale_dist(0.1, 9.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 6);
    std::vector<VerifiedCandidate> vcs, scaled;
    const double scale = scale_dist(rng);
    for (int i = 0; i < n; ++i) {
      const int m = 1 + static_cast<int>(rng() % 4);
      std::vector<double> confs, confs_scaled;
      for (int j = 0; j < m; ++j) {
        confs.push_back(unif(rng));
        confs_scaled.push_back(confs.back() * scale);
      }
      vcs.push_back(make_vc("c" + std::to_string(i), confs));
      scaled.push_back(make_vc("c" + std::to_string(i), confs_scaled));
    }
    EXPECT_EQ(*select_best_of_n(vcs).selected_index, *select_best_of_n(scaled).selected_index);
  }
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

TEST(Filter, ThresholdIsInclusive) {
  const auto vc = verified_from("A dog runs. A cat sits. A bird flies.",
                                {{"dog", 0.005}, {"cat", 0.011}, {"bird", 0.5}});
  const FilteredCaption f = filter_candidate(vc, 0.01);
  ASSERT_EQ(f.retained.size(), 2u);
  EXPECT_EQ(f.retained[0].text, "A cat sits.");   // 0.011 > alpha, strictly
  EXPECT_EQ(f.retained[1].text, "A bird flies.");
  ASSERT_EQ(f.dropped.size(), 1u);
  EXPECT_EQ(f.dropped[0].sentence.text, "A dog runs.");  // 0.005 <= alpha
  EXPECT_EQ(f.dropped[0].offending[0].canonical, "dog");
}

TEST(Filter, AlphaZeroStillDropsOutsideTopK) {
  const auto vc = verified_from("A dog runs. A cat sits.", {{"dog", 0.0}, {"cat", 0.2}});
  const FilteredCaption f = filter_candidate(vc, 0.0);
  ASSERT_EQ(f.retained.size(), 1u);
  EXPECT_EQ(f.retained[0].text, "A cat sits.");
}

TEST(Filter, SentencesWithoutMentionsAlwaysRetained) {
  const auto vc = verified_from("The weather is nice. A dog runs.", {{"dog", 0.0}});
  const FilteredCaption f = filter_candidate(vc, 0.0);
  ASSERT_EQ(f.retained.size(), 1u);
  EXPECT_EQ(f.retained[0].text, "The weather is nice.");
}

TEST(Filter, SoundnessAndMonotonicityOnRandomFixtures) {
  // No retained sentence contains a mention at or below alpha, and retained
  // sets shrink weakly as alpha rises.
  const std::vector<std::string> nouns = {"dog", "cat", "bird", "car", "tree"};
  std::mt19937 rng(31);
  std::uniform_real_distribution<double> unif(0.0, 0.03);
  for (int trial = 0; trial < 60; ++trial) {
    std::map<std::string, double> probs;
    std::string caption;
    const int n_sentences = 1 + static_cast<int>(rng() % 5);
    for (int s = 0; s < n_sentences; ++s) {
      const std::string& noun = nouns[static_cast<std::size_t>(s) % nouns.size()];
      caption += (s ? " A " : "A ") + noun + " appears.";
      probs[noun] = unif(rng);
    }
    const auto vc = verified_from(caption, probs);

    std::vector<double> alphas = {0.0, 0.005, 0.01, 0.02, 1.0};
    std::set<int> previous_retained;
    bool first = true;
    for (double alpha : alphas) {
      const FilteredCaption f = filter_candidate(vc, alpha);
      std::set<int> retained;
      for (const auto& s : f.retained) retained.insert(s.index);
      // Soundness: every mention inside a retained sentence clears alpha.
      for (std::size_t i = 0; i < vc.mentions.size(); ++i) {
        if (retained.count(vc.mentions[i].sentence_index)) {
          EXPECT_GT(vc.confidences[i].value, alpha);
        }
      }
      // Monotonicity: higher alpha retains a subset.
      if (!first) {
        EXPECT_TRUE(std::includes(previous_retained.begin(), previous_retained.end(),
                                  retained.begin(), retained.end()));
      }
      previous_retained = retained;
      first = false;
    }
  }
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

TEST(Aggregate, PromptAssemblyIsPinned) {
  EXPECT_EQ(aggregation_prompt_text({"A dog runs.", "A bird flies. A dog naps."}),
            "Description from different sources:\n"
            "1. A dog runs.\n"
            "2. A bird flies. A dog naps.\n"
            "Given the materials above, give the final description:");
}

TEST(Aggregate, SingleSourceEchoedThroughMock) {
  RunConfig config;
  config.strategy = Strategy::filter_then_aggregate;
  const auto vc = verified_from("A dog runs.", {{"dog", 0.9}});
  const FilteredCaption f = filter_candidate(vc, config.alpha);

  PromptContext ctx;
  ctx.image = ImageRef::from_id("img-1");
  ctx.user_text = aggregation_prompt_text({"A dog runs."});
  ctx.params = config.final_params;
  auto backend = FixtureBuilder().add_generate(ctx, "A dog is running.").build();

  const FinalCaption final =
      aggregate(*backend, ImageRef::from_id("img-1"), {f}, {vc}, config);
  EXPECT_EQ(final.text, "A dog is running.");
  EXPECT_FALSE(final.fallback);
  ASSERT_EQ(final.aggregation_materials.size(), 1u);
  EXPECT_EQ(final.aggregation_materials[0], "A dog runs.");
}

TEST(Aggregate, EverythingFilteredFallsBackToBestOfN) {
  RunConfig config;
  const auto vc0 = verified_from("A dog runs.", {{"dog", 0.0}});
  const auto vc1 = verified_from("A cat sits.", {{"cat", 0.002}});
  ScriptedBackend backend;  // no aggregation entry needed; no call expected
  const FinalCaption final = aggregate(
      backend, ImageRef::from_id("img-1"),
      {filter_candidate(vc0, 0.01, 0), filter_candidate(vc1, 0.01, 1)}, {vc0, vc1}, config);
  EXPECT_TRUE(final.fallback);
  EXPECT_EQ(final.text, "A cat sits.");  // higher caption score wins the fallback
  EXPECT_EQ(backend.generate_calls(), 0);
}

TEST(Aggregate, ThreeSourcesOneCallIndexOrder) {
  RunConfig config;
  const auto vc0 = verified_from("A dog runs.", {{"dog", 0.4}});
  const auto vc1 = verified_from("A cat sits.", {{"cat", 0.5}});
  const auto vc2 = verified_from("A bird flies.", {{"bird", 0.6}});
  const std::vector<FilteredCaption> filtered = {filter_candidate(vc0, 0.01, 0),
                                                 filter_candidate(vc1, 0.01, 1),
                                                 filter_candidate(vc2, 0.01, 2)};
  PromptContext ctx;
  ctx.image = ImageRef::from_id("img-1");
  ctx.user_text = aggregation_prompt_text({"A dog runs.", "A cat sits.", "A bird flies."});
  ctx.params = config.final_params;
  auto backend = FixtureBuilder().add_generate(ctx, "All three.").build();

  const FinalCaption final =
      aggregate(*backend, ImageRef::from_id("img-1"), filtered, {vc0, vc1, vc2}, config);
  EXPECT_EQ(final.text, "All three.");
  EXPECT_EQ(backend->generate_calls(), 1);
  ASSERT_EQ(final.aggregation_materials.size(), 3u);
  EXPECT_EQ(final.aggregation_materials[0], "A dog runs.");
  EXPECT_EQ(final.aggregation_materials[2], "A bird flies.");
}

TEST(Aggregate, DegenerateSingleCandidatePassesVerbatim) {
  // Alpha below every confidence and N=1: the aggregation materials are the
  // sole candidate unchanged.
  RunConfig config;
  const std::string caption = "A dog runs. A cat sits.";
  const auto vc = verified_from(caption, {{"dog", 0.5}, {"cat", 0.6}});
  const FilteredCaption f = filter_candidate(vc, 0.01);

  PromptContext ctx;
  ctx.image = ImageRef::from_id("img-1");
  ctx.user_text = aggregation_prompt_text({caption});
  ctx.params = config.final_params;
  auto backend = FixtureBuilder().add_generate(ctx, "final").build();
  const FinalCaption final = aggregate(*backend, ImageRef::from_id("img-1"), {f}, {vc}, config);
  ASSERT_EQ(final.aggregation_materials.size(), 1u);
  EXPECT_EQ(final.aggregation_materials[0], caption);
}

// ---------------------------------------------------------------------------
// run_pipeline
// ---------------------------------------------------------------------------

Lexicon pipeline_lexicon() {
  return lexicon_from_json(json{{"categories", {"dog", "cat", "bird"}}},
                           LexiconProvenance::predefined);
}

TEST(RunPipeline, SampleCandidatesInSeedOrder) {
  RunConfig config;
  config.n_candidates = 3;
  const std::string image_id = "img-3";
  ImageScript script;
  script.image_id = image_id;
  script.candidates = {"First.", "Second.", "Third."};
  FixtureBuilder builder;
  for (std::size_t i = 0; i < 3; ++i) {
    PromptContext ctx;
    ctx.image = ImageRef::from_id(image_id);
    ctx.user_text = config.captioning_prompt;
    ctx.params = config.candidate_params;
    ctx.params.seed = derive_image_seed(config.base_seed, image_id) + static_cast<std::int64_t>(i);
    builder.add_generate(ctx, script.candidates[i]);
  }
  auto backend = builder.build();
  const CandidateSet set = sample_candidates(*backend, ImageRef::from_id(image_id), config,
                                             derive_image_seed(config.base_seed, image_id));
  EXPECT_EQ(set.candidates, (std::vector<std::string>{"First.", "Second.", "Third."}));
  EXPECT_EQ(backend->generate_calls(), 3);
}

TEST(RunPipeline, BaselineGreedySkipsVerification) {
  RunConfig config;
  config.strategy = Strategy::baseline_greedy;
  ImageScript script;
  script.image_id = "img-9";
  script.greedy_caption = "A plain greedy caption.";
  FixtureBuilder builder;
  script_image(builder, config, script);
  auto backend = builder.build();

  const RunRecord record = run_pipeline(*backend, ImageRef::from_id("img-9"), "img-9",
                                        pipeline_lexicon(), config);
  EXPECT_EQ(record.final.text, "A plain greedy caption.");
  EXPECT_EQ(record.candidates.candidates.size(), 1u);
  EXPECT_EQ(backend->score_calls(), 0);
  EXPECT_TRUE(record.verified.empty());
}

ImageScript fta_script() {
  ImageScript s;
  s.image_id = "img-11";
  s.candidates = {"A dog runs. A cat sits.", "A bird flies. A dog naps.", "Nothing here."};
  s.surface_probs = {{"dog", 0.9}, {"cat", 0.004}, {"bird", 0.5}};
  // alpha = 0.01 drops the cat sentence only.
  s.materials = {"A dog runs.", "A bird flies. A dog naps.", "Nothing here."};
  s.aggregation_reply = "A dog runs while a bird flies.";
  return s;
}

TEST(RunPipeline, FilterThenAggregateEndToEnd) {
  RunConfig config;
  config.strategy = Strategy::filter_then_aggregate;
  config.n_candidates = 3;
  config.alpha = 0.01;
  const ImageScript script = fta_script();
  FixtureBuilder builder;
  script_image(builder, config, script);
  auto backend = builder.build();

  const RunRecord record = run_pipeline(*backend, ImageRef::from_id(script.image_id),
                                        script.image_id, pipeline_lexicon(), config);
  EXPECT_EQ(record.final.text, "A dog runs while a bird flies.");
  EXPECT_FALSE(record.final.fallback);
  EXPECT_EQ(record.final.aggregation_materials, script.materials);
  ASSERT_EQ(record.filtered.size(), 3u);
  EXPECT_EQ(record.filtered[0].dropped.size(), 1u);
  EXPECT_EQ(record.filtered[0].dropped[0].sentence.text, "A cat sits.");
  // dog scored once across candidates, cat and bird once each
  EXPECT_EQ(backend->score_calls(), 3);
}

TEST(RunPipeline, DeterministicRecordsModuloTimings) {
  RunConfig config;
  config.strategy = Strategy::filter_then_aggregate;
  config.n_candidates = 3;
  const ImageScript script = fta_script();

  auto run_once = [&] {
    FixtureBuilder builder;
    script_image(builder, config, script);
    auto backend = builder.build();
    json j = to_json(run_pipeline(*backend, ImageRef::from_id(script.image_id), script.image_id,
                                  pipeline_lexicon(), config));
    j.erase("timings");
    return j.dump();
  };
  EXPECT_EQ(run_once(), run_once());
}

TEST(RunPipeline, TimingsPresentAndNonNegative) {
  RunConfig config;
  config.strategy = Strategy::filter_then_aggregate;
  const ImageScript script = fta_script();
  FixtureBuilder builder;
  script_image(builder, config, script);
  auto backend = builder.build();
  const RunRecord record = run_pipeline(*backend, ImageRef::from_id(script.image_id),
                                        script.image_id, pipeline_lexicon(), config);
  EXPECT_GE(record.timings.sampling_ms, 0.0);
  EXPECT_GE(record.timings.verification_ms, 0.0);
  EXPECT_GE(record.timings.aggregation_ms, 0.0);
  const json j = to_json(record);
  EXPECT_TRUE(j.at("timings").contains("sampling_ms"));
  EXPECT_TRUE(j.at("timings").contains("verification_ms"));
  EXPECT_TRUE(j.at("timings").contains("aggregation_ms"));
}

TEST(RunPipeline, BestOfNSelectsHighestMeanConfidence) {
  RunConfig config;
  config.strategy = Strategy::best_of_n;
  config.n_candidates = 2;
  ImageScript script;
  script.image_id = "img-13";
  script.candidates = {"A dog runs.", "A cat sits."};
  script.surface_probs = {{"dog", 0.2}, {"cat", 0.8}};
  FixtureBuilder builder;
  script_image(builder, config, script);
  auto backend = builder.build();

  const RunRecord record = run_pipeline(*backend, ImageRef::from_id(script.image_id),
                                        script.image_id, pipeline_lexicon(), config);
  EXPECT_EQ(record.final.text, "A cat sits.");
  EXPECT_EQ(*record.final.selected_index, 1);
  EXPECT_EQ(record.timings.aggregation_ms, 0.0);
}

TEST(RunPipeline, SingleCandidateGreedyDegenerate) {
  // N=1 with temperature 0 candidate sampling yields the greedy caption.
  RunConfig config;
  config.strategy = Strategy::best_of_n;
  config.n_candidates = 1;
  config.candidate_params.temperature = 0.0;
  ImageScript script;
  script.image_id = "img-15";
  script.candidates = {"A dog rests."};
  script.surface_probs = {{"dog", 0.7}};
  FixtureBuilder builder;
  script_image(builder, config, script);
  auto backend = builder.build();
  const RunRecord record = run_pipeline(*backend, ImageRef::from_id(script.image_id),
                                        script.image_id, pipeline_lexicon(), config);
  EXPECT_EQ(record.final.text, "A dog rests.");
  EXPECT_EQ(*record.final.selected_index, 0);
}

TEST(RunPipeline, GroundTruthLabelsRecordedWhenSupplied) {
  RunConfig config;
  config.strategy = Strategy::best_of_n;
  config.n_candidates = 1;
  ImageScript script;
  script.image_id = "img-17";
  script.candidates = {"A dog and a cat."};
  script.surface_probs = {{"dog", 0.9}, {"cat", 0.3}};
  FixtureBuilder builder;
  script_image(builder, config, script);
  auto backend = builder.build();

  const GroundTruth gt{"img-17", {"dog"}};
  const RunRecord record = run_pipeline(*backend, ImageRef::from_id(script.image_id),
                                        script.image_id, pipeline_lexicon(), config, nullptr,
                                        &gt);
  ASSERT_TRUE(record.hallucinated.has_value());
  ASSERT_EQ(record.hallucinated->size(), 1u);
  EXPECT_EQ(record.hallucinated->at(0), (std::vector<bool>{false, true}));
  EXPECT_TRUE(to_json(record).contains("hallucinated"));
}

TEST(RunPipeline, InvalidConfigRejectedBeforeAnyCall) {
  RunConfig config;
  config.alpha = -0.5;
  ScriptedBackend backend;
  EXPECT_THROW(run_pipeline(backend, ImageRef::from_id("x"), "x", pipeline_lexicon(), config),
               ConfigError);
  EXPECT_EQ(backend.total_calls(), 0);
}

TEST(ConfigDigest, TracksSemanticFieldsOnly) {
  RunConfig a;
  RunConfig b = a;
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.alpha = 0.005;
  EXPECT_NE(config_digest(a), config_digest(b));
  b = a;
  b.n_candidates = 10;
  EXPECT_NE(config_digest(a), config_digest(b));
  b = a;
  b.strategy = Strategy::best_of_n;
  EXPECT_NE(config_digest(a), config_digest(b));
  b = a;
  b.candidate_params.temperature = 0.7;
  EXPECT_NE(config_digest(a), config_digest(b));
  b = a;
  b.base_seed = 99;
  EXPECT_NE(config_digest(a), config_digest(b));
}

}  // namespace
