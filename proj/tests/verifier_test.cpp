#include <gtest/gtest.h>

#include <cmath>

#include <capval/mock_backend.hpp>
#include <capval/verifier.hpp>

namespace {

using namespace capval;

const ImageRef kImage = ImageRef::from_id("img-7");

PromptContext lpfv_ctx(const VerifyConfig& config = {}) {
  PromptContext ctx;
  ctx.image = kImage;
  ctx.user_text = config.lpfv_prompt;
  ctx.params = config.score_params;
  return ctx;
}

ObjectMention mention_of(const std::string& caption, const std::string& canonical,
                         const Lexicon& lex) {
  for (const auto& m : extract_objects(caption, lex)) {
    if (m.canonical == canonical) return m;
  }
  throw std::runtime_error("mention not found: " + canonical);
}

Lexicon tiny_lexicon() {
  return lexicon_from_json(json{{"categories", {"dog", "cat", "hot dog", "frisbee"}}},
                           LexiconProvenance::predefined);
}

TEST(Lpfv, ScriptedProbabilityReturnedAsConfidence) {
  VerifyConfig config;
  auto backend =
      FixtureBuilder().add_score_simple(lpfv_ctx(), "dog", {0.6}).build();
  const Lexicon lex = tiny_lexicon();
  const ConfidenceScore c =
      lpfv_confidence(*backend, kImage, mention_of("A dog.", "dog", lex), config);
  EXPECT_NEAR(c.value, 0.6, 1e-12);
  EXPECT_EQ(c.method, VerifierMethod::lpfv);
  ASSERT_TRUE(c.detail.has_value());
}

TEST(Lpfv, FirstTokenOutsideTopKIsZero) {
  VerifyConfig config;
  auto backend = FixtureBuilder()
                     .add_score(lpfv_ctx(), "dog", {"dog"},
                                {{{"cat", std::log(0.5)}, {"bird", std::log(0.3)}}})
                     .build();
  const Lexicon lex = tiny_lexicon();
  const ConfidenceScore c =
      lpfv_confidence(*backend, kImage, mention_of("A dog.", "dog", lex), config);
  EXPECT_EQ(c.value, 0.0);
}

TEST(Lpfv, TwoTokenSurfaceUsesProductRule) {
  VerifyConfig config;
  auto backend =
      FixtureBuilder().add_score_simple(lpfv_ctx(), "hot dog", {0.5, 0.5}).build();
  const Lexicon lex = tiny_lexicon();
  const ConfidenceScore c =
      lpfv_confidence(*backend, kImage, mention_of("A hot dog.", "hot dog", lex), config);
  EXPECT_NEAR(c.value, 0.25, 1e-12);
}

TEST(Lpfv, FirstTokenOnlyAggregationFlag) {
  VerifyConfig config;
  config.aggregation = LpfvAggregation::first_token_only;
  auto backend =
      FixtureBuilder().add_score_simple(lpfv_ctx(), "hot dog", {0.5, 0.25}).build();
  const Lexicon lex = tiny_lexicon();
  const ConfidenceScore c =
      lpfv_confidence(*backend, kImage, mention_of("A hot dog.", "hot dog", lex), config);
  EXPECT_NEAR(c.value, 0.5, 1e-12);
}

TEST(Lpfv, ContextFreedom) {
  // The same surface scored from different captions hits the identical
  // request, so confidences agree exactly.
  VerifyConfig config;
  auto backend = FixtureBuilder().add_score_simple(lpfv_ctx(), "dog", {0.42}).build();
  const Lexicon lex = tiny_lexicon();
  const ConfidenceScore early =
      lpfv_confidence(*backend, kImage, mention_of("A dog runs far.", "dog", lex), config);
  const ConfidenceScore late = lpfv_confidence(
      *backend, kImage, mention_of("Far away there runs a dog.", "dog", lex), config);
  EXPECT_EQ(early.value, late.value);
}

TEST(Original, PrefixIsCaptionBeforeMention) {
  VerifyConfig config;
  const std::string caption = "A dog runs.";
  const Lexicon lex = tiny_lexicon();
  const ObjectMention m = mention_of(caption, "dog", lex);

  PromptContext expected;
  expected.image = kImage;
  expected.user_text = config.captioning_prompt;
  expected.assistant_prefix = "A ";
  expected.params = config.score_params;

  auto backend = FixtureBuilder().add_score_simple(expected, "dog", {0.9}).build();
  const ConfidenceScore c = original_confidence(*backend, kImage, caption, m, config);
  EXPECT_NEAR(c.value, 0.9, 1e-12);
  EXPECT_EQ(c.method, VerifierMethod::original);
}

TEST(Original, MentionAtCaptionStartHasEmptyPrefix) {
  VerifyConfig config;
  const std::string caption = "dog on a rug";
  const Lexicon lex = tiny_lexicon();
  const ObjectMention m = mention_of(caption, "dog", lex);

  PromptContext expected;
  expected.image = kImage;
  expected.user_text = config.captioning_prompt;
  expected.params = config.score_params;  // no assistant_prefix at position 0

  auto backend = FixtureBuilder().add_score_simple(expected, "dog", {0.33}).build();
  EXPECT_NEAR(original_confidence(*backend, kImage, caption, m, config).value, 0.33, 1e-12);
}

TEST(Original, PositionalIntegrityChecked) {
  VerifyConfig config;
  ScriptedBackend backend;
  ObjectMention bogus;
  bogus.surface = "dog";
  bogus.word_position = 99;
  EXPECT_THROW(original_confidence(backend, kImage, "A dog.", bogus, config), Error);
}

TEST(Verifier, MethodsCarryDistinctTags) {
  VerifyConfig config;
  const std::string caption = "dog here";
  const Lexicon lex = tiny_lexicon();
  const ObjectMention m = mention_of(caption, "dog", lex);

  PromptContext original_ctx;
  original_ctx.image = kImage;
  original_ctx.user_text = config.captioning_prompt;
  original_ctx.params = config.score_params;

  auto backend = FixtureBuilder()
                     .add_score_simple(lpfv_ctx(), "dog", {0.7})
                     .add_score_simple(original_ctx, "dog", {0.2})
                     .build();
  const ConfidenceScore via_lpfv = lpfv_confidence(*backend, kImage, m, config);
  const ConfidenceScore via_original = original_confidence(*backend, kImage, caption, m, config);
  EXPECT_NE(via_lpfv.value, via_original.value);
  EXPECT_EQ(via_lpfv.method, VerifierMethod::lpfv);
  EXPECT_EQ(via_original.method, VerifierMethod::original);
}

// ---------------------------------------------------------------------------
// Embedding similarity
// ---------------------------------------------------------------------------

class MockEmbeddings : public EmbeddingBackend {
 public:
  std::vector<double> image_vec{1.0, 0.0};
  std::map<std::string, std::vector<double>> text_vecs;

  std::vector<double> embed_text(const std::string& text) override {
    auto it = text_vecs.find(text);
    if (it == text_vecs.end()) throw Error("no embedding scripted for: " + text);
    return it->second;
  }
  std::vector<double> embed_image(const ImageRef&) override { return image_vec; }
};

TEST(Clip, IdenticalVectorsScoreOne) {
  MockEmbeddings emb;
  emb.text_vecs["dog"] = {1.0, 0.0};
  const ConfidenceScore c = clip_confidence(emb, kImage, "dog", VerifierMethod::clip_object);
  EXPECT_NEAR(c.value, 1.0, 1e-12);
}

TEST(Clip, OrthogonalVectorsScoreMidpoint) {
  MockEmbeddings emb;
  emb.text_vecs["dog"] = {0.0, 1.0};
  const ConfidenceScore c = clip_confidence(emb, kImage, "dog", VerifierMethod::clip_object);
  EXPECT_NEAR(c.value, 0.5, 1e-12);
}

TEST(Clip, HandComputedCosineRescales) {
  MockEmbeddings emb;
  emb.text_vecs["dog"] = {0.6, 0.8};
  const ConfidenceScore c = clip_confidence(emb, kImage, "dog", VerifierMethod::clip_object);
  // cosine((1,0),(0.6,0.8)) = 0.6 -> (0.6+1)/2 = 0.8
  EXPECT_NEAR(*c.similarity, 0.6, 1e-12);
  EXPECT_NEAR(c.value, 0.8, 1e-12);
}

TEST(Clip, UnconfiguredEndpointIsCapabilityError) {
  VerifyConfig config;  // no embeddings
  ScriptedBackend backend;
  EXPECT_THROW(verify_candidates(backend, kImage, {"A dog."}, tiny_lexicon(),
                                 VerifierMethod::clip_object, config),
               CapabilityError);
}

// ---------------------------------------------------------------------------
// verify_candidates
// ---------------------------------------------------------------------------

TEST(VerifyCandidates, EmptyMentionListsStayAligned) {
  VerifyConfig config;
  ScriptedBackend backend;
  const auto vcs = verify_candidates(backend, kImage, {"Nothing matches here."}, tiny_lexicon(),
                                     VerifierMethod::lpfv, config);
  ASSERT_EQ(vcs.size(), 1u);
  EXPECT_TRUE(vcs[0].mentions.empty());
  EXPECT_TRUE(vcs[0].confidences.empty());
}

TEST(VerifyCandidates, SharedSurfaceScoredOnce) {
  VerifyConfig config;
  auto backend = FixtureBuilder().add_score_simple(lpfv_ctx(), "dog", {0.8}).build();
  const auto vcs = verify_candidates(*backend, kImage, {"A dog runs.", "Another dog sits."},
                                     tiny_lexicon(), VerifierMethod::lpfv, config);
  ASSERT_EQ(vcs.size(), 2u);
  EXPECT_EQ(backend->score_calls(), 1);
  EXPECT_EQ(vcs[0].confidences[0].value, vcs[1].confidences[0].value);
}

TEST(VerifyCandidates, AlignmentAcrossCandidates) {
  VerifyConfig config;
  auto backend = FixtureBuilder()
                     .add_score_simple(lpfv_ctx(), "dog", {0.8})
                     .add_score_simple(lpfv_ctx(), "cat", {0.3})
                     .add_score_simple(lpfv_ctx(), "frisbee", {0.6})
                     .build();
  const auto vcs = verify_candidates(*backend, kImage,
                                     {"A dog and a cat.", "A cat with a frisbee."},
                                     tiny_lexicon(), VerifierMethod::lpfv, config);
  ASSERT_EQ(vcs.size(), 2u);
  ASSERT_EQ(vcs[0].mentions.size(), 2u);
  ASSERT_EQ(vcs[0].confidences.size(), 2u);
  ASSERT_EQ(vcs[1].mentions.size(), 2u);
  ASSERT_EQ(vcs[1].confidences.size(), 2u);
  EXPECT_EQ(vcs[0].mentions[0].caption_index, 0);
  EXPECT_EQ(vcs[1].mentions[0].caption_index, 1);
}

TEST(VerifyCandidates, MemoNeverChangesValues) {
  VerifyConfig config;
  const std::vector<std::string> candidates = {"A dog runs. A dog naps.", "A cat and a dog."};
  auto fixture = [&] {
    return FixtureBuilder()
        .add_score_simple(lpfv_ctx(), "dog", {0.8})
        .add_score_simple(lpfv_ctx(), "cat", {0.3})
        .build();
  };

  auto memoized_backend = fixture();
  ScoreMemo memo;
  const auto with_memo = verify_candidates(*memoized_backend, kImage, candidates, tiny_lexicon(),
                                           VerifierMethod::lpfv, config,
                                           ExtractionMode::predefined, &memo);

  auto plain_backend = fixture();
  const auto without_memo = verify_candidates(*plain_backend, kImage, candidates, tiny_lexicon(),
                                              VerifierMethod::lpfv, config);

  ASSERT_EQ(with_memo.size(), without_memo.size());
  for (std::size_t i = 0; i < with_memo.size(); ++i) {
    ASSERT_EQ(with_memo[i].confidences.size(), without_memo[i].confidences.size());
    for (std::size_t j = 0; j < with_memo[i].confidences.size(); ++j) {
      EXPECT_EQ(with_memo[i].confidences[j].value, without_memo[i].confidences[j].value);
    }
  }
}

TEST(VerifyCandidates, InSentenceDuplicatesCollapse) {
  VerifyConfig config;
  auto backend = FixtureBuilder().add_score_simple(lpfv_ctx(), "dog", {0.5}).build();
  // Two "dog" mentions in one sentence score once; across sentences, twice.
  const auto vcs = verify_candidates(*backend, kImage, {"A dog chases a dog. A dog barks."},
                                     tiny_lexicon(), VerifierMethod::lpfv, config);
  ASSERT_EQ(vcs[0].mentions.size(), 2u);
  EXPECT_EQ(vcs[0].mentions[0].sentence_index, 0);
  EXPECT_EQ(vcs[0].mentions[1].sentence_index, 1);
}

TEST(VerifyCandidates, ErrorsCarryCandidateIndex) {
  VerifyConfig config;
  ScriptedBackend backend;  // nothing scripted -> fixture miss
  try {
    verify_candidates(backend, kImage, {"No objects.", "A dog."}, tiny_lexicon(),
                      VerifierMethod::lpfv, config);
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("candidate 1"), std::string::npos);
  }
}

}  // namespace
