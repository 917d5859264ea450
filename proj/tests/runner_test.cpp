#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include <capval/coco.hpp>
#include <capval/runner.hpp>

#include "support/pipeline_fixture.hpp"

namespace {

using namespace capval;
using testsupport::ImageScript;
using testsupport::script_image;
namespace fs = std::filesystem;

fs::path temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("capval_runner_" + tag + "_" + std::to_string(getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Lexicon runner_lexicon() {
  return lexicon_from_json(json{{"categories", {"dog", "cat", "bird"}}},
                           LexiconProvenance::predefined);
}

ImageScript simple_image(const std::string& id, const std::string& object, double prob) {
  ImageScript s;
  s.image_id = id;
  s.candidates = {"A " + object + " here. A cat naps.", "Just a " + object + ".",
                  "One more " + object + "."};
  s.surface_probs = {{object, prob}, {"cat", 0.004}};
  const std::string kept = "A " + object + " here.";
  s.materials = {kept, "Just a " + object + ".", "One more " + object + "."};
  s.aggregation_reply = "Final text about a " + object + ".";
  return s;
}

RunConfig runner_config() {
  RunConfig config;
  config.strategy = Strategy::filter_then_aggregate;
  config.n_candidates = 3;
  config.alpha = 0.01;
  return config;
}

std::vector<ImageScript> three_images() {
  return {simple_image("img-1", "dog", 0.9), simple_image("img-2", "bird", 0.8),
          simple_image("img-3", "dog", 0.7)};
}

std::shared_ptr<ScriptedBackend> backend_for(const RunConfig& config,
                                             const std::vector<ImageScript>& scripts) {
  FixtureBuilder builder;
  for (const auto& s : scripts) script_image(builder, config, s);
  return builder.build();
}

std::vector<DatasetEntry> dataset_for(const std::vector<ImageScript>& scripts) {
  std::vector<DatasetEntry> out;
  for (const auto& s : scripts) out.push_back({s.image_id, ""});
  return out;
}

std::string records_without_timings(const fs::path& records_path) {
  std::ifstream in(records_path);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    j.erase("timings");
    out += j.dump();
    out += '\n';
  }
  return out;
}

TEST(Runner, ProcessesAllImagesAndWritesRecords) {
  const RunConfig config = runner_config();
  const auto scripts = three_images();
  auto backend = backend_for(config, scripts);
  const auto dir = temp_dir("basic");

  const RunSummary summary =
      run_batch(*backend, runner_lexicon(), config, dataset_for(scripts), {dir, 2});
  EXPECT_EQ(summary.processed, 3);
  EXPECT_EQ(summary.failed, 0);
  ASSERT_TRUE(fs::exists(summary.records_path));

  const auto records = load_records(summary.records_path.string());
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[0].image_id, "img-1");  // dataset order, not completion order
  EXPECT_EQ(records[1].image_id, "img-2");
  EXPECT_EQ(records[2].image_id, "img-3");
  EXPECT_EQ(records[0].final_text, "Final text about a dog.");
  fs::remove_all(dir);
}

TEST(Runner, ManifestTracksStatusAndTimings) {
  const RunConfig config = runner_config();
  const auto scripts = three_images();
  auto backend = backend_for(config, scripts);
  const auto dir = temp_dir("manifest");
  run_batch(*backend, runner_lexicon(), config, dataset_for(scripts), {dir, 1});

  std::ifstream in(dir / "manifest.json");
  const json manifest = json::parse(in);
  EXPECT_EQ(manifest.at("config_digest"), config_digest(config));
  EXPECT_EQ(manifest.at("images").size(), 3u);
  for (const auto& [id, entry] : manifest.at("images").items()) {
    EXPECT_EQ(entry.at("status"), "done") << id;
  }
  EXPECT_GE(manifest.at("stage_totals_ms").at("sampling").get<double>(), 0.0);
  EXPECT_EQ(manifest.at("backend").at("name"), "mock");
  EXPECT_EQ(manifest.at("lexicon_provenance"), "predefined");
  fs::remove_all(dir);
}

TEST(Runner, FailedImageIsIsolatedAndRerunResumesOnlyIt) {
  const RunConfig config = runner_config();
  auto scripts = three_images();
  // First run: image 3 has no fixture entries -> it fails, others succeed.
  auto partial = backend_for(config, {scripts[0], scripts[1]});
  const auto dir = temp_dir("resume");

  const RunSummary first =
      run_batch(*partial, runner_lexicon(), config, dataset_for(scripts), {dir, 1});
  EXPECT_EQ(first.processed, 2);
  EXPECT_EQ(first.failed, 1);
  {
    std::ifstream in(dir / "manifest.json");
    const json manifest = json::parse(in);
    EXPECT_EQ(manifest.at("images").at("img-3").at("status"), "failed");
    EXPECT_FALSE(manifest.at("images").at("img-3").value("error", "").empty());
  }
  // records.jsonl holds the two completed images.
  EXPECT_EQ(load_records(first.records_path.string()).size(), 2u);

  // Second run with the full fixture: only image 3 is processed.
  auto complete = backend_for(config, scripts);
  const RunSummary second =
      run_batch(*complete, runner_lexicon(), config, dataset_for(scripts), {dir, 1});
  EXPECT_EQ(second.processed, 1);
  EXPECT_EQ(second.skipped, 2);
  EXPECT_EQ(second.failed, 0);
  // Only image 3's requests hit the backend.
  for (const auto& rec : load_records(second.records_path.string())) {
    (void)rec;
  }
  EXPECT_EQ(load_records(second.records_path.string()).size(), 3u);
  fs::remove_all(dir);
}

TEST(Runner, FreshCachedAndResumedRunsSerializeIdentically) {
  const RunConfig config = runner_config();
  const auto scripts = three_images();

  const auto fresh_dir = temp_dir("det_fresh");
  auto b1 = backend_for(config, scripts);
  const RunSummary fresh =
      run_batch(*b1, runner_lexicon(), config, dataset_for(scripts), {fresh_dir, 1});

  const auto parallel_dir = temp_dir("det_parallel");
  auto b2 = backend_for(config, scripts);
  const RunSummary parallel =
      run_batch(*b2, runner_lexicon(), config, dataset_for(scripts), {parallel_dir, 3});

  // Resumed: first pass misses one image, second completes it.
  const auto resumed_dir = temp_dir("det_resumed");
  auto b3 = backend_for(config, {scripts[0], scripts[2]});
  run_batch(*b3, runner_lexicon(), config, dataset_for(scripts), {resumed_dir, 1});
  auto b4 = backend_for(config, scripts);
  const RunSummary resumed =
      run_batch(*b4, runner_lexicon(), config, dataset_for(scripts), {resumed_dir, 1});

  const std::string a = records_without_timings(fresh.records_path);
  EXPECT_EQ(a, records_without_timings(parallel.records_path));
  EXPECT_EQ(a, records_without_timings(resumed.records_path));
  fs::remove_all(fresh_dir);
  fs::remove_all(parallel_dir);
  fs::remove_all(resumed_dir);
}

TEST(Runner, DigestMismatchRefusesToResume) {
  const RunConfig config = runner_config();
  const auto scripts = three_images();
  auto backend = backend_for(config, scripts);
  const auto dir = temp_dir("digest");
  run_batch(*backend, runner_lexicon(), config, dataset_for(scripts), {dir, 1});

  RunConfig changed = config;
  changed.alpha = 0.005;
  auto backend2 = backend_for(changed, scripts);
  EXPECT_THROW(run_batch(*backend2, runner_lexicon(), changed, dataset_for(scripts), {dir, 1}),
               ConfigError);
  fs::remove_all(dir);
}

TEST(Runner, DatasetValidation) {
  const auto dir = temp_dir("dataset");
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"image_id": "a"})" << "\n" << R"({"image_id": "a"})" << "\n";
  }
  EXPECT_THROW(load_dataset((dir / "bad.jsonl").string()), ParseError);
  {
    std::ofstream out(dir / "empty.jsonl");
  }
  EXPECT_THROW(load_dataset((dir / "empty.jsonl").string()), ParseError);
  EXPECT_THROW(load_dataset((dir / "missing.jsonl").string()), ParseError);
  fs::remove_all(dir);
}

TEST(Records, SchemaErrorsNameTheLine) {
  const auto dir = temp_dir("records");
  {
    std::ofstream out(dir / "records.jsonl");
    out << R"({"image_id": "a", "final": {"text": "x"}, "candidates": []})" << "\n";
  }
  try {
    load_records((dir / "records.jsonl").string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("mentions"), std::string::npos);
  }
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// MSCOCO ground truth
// ---------------------------------------------------------------------------

TEST(Coco, UnionOfAnnotationsAndCaptionObjects) {
  const auto dir = temp_dir("coco");
  const json instances{
      {"images", {{{"id", 1}}, {{"id", 2}}}},
      {"annotations",
       {{{"image_id", 1}, {"category_id", 18}}, {{"image_id", 2}, {"category_id", 17}}}},
      {"categories", {{{"id", 18}, {"name", "dog"}}, {{"id", 17}, {"name", "cat"}}}}};
  const json captions{
      {"annotations",
       {{{"image_id", 1}, {"caption", "A dog chases a bird."}},
        {{"image_id", 2}, {"caption", "A sleeping cat."}}}}};
  {
    std::ofstream a(dir / "instances.json");
    a << instances.dump();
    std::ofstream b(dir / "captions.json");
    b << captions.dump();
  }
  const Lexicon lex = lexicon_from_json(json{{"categories", {"dog", "cat", "bird"}}},
                                        LexiconProvenance::predefined);
  const auto gt = load_coco_ground_truth((dir / "instances.json").string(),
                                         (dir / "captions.json").string(), lex);
  ASSERT_EQ(gt.size(), 2u);
  EXPECT_EQ(gt.at("1").objects, (std::set<std::string>{"dog", "bird"}));
  EXPECT_EQ(gt.at("2").objects, (std::set<std::string>{"cat"}));

  const auto annotations_only = load_coco_ground_truth(
      (dir / "instances.json").string(), (dir / "captions.json").string(), lex, true);
  EXPECT_EQ(annotations_only.at("1").objects, (std::set<std::string>{"dog"}));
  fs::remove_all(dir);
}

TEST(Coco, SelectionFiltersAndValidates) {
  const auto dir = temp_dir("coco_sel");
  const json instances{{"images", {{{"id", 1}}, {{"id", 2}}}},
                       {"annotations", json::array()},
                       {"categories", json::array()}};
  {
    std::ofstream a(dir / "instances.json");
    a << instances.dump();
    std::ofstream s(dir / "select.txt");
    s << "1\n";
    std::ofstream bad(dir / "bad_select.txt");
    bad << "1\n999\n";
  }
  const Lexicon lex =
      lexicon_from_json(json{{"categories", {"dog"}}}, LexiconProvenance::predefined);
  const auto selection = load_selection((dir / "select.txt").string());
  const auto gt =
      load_coco_ground_truth((dir / "instances.json").string(), "", lex, false, &selection);
  EXPECT_EQ(gt.size(), 1u);
  EXPECT_TRUE(gt.count("1"));

  const auto bad = load_selection((dir / "bad_select.txt").string());
  EXPECT_THROW(load_coco_ground_truth((dir / "instances.json").string(), "", lex, false, &bad),
               Error);
  fs::remove_all(dir);
}

}  // namespace
