// capval: batch CLI for caption self-validation runs and their evaluation.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include <capval/cache.hpp>
#include <capval/coco.hpp>
#include <capval/config.hpp>
#include <capval/http_backend.hpp>
#include <capval/judge.hpp>
#include <capval/mock_backend.hpp>
#include <capval/probe.hpp>
#include <capval/runner.hpp>

namespace {

using namespace capval;
namespace fs = std::filesystem;

struct CommonFlags {
  std::string config_path;
  std::string backend_url;
  std::string mock_fixture;
  std::string out;
  int workers = 0;
  bool resume = false;  // resuming is automatic; the flag states intent
  bool no_cache = false;
};

BackendPtr make_backend(AppConfig& config, const CommonFlags& flags,
                        const fs::path& cache_dir = {},
                        std::shared_ptr<OpenAiBackend>* raw_openai = nullptr) {
  if (!flags.backend_url.empty()) config.backend.url = flags.backend_url;
  if (!flags.mock_fixture.empty()) {
    config.backend.kind = "mock";
    config.backend.mock_fixture = flags.mock_fixture;
  }
  BackendPtr backend;
  if (config.backend.kind == "mock") {
    backend = load_mock(config.backend.mock_fixture);
  } else {
    auto openai = std::make_shared<OpenAiBackend>(config.backend);
    if (raw_openai) *raw_openai = openai;
    backend = openai;
  }
  if (!cache_dir.empty() && !flags.no_cache) backend = with_cache(backend, cache_dir);
  return backend;
}

Lexicon lexicon_for(const AppConfig& config, const std::string& flag_path) {
  std::string path = !flag_path.empty() ? flag_path : config.lexicon_path;
  if (path.empty()) path = "data/lexicon_coco80.json";
  return load_lexicon(path);
}

std::map<std::string, GroundTruth> ground_truth_from_flags(const std::string& instances,
                                                           const std::string& captions,
                                                           const std::string& selection_path,
                                                           bool annotations_only,
                                                           const Lexicon& lexicon) {
  std::optional<std::set<std::string>> selection;
  if (!selection_path.empty()) selection = load_selection(selection_path);
  return load_coco_ground_truth(instances, captions, lexicon, annotations_only,
                                selection ? &*selection : nullptr);
}

int cmd_run(const CommonFlags& flags, const std::string& dataset_path) {
  AppConfig config = load_app_config(flags.config_path);
  const fs::path out_dir(flags.out);
  std::shared_ptr<OpenAiBackend> openai;
  BackendPtr backend = make_backend(config, flags, out_dir / "cache", &openai);
  const Lexicon lexicon = lexicon_for(config, "");
  const auto dataset = load_dataset(dataset_path);

  RunnerOptions options;
  options.out_dir = out_dir;
  options.workers = flags.workers > 0 ? flags.workers : config.workers;

  const RunSummary summary = run_batch(*backend, lexicon, config.run, dataset, options);

  // Backend-side degradations (e.g. clamped top_logprobs) go on the record.
  if (openai && !openai->warnings().empty()) {
    std::ifstream in(summary.manifest_path);
    json manifest = json::parse(in);
    for (const auto& w : openai->warnings()) manifest["warnings"].push_back(w);
    write_atomic(summary.manifest_path, manifest.dump(1));
  }

  std::cout << "processed " << summary.processed << ", resumed-skip " << summary.skipped
            << ", failed " << summary.failed << "\n"
            << "records: " << summary.records_path.string() << "\n"
            << "manifest: " << summary.manifest_path.string() << "\n";
  return summary.failed == 0 ? 0 : 1;
}

CaptionEvalRecord eval_record_from(const StoredRecord& rec, const Lexicon& lexicon) {
  CaptionEvalRecord out;
  out.image_id = rec.image_id;
  out.caption_word_count = static_cast<int>(tokenize_words(rec.final_text).size());
  for (const auto& m : extract_objects(rec.final_text, lexicon)) {
    out.mention_canonicals.push_back(m.canonical);
  }
  return out;
}

int cmd_eval(const std::string& records_path, const std::string& instances,
             const std::string& captions, const std::string& selection, bool annotations_only,
             const std::string& lexicon_path, const std::string& out_dir,
             const std::string& label) {
  const Lexicon lexicon =
      load_lexicon(lexicon_path.empty() ? "data/lexicon_coco80.json" : lexicon_path);
  const auto records = load_records(records_path);
  const auto ground_truth =
      ground_truth_from_flags(instances, captions, selection, annotations_only, lexicon);

  std::vector<CaptionEvalRecord> eval_records;
  std::string missing;
  double length_sum = 0.0;
  for (const auto& rec : records) {
    if (!ground_truth.count(rec.image_id)) {
      missing += missing.empty() ? rec.image_id : ", " + rec.image_id;
      continue;
    }
    eval_records.push_back(eval_record_from(rec, lexicon));
    length_sum += eval_records.back().caption_word_count;
  }
  if (!missing.empty()) throw Error("records reference unknown image ids: " + missing);

  const ChairReport chair_report = chair(eval_records, ground_truth);
  const F1Report f1_report = precision_recall_f1(eval_records, ground_truth);

  ResultRow row;
  row.label = label.empty() ? fs::path(records_path).stem().string() : label;
  row.mean_length = eval_records.empty() ? 0.0 : length_sum / eval_records.size();
  row.chair_s = chair_report.chair_s;
  row.chair_i = chair_report.chair_i;
  row.f1 = f1_report.f1;
  const std::string table = render_results_table({row});
  std::cout << table;

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_atomic(fs::path(out_dir) / "chair.json", to_json(chair_report).dump(1));
    write_atomic(fs::path(out_dir) / "f1.json", to_json(f1_report).dump(1));
    write_atomic(fs::path(out_dir) / "table.txt", table);
  }
  return 0;
}

int cmd_auroc(const std::string& records_path, const std::string& instances,
              const std::string& captions, const std::string& selection, bool annotations_only,
              const std::string& lexicon_path, const std::string& out_path) {
  const Lexicon lexicon =
      load_lexicon(lexicon_path.empty() ? "data/lexicon_coco80.json" : lexicon_path);
  const auto records = load_records(records_path);
  const auto ground_truth =
      ground_truth_from_flags(instances, captions, selection, annotations_only, lexicon);

  std::map<std::string, std::vector<LabeledScore>> pooled;
  for (const auto& rec : records) {
    auto gt = ground_truth.find(rec.image_id);
    if (gt == ground_truth.end()) throw Error("no ground truth for image " + rec.image_id);
    for (std::size_t c = 0; c < rec.mentions.size() && c < rec.confidences.size(); ++c) {
      const auto& mentions = rec.mentions[c];
      const auto& confidences = rec.confidences[c];
      for (std::size_t i = 0; i < mentions.size() && i < confidences.size(); ++i) {
        pooled[to_string(confidences[i].method)].push_back(
            {confidences[i].value, gt->second.objects.count(mentions[i].canonical) > 0});
      }
    }
  }
  if (pooled.empty()) throw Error("records contain no scored mentions");

  json out = json::object();
  for (const auto& [method, scores] : pooled) {
    const AurocResult result = auroc(scores);
    out[method] = to_json(result);
    std::cout << method << ": AUROC " << result.auroc << " over " << scores.size()
              << " mentions\n";
  }
  if (!out_path.empty()) write_atomic(out_path, out.dump(1));
  return 0;
}

struct ProbeEntry {
  std::string image_id;
  std::string image_path;
  std::string caption;
};

std::vector<ProbeEntry> load_probe_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open probe dataset: " + path);
  std::vector<ProbeEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("probe dataset line " + std::to_string(lineno) + ": " + e.what());
    }
    ProbeEntry entry;
    entry.image_id = j.at("image_id").is_string() ? j.at("image_id").get<std::string>()
                                                  : std::to_string(j.at("image_id").get<long>());
    entry.image_path = j.value("image_path", "");
    entry.caption = j.at("caption").get<std::string>();
    entries.push_back(std::move(entry));
  }
  if (entries.empty()) throw ParseError("probe dataset is empty: " + path);
  return entries;
}

int cmd_probe(const CommonFlags& flags, const std::string& dataset_path,
              const std::string& instances, const std::string& captions,
              const std::string& selection, bool annotations_only) {
  AppConfig config = load_app_config(flags.config_path);
  const fs::path out_dir(flags.out);
  fs::create_directories(out_dir);
  BackendPtr backend = make_backend(config, flags, out_dir / "cache");
  const Lexicon lexicon = lexicon_for(config, "");
  const auto dataset = load_probe_dataset(dataset_path);

  std::map<std::string, GroundTruth> ground_truth;
  if (!instances.empty()) {
    ground_truth =
        ground_truth_from_flags(instances, captions, selection, annotations_only, lexicon);
  }

  ProbeConfig probe_config;
  probe_config.prompt = config.run.captioning_prompt;
  probe_config.top_logprobs = config.run.score_top_logprobs;
  probe_config.top_k = config.run.candidate_params.top_k;

  std::string jsonl;
  std::string csv = "position,jsd,is_object,is_hallucinated\n";
  std::vector<WordJsd> all_words;
  for (const auto& entry : dataset) {
    const ImageRef image = entry.image_path.empty()
                               ? ImageRef::from_id(entry.image_id)
                               : ImageRef{entry.image_id, entry.image_path};
    const auto tokens = probe_caption(*backend, image, entry.caption, probe_config);
    const GroundTruth* gt = nullptr;
    if (auto it = ground_truth.find(entry.image_id); it != ground_truth.end()) {
      gt = &it->second;
    }
    const auto words = word_level(tokens, entry.caption, lexicon, gt);
    json line{{"image_id", entry.image_id},
              {"caption", entry.caption},
              {"log_base", 2},
              {"top_logprobs", probe_config.top_logprobs},
              {"tokens", to_json(tokens)},
              {"words", to_json(words)}};
    jsonl += line.dump();
    jsonl += '\n';
    const std::string body = probe_csv(words);
    csv += body.substr(body.find('\n') + 1);
    all_words.insert(all_words.end(), words.begin(), words.end());
  }

  const JsdBinReport bins = bin_report(all_words, config.probe_boundaries);
  write_atomic(out_dir / "probe.jsonl", jsonl);
  write_atomic(out_dir / "probe.csv", csv);
  write_atomic(out_dir / "bins.json", to_json(bins).dump(1));
  for (const auto& b : bins.bins) {
    std::cout << (b.closed_lo ? "[" : "(") << b.lo << ", " << b.hi << "]: ";
    if (auto m = b.mean_jsd()) {
      std::cout << "mean JSD " << *m;
    } else {
      std::cout << "empty";
    }
    if (auto r = b.hallucination_rate()) std::cout << ", hallucination rate " << *r;
    std::cout << "\n";
  }
  return 0;
}

int cmd_build_lexicon(const CommonFlags& flags, const std::string& captions_path, int top_n,
                      const std::string& out_path) {
  AppConfig config = load_app_config(flags.config_path);
  BackendPtr backend = make_backend(config, flags);

  std::ifstream in(captions_path);
  if (!in) throw ParseError("cannot open captions file: " + captions_path);
  std::vector<std::string> captions;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '{') {
      captions.push_back(json::parse(line).at("caption").get<std::string>());
    } else {
      captions.push_back(line);
    }
  }

  OfflineBuildStats stats;
  const Lexicon lexicon =
      build_offline_lexicon(captions, *backend, top_n, config.extraction_template, &stats);
  write_atomic(out_path, to_json(lexicon).dump(1));
  std::cout << "built lexicon with " << lexicon.canonical_categories.size() << " entries from "
            << stats.captions_processed << " captions (" << stats.unparseable_replies
            << " unparseable replies)\n";
  return 0;
}

int cmd_judge(const CommonFlags& flags, const std::string& records_path,
              const std::string& against_path, const std::string& out_path) {
  AppConfig config = load_app_config(flags.config_path);
  BackendPtr backend = make_backend(config, flags);

  const auto records_a = load_records(records_path);
  const auto records_b = load_records(against_path);
  std::map<std::string, const StoredRecord*> by_id;
  for (const auto& rec : records_b) by_id[rec.image_id] = &rec;

  json out = json::array();
  double sum_acc_a = 0, sum_rel_a = 0, sum_acc_b = 0, sum_rel_b = 0;
  int scored = 0, failures = 0;
  for (const auto& rec : records_a) {
    auto other = by_id.find(rec.image_id);
    if (other == by_id.end()) continue;
    const std::string image_path = rec.raw.value("image_path", "");
    const ImageRef image = image_path.empty() ? ImageRef::from_id(rec.image_id)
                                              : ImageRef{rec.image_id, image_path};
    try {
      const auto [a, b] = judge_scores(*backend, image, rec.final_text,
                                       other->second->final_text, config.judge_template);
      out.push_back({{"image_id", rec.image_id},
                     {"a", {{"accuracy", a.accuracy}, {"relevancy", a.relevancy}}},
                     {"b", {{"accuracy", b.accuracy}, {"relevancy", b.relevancy}}}});
      sum_acc_a += a.accuracy;
      sum_rel_a += a.relevancy;
      sum_acc_b += b.accuracy;
      sum_rel_b += b.relevancy;
      ++scored;
    } catch (const Error& e) {
      out.push_back({{"image_id", rec.image_id}, {"error", e.what()}});
      ++failures;
    }
  }
  if (scored == 0) throw Error("no pair could be judged (" + std::to_string(failures) +
                               " failures)");

  json summary{{"pairs_scored", scored},
               {"pair_failures", failures},
               {"a", {{"accuracy", sum_acc_a / scored}, {"relevancy", sum_rel_a / scored}}},
               {"b", {{"accuracy", sum_acc_b / scored}, {"relevancy", sum_rel_b / scored}}}};
  std::cout << summary.dump(1) << "\n";
  if (!out_path.empty()) {
    write_atomic(out_path, json{{"summary", summary}, {"pairs", out}}.dump(1));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-validation captioning toolkit"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string dataset_path, records_path, against_path, instances, captions, selection;
  std::string lexicon_path, out_path, label;
  bool annotations_only = false;
  int top_n = 1000;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* opt = cmd->add_option("--config", flags.config_path, "TOML config file");
    if (needs_config) opt->required();
    cmd->add_option("--backend-url", flags.backend_url, "override backend URL");
    cmd->add_option("--mock-fixture", flags.mock_fixture, "use a scripted mock backend");
    cmd->add_option("--workers", flags.workers, "worker pool width");
    cmd->add_flag("--resume", flags.resume, "resume an interrupted run (automatic)");
    cmd->add_flag("--no-cache", flags.no_cache, "disable the response cache");
  };

  auto* run = app.add_subcommand("run", "run the pipeline over an image list");
  add_common(run, true);
  run->add_option("--dataset", dataset_path, "JSONL {image_id, image_path}")->required();
  run->add_option("--out", flags.out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "CHAIR and F1 against MSCOCO ground truth");
  eval->add_option("--records", records_path, "records.jsonl from a run")->required();
  eval->add_option("--instances", instances, "MSCOCO instances JSON")->required();
  eval->add_option("--captions", captions, "MSCOCO captions JSON");
  eval->add_option("--select", selection, "file listing sampled image ids");
  eval->add_flag("--annotations-only", annotations_only,
                 "ground truth from instance annotations only");
  eval->add_option("--lexicon", lexicon_path, "lexicon JSON path");
  eval->add_option("--out", out_path, "report output directory");
  eval->add_option("--label", label, "row label for the results table");

  auto* auroc_cmd = app.add_subcommand("auroc", "verifier AUROC/ROC from verified records");
  auroc_cmd->add_option("--records", records_path, "records.jsonl from a run")->required();
  auroc_cmd->add_option("--instances", instances, "MSCOCO instances JSON")->required();
  auroc_cmd->add_option("--captions", captions, "MSCOCO captions JSON");
  auroc_cmd->add_option("--select", selection, "file listing sampled image ids");
  auroc_cmd->add_flag("--annotations-only", annotations_only,
                      "ground truth from instance annotations only");
  auroc_cmd->add_option("--lexicon", lexicon_path, "lexicon JSON path");
  auroc_cmd->add_option("--out", out_path, "write AUROC/ROC JSON here");

  auto* probe = app.add_subcommand("probe", "image-vs-text JSD diagnostic over captions");
  add_common(probe, true);
  probe->add_option("--dataset", dataset_path, "JSONL {image_id, image_path, caption}")
      ->required();
  probe->add_option("--out", flags.out, "output directory")->required();
  probe->add_option("--instances", instances, "MSCOCO instances JSON (labels)");
  probe->add_option("--captions", captions, "MSCOCO captions JSON (labels)");
  probe->add_option("--select", selection, "file listing sampled image ids");
  probe->add_flag("--annotations-only", annotations_only,
                  "ground truth from instance annotations only");

  auto* build = app.add_subcommand("build-lexicon", "build an offline lexicon from captions");
  add_common(build, true);
  build->add_option("--captions", records_path, "caption corpus (text lines or JSONL)")
      ->required();
  build->add_option("--top-n", top_n, "keep the N most frequent nouns");
  build->add_option("--out", out_path, "lexicon JSON output path")->required();

  auto* judge = app.add_subcommand("judge", "pairwise judge scoring of two runs");
  add_common(judge, true);
  judge->add_option("--records", records_path, "records.jsonl, side A")->required();
  judge->add_option("--against", against_path, "records.jsonl, side B")->required();
  judge->add_option("--out", out_path, "write pair scores JSON here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(flags, dataset_path);
    if (eval->parsed()) {
      return cmd_eval(records_path, instances, captions, selection, annotations_only,
                      lexicon_path, out_path, label);
    }
    if (auroc_cmd->parsed()) {
      return cmd_auroc(records_path, instances, captions, selection, annotations_only,
                       lexicon_path, out_path);
    }
    if (probe->parsed()) {
      return cmd_probe(flags, dataset_path, instances, captions, selection, annotations_only);
    }
    if (build->parsed()) return cmd_build_lexicon(flags, records_path, top_n, out_path);
    if (judge->parsed()) return cmd_judge(flags, records_path, against_path, out_path);
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
