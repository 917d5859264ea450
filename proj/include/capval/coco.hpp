// coco.hpp: ground-truth object sets from MSCOCO annotation files.
//
// Per the CHAIR convention, an image's object set is the union of its
// instance-annotation categories and the categories mentioned in its
// reference captions; an annotations-only mode is available.

#pragma once

#include "capval/lexicon.hpp"
#include "capval/metrics.hpp"

namespace capval {

struct CocoLoadStats {
  int images = 0;
  int unknown_categories = 0;  // category names absent from the lexicon
  int caption_annotations = 0;
};

inline json load_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ParseError(std::string("cannot open ") + what + ": " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(std::string(what) + " " + path + " does not parse: " + e.what());
  }
}

// Selection file: one image id per line (the sampled-subset list).
inline std::set<std::string> load_selection(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open selection file: " + path);
  std::set<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) ids.insert(line);
  }
  if (ids.empty()) throw ParseError("selection file is empty: " + path);
  return ids;
}

inline std::map<std::string, GroundTruth> load_coco_ground_truth(
    const std::string& instances_path, const std::string& captions_path, const Lexicon& lexicon,
    bool annotations_only = false, const std::set<std::string>* selection = nullptr,
    CocoLoadStats* stats = nullptr) {
  CocoLoadStats local;
  const json instances = load_json_file(instances_path, "instances file");

  std::map<long, std::string> category_names;
  for (const auto& c : instances.value("categories", json::array())) {
    category_names[c.at("id").get<long>()] = c.at("name").get<std::string>();
  }

  std::map<std::string, GroundTruth> out;
  auto keep = [&](const std::string& id) { return !selection || selection->count(id) > 0; };

  for (const auto& img : instances.value("images", json::array())) {
    const std::string id = std::to_string(img.at("id").get<long>());
    if (keep(id)) out[id] = GroundTruth{id, {}};
  }
  for (const auto& ann : instances.value("annotations", json::array())) {
    const std::string id = std::to_string(ann.at("image_id").get<long>());
    if (!keep(id)) continue;
    auto cat = category_names.find(ann.at("category_id").get<long>());
    if (cat == category_names.end()) continue;
    if (!lexicon.canonical_categories.count(cat->second)) {
      ++local.unknown_categories;
      continue;
    }
    out[id].image_id = id;
    out[id].objects.insert(cat->second);
  }

  if (!annotations_only && !captions_path.empty()) {
    const json captions = load_json_file(captions_path, "captions file");
    for (const auto& ann : captions.value("annotations", json::array())) {
      const std::string id = std::to_string(ann.at("image_id").get<long>());
      if (!keep(id)) continue;
      ++local.caption_annotations;
      out[id].image_id = id;
      for (const auto& m : extract_objects(ann.at("caption").get<std::string>(), lexicon)) {
        out[id].objects.insert(m.canonical);
      }
    }
  }

  if (selection) {
    std::string missing;
    for (const auto& id : *selection) {
      if (!out.count(id)) missing += missing.empty() ? id : ", " + id;
    }
    if (!missing.empty()) {
      throw Error("selection ids absent from the annotation files: " + missing);
    }
  }

  local.images = static_cast<int>(out.size());
  if (stats) *stats = local;
  return out;
}

}  // namespace capval
