// metrics.hpp: corpus-level hallucination metrics.
//
// CHAIR_S / CHAIR_I and precision/recall/F1 against per-image ground-truth
// object sets, AUROC with full ROC curve emission for verifier comparison,
// and relative-position hallucination bins.

#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "capval/errors.hpp"

namespace capval {

struct GroundTruth {
  std::string image_id;
  std::set<std::string> objects;  // canonical categories present in the image
};

// One evaluated caption: its mentions canonicalized against the same lexicon
// the ground truth uses.
struct CaptionEvalRecord {
  std::string image_id;
  std::vector<std::string> mention_canonicals;
  int caption_word_count = 0;
};

struct PerImageChair {
  std::string image_id;
  int mentioned = 0;  // deduplicated by canonical category
  int hallucinated = 0;
  bool has_hallucination = false;
};

struct ChairReport {
  double chair_s = 0.0;
  double chair_i = 0.0;
  long n_captions = 0;
  long n_objects = 0;  // total deduplicated mentions across the corpus
  long n_hallucinated = 0;
  std::vector<PerImageChair> per_image;
};

inline const GroundTruth& gt_for(const std::map<std::string, GroundTruth>& ground_truth,
                                 const std::string& image_id) {
  auto it = ground_truth.find(image_id);
  if (it == ground_truth.end()) {
    throw Error("no ground truth for image id '" + image_id + "'");
  }
  return it->second;
}

// A mention is hallucinated iff its canonical category is absent from the
// image's ground-truth set. Mentions deduplicate per caption; ratios are
// micro-averaged over the corpus.
inline ChairReport chair(const std::vector<CaptionEvalRecord>& records,
                         const std::map<std::string, GroundTruth>& ground_truth) {
  ChairReport report;
  long captions_with_hallucination = 0;
  for (const auto& rec : records) {
    const GroundTruth& gt = gt_for(ground_truth, rec.image_id);
    std::set<std::string> unique(rec.mention_canonicals.begin(), rec.mention_canonicals.end());

    PerImageChair row;
    row.image_id = rec.image_id;
    row.mentioned = static_cast<int>(unique.size());
    for (const auto& canonical : unique) {
      if (!gt.objects.count(canonical)) ++row.hallucinated;
    }
    row.has_hallucination = row.hallucinated > 0;

    report.n_objects += row.mentioned;
    report.n_hallucinated += row.hallucinated;
    if (row.has_hallucination) ++captions_with_hallucination;
    report.per_image.push_back(std::move(row));
  }
  report.n_captions = static_cast<long>(records.size());
  report.chair_i =
      report.n_objects > 0 ? static_cast<double>(report.n_hallucinated) / report.n_objects : 0.0;
  report.chair_s = report.n_captions > 0
                       ? static_cast<double>(captions_with_hallucination) / report.n_captions
                       : 0.0;
  return report;
}

struct PerImageF1 {
  std::string image_id;
  int predicted = 0;
  int gt_size = 0;
  int overlap = 0;
  double precision = 0.0;
  std::optional<double> recall;  // absent when the image has empty ground truth
  double f1 = 0.0;
};

struct F1Report {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int skipped_empty_gt = 0;
  std::vector<PerImageF1> per_image;
};

inline double harmonic_f1(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

// Micro-averaged over images: pooled overlap / pooled counts. Images with
// empty ground truth cannot contribute to recall and are excluded from the
// recall pool with a counted warning.
inline F1Report precision_recall_f1(const std::vector<CaptionEvalRecord>& records,
                                    const std::map<std::string, GroundTruth>& ground_truth) {
  F1Report report;
  long pooled_overlap = 0, pooled_pred = 0;
  long recall_overlap = 0, pooled_gt = 0;
  for (const auto& rec : records) {
    const GroundTruth& gt = gt_for(ground_truth, rec.image_id);
    std::set<std::string> pred(rec.mention_canonicals.begin(), rec.mention_canonicals.end());

    PerImageF1 row;
    row.image_id = rec.image_id;
    row.predicted = static_cast<int>(pred.size());
    row.gt_size = static_cast<int>(gt.objects.size());
    for (const auto& p : pred) {
      if (gt.objects.count(p)) ++row.overlap;
    }
    row.precision = row.predicted > 0 ? static_cast<double>(row.overlap) / row.predicted : 0.0;
    if (row.gt_size > 0) {
      row.recall = static_cast<double>(row.overlap) / row.gt_size;
      recall_overlap += row.overlap;
      pooled_gt += row.gt_size;
    } else {
      ++report.skipped_empty_gt;
    }
    row.f1 = harmonic_f1(row.precision, row.recall.value_or(0.0));

    pooled_overlap += row.overlap;
    pooled_pred += row.predicted;
    report.per_image.push_back(std::move(row));
  }
  report.precision = pooled_pred > 0 ? static_cast<double>(pooled_overlap) / pooled_pred : 0.0;
  report.recall = pooled_gt > 0 ? static_cast<double>(recall_overlap) / pooled_gt : 0.0;
  report.f1 = harmonic_f1(report.precision, report.recall);
  return report;
}

// ---------------------------------------------------------------------------
// AUROC with tie handling, plus the ROC curve for plotting.
// ---------------------------------------------------------------------------

struct LabeledScore {
  double score = 0.0;
  bool existent = false;  // false = hallucinated
};

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

struct AurocResult {
  double auroc = 0.0;
  std::vector<RocPoint> curve;
};

// Mann-Whitney via average ranks: probability a random existent object
// outscores a random hallucinated one, ties counting one half.
inline AurocResult auroc(const std::vector<LabeledScore>& scores) {
  long n_pos = 0, n_neg = 0;
  for (const auto& s : scores) (s.existent ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) {
    throw Error("AUROC undefined: need at least one existent and one hallucinated label");
  }

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a].score < scores[b].score; });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]].score == scores[order[i]].score) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (scores[order[k]].existent) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }

  AurocResult result;
  result.auroc = (rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0) /
                 (static_cast<double>(n_pos) * static_cast<double>(n_neg));

  // Curve points at every distinct threshold, sweeping from high to low.
  result.curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  long tp = 0, fp = 0;
  for (auto it = order.rbegin(); it != order.rend();) {
    const double threshold = scores[*it].score;
    while (it != order.rend() && scores[*it].score == threshold) {
      (scores[*it].existent ? tp : fp)++;
      ++it;
    }
    result.curve.push_back({threshold, static_cast<double>(fp) / n_neg,
                            static_cast<double>(tp) / n_pos});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Relative-position bins. The first bin is closed on both ends; later bins
// are left-open, so a boundary value belongs to the bin it closes.
// ---------------------------------------------------------------------------

struct PositionBin {
  double lo = 0.0;
  double hi = 1.0;
  bool closed_lo = false;  // only the first bin includes its lower edge
  long total = 0;
  long hallucinated = 0;
  std::optional<double> rate() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(hallucinated) / static_cast<double>(total);
  }
};

struct BinReport {
  std::vector<double> boundaries;
  std::vector<PositionBin> bins;
};

inline std::vector<PositionBin> make_bins(const std::vector<double>& boundaries) {
  for (std::size_t i = 0; i < boundaries.size(); ++i) {
    if (boundaries[i] < 0.0 || boundaries[i] > 1.0) {
      throw ConfigError("bin boundary out of [0,1]");
    }
    if (i > 0 && boundaries[i] <= boundaries[i - 1]) {
      throw ConfigError("bin boundaries must be strictly increasing");
    }
  }
  std::vector<PositionBin> bins;
  double lo = 0.0;
  for (std::size_t i = 0; i <= boundaries.size(); ++i) {
    PositionBin b;
    b.lo = lo;
    b.hi = i < boundaries.size() ? boundaries[i] : 1.0;
    b.closed_lo = i == 0;
    bins.push_back(b);
    lo = b.hi;
  }
  return bins;
}

inline int bin_index(double position, const std::vector<PositionBin>& bins) {
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const bool above_lo = i == 0 ? position >= bins[i].lo : position > bins[i].lo;
    if (above_lo && position <= bins[i].hi) return static_cast<int>(i);
  }
  return position <= 0.0 ? 0 : static_cast<int>(bins.size()) - 1;
}

inline BinReport position_bins(const std::vector<std::pair<double, bool>>& position_and_label,
                               const std::vector<double>& boundaries) {
  BinReport report;
  report.boundaries = boundaries;
  report.bins = make_bins(boundaries);
  for (const auto& [position, hallucinated] : position_and_label) {
    auto& bin = report.bins[static_cast<std::size_t>(bin_index(position, report.bins))];
    ++bin.total;
    if (hallucinated) ++bin.hallucinated;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report rendering: Table 1-style columns. Length is the mean caption word
// count (the column is not otherwise defined; this reading is labeled in the
// report header).
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string label;
  double mean_length = 0.0;
  double chair_s = 0.0;
  double chair_i = 0.0;
  double f1 = 0.0;
  std::optional<double> accuracy;
  std::optional<double> relevancy;
};

inline std::string render_results_table(const std::vector<ResultRow>& rows) {
  std::ostringstream out;
  out << "# Length = mean caption word count; CHAIR/F1 in percent\n";
  out << std::left << std::setw(28) << "Method" << std::right << std::setw(9) << "Length"
      << std::setw(9) << "CHAIR_S" << std::setw(9) << "CHAIR_I" << std::setw(9) << "F1"
      << std::setw(8) << "Acc." << std::setw(8) << "Rel." << "\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(28) << r.label << std::right << std::fixed
        << std::setprecision(1) << std::setw(9) << r.mean_length << std::setw(9)
        << 100.0 * r.chair_s << std::setw(9) << 100.0 * r.chair_i << std::setw(9) << 100.0 * r.f1;
    out << std::setprecision(2);
    if (r.accuracy) {
      out << std::setw(8) << *r.accuracy;
    } else {
      out << std::setw(8) << "-";
    }
    if (r.relevancy) {
      out << std::setw(8) << *r.relevancy;
    } else {
      out << std::setw(8) << "-";
    }
    out << "\n";
  }
  return out.str();
}

inline nlohmann::json to_json(const ChairReport& r) {
  nlohmann::json per_image = nlohmann::json::array();
  for (const auto& row : r.per_image) {
    per_image.push_back({{"image_id", row.image_id},
                         {"mentioned", row.mentioned},
                         {"hallucinated", row.hallucinated},
                         {"has_hallucination", row.has_hallucination}});
  }
  return {{"chair_s", r.chair_s},         {"chair_i", r.chair_i},
          {"n_captions", r.n_captions},   {"n_objects", r.n_objects},
          {"n_hallucinated", r.n_hallucinated}, {"per_image", per_image}};
}

inline nlohmann::json to_json(const F1Report& r) {
  nlohmann::json per_image = nlohmann::json::array();
  for (const auto& row : r.per_image) {
    nlohmann::json j{{"image_id", row.image_id}, {"predicted", row.predicted},
                     {"gt_size", row.gt_size},   {"overlap", row.overlap},
                     {"precision", row.precision}, {"f1", row.f1}};
    if (row.recall) j["recall"] = *row.recall;
    per_image.push_back(std::move(j));
  }
  return {{"precision", r.precision},
          {"recall", r.recall},
          {"f1", r.f1},
          {"skipped_empty_gt", r.skipped_empty_gt},
          {"per_image", per_image}};
}

inline nlohmann::json to_json(const AurocResult& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : r.curve) {
    curve.push_back({{"threshold", std::isinf(p.threshold) ? 1e308 : p.threshold},
                     {"fpr", p.fpr},
                     {"tpr", p.tpr}});
  }
  return {{"auroc", r.auroc}, {"curve", curve}};
}

inline nlohmann::json to_json(const BinReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : r.bins) {
    nlohmann::json j{{"lo", b.lo},       {"hi", b.hi},
                     {"closed_lo", b.closed_lo}, {"total", b.total},
                     {"hallucinated", b.hallucinated}};
    if (auto rate = b.rate()) j["rate"] = *rate;
    bins.push_back(std::move(j));
  }
  return {{"boundaries", r.boundaries}, {"bins", bins}};
}

}  // namespace capval
