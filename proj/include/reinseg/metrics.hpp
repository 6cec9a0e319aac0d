#pragma once

#include "reinseg/types.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace reinseg {

/// Pixel set sizes underlying every overlap metric.
struct PairCounts {
  std::int64_t intersection = 0;
  std::int64_t pred_area = 0;
  std::int64_t gt_area = 0;

  std::int64_t union_area() const { return pred_area + gt_area - intersection; }
};

/// Counts foreground overlap between two equally shaped binary masks.
/// Throws ShapeError on mismatch.
PairCounts count_pair(const MaskArray& pred, const MaskArray& gt);

/// Dice similarity 2|P∩G|/(|P|+|G|); both masks empty gives 1.0.
double dsc(const MaskArray& pred, const MaskArray& gt);

/// Jaccard similarity |P∩G|/|P∪G|; both masks empty gives 1.0.
double jsc(const MaskArray& pred, const MaskArray& gt);

/// Mean of foreground IoU and background IoU, each defaulting to 1.0 when
/// the class is absent from both masks.
double miou(const MaskArray& pred, const MaskArray& gt);

/// Combined challenge score 0.5*dsc + 0.5*jsc. Throws ValidationError when
/// either input leaves [0,1].
double challenge_score(double d, double j);

struct MetricRow {
  std::string name;
  double dsc = 0.0;
  double miou = 0.0;
  double jsc = 0.0;
  double score = 0.0;
};

/// Per-image rows plus their arithmetic mean as a trailing AGGREGATE row.
struct MetricReport {
  std::vector<MetricRow> rows;
  MetricRow aggregate;

  /// Header `name,dsc,miou,jsc,score`, six decimals, AGGREGATE last.
  std::string to_csv() const;
};

MetricRow evaluate_pair(const std::string& name, const MaskArray& pred, const MaskArray& gt);

/// Builds the aggregate row as the per-image mean. Throws ValidationError on
/// an empty row list.
MetricReport make_report(std::vector<MetricRow> rows);

/// Scores matching mask stems of two directories (PNG files, compared by
/// basename without extension). Unmatched stems on either side raise a
/// ValidationError naming every offender.
MetricReport evaluate_dirs(const std::string& pred_dir, const std::string& gt_dir);

/// Leaderboard order: descending score, ties broken lexicographically.
/// Throws ValidationError on non-finite scores.
std::vector<std::pair<std::string, double>> rank_teams(const std::map<std::string, double>& scores);

}  // namespace reinseg
