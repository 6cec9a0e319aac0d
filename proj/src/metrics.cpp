#include "reinseg/metrics.hpp"

#include "reinseg/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace reinseg {
namespace {

void check_same_shape(const MaskArray& pred, const MaskArray& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) {
    std::ostringstream msg;
    msg << "mask shape mismatch: pred " << pred.rows() << "x" << pred.cols() << " vs gt "
        << gt.rows() << "x" << gt.cols();
    throw ShapeError(msg.str());
  }
}

std::string format_row(const MetricRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f", r.name.c_str(), r.dsc, r.miou, r.jsc,
                r.score);
  return buf;
}

}  // namespace

PairCounts count_pair(const MaskArray& pred, const MaskArray& gt) {
  check_same_shape(pred, gt);
  PairCounts c;
  for (Eigen::Index j = 0; j < pred.cols(); ++j) {
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
      bool p = pred(i, j) != 0, g = gt(i, j) != 0;
      c.pred_area += p;
      c.gt_area += g;
      c.intersection += p && g;
    }
  }
  return c;
}

double dsc(const MaskArray& pred, const MaskArray& gt) {
  PairCounts c = count_pair(pred, gt);
  std::int64_t denom = c.pred_area + c.gt_area;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(denom);
}

double jsc(const MaskArray& pred, const MaskArray& gt) {
  PairCounts c = count_pair(pred, gt);
  std::int64_t u = c.union_area();
  if (u == 0) return 1.0;
  return static_cast<double>(c.intersection) / static_cast<double>(u);
}

double miou(const MaskArray& pred, const MaskArray& gt) {
  PairCounts fg = count_pair(pred, gt);
  std::int64_t total = pred.size();
  // Background counts follow from the foreground ones by complementation.
  std::int64_t bg_pred = total - fg.pred_area;
  std::int64_t bg_gt = total - fg.gt_area;
  std::int64_t bg_inter = total - fg.union_area();
  std::int64_t bg_union = bg_pred + bg_gt - bg_inter;

  double iou_fg = fg.union_area() == 0
                      ? 1.0
                      : static_cast<double>(fg.intersection) / static_cast<double>(fg.union_area());
  double iou_bg =
      bg_union == 0 ? 1.0 : static_cast<double>(bg_inter) / static_cast<double>(bg_union);
  return 0.5 * (iou_fg + iou_bg);
}

double challenge_score(double d, double j) {
  if (!(d >= 0.0 && d <= 1.0) || !(j >= 0.0 && j <= 1.0)) {
    std::ostringstream msg;
    msg << "challenge_score expects inputs in [0,1], got dsc=" << d << " jsc=" << j;
    throw ValidationError(msg.str());
  }
  return 0.5 * d + 0.5 * j;
}

MetricRow evaluate_pair(const std::string& name, const MaskArray& pred, const MaskArray& gt) {
  MetricRow row;
  row.name = name;
  row.dsc = dsc(pred, gt);
  row.miou = miou(pred, gt);
  row.jsc = jsc(pred, gt);
  row.score = challenge_score(row.dsc, row.jsc);
  return row;
}

MetricReport make_report(std::vector<MetricRow> rows) {
  if (rows.empty()) throw ValidationError("metric report needs at least one row");
  MetricReport rep;
  rep.rows = std::move(rows);
  rep.aggregate.name = "AGGREGATE";
  for (const MetricRow& r : rep.rows) {
    rep.aggregate.dsc += r.dsc;
    rep.aggregate.miou += r.miou;
    rep.aggregate.jsc += r.jsc;
    rep.aggregate.score += r.score;
  }
  double n = static_cast<double>(rep.rows.size());
  rep.aggregate.dsc /= n;
  rep.aggregate.miou /= n;
  rep.aggregate.jsc /= n;
  rep.aggregate.score /= n;
  return rep;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "name,dsc,miou,jsc,score\n";
  for (const MetricRow& r : rows) out << format_row(r) << "\n";
  out << format_row(aggregate) << "\n";
  return out.str();
}

MetricReport evaluate_dirs(const std::string& pred_dir, const std::string& gt_dir) {
  auto collect = [](const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    std::map<std::string, fs::path> stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
      stems.emplace(entry.path().stem().string(), entry.path());
    }
    return stems;
  };
  std::map<std::string, fs::path> preds = collect(pred_dir);
  std::map<std::string, fs::path> gts = collect(gt_dir);

  std::vector<std::string> unmatched;
  for (const auto& [stem, path] : preds)
    if (!gts.count(stem)) unmatched.push_back(stem + " (prediction without ground truth)");
  for (const auto& [stem, path] : gts)
    if (!preds.count(stem)) unmatched.push_back(stem + " (ground truth without prediction)");
  if (!unmatched.empty()) {
    std::ostringstream msg;
    msg << "unmatched mask stems:";
    for (const std::string& s : unmatched) msg << "\n  " << s;
    throw ValidationError(msg.str());
  }
  if (preds.empty()) throw ValidationError("no PNG masks found in " + pred_dir);

  std::vector<MetricRow> rows;
  rows.reserve(preds.size());
  for (const auto& [stem, path] : preds)
    rows.push_back(evaluate_pair(stem, read_mask_png(path.string()),
                                 read_mask_png(gts.at(stem).string())));
  return make_report(std::move(rows));
}

std::vector<std::pair<std::string, double>> rank_teams(const std::map<std::string, double>& scores) {
  std::vector<std::pair<std::string, double>> order(scores.begin(), scores.end());
  for (const auto& [name, s] : order)
    if (!std::isfinite(s)) throw ValidationError("non-finite score for team " + name);
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return order;
}

}  // namespace reinseg
