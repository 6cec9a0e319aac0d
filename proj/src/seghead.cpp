#include "reinseg/seghead.hpp"

#include "reinseg/rng.hpp"

#include <cmath>
#include <sstream>

namespace reinseg {

namespace {
constexpr double kDiceEps = 1e-7;

void init_xavier(Param& p, std::mt19937_64& rng) {
  const double std = std::sqrt(2.0 / (p.value.rows() + p.value.cols()));
  std::normal_distribution<double> dist(0.0, std);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value(i) = dist(rng);
}
}  // namespace

void HeadConfig::validate() const {
  if (query_dim < 1) throw ConfigError("head query_dim must be >= 1");
  if (width < 1) throw ConfigError("head width must be >= 1");
  if (out_size < 1) throw ConfigError("head out_size must be >= 1");
  if (expected_queries < 1) throw ConfigError("head expected_queries must be >= 1");
  if (threshold < 0.0 || threshold > 1.0) throw ConfigError("head threshold must be in [0,1]");
}

Head Head::init(const HeadConfig& cfg, int static_query_count) {
  cfg.validate();
  Head h;
  h.cfg_ = cfg;
  auto rng = make_rng(cfg.seed);
  const int hid = cfg.hidden_or_default();
  const std::string grp = "head";

  init_xavier(h.store_.add("mask_mlp.w1", cfg.query_dim, hid, grp), rng);
  h.store_.add("mask_mlp.b1", 1, hid, grp, true, false);
  init_xavier(h.store_.add("mask_mlp.w2", hid, cfg.width, grp), rng);
  h.store_.add("mask_mlp.b2", 1, cfg.width, grp, true, false);
  // Zero class weights plus a no-object bias keep the initial aggregated
  // probability well inside (0,1) so the clamp starts inactive.
  h.store_.add("cls.w", cfg.query_dim, 2, grp);
  Param& cb = h.store_.add("cls.b", 1, 2, grp, true, false);
  cb.value(0, 1) = std::log(2.0 * cfg.expected_queries);
  if (static_query_count > 0) {
    Param& q = h.store_.add("queries", static_query_count, cfg.query_dim, grp, true, false);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (Eigen::Index i = 0; i < q.value.size(); ++i) q.value(i) = dist(rng);
  }
  return h;
}

ad::Var Head::static_queries(ad::Tape& t) {
  if (!has_static_queries()) {
    throw ConfigError("head has no static queries; build it with static_query_count > 0");
  }
  return t.leaf(store_.get("queries"));
}

Head::EmbeddedQueries Head::embed_queries(ad::Tape& t, ad::Var queries) {
  if (t.val(queries).cols() != cfg_.query_dim) {
    std::ostringstream os;
    os << "head: query width mismatch: expected " << cfg_.query_dim << ", got "
       << t.val(queries).cols();
    throw ShapeError(os.str());
  }
  ad::Var e = ad::matmul(t, queries, t.leaf(store_.get("mask_mlp.w1")));
  e = ad::add_row_broadcast(t, e, t.leaf(store_.get("mask_mlp.b1")));
  e = ad::gelu(t, e);
  e = ad::matmul(t, e, t.leaf(store_.get("mask_mlp.w2")));
  e = ad::add_row_broadcast(t, e, t.leaf(store_.get("mask_mlp.b2")));

  ad::Var cls = ad::matmul(t, queries, t.leaf(store_.get("cls.w")));
  cls = ad::add_row_broadcast(t, cls, t.leaf(store_.get("cls.b")));
  ad::Var fg = ad::slice_cols(t, ad::row_softmax(t, cls), 0, 1);
  return EmbeddedQueries{e, cls, fg};
}

ad::Var Head::semantic_prob_row(ad::Tape& t, const EmbeddedQueries& eq, ad::Var features,
                                int grid_h, int grid_w) {
  if (t.val(features).cols() != cfg_.width) {
    std::ostringstream os;
    os << "head: feature width mismatch: expected " << cfg_.width << ", got "
       << t.val(features).cols();
    throw ShapeError(os.str());
  }
  ad::Var logits = ad::matmul_nt(t, eq.mask_embed, features);  // m x n
  ad::Var up = ad::bilinear_upsample_rows(t, logits, grid_h, grid_w, cfg_.out_size, cfg_.out_size);
  ad::Var probs = ad::sigmoid(t, up);
  return ad::clamp01(t, ad::sum_rows(t, ad::scale_rows(t, probs, eq.fg_prob)));
}

MaskPrediction Head::predict(const Mat& features, int grid_h, int grid_w,
                             const QueryBank& queries) {
  ad::Tape t;
  t.set_grad_enabled(false);
  ad::Var q = t.constant(queries.Q);
  EmbeddedQueries eq = embed_queries(t, q);
  ad::Var f = t.constant(features);
  ad::Var logits = ad::matmul_nt(t, eq.mask_embed, f);
  ad::Var up;
  if (cfg_.bilinear) {
    up = ad::bilinear_upsample_rows(t, logits, grid_h, grid_w, cfg_.out_size, cfg_.out_size);
  } else {
    up = t.constant(
        ad::nearest_upsample_rows(t.val(logits), grid_h, grid_w, cfg_.out_size, cfg_.out_size));
  }
  ad::Var probs = ad::sigmoid(t, up);
  ad::Var sem = ad::clamp01(t, ad::sum_rows(t, ad::scale_rows(t, probs, eq.fg_prob)));

  MaskPrediction out;
  const Mat& upv = t.val(up);
  out.per_query_mask_logits.reserve(upv.rows());
  for (Eigen::Index i = 0; i < upv.rows(); ++i) {
    out.per_query_mask_logits.push_back(unflatten_row(upv.row(i), cfg_.out_size, cfg_.out_size));
  }
  out.per_query_class_logits = t.val(eq.class_logits);
  out.semantic_prob = unflatten_row(t.val(sem), cfg_.out_size, cfg_.out_size);
  return out;
}

Mat flatten_mask(const MaskArray& m) {
  Mat row(1, m.size());
  for (Eigen::Index y = 0; y < m.rows(); ++y) {
    for (Eigen::Index x = 0; x < m.cols(); ++x) {
      row(0, y * m.cols() + x) = static_cast<double>(m(y, x));
    }
  }
  return row;
}

Mat unflatten_row(const Mat& row, int h, int w) {
  if (row.size() != static_cast<Eigen::Index>(h) * w) {
    throw ShapeError("unflatten_row: size mismatch");
  }
  Mat out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out(y, x) = row(y * static_cast<Eigen::Index>(w) + x);
  }
  return out;
}

namespace {
void check_binary(const MaskArray& gt) {
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (gt(i) > 1) {
      throw ValidationError("loss: ground-truth mask must be binary (0/1)");
    }
  }
}
}  // namespace

ad::Var segmentation_loss(ad::Tape& t, ad::Var semantic_row, const MaskArray& gt) {
  check_binary(gt);
  Mat gt_row = flatten_mask(gt);
  if (t.val(semantic_row).size() != gt_row.size()) {
    std::ostringstream os;
    os << "loss: prediction has " << t.val(semantic_row).size() << " pixels, mask has "
       << gt_row.size();
    throw ShapeError(os.str());
  }
  ad::Var bce = ad::bce_mean(t, semantic_row, gt_row);
  ad::Var inter = ad::sum_all(t, ad::cmul(t, semantic_row, t.constant(gt_row)));
  ad::Var psum = ad::sum_all(t, semantic_row);
  const double gsum = gt_row.sum();
  ad::Var num = ad::shift(t, ad::scale(t, inter, 2.0), kDiceEps);
  ad::Var den = ad::shift(t, psum, gsum + kDiceEps);
  ad::Var dice = ad::div11(t, num, den);
  return ad::add(t, bce, ad::shift(t, ad::scale(t, dice, -1.0), 1.0));
}

double loss(const MaskPrediction& pred, const MaskArray& gt) {
  if (pred.semantic_prob.rows() != gt.rows() || pred.semantic_prob.cols() != gt.cols()) {
    throw ShapeError("loss: prediction and mask shapes differ");
  }
  ad::Tape t;
  t.set_grad_enabled(false);
  Mat row(1, pred.semantic_prob.size());
  for (Eigen::Index y = 0; y < pred.semantic_prob.rows(); ++y) {
    for (Eigen::Index x = 0; x < pred.semantic_prob.cols(); ++x) {
      row(0, y * pred.semantic_prob.cols() + x) = pred.semantic_prob(y, x);
    }
  }
  ad::Var l = segmentation_loss(t, t.constant(row), gt);
  return t.val(l)(0, 0);
}

}  // namespace reinseg
