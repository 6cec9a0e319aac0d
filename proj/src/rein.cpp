#include "reinseg/rein.hpp"

#include "reinseg/rng.hpp"

#include <cmath>
#include <sstream>

namespace reinseg {

namespace {
std::string bank_name(int i, const char* suffix) {
  std::ostringstream os;
  os << "layer" << i << "." << suffix;
  return os.str();
}

void init_uniform(Param& p, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value(i) = dist(rng);
}

void init_xavier(Param& p, std::mt19937_64& rng) {
  const double std = std::sqrt(2.0 / (p.value.rows() + p.value.cols()));
  std::normal_distribution<double> dist(0.0, std);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value(i) = dist(rng);
}
}  // namespace

void AdapterConfig::validate() const {
  if (layers < 1) throw ConfigError("adapter layers must be >= 1");
  if (tokens < 1) throw ConfigError("adapter tokens must be >= 1");
  if (width < 1) throw ConfigError("adapter width must be >= 1");
  if (query_dim < 1) throw ConfigError("adapter query_dim must be >= 1");
  if (rank < 1 || rank > std::min(tokens, width)) {
    std::ostringstream os;
    os << "adapter rank " << rank << " exceeds min(tokens, width) = " << std::min(tokens, width);
    throw ConfigError(os.str());
  }
}

std::size_t Adapter::expected_param_count(const AdapterConfig& cfg) {
  const std::size_t L = cfg.layers, m = cfg.tokens, r = cfg.rank, c = cfg.width,
                    h = cfg.hidden_or_default(), dq = cfg.query_dim;
  return L * (m * r + r * c + 1) + (c * h + h + h * c + c) + c * dq;
}

Adapter Adapter::init(const AdapterConfig& cfg) {
  cfg.validate();
  Adapter a;
  a.cfg_ = cfg;
  auto rng = make_rng(cfg.seed);
  const int c = cfg.width;
  const int h = cfg.hidden_or_default();
  const std::string grp = "rein";

  for (int i = 0; i < cfg.layers; ++i) {
    init_uniform(a.store_.add(bank_name(i, "A"), cfg.tokens, cfg.rank, grp), rng, 0.02);
    init_uniform(a.store_.add(bank_name(i, "B"), cfg.rank, c, grp), rng, 0.02);
    a.store_.add(bank_name(i, "gate"), 1, 1, grp, true, false);  // init 0
  }
  init_xavier(a.store_.add("mlp.w1", c, h, grp), rng);
  a.store_.add("mlp.b1", 1, h, grp, true, false);
  init_xavier(a.store_.add("mlp.w2", h, c, grp), rng);
  a.store_.add("mlp.b2", 1, c, grp, true, false);
  init_xavier(a.store_.add("w_q", c, cfg.query_dim, grp), rng);
  return a;
}

TokenBank Adapter::bank(int layer) const {
  return TokenBank{store_.get(bank_name(layer, "A")).value, store_.get(bank_name(layer, "B")).value,
                   store_.get(bank_name(layer, "gate")).value(0, 0), layer};
}

Mat Adapter::materialize_tokens(int layer) const {
  return store_.get(bank_name(layer, "A")).value * store_.get(bank_name(layer, "B")).value;
}

ad::Var Adapter::refine(ad::Tape& t, ad::Var features, int layer) {
  const int c = cfg_.width;
  if (t.val(features).cols() != c) {
    std::ostringstream os;
    os << "refine: feature width mismatch: expected " << c << ", got " << t.val(features).cols();
    throw ShapeError(os.str());
  }
  ad::Var tok = ad::matmul(t, t.leaf(store_.get(bank_name(layer, "A"))),
                           t.leaf(store_.get(bank_name(layer, "B"))));
  ad::Var sim = ad::scale(t, ad::matmul_nt(t, features, tok), 1.0 / std::sqrt(double(c)));
  ad::Var attn = ad::row_softmax(t, sim);
  ad::Var mixed = ad::matmul(t, attn, tok);
  ad::Var hvar = ad::matmul(t, mixed, t.leaf(store_.get("mlp.w1")));
  hvar = ad::add_row_broadcast(t, hvar, t.leaf(store_.get("mlp.b1")));
  hvar = ad::gelu(t, hvar);
  ad::Var delta = ad::matmul(t, hvar, t.leaf(store_.get("mlp.w2")));
  delta = ad::add_row_broadcast(t, delta, t.leaf(store_.get("mlp.b2")));
  ad::Var gated = ad::gate_scale(t, delta, t.leaf(store_.get(bank_name(layer, "gate"))));
  return ad::add(t, features, gated);
}

FeatureMap Adapter::refine(const FeatureMap& features, int layer) {
  FeatureMap out;
  out.grid_h = features.grid_h;
  out.grid_w = features.grid_w;
  out.data.reserve(features.data.size());
  for (const Mat& f : features.data) {
    ad::Tape t;
    ad::Var v = refine(t, t.constant(f), layer);
    out.data.push_back(t.val(v));
  }
  return out;
}

ad::Var Adapter::queries(ad::Tape& t) {
  ad::Var wq = t.leaf(store_.get("w_q"));
  ad::Var acc;
  for (int i = 0; i < cfg_.layers; ++i) {
    ad::Var tok = ad::matmul(t, t.leaf(store_.get(bank_name(i, "A"))),
                             t.leaf(store_.get(bank_name(i, "B"))));
    ad::Var proj = ad::matmul(t, tok, wq);
    acc = acc.ok() ? ad::add(t, acc, proj) : proj;
  }
  return ad::scale(t, acc, 1.0 / static_cast<double>(cfg_.layers));
}

QueryBank Adapter::extract_queries() {
  ad::Tape t;
  return QueryBank{t.val(queries(t))};
}

ParamGroup Adapter::trainable_parameters() {
  ParamGroup g;
  g.name = "rein";
  g.params = store_.all();
  g.trainable = true;
  return g;
}

AdapterHook Adapter::hook() {
  return [this](ad::Tape& t, ad::Var f, int layer) { return refine(t, f, layer); };
}

}  // namespace reinseg
