#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "reinseg/autodiff.hpp"
#include "reinseg/rein.hpp"
#include "reinseg/types.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <random>
#include <string>
#include <vector>

using namespace reinseg;

namespace {

AdapterConfig worked_cfg() {
  AdapterConfig cfg;
  cfg.layers = 4;
  cfg.tokens = 16;
  cfg.rank = 4;
  cfg.width = 32;
  cfg.hidden = 64;
  cfg.query_dim = 32;
  cfg.seed = 11;
  return cfg;
}

Mat random_mat(std::mt19937_64& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = dist(rng);
  return m;
}

std::string bank(int layer, const char* suffix) {
  return "layer" + std::to_string(layer) + "." + suffix;
}

// Plain-Eigen oracle for one refine step, sharing nothing with the tape ops.
Mat oracle_refine(const Adapter& a, const Mat& f, int layer) {
  const ParamStore& s = a.params();
  const Mat T = s.get(bank(layer, "A")).value * s.get(bank(layer, "B")).value;
  const int c = static_cast<int>(f.cols());
  Mat sim = f * T.transpose() / std::sqrt(static_cast<double>(c));
  Mat attn(sim.rows(), sim.cols());
  for (int i = 0; i < sim.rows(); ++i) {
    Eigen::RowVectorXd row = sim.row(i);
    row.array() -= row.maxCoeff();
    Eigen::RowVectorXd e = row.array().exp();
    attn.row(i) = e / e.sum();
  }
  Mat mixed = attn * T;
  Mat h = mixed * s.get("mlp.w1").value;
  h.rowwise() += s.get("mlp.b1").value.row(0);
  // gelu(x) = x/2 * (1 + erf(x/sqrt(2)))
  h = h.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); });
  Mat delta = h * s.get("mlp.w2").value;
  delta.rowwise() += s.get("mlp.b2").value.row(0);
  return f + s.get(bank(layer, "gate")).value(0, 0) * delta;
}

}  // namespace

TEST_CASE("config validation rejects rank above min(m, c)") {
  AdapterConfig cfg = worked_cfg();
  CHECK_NOTHROW(cfg.validate());
  cfg.rank = 17;  // > tokens
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = worked_cfg();
  cfg.rank = 33;  // > width
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = worked_cfg();
  cfg.layers = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(AdapterConfig{}.hidden_or_default() == 64);
}

TEST_CASE("trainable count matches the closed form: worked fixture 5988") {
  AdapterConfig cfg = worked_cfg();
  CHECK(Adapter::expected_param_count(cfg) == 5988);
  Adapter a = Adapter::init(cfg);
  CHECK(a.param_count() == 5988);

  // Enumeration cross-check independent of scalar_count.
  std::size_t by_hand = 0;
  const ParamStore& s = a.params();
  for (std::size_t i = 0; i < s.size(); ++i) by_hand += s.at(i).count();
  CHECK(by_hand == 5988);
}

TEST_CASE("desk default adapter counts 7020 scalars") {
  AdapterConfig cfg;  // struct defaults: L=12, m=16, r=4, c=32, h=2c, d_q=16
  cfg.seed = 1;
  CHECK(Adapter::expected_param_count(cfg) == 7020);
  CHECK(Adapter::init(cfg).param_count() == 7020);
}

TEST_CASE("every gate is exactly zero at init") {
  Adapter a = Adapter::init(worked_cfg());
  for (int i = 0; i < 4; ++i) CHECK(a.bank(i).gate == 0.0);
}

TEST_CASE("materialized tokens: hand fixture and low-rank law") {
  Adapter a = Adapter::init(worked_cfg());
  SUBCASE("hand fixture A=[[1],[2]], B=[[3,4]]") {
    AdapterConfig tiny;
    tiny.layers = 1;
    tiny.tokens = 2;
    tiny.rank = 1;
    tiny.width = 8;
    tiny.query_dim = 4;
    tiny.seed = 2;
    Adapter t = Adapter::init(tiny);
    Mat& A = t.params().get("layer0.A").value;
    Mat& B = t.params().get("layer0.B").value;
    A << 1.0, 2.0;
    B.setZero();
    B(0, 0) = 3.0;
    B(0, 1) = 4.0;
    Mat T = t.materialize_tokens(0);
    CHECK(T(0, 0) == 3.0);
    CHECK(T(0, 1) == 4.0);
    CHECK(T(1, 0) == 6.0);
    CHECK(T(1, 1) == 8.0);
  }
  SUBCASE("zero A gives zero tokens") {
    a.params().get("layer1.A").value.setZero();
    CHECK((a.materialize_tokens(1).array() == 0.0).all());
  }
  SUBCASE("singular values beyond index r vanish") {
    for (int layer = 0; layer < 4; ++layer) {
      Eigen::JacobiSVD<Mat> svd(a.materialize_tokens(layer));
      const auto& sv = svd.singularValues();
      for (int i = 4; i < sv.size(); ++i) CHECK(sv(i) <= 1e-9);
    }
  }
}

TEST_CASE("full-rank banks can reproduce any target token matrix") {
  AdapterConfig cfg = worked_cfg();
  cfg.rank = 16;  // r = min(m, c) = m
  Adapter a = Adapter::init(cfg);
  std::mt19937_64 rng(31);
  Mat target = random_mat(rng, 16, 32);
  a.params().get("layer0.A").value = Mat::Identity(16, 16);
  a.params().get("layer0.B").value = target;
  CHECK((a.materialize_tokens(0) - target).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("refine with gate zero is a bitwise identity") {
  Adapter a = Adapter::init(worked_cfg());
  std::mt19937_64 rng(12);
  Mat f = random_mat(rng, 10, 32);
  ad::Tape t;
  Mat out = t.val(a.refine(t, t.constant(f), 0));
  CHECK((out.array() == f.array()).all());

  FeatureMap fm;
  fm.data = {f};
  fm.grid_h = 2;
  fm.grid_w = 5;
  FeatureMap refined = a.refine(fm, 2);
  CHECK((refined.data[0].array() == f.array()).all());
}

TEST_CASE("refine matches the plain-Eigen oracle with a live gate") {
  Adapter a = Adapter::init(worked_cfg());
  std::mt19937_64 rng(13);
  for (int layer = 0; layer < 4; ++layer)
    a.params().get(bank(layer, "gate")).value(0, 0) = 0.3 + 0.1 * layer;
  for (int trial = 0; trial < 5; ++trial) {
    Mat f = random_mat(rng, 7, 32);
    int layer = trial % 4;
    ad::Tape t;
    Mat got = t.val(a.refine(t, t.constant(f), layer));
    Mat want = oracle_refine(a, f, layer);
    CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("m=1 bank reduces to f + gate*mlp(T)") {
  AdapterConfig cfg;
  cfg.layers = 2;
  cfg.tokens = 1;
  cfg.rank = 1;
  cfg.width = 16;
  cfg.hidden = 8;
  cfg.query_dim = 4;
  cfg.seed = 3;
  Adapter a = Adapter::init(cfg);
  a.params().get("layer0.gate").value(0, 0) = 0.7;
  std::mt19937_64 rng(14);
  Mat f = random_mat(rng, 5, 16);

  // With one token, softmax over a single column is identically 1, so the
  // mixed tokens equal T for every row.
  Mat T = a.materialize_tokens(0);
  Mat h = T * a.params().get("mlp.w1").value;
  h.rowwise() += a.params().get("mlp.b1").value.row(0);
  h = h.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); });
  Mat delta = h * a.params().get("mlp.w2").value;
  delta.rowwise() += a.params().get("mlp.b2").value.row(0);
  Mat want = f;
  want.rowwise() += 0.7 * delta.row(0);

  ad::Tape t;
  Mat got = t.val(a.refine(t, t.constant(f), 0));
  CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("refine rejects mismatched feature width") {
  Adapter a = Adapter::init(worked_cfg());
  ad::Tape t;
  Mat narrow = Mat::Zero(4, 16);
  CHECK_THROWS_WITH_AS(a.refine(t, t.constant(narrow), 0), doctest::Contains("expected 32"),
                       ShapeError);
}

TEST_CASE("one shared MLP drives every layer") {
  Adapter a = Adapter::init(worked_cfg());
  // Exactly one MLP parameter set regardless of L.
  int mlp_params = 0;
  for (std::size_t i = 0; i < a.params().size(); ++i)
    if (a.params().at(i).name.rfind("mlp.", 0) == 0) ++mlp_params;
  CHECK(mlp_params == 4);

  for (int layer = 0; layer < 4; ++layer)
    a.params().get(bank(layer, "gate")).value(0, 0) = 0.5;
  std::mt19937_64 rng(15);
  Mat f = random_mat(rng, 6, 32);
  std::vector<Mat> before;
  for (int layer = 0; layer < 4; ++layer) {
    ad::Tape t;
    before.push_back(t.val(a.refine(t, t.constant(f), layer)));
  }
  a.params().get("mlp.b2").value.array() += 0.25;
  for (int layer = 0; layer < 4; ++layer) {
    ad::Tape t;
    Mat after = t.val(a.refine(t, t.constant(f), layer));
    CHECK((after - before[layer]).cwiseAbs().maxCoeff() > 1e-3);
  }
}

TEST_CASE("queries are the layer-mean of projected tokens") {
  Adapter a = Adapter::init(worked_cfg());
  Mat want = Mat::Zero(16, 32);
  for (int layer = 0; layer < 4; ++layer)
    want += a.materialize_tokens(layer) * a.params().get("w_q").value;
  want /= 4.0;
  QueryBank qb = a.extract_queries();
  REQUIRE(qb.Q.rows() == 16);
  REQUIRE(qb.Q.cols() == 32);
  CHECK((qb.Q - want).cwiseAbs().maxCoeff() <= 1e-12);

  ad::Tape t;
  CHECK((t.val(a.queries(t)) - want).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("single-layer queries equal T*W_q; zero banks give zero queries") {
  AdapterConfig cfg = worked_cfg();
  cfg.layers = 1;
  Adapter a = Adapter::init(cfg);
  Mat want = a.materialize_tokens(0) * a.params().get("w_q").value;
  CHECK((a.extract_queries().Q - want).cwiseAbs().maxCoeff() == 0.0);

  a.params().get("layer0.A").value.setZero();
  CHECK((a.extract_queries().Q.array() == 0.0).all());
}

TEST_CASE("opposed banks cancel in the query mean") {
  AdapterConfig cfg = worked_cfg();
  cfg.layers = 2;
  cfg.rank = 16;
  Adapter a = Adapter::init(cfg);
  std::mt19937_64 rng(16);
  Mat target = random_mat(rng, 16, 32);
  a.params().get("layer0.A").value = Mat::Identity(16, 16);
  a.params().get("layer0.B").value = target;
  a.params().get("layer1.A").value = Mat::Identity(16, 16);
  a.params().get("layer1.B").value = -target;
  CHECK(a.extract_queries().Q.cwiseAbs().maxCoeff() <= 1e-7);
}

TEST_CASE("trainable_parameters groups exactly the adapter scalars") {
  Adapter a = Adapter::init(worked_cfg());
  ParamGroup g = a.trainable_parameters();
  CHECK(g.name == "rein");
  CHECK(g.trainable);
  CHECK(g.scalar_count() == 5988);
  for (const Param* p : g.params) CHECK(p->group == "rein");
}

TEST_CASE("adapter gradients match finite differences") {
  AdapterConfig cfg;
  cfg.layers = 2;
  cfg.tokens = 4;
  cfg.rank = 2;
  cfg.width = 8;
  cfg.hidden = 6;
  cfg.query_dim = 3;
  cfg.seed = 21;
  Adapter a = Adapter::init(cfg);
  a.params().get("layer0.gate").value(0, 0) = 0.4;
  a.params().get("layer1.gate").value(0, 0) = -0.2;
  std::mt19937_64 rng(22);
  Mat f = random_mat(rng, 5, 8);
  Mat wr = random_mat(rng, 5, 8);
  Mat wq = random_mat(rng, 4, 3);

  // Loss touches both refine paths and the query path so every adapter
  // parameter (banks, gates, shared MLP, W_q) receives gradient.
  auto eval = [&](bool want_backward) {
    ad::Tape t;
    ad::Var r0 = a.refine(t, t.constant(f), 0);
    ad::Var r1 = a.refine(t, r0, 1);
    ad::Var loss = ad::mean_all(t, ad::cmul(t, r1, t.constant(wr)));
    ad::Var q = ad::mean_all(t, ad::cmul(t, a.queries(t), t.constant(wq)));
    ad::Var total = ad::add(t, loss, q);
    if (want_backward) t.backward(total);
    return t.val(total)(0, 0);
  };

  a.params().zero_grads();
  eval(true);
  const double eps = 1e-4;
  for (std::size_t pi = 0; pi < a.params().size(); ++pi) {
    Param& p = a.params().at(pi);
    // Probe a few entries per parameter to keep the sweep quick.
    for (Eigen::Index k = 0; k < p.value.size(); k += std::max<Eigen::Index>(1, p.value.size() / 3)) {
      double orig = p.value(k);
      p.value(k) = orig + eps;
      double up = eval(false);
      p.value(k) = orig - eps;
      double dn = eval(false);
      p.value(k) = orig;
      double fd = (up - dn) / (2.0 * eps);
      double an = p.grad(k);
      double rel = std::abs(an - fd) / std::max({1e-4, std::abs(an), std::abs(fd)});
      CAPTURE(p.name);
      CAPTURE(k);
      CHECK(rel <= 1e-3);
    }
  }
}
