#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "reinseg/datagen.hpp"
#include "reinseg/train.hpp"
#include "reinseg/types.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace reinseg;

namespace {

RunConfig tiny_run_config() {
  RunConfig rc = RunConfig::defaults();
  rc.set("backbone.layers", "2");
  rc.set("backbone.width", "16");
  rc.set("backbone.patch", "16");
  rc.set("backbone.input", "32");
  rc.set("rein.tokens", "4");
  rc.set("rein.rank", "2");
  rc.set("rein.query_dim", "8");
  rc.set("head.hidden", "8");
  rc.set("train.crop_size", "32");
  rc.set("data.image_size", "48");
  return rc;
}

std::vector<ImageSample> tiny_dataset(int per_domain = 6, int size = 48) {
  std::vector<ImageSample> all;
  for (const DomainSpec& d : default_seen_domains(31)) {
    auto part = generate_domain(d, per_domain, size);
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

}  // namespace

TEST_CASE("adamw reproduces a hand-computed first step") {
  ParamStore store;
  Param& p = store.add("w", 1, 2, "head");
  p.value << 1.0, -2.0;
  p.grad << 0.5, -0.25;
  ParamGroup g{"head", {&p}, true, 0.1};

  AdamW opt({g}, 0.0);
  opt.step();

  // t=1: m = 0.1*grad, v = 0.001*grad^2, mhat = grad, vhat = grad^2,
  // update = grad/(|grad|+eps) -> theta - lr*sign with eps correction.
  const double eps = 1e-8;
  double want0 = 1.0 - 0.1 * (0.5 / (std::sqrt(0.25) + eps));
  double want1 = -2.0 - 0.1 * (-0.25 / (std::sqrt(0.0625) + eps));
  CHECK(p.value(0, 0) == doctest::Approx(want0).epsilon(1e-12));
  CHECK(p.value(0, 1) == doctest::Approx(want1).epsilon(1e-12));
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("adamw second step uses accumulated moments and bias correction") {
  ParamStore store;
  Param& p = store.add("w", 1, 1, "head");
  p.value << 0.5;
  ParamGroup g{"head", {&p}, true, 0.01};
  AdamW opt({g}, 0.0);

  // Two steps with constant gradient 0.2; track moments by hand.
  double m = 0.0, v = 0.0, theta = 0.5;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01, grad = 0.2;
  for (int t = 1; t <= 2; ++t) {
    p.grad << grad;
    opt.step();
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    double mhat = m / (1 - std::pow(b1, t));
    double vhat = v / (1 - std::pow(b2, t));
    theta -= lr * (mhat / (std::sqrt(vhat) + eps));
    CHECK(p.value(0, 0) == doctest::Approx(theta).epsilon(1e-12));
  }
}

TEST_CASE("decoupled weight decay applies only to decay-flagged parameters") {
  ParamStore store;
  Param& w = store.add("w", 1, 1, "head", true, true);
  Param& b = store.add("b", 1, 1, "head", true, false);
  w.value << 1.0;
  b.value << 1.0;
  w.grad << 0.0;
  b.grad << 0.0;
  ParamGroup g{"head", {&w, &b}, true, 0.1};
  AdamW opt({g}, 0.01);
  opt.step();
  // Zero gradient: the only update is lr*wd*theta on the decaying weight.
  CHECK(w.value(0, 0) == doctest::Approx(1.0 - 0.1 * 0.01 * 1.0).epsilon(1e-12));
  CHECK(b.value(0, 0) == 1.0);
}

TEST_CASE("frozen groups receive no update even with gradients present") {
  ParamStore store;
  Param& w = store.add("w", 2, 2, "backbone");
  w.value.setConstant(1.0);
  w.grad.setConstant(5.0);
  w.trainable = false;
  ParamGroup g{"backbone", {&w}, false, 0.1};
  AdamW opt({g}, 0.01);
  opt.step();
  CHECK((w.value.array() == 1.0).all());
}

TEST_CASE("zero_grad clears every group") {
  ParamStore store;
  Param& w = store.add("w", 2, 2, "head");
  w.grad.setConstant(3.0);
  AdamW opt({ParamGroup{"head", {&w}, true, 0.1}}, 0.0);
  opt.zero_grad();
  CHECK((w.grad.array() == 0.0).all());
}

TEST_CASE("build_optimizer wires learning rates by group name") {
  RunConfig rc = tiny_run_config();
  SegModel model = SegModel::build(rc.model());
  TrainConfig tc = rc.train();
  AdamW opt = build_optimizer(model.param_groups(), tc, model.total_param_count());
  for (const ParamGroup& g : opt.groups()) {
    if (g.name == "backbone") {
      CHECK(g.learning_rate == tc.lr_backbone);
      CHECK_FALSE(g.trainable);
    } else if (g.name == "rein") {
      CHECK(g.learning_rate == tc.lr_rein);
    } else if (g.name == "head") {
      CHECK(g.learning_rate == tc.lr_head);
    } else {
      FAIL("unexpected group ", g.name);
    }
  }

  ParamStore store;
  ParamGroup odd{"sidecar", {&store.add("w", 1, 1, "sidecar")}, true, 0.0};
  CHECK_THROWS_AS(build_optimizer({odd}, tc, 1), ConfigError);
}

TEST_CASE("param_report: desk default trains under 5 percent of the model") {
  RunConfig rc = RunConfig::defaults();
  SegModel model = SegModel::build(rc.model());
  ParamReport report = param_report(model, rc.train());
  CHECK(report.total == model.total_param_count());
  CHECK(report.trainable == model.trainable_param_count());
  CHECK(report.fraction < 0.05);
  CHECK(report.fraction > 0.0);
  REQUIRE(report.rows.size() == 3);
  std::string table = report.table();
  CHECK(table.find("backbone") != std::string::npos);
  CHECK(table.find("rein") != std::string::npos);
  CHECK(table.find("head") != std::string::npos);

  // The adapter itself is the 7020-parameter desk configuration.
  for (const GroupReportRow& row : report.rows)
    if (row.name == "rein") CHECK(row.params == 7020);
}

TEST_CASE("short training run decreases the loss and respects freezing") {
  fs::path out = fs::temp_directory_path() / "reinseg_train_short";
  fs::remove_all(out);
  RunConfig rc = tiny_run_config();
  // The zero-init gates hold the adapter silent for the first ~150
  // iterations on this tiny model, so a shorter run would only sample noise.
  rc.set("train.iterations", "200");
  rc.set("train.batch_size", "4");
  SegModel model = SegModel::build(rc.model());
  REQUIRE(model.backbone().frozen_digest().has_value());
  std::uint64_t frozen = *model.backbone().frozen_digest();
  std::uint64_t head_before = model.head().params().digest();

  auto dataset = tiny_dataset();
  std::vector<ImageSample> probe;
  for (int i = 0; i < 4; ++i) probe.push_back(crop_at(dataset[i * 3], 8, 8, 32));
  double probe_before = 0.0;
  {
    ad::Tape t;
    t.set_grad_enabled(false);
    probe_before = t.val(model.batch_loss(t, probe))(0, 0);
  }

  std::ostringstream log;
  TrainResult result = train(model, rc, dataset, out.string(), &log);

  REQUIRE(result.log.size() == 200);
  CHECK(result.initial_loss == result.log.front().loss);
  CHECK(result.final_loss_smoothed < result.initial_loss);
  {
    ad::Tape t;
    t.set_grad_enabled(false);
    CHECK(t.val(model.batch_loss(t, probe))(0, 0) < probe_before);
  }
  CHECK(model.backbone().digest() == frozen);
  CHECK(model.head().params().digest() != head_before);

  // Adapter gates must leave zero once training starts.
  bool gate_moved = false;
  for (int layer = 0; layer < rc.model().adapter.layers; ++layer)
    gate_moved = gate_moved || model.adapter().bank(layer).gate != 0.0;
  CHECK(gate_moved);

  // Checkpoints: periodic, best, final.
  CHECK(fs::exists(result.final_checkpoint));
  CHECK(fs::exists(result.best_checkpoint));
  CHECK(result.best_val_score >= 0.0);
  CHECK(result.best_iteration > 0);

  // One bare data line per iteration; the CLI adds the column header.
  std::string text = log.str();
  CHECK(text.rfind("1,", 0) == 0);
  int lines = 0;
  for (char ch : text)
    if (ch == '\n') ++lines;
  CHECK(lines == 200);
  fs::remove_all(out);
}

TEST_CASE("same seed, same data: training is bitwise reproducible") {
  fs::path out_a = fs::temp_directory_path() / "reinseg_train_rep_a";
  fs::path out_b = fs::temp_directory_path() / "reinseg_train_rep_b";
  fs::remove_all(out_a);
  fs::remove_all(out_b);
  RunConfig rc = tiny_run_config();
  rc.set("train.iterations", "12");
  rc.set("train.batch_size", "2");
  auto dataset = tiny_dataset(4);

  SegModel a = SegModel::build(rc.model());
  SegModel b = SegModel::build(rc.model());
  TrainResult ra = train(a, rc, dataset, out_a.string());
  TrainResult rb = train(b, rc, dataset, out_b.string());
  CHECK(a.digest() == b.digest());
  REQUIRE(ra.log.size() == rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) CHECK(ra.log[i].loss == rb.log[i].loss);

  RunConfig other = tiny_run_config();
  other.set("train.iterations", "12");
  other.set("train.batch_size", "2");
  other.set("seed", "43");
  SegModel c = SegModel::build(other.model());
  train(c, other, dataset, (fs::temp_directory_path() / "reinseg_train_rep_c").string());
  CHECK(a.digest() != c.digest());
  fs::remove_all(out_a);
  fs::remove_all(out_b);
  fs::remove_all(fs::temp_directory_path() / "reinseg_train_rep_c");
}

TEST_CASE("non-finite parameters trigger TrainAbort with gradient norms") {
  fs::path out = fs::temp_directory_path() / "reinseg_train_abort";
  fs::remove_all(out);
  RunConfig rc = tiny_run_config();
  rc.set("train.iterations", "3");
  rc.set("train.batch_size", "2");
  SegModel model = SegModel::build(rc.model());
  // Poison one head weight so the first forward pass goes non-finite.
  model.head().params().get("mask_mlp.w1").value(0, 0) = std::nan("");
  auto dataset = tiny_dataset(4);
  CHECK_THROWS_WITH_AS(train(model, rc, dataset, out.string()), doctest::Contains("grad"),
                       TrainAbort);
  fs::remove_all(out);
}

TEST_CASE("evaluate_samples names rows by sample id and scores perfectly on easy masks") {
  RunConfig rc = tiny_run_config();
  SegModel model = SegModel::build(rc.model());
  auto dataset = tiny_dataset(2);
  MetricReport report = evaluate_samples(model, dataset);
  REQUIRE(report.rows.size() == dataset.size());
  CHECK(report.rows[0].name == dataset[0].sample_id);
  for (const MetricRow& row : report.rows) {
    CHECK(row.dsc >= 0.0);
    CHECK(row.dsc <= 1.0);
  }
}

TEST_CASE("baseline model without adapter trains the head only") {
  fs::path out = fs::temp_directory_path() / "reinseg_train_baseline";
  fs::remove_all(out);
  RunConfig rc = tiny_run_config();
  rc.set("rein.enabled", "false");
  rc.set("train.iterations", "10");
  rc.set("train.batch_size", "2");
  SegModel model = SegModel::build(rc.model());
  CHECK_FALSE(model.has_adapter());
  // Two groups only: frozen backbone and trainable head.
  auto groups = model.param_groups();
  CHECK(groups.size() == 2);

  auto dataset = tiny_dataset(4);
  TrainResult result = train(model, rc, dataset, out.string());
  CHECK(result.log.size() == 10);
  CHECK(model.backbone().digest() == *model.backbone().frozen_digest());
  fs::remove_all(out);
}
