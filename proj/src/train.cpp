#include "reinseg/train.hpp"

#include "reinseg/checkpoint.hpp"
#include "reinseg/datagen.hpp"
#include "reinseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <sstream>

namespace fs = std::filesystem;

namespace reinseg {

AdamW::AdamW(std::vector<ParamGroup> groups, double weight_decay, double beta1, double beta2,
             double eps)
    : groups_(std::move(groups)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const ParamGroup& g : groups_) {
    if (!g.trainable) continue;
    for (const Param* p : g.params) {
      m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }
  }
}

void AdamW::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(b1_, t_);
  double bc2 = 1.0 - std::pow(b2_, t_);
  std::size_t slot = 0;
  for (ParamGroup& g : groups_) {
    if (!g.trainable) continue;
    for (Param* p : g.params) {
      Mat& m = m_[slot];
      Mat& v = v_[slot];
      ++slot;
      m = b1_ * m + (1.0 - b1_) * p->grad;
      v = b2_ * v + (1.0 - b2_) * p->grad.cwiseProduct(p->grad);
      Mat update = (m / bc1).array() / ((v / bc2).array().sqrt() + eps_);
      if (p->decay && wd_ > 0.0) update += wd_ * p->value;
      p->value -= g.learning_rate * update;
    }
  }
}

void AdamW::zero_grad() {
  for (ParamGroup& g : groups_)
    for (Param* p : g.params) p->zero_grad();
}

AdamW build_optimizer(std::vector<ParamGroup> groups, const TrainConfig& cfg,
                      std::size_t expected_total) {
  check_partition(groups, expected_total);
  for (ParamGroup& g : groups) {
    if (g.name == "backbone")
      g.learning_rate = cfg.lr_backbone;
    else if (g.name == "rein")
      g.learning_rate = cfg.lr_rein;
    else if (g.name == "head")
      g.learning_rate = cfg.lr_head;
    else
      throw ConfigError("no learning rate configured for parameter group " + g.name);
  }
  return AdamW(std::move(groups), cfg.weight_decay);
}

MetricReport evaluate_samples(SegModel& model, const std::vector<ImageSample>& samples) {
  if (samples.empty()) throw ValidationError("evaluate_samples: no samples");
  std::vector<MetricRow> rows;
  rows.reserve(samples.size());
  for (const ImageSample& s : samples)
    rows.push_back(evaluate_pair(s.sample_id, model.predict_mask_full(s.image), s.mask));
  return make_report(std::move(rows));
}

namespace {

std::string grad_norm_dump(const std::vector<ParamGroup>& groups) {
  std::ostringstream msg;
  for (const ParamGroup& g : groups) {
    double sq = 0.0;
    for (const Param* p : g.params) sq += p->grad.squaredNorm();
    msg << " " << g.name << "=" << std::sqrt(sq);
  }
  return msg.str();
}

}  // namespace

TrainResult train(SegModel& model, const RunConfig& cfg, const std::vector<ImageSample>& dataset,
                  const std::string& out_dir, std::ostream* log_stream) {
  TrainConfig tc = cfg.train();
  if (dataset.empty()) throw ValidationError("train: dataset is empty");
  fs::create_directories(out_dir);

  auto [train_set, val_set] =
      split_train_val(dataset, 1.0 - tc.val_ratio, derive_seed(tc.seed, 0x5b17));

  AdamW opt = build_optimizer(model.param_groups(), tc, model.total_param_count());
  auto rng = make_rng(derive_seed(tc.seed, 0xba7c4));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(train_set.size()) - 1);

  TrainResult result;
  result.log.reserve(tc.iterations);
  const int interval = tc.checkpoint_interval();
  result.best_val_score = -1.0;

  auto validate_and_checkpoint = [&](int iter) {
    char name[64];
    std::snprintf(name, sizeof(name), "checkpoint_%06d.ckpt", iter);
    std::string path = (fs::path(out_dir) / name).string();
    save_checkpoint(path, model, cfg, iter);
    double score = evaluate_samples(model, val_set).aggregate.score;
    if (score > result.best_val_score) {
      result.best_val_score = score;
      result.best_iteration = iter;
      save_checkpoint((fs::path(out_dir) / "best.ckpt").string(), model, cfg, iter);
      result.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
    }
    return score;
  };

  for (int iter = 1; iter <= tc.iterations; ++iter) {
    std::vector<ImageSample> batch;
    batch.reserve(tc.batch_size);
    for (int b = 0; b < tc.batch_size; ++b) {
      const ImageSample& s = train_set[pick(rng)];
      batch.push_back(crop(s, tc.crop_size, CropPolicy::random, rng())[0]);
    }

    ad::Tape t;
    ad::Var loss_var = model.batch_loss(t, batch);
    double loss = t.val(loss_var)(0, 0);
    t.backward(loss_var);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "non-finite loss " << loss << " at iteration " << iter
          << "; gradient norms:" << grad_norm_dump(opt.groups());
      throw TrainAbort(msg.str());
    }

    bool grads_finite = true;
    for (const ParamGroup& g : opt.groups())
      for (const Param* p : g.params)
        if (!p->grad.allFinite()) grads_finite = false;
    if (!grads_finite) {
      std::ostringstream msg;
      msg << "non-finite gradient at iteration " << iter
          << "; gradient norms:" << grad_norm_dump(opt.groups());
      throw TrainAbort(msg.str());
    }

    opt.step();
    opt.zero_grad();

    result.log.push_back({iter, loss, tc.lr_rein, tc.lr_head});
    if (log_stream)
      (*log_stream) << iter << "," << loss << "," << tc.lr_rein << "," << tc.lr_head << "\n";

    if (iter % interval == 0 && iter != tc.iterations) validate_and_checkpoint(iter);
  }

  validate_and_checkpoint(tc.iterations);
  result.final_checkpoint = (fs::path(out_dir) / "final.ckpt").string();
  save_checkpoint(result.final_checkpoint, model, cfg, tc.iterations);

  result.initial_loss = result.log.front().loss;
  int tail = std::min<int>(10, static_cast<int>(result.log.size()));
  double acc = 0.0;
  for (int i = 0; i < tail; ++i) acc += result.log[result.log.size() - 1 - i].loss;
  result.final_loss_smoothed = acc / tail;
  return result;
}

std::string ParamReport::table() const {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof(line), "%-10s %10s %-10s %s\n", "group", "params", "trainable", "lr");
  out << line;
  for (const GroupReportRow& r : rows) {
    std::snprintf(line, sizeof(line), "%-10s %10zu %-10s %g\n", r.name.c_str(), r.params,
                  r.trainable ? "yes" : "no", r.learning_rate);
    out << line;
  }
  std::snprintf(line, sizeof(line), "%-10s %10zu trainable %zu (%.2f%%)\n", "total", total,
                trainable, fraction * 100.0);
  out << line;
  return out.str();
}

ParamReport param_report(SegModel& model, const TrainConfig& cfg) {
  ParamReport rep;
  for (const ParamGroup& g : model.param_groups()) {
    GroupReportRow row;
    row.name = g.name;
    row.params = g.scalar_count();
    row.trainable = g.trainable;
    row.learning_rate = g.name == "backbone" ? cfg.lr_backbone
                        : g.name == "rein"   ? cfg.lr_rein
                                             : cfg.lr_head;
    rep.rows.push_back(row);
    rep.total += row.params;
    if (row.trainable) rep.trainable += row.params;
  }
  rep.fraction = rep.total == 0 ? 0.0 : static_cast<double>(rep.trainable) / static_cast<double>(rep.total);
  return rep;
}

}  // namespace reinseg
