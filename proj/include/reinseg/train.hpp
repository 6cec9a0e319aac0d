#pragma once

#include "reinseg/config.hpp"
#include "reinseg/metrics.hpp"
#include "reinseg/model.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace reinseg {

/// Adam with decoupled weight decay (Loshchilov & Hutter):
///   theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta)
/// Decay touches only parameters flagged decay=true; frozen groups are
/// skipped entirely, whatever their configured rate.
class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();

  const std::vector<ParamGroup>& groups() const { return groups_; }
  int steps_taken() const { return t_; }

 private:
  std::vector<ParamGroup> groups_;
  std::vector<Mat> m_, v_;  // first/second moment per parameter, group order
  double wd_, b1_, b2_, eps_;
  int t_ = 0;
};

/// Applies the per-group learning rates by group name and verifies the
/// groups partition the model's parameters. Unknown group names and
/// overlapping groups throw ConfigError / ValidationError.
AdamW build_optimizer(std::vector<ParamGroup> groups, const TrainConfig& cfg,
                      std::size_t expected_total);

struct TrainLogEntry {
  int iter = 0;
  double loss = 0.0;
  double lr_rein = 0.0;
  double lr_head = 0.0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  double initial_loss = 0.0;
  double final_loss_smoothed = 0.0;  // mean of the last 10 logged losses
  double best_val_score = 0.0;
  int best_iteration = 0;
  std::string best_checkpoint;
  std::string final_checkpoint;
};

/// Iteration loop: sample batch -> random crop -> forward -> loss ->
/// backward -> AdamW step. Logs `iter,loss,lr_rein,lr_head` per step when a
/// stream is given, checkpoints every interval plus at the end, and keeps
/// the best validation challenge-score checkpoint from the 8:2 split.
/// Non-finite loss raises TrainAbort with per-group gradient norms.
TrainResult train(SegModel& model, const RunConfig& cfg,
                  const std::vector<ImageSample>& dataset, const std::string& out_dir,
                  std::ostream* log_stream = nullptr);

/// Tiled whole-image evaluation of every sample; rows are named by
/// sample_id. Used for validation scoring and by the eval command.
MetricReport evaluate_samples(SegModel& model, const std::vector<ImageSample>& samples);

struct GroupReportRow {
  std::string name;
  std::size_t params = 0;
  bool trainable = false;
  double learning_rate = 0.0;
};

struct ParamReport {
  std::vector<GroupReportRow> rows;
  std::size_t total = 0;
  std::size_t trainable = 0;
  double fraction = 0.0;

  std::string table() const;
};

ParamReport param_report(SegModel& model, const TrainConfig& cfg);

}  // namespace reinseg
