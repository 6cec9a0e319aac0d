#pragma once

#include "reinseg/model.hpp"
#include "reinseg/types.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace reinseg {

enum class Optim { adamw };
enum class Preset { paper, desk };

std::string to_string(Preset p);
Preset preset_from_string(const std::string& s);

/// Optimization hyperparameters. Struct defaults are the paper-preset
/// settings; the desk preset overrides them through RunConfig.
struct TrainConfig {
  Optim optimizer = Optim::adamw;
  double lr_backbone = 1e-5;
  double lr_rein = 1e-4;
  double lr_head = 1e-4;
  int iterations = 500;
  int batch_size = 8;
  int crop_size = 64;
  bool backbone_frozen = true;
  std::uint64_t seed = 0;
  Preset preset = Preset::desk;
  double weight_decay = 0.01;
  int checkpoint_every = 0;  // 0 -> iterations/5
  double val_ratio = 0.2;

  int checkpoint_interval() const;

  /// Enforces the preset invariants (paper = 60000/4/512) and positivity.
  void validate() const;
};

/// Synthetic-protocol and ingestion settings.
struct DataProtocolConfig {
  std::string dir = "data";
  int image_size = 96;
  int train_per_domain = 60;
  int test_per_domain = 15;

  void validate() const;
};

/// Flat, typed key-value configuration: defaults, preset overlay, config
/// file, then `--set` overrides, in that order. Unknown keys are rejected.
class RunConfig {
 public:
  /// Desk preset baked in.
  static RunConfig defaults();
  static RunConfig from_preset(Preset p);

  /// Parses `key = value` lines; '#' starts a comment. Throws ConfigError
  /// with the offending line number.
  void apply_file(const std::string& path);
  void apply_set(const std::string& key_eq_value);
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const;

  std::uint64_t seed() const;
  std::string out_dir() const;
  bool single_thread() const;
  Preset preset() const;

  /// Typed assemblies; each validates before returning.
  ModelConfig model() const;
  TrainConfig train() const;
  DataProtocolConfig data() const;

  /// Sorted `key = value` lines; parse with deserialize for a lossless
  /// round trip (used by the checkpoint header).
  std::string serialize() const;
  static RunConfig deserialize(const std::string& text);

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace reinseg
