#pragma once

#include "reinseg/backbone.hpp"
#include "reinseg/rein.hpp"
#include "reinseg/seghead.hpp"
#include "reinseg/types.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace reinseg {

struct ModelConfig {
  BackboneConfig backbone;
  bool rein_enabled = true;
  AdapterConfig adapter;
  HeadConfig head;
  bool backbone_frozen = true;

  /// Cross-module agreement: widths, layer counts, query dims, output size.
  void validate() const;

  /// Desk-scale default: vit_tiny 12x32, 64 px input, 16 tokens of rank 4.
  static ModelConfig desk_default(std::uint64_t seed);
};

/// Frozen backbone + optional Rein adapter + query mask head. Without the
/// adapter the head falls back to its own trainable static queries, which is
/// the head-only baseline used for adapter ablations.
class SegModel {
 public:
  static SegModel build(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  Head& head() { return head_; }
  bool has_adapter() const { return adapter_.has_value(); }
  Adapter& adapter();

  /// backbone / rein / head groups covering every parameter exactly once.
  std::vector<ParamGroup> param_groups();
  std::size_t total_param_count() const;
  std::size_t trainable_param_count() const;
  double trainable_fraction() const;

  /// Mean segmentation loss over a batch of input-sized crops.
  ad::Var batch_loss(ad::Tape& t, const std::vector<ImageSample>& batch);

  /// Foreground probability map for one input-sized crop (no gradients).
  Mat semantic_prob(const Image& crop);
  MaskPrediction predict(const Image& crop);

  /// Arbitrary-size image: overlapping input-sized tiles, mean-merged.
  Mat predict_prob_full(const Image& image);
  MaskArray predict_mask_full(const Image& image);
  MaskArray threshold_prob(const Mat& prob) const;

  std::uint64_t digest() const;

 private:
  ModelConfig cfg_;
  Backbone backbone_;
  std::optional<Adapter> adapter_;
  Head head_;

  SegModel(ModelConfig cfg, Backbone backbone, std::optional<Adapter> adapter, Head head)
      : cfg_(std::move(cfg)),
        backbone_(std::move(backbone)),
        adapter_(std::move(adapter)),
        head_(std::move(head)) {}
};

}  // namespace reinseg
