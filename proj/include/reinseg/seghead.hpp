#pragma once

#include "reinseg/autodiff.hpp"
#include "reinseg/params.hpp"
#include "reinseg/rein.hpp"
#include "reinseg/types.hpp"

#include <cstdint>
#include <vector>

namespace reinseg {

struct HeadConfig {
  int query_dim = 16;  // must match adapter query_dim
  int width = 32;      // feature width c
  int hidden = 0;      // mask MLP hidden; 0 -> query_dim
  int out_size = 64;   // upsample target (H = W = backbone input)
  int expected_queries = 16;  // m, used for the no-object bias init
  double threshold = 0.5;
  bool bilinear = true;  // nearest allowed at inference
  std::uint64_t seed = 0;

  int hidden_or_default() const { return hidden > 0 ? hidden : query_dim; }
  void validate() const;
};

/// Query-based mask decode: per-query mask logits are the dot products of
/// MLP-embedded queries with token features, upsampled to pixel space; the
/// binary semantic probability aggregates sigmoid masks weighted by each
/// query's foreground probability, clamped to [0,1].
struct MaskPrediction {
  std::vector<Mat> per_query_mask_logits;  // m entries, each H x W
  Mat per_query_class_logits;              // m x 2, columns {foreground, no-object}
  Mat semantic_prob;                       // H x W in [0,1]
};

class Head {
 public:
  /// static_query_count > 0 adds a trainable query embedding used when no
  /// adapter supplies queries (the head-only baseline).
  static Head init(const HeadConfig& cfg, int static_query_count = 0);

  const HeadConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  std::size_t param_count() const { return store_.scalar_count(); }
  bool has_static_queries() const { return store_.contains("queries"); }

  ad::Var static_queries(ad::Tape& t);

  /// Query-side tensors shared by every sample in a batch.
  struct EmbeddedQueries {
    ad::Var mask_embed;    // m x c
    ad::Var class_logits;  // m x 2
    ad::Var fg_prob;       // m x 1
  };
  EmbeddedQueries embed_queries(ad::Tape& t, ad::Var queries);

  /// Semantic probability for one sample: 1 x (out_size*out_size), row-major.
  ad::Var semantic_prob_row(ad::Tape& t, const EmbeddedQueries& eq, ad::Var features, int grid_h,
                            int grid_w);

  MaskPrediction predict(const Mat& features, int grid_h, int grid_w, const QueryBank& queries);

 private:
  HeadConfig cfg_;
  ParamStore store_;
};

/// Tape loss for one sample: mean BCE + (1 - soft dice) of the semantic
/// probability row against a binary mask. Throws ValidationError on a
/// non-binary ground truth.
ad::Var segmentation_loss(ad::Tape& t, ad::Var semantic_row, const MaskArray& gt);

/// Value-level loss on a finished prediction.
double loss(const MaskPrediction& pred, const MaskArray& gt);

/// Row-major 1 x (h*w) flattening helpers.
Mat flatten_mask(const MaskArray& m);
Mat unflatten_row(const Mat& row, int h, int w);

}  // namespace reinseg
