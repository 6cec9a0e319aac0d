#pragma once

#include "reinseg/autodiff.hpp"
#include "reinseg/backbone.hpp"
#include "reinseg/params.hpp"
#include "reinseg/types.hpp"

#include <cstdint>
#include <vector>

namespace reinseg {

struct AdapterConfig {
  int layers = 12;
  int tokens = 16;     // m
  int rank = 4;        // r
  int width = 32;      // c, must match backbone width
  int hidden = 0;      // MLP hidden h; 0 -> 2*width
  int query_dim = 16;  // d_q, must match head query width
  std::uint64_t seed = 0;

  int hidden_or_default() const { return hidden > 0 ? hidden : 2 * width; }
  void validate() const;
};

/// Per-layer low-rank token bank: T = A*B with a trainable gate, init 0.
struct TokenBank {
  const Mat& A;
  const Mat& B;
  double gate;
  int layer_index;
};

/// Instance queries extracted from the token banks.
struct QueryBank {
  Mat Q;  // m x d_q
};

/// Per-layer low-rank learnable token banks with one MLP shared across all
/// layers. refine() computes T = A*B, S = row_softmax(f*T^T/sqrt(c)),
/// df = mlp(S*T) and returns f + gate*df, so a fresh adapter (gate = 0) is
/// an exact identity.
class Adapter {
 public:
  static Adapter init(const AdapterConfig& cfg);

  const AdapterConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  std::size_t param_count() const { return store_.scalar_count(); }
  /// Closed-form trainable count: L*(m*r + r*c + 1) + (c*h + h + h*c + c) + c*d_q.
  static std::size_t expected_param_count(const AdapterConfig& cfg);

  TokenBank bank(int layer) const;
  Mat materialize_tokens(int layer) const;  // A*B, m x c

  ad::Var refine(ad::Tape& t, ad::Var features, int layer);
  FeatureMap refine(const FeatureMap& features, int layer);

  ad::Var queries(ad::Tape& t);  // m x d_q, mean over layers of T_i * W_q
  QueryBank extract_queries();

  ParamGroup trainable_parameters();
  AdapterHook hook();

 private:
  AdapterConfig cfg_;
  ParamStore store_;
};

}  // namespace reinseg
