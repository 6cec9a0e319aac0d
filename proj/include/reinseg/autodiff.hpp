#pragma once

#include "reinseg/params.hpp"
#include "reinseg/types.hpp"

#include <functional>
#include <vector>

namespace reinseg::ad {

class Tape;

/// Handle to a tape node. Cheap to copy; valid for the lifetime of its tape.
struct Var {
  int id = -1;
  bool ok() const { return id >= 0; }
};

/// Reverse-mode tape over dense Eigen matrices. Nodes are created in forward
/// order; backward() sweeps them in reverse. Gradients are only propagated
/// into subgraphs that depend on a trainable parameter, so a frozen backbone
/// costs no parameter-gradient GEMMs.
class Tape {
 public:
  Var constant(Mat value);
  /// Leaf bound to an external Param. requires_grad follows p.trainable;
  /// the accumulated gradient is flushed into p.grad during backward().
  Var leaf(Param& p);

  /// With gradients disabled every leaf is treated as constant, so forward
  /// passes skip all backward bookkeeping (inference mode).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  Var make(Mat value, bool requires_grad);
  void set_backward(Var v, std::function<void(Tape&)> fn);

  const Mat& val(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer for v, allocated (zeroed) on first touch.
  Mat& grad_ref(Var v);
  bool has_grad(Var v) const { return nodes_[v.id].has_grad; }

  template <class E>
  void accum(Var v, const E& g) {
    if (needs_grad(v)) grad_ref(v) += g;
  }

  /// Reverse sweep from a 1x1 root. Flushes param-leaf gradients into their
  /// bound Param::grad.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    Param* bound = nullptr;
    std::function<void(Tape&)> backward;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---- elementwise / affine ----
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var cmul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var shift(Tape& t, Var a, double c);
Var gelu(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
Var clamp01(Tape& t, Var x);

// ---- linear algebra ----
Var matmul(Tape& t, Var a, Var b);
/// a * b^T without materializing the transpose.
Var matmul_nt(Tape& t, Var a, Var b);
Var add_row_broadcast(Tape& t, Var x, Var bias_row);
/// X is (reps*n) x c; adds the n x c matrix p to each consecutive block.
Var add_tiled(Tape& t, Var x, Var p, int reps);
/// value = s(0,0) * x with s a trainable 1x1 gate.
Var gate_scale(Tape& t, Var x, Var s);
Var scale_rows(Tape& t, Var x, Var s_col);
Var slice_cols(Tape& t, Var x, int c0, int nc);
Var slice_rows(Tape& t, Var x, int r0, int nr);

// ---- normalization / attention ----
Var row_softmax(Tape& t, Var x);
Var layernorm_rows(Tape& t, Var x, Var gamma_row, Var beta_row, double eps = 1e-5);
/// qkv is (batch*n) x 3c laid out [Q | K | V]; per-sample, per-head scaled
/// dot-product attention with softmax over keys. Returns (batch*n) x c.
Var mhsa(Tape& t, Var qkv, int batch, int n, int heads);
/// Depthwise 3x3 convolution over a flattened grid, zero padding.
/// x is (batch*gh*gw) x c, w is 9 x c (kernel taps row-major), bias 1 x c.
Var dwconv3x3(Tape& t, Var x, Var w, Var bias_row, int batch, int gh, int gw);

// ---- resampling ----
/// Each row of x is a gh x gw grid (row-major); bilinearly resamples every
/// row to out_h x out_w with half-pixel centers. Returns m x (out_h*out_w).
Var bilinear_upsample_rows(Tape& t, Var x, int gh, int gw, int out_h, int out_w);
Mat nearest_upsample_rows(const Mat& x, int gh, int gw, int out_h, int out_w);

// ---- reductions / losses ----
Var sum_rows(Tape& t, Var x);  // 1 x N column sums
Var sum_all(Tape& t, Var x);   // 1 x 1
Var mean_all(Tape& t, Var x);  // 1 x 1
Var div11(Tape& t, Var a, Var b);
/// Mean binary cross-entropy of probabilities p against a {0,1} target.
/// Uses the 0*log(0) = 0 convention so exact predictions give exactly 0.
Var bce_mean(Tape& t, Var p, const Mat& target);

}  // namespace reinseg::ad
