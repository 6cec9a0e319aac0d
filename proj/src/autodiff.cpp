#include "reinseg/autodiff.hpp"

#include <cmath>
#include <memory>

namespace reinseg::ad {

namespace {
constexpr double kBceEps = 1e-12;

void softmax_rows_inplace(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}
}  // namespace

Var Tape::constant(Mat value) { return make(std::move(value), false); }

Var Tape::leaf(Param& p) {
  Var v = make(p.value, p.trainable && grad_enabled_);
  if (grad_enabled_) nodes_[v.id].bound = &p;
  return v;
}

Var Tape::make(Mat value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::set_backward(Var v, std::function<void(Tape&)> fn) {
  nodes_[v.id].backward = std::move(fn);
}

Mat& Tape::grad_ref(Var v) {
  Node& n = nodes_[v.id];
  if (!n.has_grad) {
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var root) {
  if (val(root).size() != 1) throw ShapeError("backward root must be a 1x1 scalar node");
  if (!needs_grad(root)) return;
  grad_ref(root)(0, 0) = 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.has_grad) continue;
    if (n.bound != nullptr) {
      n.bound->grad += n.grad;
    } else if (n.backward) {
      n.backward(*this);
    }
  }
}

// ---------------------------------------------------------------------------

Var add(Tape& t, Var a, Var b) {
  Var out = t.make(t.val(a) + t.val(b), t.needs_grad(a) || t.needs_grad(b));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      t.accum(a, g);
      t.accum(b, g);
    });
  }
  return out;
}

Var sub(Tape& t, Var a, Var b) {
  Var out = t.make(t.val(a) - t.val(b), t.needs_grad(a) || t.needs_grad(b));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      t.accum(a, g);
      t.accum(b, -g);
    });
  }
  return out;
}

Var cmul(Tape& t, Var a, Var b) {
  Var out = t.make(t.val(a).cwiseProduct(t.val(b)), t.needs_grad(a) || t.needs_grad(b));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      t.accum(a, g.cwiseProduct(t.val(b)));
      t.accum(b, g.cwiseProduct(t.val(a)));
    });
  }
  return out;
}

Var scale(Tape& t, Var a, double s) {
  Var out = t.make(t.val(a) * s, t.needs_grad(a));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) { t.accum(a, t.grad_ref(out) * s); });
  }
  return out;
}

Var shift(Tape& t, Var a, double c) {
  Var out = t.make((t.val(a).array() + c).matrix(), t.needs_grad(a));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) { t.accum(a, t.grad_ref(out)); });
  }
  return out;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Var gelu(Tape& t, Var x) {
  Mat y = t.val(x).unaryExpr(
      [](double z) { return 0.5 * z * (1.0 + std::erf(z * kInvSqrt2)); });
  Var out = t.make(std::move(y), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      Mat d = t.val(x).unaryExpr([](double z) {
        const double cdf = 0.5 * (1.0 + std::erf(z * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * z * z);
        return cdf + z * pdf;
      });
      t.accum(x, t.grad_ref(out).cwiseProduct(d));
    });
  }
  return out;
}

Var sigmoid(Tape& t, Var x) {
  Mat y = t.val(x).unaryExpr([](double z) {
    if (z >= 0.0) {
      const double e = std::exp(-z);
      return 1.0 / (1.0 + e);
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
  });
  Var out = t.make(std::move(y), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& s = t.val(out);
      t.accum(x, t.grad_ref(out).cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
    });
  }
  return out;
}

Var clamp01(Tape& t, Var x) {
  Mat y = t.val(x).unaryExpr([](double z) { return z < 0.0 ? 0.0 : (z > 1.0 ? 1.0 : z); });
  Var out = t.make(std::move(y), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& xin = t.val(x);
      Mat mask = xin.unaryExpr([](double z) { return (z >= 0.0 && z <= 1.0) ? 1.0 : 0.0; });
      t.accum(x, t.grad_ref(out).cwiseProduct(mask));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

Var matmul(Tape& t, Var a, Var b) {
  if (t.val(a).cols() != t.val(b).rows()) throw ShapeError("matmul: inner dimensions differ");
  Var out = t.make(t.val(a) * t.val(b), t.needs_grad(a) || t.needs_grad(b));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      if (t.needs_grad(a)) t.grad_ref(a).noalias() += g * t.val(b).transpose();
      if (t.needs_grad(b)) t.grad_ref(b).noalias() += t.val(a).transpose() * g;
    });
  }
  return out;
}

Var matmul_nt(Tape& t, Var a, Var b) {
  if (t.val(a).cols() != t.val(b).cols()) throw ShapeError("matmul_nt: widths differ");
  Var out = t.make(t.val(a) * t.val(b).transpose(), t.needs_grad(a) || t.needs_grad(b));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      if (t.needs_grad(a)) t.grad_ref(a).noalias() += g * t.val(b);
      if (t.needs_grad(b)) t.grad_ref(b).noalias() += g.transpose() * t.val(a);
    });
  }
  return out;
}

Var add_row_broadcast(Tape& t, Var x, Var bias_row) {
  const Mat& b = t.val(bias_row);
  if (b.rows() != 1 || b.cols() != t.val(x).cols()) {
    throw ShapeError("add_row_broadcast: bias must be 1 x cols(x)");
  }
  Mat y = t.val(x);
  y.rowwise() += b.row(0);
  Var out = t.make(std::move(y), t.needs_grad(x) || t.needs_grad(bias_row));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      t.accum(x, g);
      if (t.needs_grad(bias_row)) t.grad_ref(bias_row).row(0) += g.colwise().sum();
    });
  }
  return out;
}

Var add_tiled(Tape& t, Var x, Var p, int reps) {
  const Mat& pm = t.val(p);
  const auto n = pm.rows();
  if (t.val(x).rows() != n * reps || t.val(x).cols() != pm.cols()) {
    throw ShapeError("add_tiled: x must be (reps*rows(p)) x cols(p)");
  }
  Mat y = t.val(x);
  for (int r = 0; r < reps; ++r) y.middleRows(r * n, n) += pm;
  Var out = t.make(std::move(y), t.needs_grad(x) || t.needs_grad(p));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      t.accum(x, g);
      if (t.needs_grad(p)) {
        Mat& gp = t.grad_ref(p);
        for (int r = 0; r < reps; ++r) gp += g.middleRows(r * n, n);
      }
    });
  }
  return out;
}

Var gate_scale(Tape& t, Var x, Var s) {
  if (t.val(s).size() != 1) throw ShapeError("gate_scale: gate must be 1x1");
  const double sv = t.val(s)(0, 0);
  Var out = t.make(t.val(x) * sv, t.needs_grad(x) || t.needs_grad(s));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      t.accum(x, g * t.val(s)(0, 0));
      if (t.needs_grad(s)) t.grad_ref(s)(0, 0) += g.cwiseProduct(t.val(x)).sum();
    });
  }
  return out;
}

Var scale_rows(Tape& t, Var x, Var s_col) {
  const Mat& s = t.val(s_col);
  if (s.cols() != 1 || s.rows() != t.val(x).rows()) {
    throw ShapeError("scale_rows: scale must be rows(x) x 1");
  }
  Mat y = s.col(0).asDiagonal() * t.val(x);
  Var out = t.make(std::move(y), t.needs_grad(x) || t.needs_grad(s_col));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      if (t.needs_grad(x)) t.grad_ref(x) += t.val(s_col).col(0).asDiagonal() * g;
      if (t.needs_grad(s_col)) {
        t.grad_ref(s_col).col(0) += g.cwiseProduct(t.val(x)).rowwise().sum();
      }
    });
  }
  return out;
}

Var slice_cols(Tape& t, Var x, int c0, int nc) {
  Var out = t.make(t.val(x).middleCols(c0, nc), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      t.grad_ref(x).middleCols(c0, nc) += t.grad_ref(out);
    });
  }
  return out;
}

Var slice_rows(Tape& t, Var x, int r0, int nr) {
  Var out = t.make(t.val(x).middleRows(r0, nr), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      t.grad_ref(x).middleRows(r0, nr) += t.grad_ref(out);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

Var row_softmax(Tape& t, Var x) {
  Mat p = t.val(x);
  softmax_rows_inplace(p);
  Var out = t.make(std::move(p), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& pv = t.val(out);
      const Mat& g = t.grad_ref(out);
      Vec dot = g.cwiseProduct(pv).rowwise().sum();
      t.accum(x, pv.cwiseProduct((g.colwise() - dot)));
    });
  }
  return out;
}

Var layernorm_rows(Tape& t, Var x, Var gamma_row, Var beta_row, double eps) {
  const Mat& xin = t.val(x);
  const auto cols = xin.cols();
  if (t.val(gamma_row).cols() != cols || t.val(beta_row).cols() != cols) {
    throw ShapeError("layernorm_rows: affine params must be 1 x cols(x)");
  }
  auto xhat = std::make_shared<Mat>(xin.rows(), cols);
  auto inv_std = std::make_shared<Vec>(xin.rows());
  Mat y(xin.rows(), cols);
  for (Eigen::Index i = 0; i < xin.rows(); ++i) {
    const double mu = xin.row(i).mean();
    const double var = (xin.row(i).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(i) = is;
    xhat->row(i) = (xin.row(i).array() - mu) * is;
    y.row(i) = xhat->row(i).cwiseProduct(t.val(gamma_row).row(0)) + t.val(beta_row).row(0);
  }
  bool rg = t.needs_grad(x) || t.needs_grad(gamma_row) || t.needs_grad(beta_row);
  Var out = t.make(std::move(y), rg);
  if (rg) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      if (t.needs_grad(gamma_row)) {
        t.grad_ref(gamma_row).row(0) += g.cwiseProduct(*xhat).colwise().sum();
      }
      if (t.needs_grad(beta_row)) t.grad_ref(beta_row).row(0) += g.colwise().sum();
      if (t.needs_grad(x)) {
        Mat& gx = t.grad_ref(x);
        const auto& gamma = t.val(gamma_row).row(0);
        const double inv_n = 1.0 / static_cast<double>(g.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          Eigen::RowVectorXd dxh = g.row(i).cwiseProduct(gamma);
          const double m1 = dxh.sum() * inv_n;
          const double m2 = dxh.cwiseProduct(xhat->row(i)).sum() * inv_n;
          gx.row(i) += ((dxh.array() - m1 - xhat->row(i).array() * m2) * (*inv_std)(i)).matrix();
        }
      }
    });
  }
  return out;
}

Var mhsa(Tape& t, Var qkv, int batch, int n, int heads) {
  const Mat& X = t.val(qkv);
  const int c3 = static_cast<int>(X.cols());
  if (c3 % 3 != 0) throw ShapeError("mhsa: qkv width must be 3c");
  const int c = c3 / 3;
  if (c % heads != 0) throw ShapeError("mhsa: width not divisible by head count");
  if (X.rows() != static_cast<Eigen::Index>(batch) * n) throw ShapeError("mhsa: rows != batch*n");
  const int dh = c / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Mat>>();
  probs->reserve(static_cast<std::size_t>(batch) * heads);
  Mat out_v(X.rows(), c);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto Q = X.block(b * n, h * dh, n, dh);
      auto K = X.block(b * n, c + h * dh, n, dh);
      auto V = X.block(b * n, 2 * c + h * dh, n, dh);
      Mat S = (Q * K.transpose()) * sc;
      softmax_rows_inplace(S);
      out_v.block(b * n, h * dh, n, dh).noalias() = S * V;
      probs->push_back(std::move(S));
    }
  }
  Var out = t.make(std::move(out_v), t.needs_grad(qkv));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& X = t.val(qkv);
      const Mat& g = t.grad_ref(out);
      Mat& gx = t.grad_ref(qkv);
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
          const Mat& P = (*probs)[static_cast<std::size_t>(b) * heads + h];
          auto Q = X.block(b * n, h * dh, n, dh);
          auto K = X.block(b * n, c + h * dh, n, dh);
          auto V = X.block(b * n, 2 * c + h * dh, n, dh);
          auto go = g.block(b * n, h * dh, n, dh);
          gx.block(b * n, 2 * c + h * dh, n, dh).noalias() += P.transpose() * go;
          Mat dP = go * V.transpose();
          Vec rs = dP.cwiseProduct(P).rowwise().sum();
          Mat dS = P.cwiseProduct(dP.colwise() - rs) * sc;
          gx.block(b * n, h * dh, n, dh).noalias() += dS * K;
          gx.block(b * n, c + h * dh, n, dh).noalias() += dS.transpose() * Q;
        }
      }
    });
  }
  return out;
}

Var dwconv3x3(Tape& t, Var x, Var w, Var bias_row, int batch, int gh, int gw) {
  const Mat& X = t.val(x);
  const Mat& W = t.val(w);
  const int c = static_cast<int>(X.cols());
  if (W.rows() != 9 || W.cols() != c) throw ShapeError("dwconv3x3: kernel must be 9 x c");
  if (X.rows() != static_cast<Eigen::Index>(batch) * gh * gw) {
    throw ShapeError("dwconv3x3: rows != batch*gh*gw");
  }
  const int n = gh * gw;
  Mat Y(X.rows(), c);
  for (int b = 0; b < batch; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < gh; ++y) {
        for (int xx = 0; xx < gw; ++xx) {
          double acc = t.val(bias_row)(0, ch);
          for (int ky = -1; ky <= 1; ++ky) {
            const int sy = y + ky;
            if (sy < 0 || sy >= gh) continue;
            for (int kx = -1; kx <= 1; ++kx) {
              const int sx = xx + kx;
              if (sx < 0 || sx >= gw) continue;
              acc += W((ky + 1) * 3 + (kx + 1), ch) * X(b * n + sy * gw + sx, ch);
            }
          }
          Y(b * n + y * gw + xx, ch) = acc;
        }
      }
    }
  }
  bool rg = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(bias_row);
  Var out = t.make(std::move(Y), rg);
  if (rg) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& X = t.val(x);
      const Mat& W = t.val(w);
      const Mat& g = t.grad_ref(out);
      const bool nx = t.needs_grad(x);
      const bool nw = t.needs_grad(w);
      if (t.needs_grad(bias_row)) t.grad_ref(bias_row).row(0) += g.colwise().sum();
      for (int b = 0; b < batch; ++b) {
        for (int ch = 0; ch < c; ++ch) {
          for (int y = 0; y < gh; ++y) {
            for (int xx = 0; xx < gw; ++xx) {
              const double go = g(b * n + y * gw + xx, ch);
              for (int ky = -1; ky <= 1; ++ky) {
                const int sy = y + ky;
                if (sy < 0 || sy >= gh) continue;
                for (int kx = -1; kx <= 1; ++kx) {
                  const int sx = xx + kx;
                  if (sx < 0 || sx >= gw) continue;
                  const int k = (ky + 1) * 3 + (kx + 1);
                  if (nx) t.grad_ref(x)(b * n + sy * gw + sx, ch) += W(k, ch) * go;
                  if (nw) t.grad_ref(w)(k, ch) += X(b * n + sy * gw + sx, ch) * go;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {
struct ResampleTap {
  int src[4];
  double w[4];
};

std::shared_ptr<std::vector<ResampleTap>> bilinear_taps(int gh, int gw, int out_h, int out_w) {
  auto taps = std::make_shared<std::vector<ResampleTap>>();
  taps->resize(static_cast<std::size_t>(out_h) * out_w);
  const double sy_scale = static_cast<double>(gh) / out_h;
  const double sx_scale = static_cast<double>(gw) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double sy = (oy + 0.5) * sy_scale - 0.5;
    sy = std::min(std::max(sy, 0.0), static_cast<double>(gh - 1));
    const int y0 = std::min(static_cast<int>(sy), gh - 1);
    const int y1 = std::min(y0 + 1, gh - 1);
    const double fy = sy - y0;
    for (int ox = 0; ox < out_w; ++ox) {
      double sx = (ox + 0.5) * sx_scale - 0.5;
      sx = std::min(std::max(sx, 0.0), static_cast<double>(gw - 1));
      const int x0 = std::min(static_cast<int>(sx), gw - 1);
      const int x1 = std::min(x0 + 1, gw - 1);
      const double fx = sx - x0;
      ResampleTap& tp = (*taps)[static_cast<std::size_t>(oy) * out_w + ox];
      tp.src[0] = y0 * gw + x0;
      tp.src[1] = y0 * gw + x1;
      tp.src[2] = y1 * gw + x0;
      tp.src[3] = y1 * gw + x1;
      tp.w[0] = (1 - fy) * (1 - fx);
      tp.w[1] = (1 - fy) * fx;
      tp.w[2] = fy * (1 - fx);
      tp.w[3] = fy * fx;
    }
  }
  return taps;
}
}  // namespace

Var bilinear_upsample_rows(Tape& t, Var x, int gh, int gw, int out_h, int out_w) {
  const Mat& X = t.val(x);
  if (X.cols() != static_cast<Eigen::Index>(gh) * gw) {
    throw ShapeError("bilinear_upsample_rows: cols(x) != gh*gw");
  }
  auto taps = bilinear_taps(gh, gw, out_h, out_w);
  Mat Y(X.rows(), static_cast<Eigen::Index>(out_h) * out_w);
  for (Eigen::Index j = 0; j < Y.cols(); ++j) {
    const ResampleTap& tp = (*taps)[static_cast<std::size_t>(j)];
    Y.col(j) = tp.w[0] * X.col(tp.src[0]) + tp.w[1] * X.col(tp.src[1]) +
               tp.w[2] * X.col(tp.src[2]) + tp.w[3] * X.col(tp.src[3]);
  }
  Var out = t.make(std::move(Y), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      Mat& gx = t.grad_ref(x);
      for (Eigen::Index j = 0; j < g.cols(); ++j) {
        const ResampleTap& tp = (*taps)[static_cast<std::size_t>(j)];
        for (int k = 0; k < 4; ++k) gx.col(tp.src[k]) += tp.w[k] * g.col(j);
      }
    });
  }
  return out;
}

Mat nearest_upsample_rows(const Mat& x, int gh, int gw, int out_h, int out_w) {
  if (x.cols() != static_cast<Eigen::Index>(gh) * gw) {
    throw ShapeError("nearest_upsample_rows: cols(x) != gh*gw");
  }
  Mat y(x.rows(), static_cast<Eigen::Index>(out_h) * out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    const int sy = std::min(oy * gh / out_h, gh - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      const int sx = std::min(ox * gw / out_w, gw - 1);
      y.col(static_cast<Eigen::Index>(oy) * out_w + ox) = x.col(sy * gw + sx);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------

Var sum_rows(Tape& t, Var x) {
  Mat y = t.val(x).colwise().sum();
  Var out = t.make(std::move(y), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const Mat& g = t.grad_ref(out);
      t.grad_ref(x).rowwise() += g.row(0);
    });
  }
  return out;
}

Var sum_all(Tape& t, Var x) {
  Mat y(1, 1);
  y(0, 0) = t.val(x).sum();
  Var out = t.make(std::move(y), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      t.grad_ref(x).array() += t.grad_ref(out)(0, 0);
    });
  }
  return out;
}

Var mean_all(Tape& t, Var x) {
  const double inv_n = 1.0 / static_cast<double>(t.val(x).size());
  Mat y(1, 1);
  y(0, 0) = t.val(x).sum() * inv_n;
  Var out = t.make(std::move(y), t.needs_grad(x));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      t.grad_ref(x).array() += t.grad_ref(out)(0, 0) * inv_n;
    });
  }
  return out;
}

Var div11(Tape& t, Var a, Var b) {
  if (t.val(a).size() != 1 || t.val(b).size() != 1) throw ShapeError("div11: operands must be 1x1");
  const double av = t.val(a)(0, 0);
  const double bv = t.val(b)(0, 0);
  Mat y(1, 1);
  y(0, 0) = av / bv;
  Var out = t.make(std::move(y), t.needs_grad(a) || t.needs_grad(b));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const double g = t.grad_ref(out)(0, 0);
      const double av = t.val(a)(0, 0);
      const double bv = t.val(b)(0, 0);
      if (t.needs_grad(a)) t.grad_ref(a)(0, 0) += g / bv;
      if (t.needs_grad(b)) t.grad_ref(b)(0, 0) -= g * av / (bv * bv);
    });
  }
  return out;
}

Var bce_mean(Tape& t, Var p, const Mat& target) {
  const Mat& pv = t.val(p);
  if (pv.rows() != target.rows() || pv.cols() != target.cols()) {
    throw ShapeError("bce_mean: prediction and target shapes differ");
  }
  const double inv_n = 1.0 / static_cast<double>(pv.size());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < pv.size(); ++i) {
    const double g = target(i);
    const double v = pv(i);
    if (g > 0.5) {
      acc -= std::log(std::max(v, kBceEps));
    } else {
      acc -= std::log(std::max(1.0 - v, kBceEps));
    }
  }
  Mat y(1, 1);
  y(0, 0) = acc * inv_n;
  auto tgt = std::make_shared<Mat>(target);
  Var out = t.make(std::move(y), t.needs_grad(p));
  if (t.needs_grad(out)) {
    t.set_backward(out, [=](Tape& t) {
      const double g0 = t.grad_ref(out)(0, 0) * inv_n;
      const Mat& pv = t.val(p);
      Mat& gp = t.grad_ref(p);
      for (Eigen::Index i = 0; i < pv.size(); ++i) {
        const double g = (*tgt)(i);
        const double v = pv(i);
        if (g > 0.5) {
          if (v > kBceEps) gp(i) -= g0 / v;
        } else {
          if (1.0 - v > kBceEps) gp(i) += g0 / (1.0 - v);
        }
      }
    });
  }
  return out;
}

}  // namespace reinseg::ad
