#include "reinseg/backbone.hpp"

#include "reinseg/rng.hpp"

#include <cmath>
#include <sstream>

namespace reinseg {

namespace {

void init_linear(Param& p, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(p.value.rows());
  const double fan_out = static_cast<double>(p.value.cols());
  const double std = std::sqrt(2.0 / (fan_in + fan_out));
  std::normal_distribution<double> dist(0.0, std);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value(i) = dist(rng);
}

void init_normal(Param& p, std::mt19937_64& rng, double std) {
  std::normal_distribution<double> dist(0.0, std);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value(i) = dist(rng);
}

std::string layer_name(int i, const char* suffix) {
  std::ostringstream os;
  os << "layer" << i << "." << suffix;
  return os.str();
}

}  // namespace

std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::vit_tiny ? "vit_tiny" : "conv_tiny";
}

BackboneKind backbone_kind_from_string(const std::string& s) {
  if (s == "vit_tiny") return BackboneKind::vit_tiny;
  if (s == "conv_tiny") return BackboneKind::conv_tiny;
  throw ConfigError("unknown backbone kind: " + s + " (expected vit_tiny or conv_tiny)");
}

void BackboneConfig::validate() const {
  if (layers < 2) throw ConfigError("backbone layers must be >= 2");
  if (width < 8) throw ConfigError("backbone width must be >= 8");
  if (patch < 1) throw ConfigError("patch_size must be positive");
  if (input < 1) throw ConfigError("input_size must be positive");
  if (input % patch != 0) throw ConfigError("input_size not divisible by patch_size");
  if (kind == BackboneKind::vit_tiny && width % 8 != 0) {
    throw ConfigError("vit_tiny width must be a multiple of 8 (fixed head width)");
  }
}

Backbone Backbone::build(const BackboneConfig& cfg) {
  cfg.validate();
  Backbone bb;
  bb.cfg_ = cfg;
  auto rng = make_rng(cfg.seed);

  const int c = cfg.width;
  const int pvec = 3 * cfg.patch * cfg.patch;
  ParamStore& s = bb.store_;
  const std::string grp = "backbone";

  if (cfg.kind == BackboneKind::vit_tiny) {
    init_linear(s.add("patch_embed.w", pvec, c, grp), rng);
    s.add("patch_embed.b", 1, c, grp, true, false);
    init_normal(s.add("pos_embed", cfg.tokens(), c, grp, true, false), rng, 0.02);
    const int hidden = 4 * c;
    for (int i = 0; i < cfg.layers; ++i) {
      s.add(layer_name(i, "ln1.g"), 1, c, grp, true, false).value.setOnes();
      s.add(layer_name(i, "ln1.b"), 1, c, grp, true, false);
      init_linear(s.add(layer_name(i, "attn.qkv.w"), c, 3 * c, grp), rng);
      s.add(layer_name(i, "attn.qkv.b"), 1, 3 * c, grp, true, false);
      init_linear(s.add(layer_name(i, "attn.proj.w"), c, c, grp), rng);
      s.add(layer_name(i, "attn.proj.b"), 1, c, grp, true, false);
      s.add(layer_name(i, "ln2.g"), 1, c, grp, true, false).value.setOnes();
      s.add(layer_name(i, "ln2.b"), 1, c, grp, true, false);
      init_linear(s.add(layer_name(i, "mlp.fc1.w"), c, hidden, grp), rng);
      s.add(layer_name(i, "mlp.fc1.b"), 1, hidden, grp, true, false);
      init_linear(s.add(layer_name(i, "mlp.fc2.w"), hidden, c, grp), rng);
      s.add(layer_name(i, "mlp.fc2.b"), 1, c, grp, true, false);
    }
  } else {
    init_linear(s.add("stem.w", pvec, c, grp), rng);
    s.add("stem.b", 1, c, grp, true, false);
    const int hidden = 4 * c;
    for (int i = 0; i < cfg.layers; ++i) {
      init_normal(s.add(layer_name(i, "dw.w"), 9, c, grp), rng, 1.0 / 3.0);
      s.add(layer_name(i, "dw.b"), 1, c, grp, true, false);
      s.add(layer_name(i, "ln.g"), 1, c, grp, true, false).value.setOnes();
      s.add(layer_name(i, "ln.b"), 1, c, grp, true, false);
      init_linear(s.add(layer_name(i, "pw1.w"), c, hidden, grp), rng);
      s.add(layer_name(i, "pw1.b"), 1, hidden, grp, true, false);
      init_linear(s.add(layer_name(i, "pw2.w"), hidden, c, grp), rng);
      s.add(layer_name(i, "pw2.b"), 1, c, grp, true, false);
    }
  }
  s.add("final_ln.g", 1, c, grp, true, false).value.setOnes();
  s.add("final_ln.b", 1, c, grp, true, false);
  return bb;
}

Mat Backbone::patchify(const std::vector<Image>& images) const {
  const int p = cfg_.patch;
  const int g = cfg_.grid();
  const int n = cfg_.tokens();
  const int batch = static_cast<int>(images.size());
  Mat x(static_cast<Eigen::Index>(batch) * n, 3 * p * p);
  for (int b = 0; b < batch; ++b) {
    const Image& im = images[b];
    if (im.height() != cfg_.input || im.width() != cfg_.input) {
      std::ostringstream os;
      os << "backbone input shape mismatch: expected " << cfg_.input << "x" << cfg_.input
         << ", got " << im.height() << "x" << im.width();
      throw ShapeError(os.str());
    }
    for (int py = 0; py < g; ++py) {
      for (int px = 0; px < g; ++px) {
        const Eigen::Index row = static_cast<Eigen::Index>(b) * n + py * g + px;
        for (int dy = 0; dy < p; ++dy) {
          for (int dx = 0; dx < p; ++dx) {
            const int y = py * p + dy;
            const int x2 = px * p + dx;
            const Eigen::Index col = static_cast<Eigen::Index>(dy * p + dx) * 3;
            x(row, col + 0) = im.r(y, x2);
            x(row, col + 1) = im.g(y, x2);
            x(row, col + 2) = im.b(y, x2);
          }
        }
      }
    }
  }
  return x;
}

ad::Var Backbone::forward_vit(ad::Tape& t, ad::Var x, int batch, const AdapterHook* adapter,
                              std::vector<ad::Var>& layers) {
  ParamStore& s = store_;
  const int n = cfg_.tokens();
  ad::Var h = ad::matmul(t, x, t.leaf(s.get("patch_embed.w")));
  h = ad::add_row_broadcast(t, h, t.leaf(s.get("patch_embed.b")));
  h = ad::add_tiled(t, h, t.leaf(s.get("pos_embed")), batch);
  for (int i = 0; i < cfg_.layers; ++i) {
    ad::Var a = ad::layernorm_rows(t, h, t.leaf(s.get(layer_name(i, "ln1.g"))),
                                   t.leaf(s.get(layer_name(i, "ln1.b"))));
    ad::Var qkv = ad::matmul(t, a, t.leaf(s.get(layer_name(i, "attn.qkv.w"))));
    qkv = ad::add_row_broadcast(t, qkv, t.leaf(s.get(layer_name(i, "attn.qkv.b"))));
    ad::Var attn = ad::mhsa(t, qkv, batch, n, cfg_.heads());
    attn = ad::matmul(t, attn, t.leaf(s.get(layer_name(i, "attn.proj.w"))));
    attn = ad::add_row_broadcast(t, attn, t.leaf(s.get(layer_name(i, "attn.proj.b"))));
    h = ad::add(t, h, attn);
    ad::Var m = ad::layernorm_rows(t, h, t.leaf(s.get(layer_name(i, "ln2.g"))),
                                   t.leaf(s.get(layer_name(i, "ln2.b"))));
    m = ad::matmul(t, m, t.leaf(s.get(layer_name(i, "mlp.fc1.w"))));
    m = ad::add_row_broadcast(t, m, t.leaf(s.get(layer_name(i, "mlp.fc1.b"))));
    m = ad::gelu(t, m);
    m = ad::matmul(t, m, t.leaf(s.get(layer_name(i, "mlp.fc2.w"))));
    m = ad::add_row_broadcast(t, m, t.leaf(s.get(layer_name(i, "mlp.fc2.b"))));
    h = ad::add(t, h, m);
    if (adapter != nullptr && *adapter) h = (*adapter)(t, h, i);
    layers.push_back(h);
  }
  return ad::layernorm_rows(t, h, t.leaf(s.get("final_ln.g")), t.leaf(s.get("final_ln.b")));
}

ad::Var Backbone::forward_conv(ad::Tape& t, ad::Var x, int batch, const AdapterHook* adapter,
                               std::vector<ad::Var>& layers) {
  ParamStore& s = store_;
  const int g = cfg_.grid();
  ad::Var h = ad::matmul(t, x, t.leaf(s.get("stem.w")));
  h = ad::add_row_broadcast(t, h, t.leaf(s.get("stem.b")));
  for (int i = 0; i < cfg_.layers; ++i) {
    ad::Var d = ad::dwconv3x3(t, h, t.leaf(s.get(layer_name(i, "dw.w"))),
                              t.leaf(s.get(layer_name(i, "dw.b"))), batch, g, g);
    d = ad::layernorm_rows(t, d, t.leaf(s.get(layer_name(i, "ln.g"))),
                           t.leaf(s.get(layer_name(i, "ln.b"))));
    d = ad::matmul(t, d, t.leaf(s.get(layer_name(i, "pw1.w"))));
    d = ad::add_row_broadcast(t, d, t.leaf(s.get(layer_name(i, "pw1.b"))));
    d = ad::gelu(t, d);
    d = ad::matmul(t, d, t.leaf(s.get(layer_name(i, "pw2.w"))));
    d = ad::add_row_broadcast(t, d, t.leaf(s.get(layer_name(i, "pw2.b"))));
    h = ad::add(t, h, d);
    if (adapter != nullptr && *adapter) h = (*adapter)(t, h, i);
    layers.push_back(h);
  }
  return ad::layernorm_rows(t, h, t.leaf(s.get("final_ln.g")), t.leaf(s.get("final_ln.b")));
}

Backbone::TapeForward Backbone::forward(ad::Tape& t, const std::vector<Image>& images,
                                        const AdapterHook* adapter) {
  if (images.empty()) throw ShapeError("backbone forward: empty batch");
  TapeForward out;
  out.batch = static_cast<int>(images.size());
  out.tokens = cfg_.tokens();
  out.grid = cfg_.grid();
  out.width = cfg_.width;
  ad::Var x = t.constant(patchify(images));
  if (cfg_.kind == BackboneKind::vit_tiny) {
    out.final = forward_vit(t, x, out.batch, adapter, out.layers);
  } else {
    out.final = forward_conv(t, x, out.batch, adapter, out.layers);
  }
  return out;
}

namespace {
FeatureMap to_feature_map(const Mat& stacked, int batch, int n, int grid) {
  FeatureMap fm;
  fm.grid_h = grid;
  fm.grid_w = grid;
  fm.data.reserve(batch);
  for (int b = 0; b < batch; ++b) fm.data.push_back(stacked.middleRows(static_cast<Eigen::Index>(b) * n, n));
  return fm;
}
}  // namespace

Backbone::ForwardResult Backbone::forward_with_adapter(const std::vector<Image>& images,
                                                       const AdapterHook* adapter) {
  ad::Tape t;
  TapeForward fwd = forward(t, images, adapter);
  ForwardResult out;
  out.layers.reserve(fwd.layers.size());
  for (const ad::Var& v : fwd.layers) {
    out.layers.push_back(to_feature_map(t.val(v), fwd.batch, fwd.tokens, fwd.grid));
  }
  out.final = to_feature_map(t.val(fwd.final), fwd.batch, fwd.tokens, fwd.grid);
  return out;
}

std::vector<ParamGroup> Backbone::freeze() {
  store_.set_trainable(false);
  frozen_digest_ = store_.digest();
  ParamGroup g;
  g.name = "backbone";
  g.params = store_.all();
  g.trainable = false;
  g.learning_rate = 0.0;
  return {g};
}

}  // namespace reinseg
