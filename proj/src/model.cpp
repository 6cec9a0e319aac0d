#include "reinseg/model.hpp"

#include "reinseg/datagen.hpp"
#include "reinseg/digest.hpp"
#include "reinseg/rng.hpp"

#include <sstream>

namespace reinseg {

void ModelConfig::validate() const {
  backbone.validate();
  head.validate();
  if (head.width != backbone.width)
    throw ConfigError("head width must match backbone width");
  if (head.out_size != backbone.input)
    throw ConfigError("head out_size must match backbone input size");
  if (rein_enabled) {
    adapter.validate();
    if (adapter.width != backbone.width)
      throw ConfigError("adapter width must match backbone width");
    if (adapter.layers != backbone.layers)
      throw ConfigError("adapter must supply one token bank per backbone layer");
    if (head.query_dim != adapter.query_dim)
      throw ConfigError("head query_dim must match adapter query_dim");
    if (head.expected_queries != adapter.tokens)
      throw ConfigError("head expected_queries must match adapter token count");
  }
}

ModelConfig ModelConfig::desk_default(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.backbone = {BackboneKind::vit_tiny, 12, 32, 8, 64, derive_seed(seed, 0xbb)};
  cfg.adapter = {12, 16, 4, 32, 0, 16, derive_seed(seed, 0xad)};
  cfg.head = {16, 32, 16, 64, 16, 0.5, true, derive_seed(seed, 0x4d)};
  cfg.rein_enabled = true;
  cfg.backbone_frozen = true;
  return cfg;
}

SegModel SegModel::build(const ModelConfig& cfg) {
  cfg.validate();
  Backbone bb = Backbone::build(cfg.backbone);
  if (cfg.backbone_frozen) bb.freeze();
  std::optional<Adapter> adapter;
  int static_queries = 0;
  if (cfg.rein_enabled)
    adapter = Adapter::init(cfg.adapter);
  else
    static_queries = cfg.head.expected_queries;
  Head head = Head::init(cfg.head, static_queries);
  return SegModel(cfg, std::move(bb), std::move(adapter), std::move(head));
}

Adapter& SegModel::adapter() {
  if (!adapter_) throw ConfigError("model was built without a Rein adapter");
  return *adapter_;
}

std::vector<ParamGroup> SegModel::param_groups() {
  std::vector<ParamGroup> groups;
  ParamGroup bb;
  bb.name = "backbone";
  bb.params = backbone_.params().all();
  bb.trainable = !cfg_.backbone_frozen;
  groups.push_back(std::move(bb));
  if (adapter_) groups.push_back(adapter_->trainable_parameters());
  ParamGroup hd;
  hd.name = "head";
  hd.params = head_.params().all();
  hd.trainable = true;
  groups.push_back(std::move(hd));
  check_partition(groups, total_param_count());
  return groups;
}

std::size_t SegModel::total_param_count() const {
  std::size_t n = backbone_.param_count() + head_.param_count();
  if (adapter_) n += adapter_->param_count();
  return n;
}

std::size_t SegModel::trainable_param_count() const {
  std::size_t n = cfg_.backbone_frozen ? 0 : backbone_.param_count();
  n += head_.param_count();
  if (adapter_) n += adapter_->param_count();
  return n;
}

double SegModel::trainable_fraction() const {
  return static_cast<double>(trainable_param_count()) / static_cast<double>(total_param_count());
}

ad::Var SegModel::batch_loss(ad::Tape& t, const std::vector<ImageSample>& batch) {
  if (batch.empty()) throw ValidationError("batch_loss: empty batch");
  const int input = cfg_.backbone.input;
  std::vector<Image> images;
  images.reserve(batch.size());
  for (const ImageSample& s : batch) {
    if (s.mask.rows() != input || s.mask.cols() != input) {
      std::ostringstream msg;
      msg << "batch_loss: mask of " << s.sample_id << " is " << s.mask.rows() << "x"
          << s.mask.cols() << ", expected " << input << "x" << input;
      throw ShapeError(msg.str());
    }
    images.push_back(s.image);
  }

  AdapterHook hook;
  if (adapter_) hook = adapter_->hook();
  Backbone::TapeForward fwd = backbone_.forward(t, images, adapter_ ? &hook : nullptr);

  ad::Var queries = adapter_ ? adapter_->queries(t) : head_.static_queries(t);
  Head::EmbeddedQueries eq = head_.embed_queries(t, queries);

  ad::Var total{};
  for (int b = 0; b < static_cast<int>(batch.size()); ++b) {
    ad::Var fb = ad::slice_rows(t, fwd.final, b * fwd.tokens, fwd.tokens);
    ad::Var row = head_.semantic_prob_row(t, eq, fb, fwd.grid, fwd.grid);
    ad::Var lb = segmentation_loss(t, row, batch[b].mask);
    total = b == 0 ? lb : ad::add(t, total, lb);
  }
  return ad::scale(t, total, 1.0 / static_cast<double>(batch.size()));
}

Mat SegModel::semantic_prob(const Image& crop) {
  ad::Tape t;
  t.set_grad_enabled(false);
  AdapterHook hook;
  if (adapter_) hook = adapter_->hook();
  Backbone::TapeForward fwd = backbone_.forward(t, {crop}, adapter_ ? &hook : nullptr);
  ad::Var queries = adapter_ ? adapter_->queries(t) : head_.static_queries(t);
  Head::EmbeddedQueries eq = head_.embed_queries(t, queries);
  ad::Var row = head_.semantic_prob_row(t, eq, fwd.final, fwd.grid, fwd.grid);
  return unflatten_row(t.val(row), cfg_.head.out_size, cfg_.head.out_size);
}

MaskPrediction SegModel::predict(const Image& crop) {
  Backbone::ForwardResult fwd;
  if (adapter_) {
    AdapterHook hook = adapter_->hook();
    fwd = backbone_.forward_with_adapter({crop}, &hook);
  } else {
    fwd = backbone_.forward_with_adapter({crop}, nullptr);
  }
  QueryBank qb;
  if (adapter_)
    qb = adapter_->extract_queries();
  else
    qb.Q = head_.params().get("queries").value;
  return head_.predict(fwd.final.data[0], fwd.final.grid_h, fwd.final.grid_w, qb);
}

Mat SegModel::predict_prob_full(const Image& image) {
  const int size = cfg_.backbone.input;
  ImageSample wrapper;
  wrapper.image = image;
  wrapper.mask = MaskArray::Zero(image.height(), image.width());
  wrapper.sample_id = "tile_source";
  std::vector<TileCoord> coords;
  std::vector<ImageSample> tiles = crop(wrapper, size, CropPolicy::sliding, 0, &coords);
  std::vector<Mat> probs;
  probs.reserve(tiles.size());
  for (const ImageSample& tile : tiles) probs.push_back(semantic_prob(tile.image));
  return merge_tiles(probs, coords, image.height(), image.width());
}

MaskArray SegModel::predict_mask_full(const Image& image) {
  return threshold_prob(predict_prob_full(image));
}

MaskArray SegModel::threshold_prob(const Mat& prob) const {
  MaskArray mask(prob.rows(), prob.cols());
  for (Eigen::Index j = 0; j < prob.cols(); ++j)
    for (Eigen::Index i = 0; i < prob.rows(); ++i)
      mask(i, j) = prob(i, j) >= cfg_.head.threshold ? 1 : 0;
  return mask;
}

std::uint64_t SegModel::digest() const {
  Digest d;
  d.update_value(backbone_.digest());
  if (adapter_) d.update_value(adapter_->params().digest());
  d.update_value(head_.params().digest());
  return d.value();
}

}  // namespace reinseg
