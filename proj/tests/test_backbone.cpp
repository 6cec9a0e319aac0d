#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "reinseg/backbone.hpp"
#include "reinseg/types.hpp"

#include <random>
#include <vector>

using namespace reinseg;

namespace {

Image random_image(std::mt19937_64& rng, int size) {
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  Image im(size, size);
  for (int x = 0; x < size; ++x)
    for (int y = 0; y < size; ++y) {
      im.r(y, x) = dist(rng);
      im.g(y, x) = dist(rng);
      im.b(y, x) = dist(rng);
    }
  return im;
}

BackboneConfig small_vit(std::uint64_t seed = 7) {
  BackboneConfig cfg;
  cfg.kind = BackboneKind::vit_tiny;
  cfg.layers = 4;
  cfg.width = 32;
  cfg.patch = 8;
  cfg.input = 64;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("config validation names the violated invariant") {
  BackboneConfig cfg = small_vit();
  CHECK_NOTHROW(cfg.validate());

  cfg.patch = 7;
  CHECK_THROWS_WITH_AS(cfg.validate(), "input_size not divisible by patch_size", ConfigError);
  cfg = small_vit();
  cfg.layers = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_vit();
  cfg.width = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(Backbone::build(cfg), ConfigError);
}

TEST_CASE("kind string round-trip") {
  CHECK(to_string(BackboneKind::vit_tiny) == "vit_tiny");
  CHECK(to_string(BackboneKind::conv_tiny) == "conv_tiny");
  CHECK(backbone_kind_from_string("vit_tiny") == BackboneKind::vit_tiny);
  CHECK(backbone_kind_from_string("conv_tiny") == BackboneKind::conv_tiny);
  CHECK_THROWS_AS(backbone_kind_from_string("resnet"), ConfigError);
}

TEST_CASE("vit_tiny per-layer shapes follow n = (input/patch)^2") {
  Backbone bb = Backbone::build(small_vit());
  CHECK(bb.config().tokens() == 64);
  std::mt19937_64 rng(3);
  std::vector<Image> batch = {random_image(rng, 64), random_image(rng, 64)};
  Backbone::ForwardResult out = bb.forward_with_adapter(batch);
  REQUIRE(out.layers.size() == 4);
  for (const FeatureMap& fm : out.layers) {
    CHECK(fm.batch() == 2);
    CHECK(fm.tokens() == 64);
    CHECK(fm.width() == 32);
    CHECK(fm.grid_h == 8);
    CHECK(fm.grid_w == 8);
    for (const Mat& m : fm.data) CHECK(m.allFinite());
  }
  CHECK(out.final.tokens() == 64);
  CHECK(out.final.width() == 32);
}

TEST_CASE("same config and seed build bitwise-identical backbones") {
  Backbone a = Backbone::build(small_vit(7));
  Backbone b = Backbone::build(small_vit(7));
  CHECK(a.digest() == b.digest());
  Backbone c = Backbone::build(small_vit(8));
  CHECK(a.digest() != c.digest());

  std::mt19937_64 rng(4);
  std::vector<Image> batch = {random_image(rng, 64)};
  Mat fa = a.forward_with_adapter(batch).final.data[0];
  Mat fb = b.forward_with_adapter(batch).final.data[0];
  CHECK((fa.array() == fb.array()).all());
}

TEST_CASE("identical images in a batch get identical features") {
  Backbone bb = Backbone::build(small_vit());
  std::mt19937_64 rng(5);
  Image im = random_image(rng, 64);
  Backbone::ForwardResult out = bb.forward_with_adapter({im, im});
  // Samples are mathematically independent, but Eigen's blocked GEMM rounds
  // rows differently depending on their panel position, so batch positions
  // agree to ~1e-15 rather than bitwise.
  for (const FeatureMap& fm : out.layers)
    CHECK((fm.data[0] - fm.data[1]).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((out.final.data[0] - out.final.data[1]).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("pass-through adapter hook leaves the forward unchanged") {
  Backbone bb = Backbone::build(small_vit());
  std::mt19937_64 rng(6);
  std::vector<Image> batch = {random_image(rng, 64)};
  AdapterHook identity = [](ad::Tape&, ad::Var f, int) { return f; };
  Mat plain = bb.forward_with_adapter(batch).final.data[0];
  Mat hooked = bb.forward_with_adapter(batch, &identity).final.data[0];
  CHECK((plain.array() == hooked.array()).all());
}

TEST_CASE("adapter hook output feeds the next layer") {
  Backbone bb = Backbone::build(small_vit());
  std::mt19937_64 rng(7);
  std::vector<Image> batch = {random_image(rng, 64)};
  // Shifting only layer 0's output must change every later layer.
  AdapterHook shift0 = [](ad::Tape& t, ad::Var f, int layer) {
    return layer == 0 ? ad::shift(t, f, 0.5) : f;
  };
  Backbone::ForwardResult plain = bb.forward_with_adapter(batch);
  Backbone::ForwardResult hooked = bb.forward_with_adapter(batch, &shift0);
  CHECK((hooked.layers[0].data[0] - plain.layers[0].data[0]).cwiseAbs().minCoeff() ==
        doctest::Approx(0.5).epsilon(1e-12));
  CHECK((hooked.layers[1].data[0] - plain.layers[1].data[0]).cwiseAbs().maxCoeff() > 0.0);
  CHECK((hooked.final.data[0] - plain.final.data[0]).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("input shape mismatch reports expected vs got") {
  Backbone bb = Backbone::build(small_vit());
  std::mt19937_64 rng(8);
  std::vector<Image> batch = {random_image(rng, 32)};
  CHECK_THROWS_WITH_AS(bb.forward_with_adapter(batch), doctest::Contains("expected 64x64"),
                       ShapeError);
}

TEST_CASE("patchify layout: row-major patches, interleaved rgb") {
  Backbone bb = Backbone::build(small_vit());
  Image im(64, 64);
  im.r.setConstant(0.25f);
  im.g.setConstant(0.5f);
  im.b.setConstant(0.75f);
  Mat x = bb.patchify({im});
  REQUIRE(x.rows() == 64);
  REQUIRE(x.cols() == 3 * 8 * 8);
  for (int col = 0; col < x.cols(); col += 3) {
    CHECK(x(0, col + 0) == 0.25);
    CHECK(x(0, col + 1) == 0.5);
    CHECK(x(0, col + 2) == 0.75);
  }

  // Distinct pixel: patch (1,2), offset (3,4) lands in row 1*8+2 at the
  // column block for dy=3, dx=4.
  Image marked = im;
  marked.g(1 * 8 + 3, 2 * 8 + 4) = 1.0f;
  Mat x2 = bb.patchify({marked});
  CHECK(x2(1 * 8 + 2, (3 * 8 + 4) * 3 + 1) == 1.0);
  CHECK(x2(0, 1) == 0.5);
}

TEST_CASE("freeze records a digest and marks parameters non-trainable") {
  Backbone bb = Backbone::build(small_vit());
  CHECK_FALSE(bb.frozen_digest().has_value());
  std::vector<ParamGroup> groups = bb.freeze();
  REQUIRE(groups.size() == 1);
  CHECK(groups[0].name == "backbone");
  CHECK_FALSE(groups[0].trainable);
  CHECK(groups[0].scalar_count() == bb.param_count());
  REQUIRE(bb.frozen_digest().has_value());
  CHECK(*bb.frozen_digest() == bb.digest());
  for (std::size_t i = 0; i < bb.params().size(); ++i) CHECK_FALSE(bb.params().at(i).trainable);

  // Forward passes must not disturb the frozen snapshot.
  std::mt19937_64 rng(9);
  std::vector<Image> batch = {random_image(rng, 64)};
  bb.forward_with_adapter(batch);
  CHECK(bb.digest() == *bb.frozen_digest());
}

TEST_CASE("conv_tiny honors the same forward contract") {
  BackboneConfig cfg = small_vit();
  cfg.kind = BackboneKind::conv_tiny;
  Backbone bb = Backbone::build(cfg);
  std::mt19937_64 rng(10);
  Image im = random_image(rng, 64);
  Backbone::ForwardResult out = bb.forward_with_adapter({im, im});
  REQUIRE(out.layers.size() == 4);
  for (const FeatureMap& fm : out.layers) {
    CHECK(fm.batch() == 2);
    CHECK(fm.tokens() == 64);
    CHECK(fm.width() == 32);
    CHECK((fm.data[0] - fm.data[1]).cwiseAbs().maxCoeff() <= 1e-12);
    for (const Mat& m : fm.data) CHECK(m.allFinite());
  }

  Backbone again = Backbone::build(cfg);
  CHECK(bb.digest() == again.digest());
  std::vector<ParamGroup> groups = bb.freeze();
  CHECK_FALSE(groups[0].trainable);
  CHECK(*bb.frozen_digest() == bb.digest());
}
