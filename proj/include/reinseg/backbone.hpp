#pragma once

#include "reinseg/autodiff.hpp"
#include "reinseg/params.hpp"
#include "reinseg/types.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace reinseg {

enum class BackboneKind { vit_tiny, conv_tiny };

std::string to_string(BackboneKind kind);
BackboneKind backbone_kind_from_string(const std::string& s);

struct BackboneConfig {
  BackboneKind kind = BackboneKind::vit_tiny;
  int layers = 12;
  int width = 32;
  int patch = 8;
  int input = 64;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the violated invariant.
  void validate() const;

  int grid() const { return input / patch; }
  int tokens() const { return grid() * grid(); }
  /// Attention heads for vit_tiny; fixed head width of 8 channels.
  int heads() const { return width / 8; }
};

/// Refines a layer output before it enters the next layer. Receives the
/// (batch*n) x c features and the layer index.
using AdapterHook = std::function<ad::Var(ad::Tape&, ad::Var, int)>;

/// Small deterministic vision backbone exposing per-layer features and an
/// inter-layer adapter hook. vit_tiny is a pre-LN transformer over patch
/// tokens; conv_tiny is a ConvNeXt-style stack that keeps its grid flattened
/// to n x c between blocks so both kinds present one adapter interface.
class Backbone {
 public:
  static Backbone build(const BackboneConfig& cfg);

  const BackboneConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  std::size_t param_count() const { return store_.scalar_count(); }

  struct TapeForward {
    std::vector<ad::Var> layers;  // post-adapter output of each layer
    ad::Var final;                // final layernorm output
    int batch = 0;
    int tokens = 0;
    int grid = 0;
    int width = 0;
  };
  /// Tape forward over a batch of input-sized images. Features are stacked
  /// sample-major: rows [b*n, (b+1)*n) belong to sample b.
  TapeForward forward(ad::Tape& t, const std::vector<Image>& images,
                      const AdapterHook* adapter = nullptr);

  struct ForwardResult {
    std::vector<FeatureMap> layers;
    FeatureMap final;
  };
  ForwardResult forward_with_adapter(const std::vector<Image>& images,
                                     const AdapterHook* adapter = nullptr);

  /// Marks every backbone parameter non-trainable, records the frozen
  /// snapshot digest, and returns the backbone parameter group.
  std::vector<ParamGroup> freeze();
  std::optional<std::uint64_t> frozen_digest() const { return frozen_digest_; }
  std::uint64_t digest() const { return store_.digest(); }

  /// Flattens images into the patch matrix (batch*n) x (3*p*p).
  Mat patchify(const std::vector<Image>& images) const;

 private:
  BackboneConfig cfg_;
  ParamStore store_;
  std::optional<std::uint64_t> frozen_digest_;

  ad::Var forward_vit(ad::Tape& t, ad::Var x, int batch, const AdapterHook* adapter,
                      std::vector<ad::Var>& layers);
  ad::Var forward_conv(ad::Tape& t, ad::Var x, int batch, const AdapterHook* adapter,
                       std::vector<ad::Var>& layers);
};

}  // namespace reinseg
