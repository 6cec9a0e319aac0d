#pragma once

#include "reinseg/types.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace reinseg {

enum class ShapeFamily { ellipse, polygon, blob_union };

std::string to_string(ShapeFamily f);
ShapeFamily shape_family_from_string(const std::string& s);

/// Photometric domain shift: hue rotation about the gray axis (in turns, so
/// mean luminance is preserved exactly), contrast about a 0.5 pivot, and
/// additive Gaussian channel noise.
struct ColorTransform {
  double hue_shift = 0.0;    // [-0.5, 0.5]
  double contrast = 1.0;     // [0.5, 2]
  double noise_sigma = 0.0;  // [0, 0.1]
};

struct DomainSpec {
  std::string domain_id;
  ShapeFamily shape_family = ShapeFamily::ellipse;
  ColorTransform color;
  std::uint64_t seed = 0;

  /// Throws ConfigError when a transform parameter leaves its stated range.
  void validate() const;
};

/// Three training domains and three held-out domains with disjoint
/// shape/transform parameter settings, seeded from one master seed.
std::vector<DomainSpec> default_seen_domains(std::uint64_t master_seed);
std::vector<DomainSpec> default_unseen_domains(std::uint64_t master_seed);

/// Renders sample `index` of a domain before any color transform. The mask
/// marks the union of 1-4 foreground shapes; shape draws that land outside
/// the (0, 0.9) foreground-fraction window are redrawn deterministically.
Image render_raw(const DomainSpec& spec, int index, int size, MaskArray& mask_out);

/// Applies hue rotation, contrast, then seeded noise. Identity parameters
/// return the input bitwise.
Image apply_color_transform(const Image& img, const ColorTransform& ct, std::uint64_t noise_seed);

/// count samples, deterministic in (spec, size). sample_id is
/// "<domain_id>_<index>" with a three-digit index.
std::vector<ImageSample> generate_domain(const DomainSpec& spec, int count, int size);

/// Stratified 8:2-style split: |train| = round(ratio*N) overall, allocated
/// per domain by largest remainder, shuffled per domain by a derived seed.
/// Throws ValidationError when ratio leaves (0,1) or either side is empty.
std::pair<std::vector<ImageSample>, std::vector<ImageSample>> split_train_val(
    const std::vector<ImageSample>& samples, double ratio, std::uint64_t seed);

struct TileCoord {
  int y = 0;
  int x = 0;
};

enum class CropPolicy { random, sliding };

/// Tile origins along one axis: stride window/2 plus a flush final tile.
std::vector<int> sliding_offsets(int full, int window);

/// Paired image/mask crop with origin (y, x). Throws ShapeError when the
/// window leaves the image.
ImageSample crop_at(const ImageSample& s, int y, int x, int size);

/// random policy: one seeded crop. sliding policy: the full overlapping tile
/// cover; origins are reported through coords_out when given.
std::vector<ImageSample> crop(const ImageSample& s, int size, CropPolicy policy,
                              std::uint64_t seed, std::vector<TileCoord>* coords_out = nullptr);

/// Per-pixel mean of overlapping tile probability maps. Every pixel of the
/// H x W canvas must be covered by some tile, else ValidationError.
Mat merge_tiles(const std::vector<Mat>& tile_probs, const std::vector<TileCoord>& coords,
                int height, int width);

/// Directory layout: images/<id>.png, masks/<id>.png, optional domains.csv
/// (`sample_id,domain_id`). Missing masks raise a ValidationError listing
/// every image stem without one.
std::vector<ImageSample> load_dataset_dir(const std::string& path);
void save_dataset_dir(const std::string& path, const std::vector<ImageSample>& samples);

}  // namespace reinseg
