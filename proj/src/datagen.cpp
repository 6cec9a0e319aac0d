#include "reinseg/datagen.hpp"

#include "reinseg/digest.hpp"
#include "reinseg/image_io.hpp"
#include "reinseg/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>

namespace fs = std::filesystem;

namespace reinseg {
namespace {

constexpr std::uint64_t kRenderStream = 0x72656e6465724cULL;
constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;

// Orthonormal chroma basis perpendicular to the gray axis (1,1,1)/sqrt(3).
// Colors are Y*(1,1,1) + chroma*(cos(phi)*e1 + sin(phi)*e2), so the channel
// mean is exactly Y and hue rotation moves phi without touching Y.
const std::array<double, 3> kChromaE1 = {2.0 / std::sqrt(6.0), -1.0 / std::sqrt(6.0),
                                         -1.0 / std::sqrt(6.0)};
const std::array<double, 3> kChromaE2 = {0.0, 1.0 / std::sqrt(2.0), -1.0 / std::sqrt(2.0)};
constexpr double kMaxBasisComponent = 0.8165;  // 2/sqrt(6), rounded up

std::array<float, 3> make_color(double luma, double chroma, double phi) {
  double cap = std::min(luma, 1.0 - luma) / kMaxBasisComponent;
  double rho = std::min(chroma, cap);
  std::array<float, 3> c;
  for (int i = 0; i < 3; ++i)
    c[i] = static_cast<float>(luma + rho * (std::cos(phi) * kChromaE1[i] + std::sin(phi) * kChromaE2[i]));
  return c;
}

using InsideFn = std::function<bool(double, double)>;

struct ShapeDraw {
  InsideFn inside;
  std::array<float, 3> color;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

InsideFn draw_ellipse(std::mt19937_64& rng, double S) {
  double cx = uniform(rng, 0.2, 0.8) * S;
  double cy = uniform(rng, 0.2, 0.8) * S;
  double rx = uniform(rng, 0.08, 0.26) * S;
  double ry = uniform(rng, 0.08, 0.26) * S;
  double th = uniform(rng, 0.0, std::numbers::pi);
  double c = std::cos(th), s = std::sin(th);
  return [=](double x, double y) {
    double dx = x - cx, dy = y - cy;
    double u = (c * dx + s * dy) / rx;
    double v = (-s * dx + c * dy) / ry;
    return u * u + v * v <= 1.0;
  };
}

InsideFn draw_polygon(std::mt19937_64& rng, double S) {
  int k = uniform_int(rng, 3, 7);
  double cx = uniform(rng, 0.25, 0.75) * S;
  double cy = uniform(rng, 0.25, 0.75) * S;
  std::vector<double> angles(k);
  for (double& a : angles) a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  std::sort(angles.begin(), angles.end());
  std::vector<std::array<double, 2>> verts(k);
  for (int i = 0; i < k; ++i) {
    double r = uniform(rng, 0.1, 0.28) * S;
    verts[i] = {cx + r * std::cos(angles[i]), cy + r * std::sin(angles[i])};
  }
  // Even-odd crossing test; the star-shaped construction keeps the polygon simple.
  return [verts](double x, double y) {
    bool in = false;
    for (std::size_t i = 0, j = verts.size() - 1; i < verts.size(); j = i++) {
      bool crosses = (verts[i][1] > y) != (verts[j][1] > y);
      if (crosses &&
          x < (verts[j][0] - verts[i][0]) * (y - verts[i][1]) / (verts[j][1] - verts[i][1]) +
                  verts[i][0])
        in = !in;
    }
    return in;
  };
}

InsideFn draw_blob_union(std::mt19937_64& rng, double S) {
  int n = uniform_int(rng, 2, 4);
  double cx = uniform(rng, 0.25, 0.75) * S;
  double cy = uniform(rng, 0.25, 0.75) * S;
  double r0 = uniform(rng, 0.08, 0.18) * S;
  std::vector<std::array<double, 3>> disks;
  disks.push_back({cx, cy, r0});
  for (int i = 1; i < n; ++i) {
    double dx = uniform(rng, -0.9, 0.9) * r0;
    double dy = uniform(rng, -0.9, 0.9) * r0;
    double r = uniform(rng, 0.6, 1.0) * r0;
    disks.push_back({cx + dx, cy + dy, r});
  }
  return [disks](double x, double y) {
    for (const auto& d : disks) {
      double dx = x - d[0], dy = y - d[1];
      if (dx * dx + dy * dy <= d[2] * d[2]) return true;
    }
    return false;
  };
}

InsideFn draw_shape(ShapeFamily family, std::mt19937_64& rng, double S) {
  switch (family) {
    case ShapeFamily::ellipse:
      return draw_ellipse(rng, S);
    case ShapeFamily::polygon:
      return draw_polygon(rng, S);
    case ShapeFamily::blob_union:
      return draw_blob_union(rng, S);
  }
  throw ConfigError("unknown shape family");
}

std::uint64_t domain_stream(const std::string& domain_id) {
  Digest d;
  d.update(domain_id);
  return d.value();
}

}  // namespace

std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::ellipse:
      return "ellipse";
    case ShapeFamily::polygon:
      return "polygon";
    case ShapeFamily::blob_union:
      return "blob-union";
  }
  throw ConfigError("unknown shape family");
}

ShapeFamily shape_family_from_string(const std::string& s) {
  if (s == "ellipse") return ShapeFamily::ellipse;
  if (s == "polygon") return ShapeFamily::polygon;
  if (s == "blob-union" || s == "blob_union") return ShapeFamily::blob_union;
  throw ConfigError("unknown shape family: " + s);
}

void DomainSpec::validate() const {
  if (domain_id.empty()) throw ConfigError("domain_id must not be empty");
  if (color.hue_shift < -0.5 || color.hue_shift > 0.5)
    throw ConfigError("hue_shift must lie in [-0.5, 0.5]");
  if (color.contrast < 0.5 || color.contrast > 2.0)
    throw ConfigError("contrast must lie in [0.5, 2]");
  if (color.noise_sigma < 0.0 || color.noise_sigma > 0.1)
    throw ConfigError("noise_sigma must lie in [0, 0.1]");
}

std::vector<DomainSpec> default_seen_domains(std::uint64_t master_seed) {
  // Shape statistics and photometry vary per domain; the one invariant cue is
  // dark foreground on light background, which hue rotation cannot move.
  return {
      {"seen_ellipse", ShapeFamily::ellipse, {0.0, 1.0, 0.02}, derive_seed(master_seed, 1)},
      {"seen_polygon", ShapeFamily::polygon, {0.15, 1.2, 0.03}, derive_seed(master_seed, 2)},
      {"seen_blob", ShapeFamily::blob_union, {-0.2, 0.8, 0.05}, derive_seed(master_seed, 3)},
  };
}

std::vector<DomainSpec> default_unseen_domains(std::uint64_t master_seed) {
  return {
      {"unseen_ellipse", ShapeFamily::ellipse, {0.35, 1.6, 0.08}, derive_seed(master_seed, 4)},
      {"unseen_polygon", ShapeFamily::polygon, {-0.45, 0.55, 0.06}, derive_seed(master_seed, 5)},
      {"unseen_blob", ShapeFamily::blob_union, {0.45, 1.9, 0.1}, derive_seed(master_seed, 6)},
  };
}

Image render_raw(const DomainSpec& spec, int index, int size, MaskArray& mask_out) {
  spec.validate();
  if (index < 0) throw ValidationError("render_raw: sample index must be nonnegative");
  if (size < 16) throw ConfigError("render_raw: image size must be >= 16");

  auto rng = make_rng(derive_seed(spec.seed, kRenderStream + static_cast<std::uint64_t>(index)));
  const double S = size;
  const std::int64_t total = static_cast<std::int64_t>(size) * size;

  for (int attempt = 0; attempt < 64; ++attempt) {
    // Foreground luminance is defined relative to this image's background, so
    // one image's shapes can be lighter than another image's background. A
    // per-pixel threshold cannot solve this; within-image contrast can, and
    // it survives every color transform (hue keeps luminance, contrast keeps
    // ordering).
    double bg_luma = uniform(rng, 0.5, 0.85);
    std::array<float, 3> bg =
        make_color(bg_luma, uniform(rng, 0.02, 0.12), uniform(rng, 0.0, 2.0 * std::numbers::pi));
    int k = uniform_int(rng, 1, 4);
    std::vector<ShapeDraw> shapes(k);
    for (ShapeDraw& sd : shapes) {
      sd.inside = draw_shape(spec.shape_family, rng, S);
      double fg_luma = std::max(0.12, bg_luma - uniform(rng, 0.22, 0.38));
      sd.color = make_color(fg_luma, uniform(rng, 0.05, 0.25),
                            uniform(rng, 0.0, 2.0 * std::numbers::pi));
    }

    Image img(size, size);
    MaskArray mask = MaskArray::Zero(size, size);
    std::int64_t fg = 0;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        double px = x + 0.5, py = y + 0.5;
        const std::array<float, 3>* color = &bg;
        // Later shapes paint over earlier ones.
        for (int si = k - 1; si >= 0; --si) {
          if (shapes[si].inside(px, py)) {
            color = &shapes[si].color;
            mask(y, x) = 1;
            ++fg;
            break;
          }
        }
        img.r(y, x) = (*color)[0];
        img.g(y, x) = (*color)[1];
        img.b(y, x) = (*color)[2];
      }
    }

    double fraction = static_cast<double>(fg) / static_cast<double>(total);
    if (fraction > 0.0 && fraction < 0.9) {
      mask_out = std::move(mask);
      return img;
    }
  }
  throw ValidationError("render_raw: no admissible shape draw after 64 attempts for domain " +
                        spec.domain_id);
}

Image apply_color_transform(const Image& img, const ColorTransform& ct, std::uint64_t noise_seed) {
  DomainSpec probe{"probe", ShapeFamily::ellipse, ct, 0};
  probe.validate();

  Image out = img;
  const int h = img.height(), w = img.width();

  if (ct.hue_shift != 0.0) {
    // Rodrigues rotation about the gray axis a = (1,1,1)/sqrt(3); preserves
    // the channel mean of every pixel.
    double theta = 2.0 * std::numbers::pi * ct.hue_shift;
    double cth = std::cos(theta), sth = std::sin(theta);
    double inv_sqrt3 = 1.0 / std::sqrt(3.0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double r = out.r(y, x), g = out.g(y, x), b = out.b(y, x);
        double dot = (r + g + b) * inv_sqrt3;
        double crx = (b - g) * inv_sqrt3, cry = (r - b) * inv_sqrt3, crz = (g - r) * inv_sqrt3;
        double rr = r * cth + crx * sth + inv_sqrt3 * dot * (1.0 - cth);
        double gg = g * cth + cry * sth + inv_sqrt3 * dot * (1.0 - cth);
        double bb = b * cth + crz * sth + inv_sqrt3 * dot * (1.0 - cth);
        out.r(y, x) = static_cast<float>(std::clamp(rr, 0.0, 1.0));
        out.g(y, x) = static_cast<float>(std::clamp(gg, 0.0, 1.0));
        out.b(y, x) = static_cast<float>(std::clamp(bb, 0.0, 1.0));
      }
    }
  }

  if (ct.contrast != 1.0) {
    auto stretch = [&](Eigen::ArrayXXf& ch) {
      ch = ((ch - 0.5f) * static_cast<float>(ct.contrast) + 0.5f).cwiseMax(0.0f).cwiseMin(1.0f);
    };
    stretch(out.r);
    stretch(out.g);
    stretch(out.b);
  }

  if (ct.noise_sigma > 0.0) {
    auto rng = make_rng(noise_seed);
    std::normal_distribution<double> noise(0.0, ct.noise_sigma);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        out.r(y, x) = static_cast<float>(std::clamp(out.r(y, x) + noise(rng), 0.0, 1.0));
        out.g(y, x) = static_cast<float>(std::clamp(out.g(y, x) + noise(rng), 0.0, 1.0));
        out.b(y, x) = static_cast<float>(std::clamp(out.b(y, x) + noise(rng), 0.0, 1.0));
      }
    }
  }

  return out;
}

std::vector<ImageSample> generate_domain(const DomainSpec& spec, int count, int size) {
  if (count < 1) throw ValidationError("generate_domain: count must be >= 1");
  std::vector<ImageSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    ImageSample s;
    Image raw = render_raw(spec, i, size, s.mask);
    s.image = apply_color_transform(raw, spec.color,
                                    derive_seed(spec.seed, kNoiseStream + static_cast<std::uint64_t>(i)));
    char id[128];
    std::snprintf(id, sizeof(id), "%s_%03d", spec.domain_id.c_str(), i);
    s.sample_id = id;
    s.domain_id = spec.domain_id;
    out.push_back(std::move(s));
  }
  return out;
}

std::pair<std::vector<ImageSample>, std::vector<ImageSample>> split_train_val(
    const std::vector<ImageSample>& samples, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    std::ostringstream msg;
    msg << "split ratio must lie in (0,1), got " << ratio;
    throw ValidationError(msg.str());
  }
  if (samples.empty()) throw ValidationError("split: sample list is empty");

  std::map<std::string, std::vector<int>> groups;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i)
    groups[samples[i].domain_id].push_back(i);

  const auto n = static_cast<std::int64_t>(samples.size());
  std::int64_t target = std::llround(ratio * static_cast<double>(n));

  // Largest-remainder allocation so per-domain quotas sum to round(ratio*N).
  struct Quota {
    std::string domain;
    std::int64_t base;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::int64_t assigned = 0;
  for (const auto& [dom, idxs] : groups) {
    double exact = ratio * static_cast<double>(idxs.size());
    auto base = static_cast<std::int64_t>(std::floor(exact));
    quotas.push_back({dom, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::vector<int> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (quotas[a].remainder != quotas[b].remainder) return quotas[a].remainder > quotas[b].remainder;
    return quotas[a].domain < quotas[b].domain;
  });
  std::int64_t extras = target - assigned;
  for (std::int64_t i = 0; i < extras && i < static_cast<std::int64_t>(order.size()); ++i)
    ++quotas[order[i]].base;

  std::vector<char> in_train(samples.size(), 0);
  for (const Quota& q : quotas) {
    std::vector<int> idxs = groups.at(q.domain);
    auto rng = make_rng(derive_seed(seed, domain_stream(q.domain)));
    std::shuffle(idxs.begin(), idxs.end(), rng);
    for (std::int64_t i = 0; i < q.base && i < static_cast<std::int64_t>(idxs.size()); ++i)
      in_train[idxs[i]] = 1;
  }

  std::pair<std::vector<ImageSample>, std::vector<ImageSample>> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    (in_train[i] ? out.first : out.second).push_back(samples[i]);
  if (out.first.empty() || out.second.empty()) {
    std::ostringstream msg;
    msg << "degenerate split: " << out.first.size() << " train / " << out.second.size()
        << " val from " << samples.size() << " samples at ratio " << ratio;
    throw ValidationError(msg.str());
  }
  return out;
}

std::vector<int> sliding_offsets(int full, int window) {
  if (window <= 0) throw ShapeError("sliding_offsets: window must be positive");
  if (window > full) {
    std::ostringstream msg;
    msg << "crop size " << window << " exceeds extent " << full;
    throw ShapeError(msg.str());
  }
  int stride = std::max(1, window / 2);
  std::vector<int> offsets;
  for (int o = 0; o + window < full; o += stride) offsets.push_back(o);
  offsets.push_back(full - window);
  return offsets;
}

ImageSample crop_at(const ImageSample& s, int y, int x, int size) {
  const int h = s.image.height(), w = s.image.width();
  if (s.mask.rows() != h || s.mask.cols() != w)
    throw ShapeError("crop_at: image and mask shapes disagree for " + s.sample_id);
  if (y < 0 || x < 0 || y + size > h || x + size > w) {
    std::ostringstream msg;
    msg << "crop window " << size << "x" << size << " at (" << y << "," << x
        << ") leaves image " << h << "x" << w;
    throw ShapeError(msg.str());
  }
  ImageSample out;
  out.image.r = s.image.r.block(y, x, size, size);
  out.image.g = s.image.g.block(y, x, size, size);
  out.image.b = s.image.b.block(y, x, size, size);
  out.mask = s.mask.block(y, x, size, size);
  out.domain_id = s.domain_id;
  out.sample_id = s.sample_id;
  return out;
}

std::vector<ImageSample> crop(const ImageSample& s, int size, CropPolicy policy, std::uint64_t seed,
                              std::vector<TileCoord>* coords_out) {
  const int h = s.image.height(), w = s.image.width();
  if (size > h || size > w) {
    std::ostringstream msg;
    msg << "crop size " << size << " exceeds image " << h << "x" << w;
    throw ShapeError(msg.str());
  }
  std::vector<ImageSample> out;
  if (policy == CropPolicy::random) {
    auto rng = make_rng(seed);
    int oy = h == size ? 0 : uniform_int(rng, 0, h - size);
    int ox = w == size ? 0 : uniform_int(rng, 0, w - size);
    out.push_back(crop_at(s, oy, ox, size));
    if (coords_out) coords_out->push_back({oy, ox});
    return out;
  }
  for (int oy : sliding_offsets(h, size)) {
    for (int ox : sliding_offsets(w, size)) {
      out.push_back(crop_at(s, oy, ox, size));
      if (coords_out) coords_out->push_back({oy, ox});
    }
  }
  return out;
}

Mat merge_tiles(const std::vector<Mat>& tile_probs, const std::vector<TileCoord>& coords,
                int height, int width) {
  if (tile_probs.size() != coords.size())
    throw ValidationError("merge_tiles: tile and coordinate counts differ");
  if (tile_probs.empty()) throw ValidationError("merge_tiles: no tiles");
  Mat sum = Mat::Zero(height, width);
  MatX<std::int32_t> cover = MatX<std::int32_t>::Zero(height, width);
  for (std::size_t t = 0; t < tile_probs.size(); ++t) {
    const Mat& tile = tile_probs[t];
    int y = coords[t].y, x = coords[t].x;
    if (y < 0 || x < 0 || y + tile.rows() > height || x + tile.cols() > width) {
      std::ostringstream msg;
      msg << "merge_tiles: tile " << t << " at (" << y << "," << x << ") of size " << tile.rows()
          << "x" << tile.cols() << " leaves canvas " << height << "x" << width;
      throw ShapeError(msg.str());
    }
    sum.block(y, x, tile.rows(), tile.cols()) += tile;
    cover.block(y, x, tile.rows(), tile.cols()).array() += 1;
  }
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (cover(y, x) == 0) {
        std::ostringstream msg;
        msg << "merge_tiles: pixel (" << y << "," << x << ") covered by no tile";
        throw ValidationError(msg.str());
      }
      sum(y, x) /= static_cast<double>(cover(y, x));
    }
  }
  return sum;
}

std::vector<ImageSample> load_dataset_dir(const std::string& path) {
  fs::path root(path);
  fs::path images = root / "images";
  fs::path masks = root / "masks";
  if (!fs::is_directory(images)) throw IoError("dataset is missing images/ under " + path);
  if (!fs::is_directory(masks)) throw IoError("dataset is missing masks/ under " + path);

  std::map<std::string, std::string> domains;
  fs::path csv = root / "domains.csv";
  if (fs::exists(csv)) {
    std::ifstream in(csv);
    if (!in) throw IoError("cannot read " + csv.string());
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      if (header) {
        header = false;
        continue;
      }
      if (line.empty()) continue;
      auto comma = line.find(',');
      if (comma == std::string::npos)
        throw ValidationError("malformed domains.csv line: " + line);
      domains[line.substr(0, comma)] = line.substr(comma + 1);
    }
  }

  std::map<std::string, fs::path> stems;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
    stems.emplace(entry.path().stem().string(), entry.path());
  }
  if (stems.empty()) throw ValidationError("no PNG images under " + images.string());

  std::vector<std::string> missing;
  for (const auto& [stem, p] : stems)
    if (!fs::exists(masks / (stem + ".png"))) missing.push_back(stem);
  if (!missing.empty()) {
    std::ostringstream msg;
    msg << "images without masks:";
    for (const std::string& s : missing) msg << " " << s;
    throw ValidationError(msg.str());
  }

  std::vector<ImageSample> out;
  out.reserve(stems.size());
  for (const auto& [stem, p] : stems) {
    ImageSample s;
    s.image = read_image_png(p.string());
    s.mask = read_mask_png((masks / (stem + ".png")).string());
    if (s.mask.rows() != s.image.height() || s.mask.cols() != s.image.width())
      throw ShapeError("image/mask shape mismatch for " + stem);
    s.sample_id = stem;
    auto it = domains.find(stem);
    s.domain_id = it == domains.end() ? "unknown" : it->second;
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset_dir(const std::string& path, const std::vector<ImageSample>& samples) {
  if (samples.empty()) throw ValidationError("refusing to save an empty dataset to " + path);
  fs::path root(path);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");

  std::map<std::string, bool> seen;
  std::ostringstream csv;
  csv << "sample_id,domain_id\n";
  for (const ImageSample& s : samples) {
    if (seen.count(s.sample_id))
      throw ValidationError("duplicate sample_id in dataset: " + s.sample_id);
    seen[s.sample_id] = true;
    write_image_png((root / "images" / (s.sample_id + ".png")).string(), s.image);
    write_mask_png((root / "masks" / (s.sample_id + ".png")).string(), s.mask);
    csv << s.sample_id << "," << s.domain_id << "\n";
  }
  std::ofstream out(root / "domains.csv");
  if (!out) throw IoError("cannot write domains.csv under " + path);
  out << csv.str();
}

}  // namespace reinseg
