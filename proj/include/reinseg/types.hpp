#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace reinseg {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>;

/// Working scalar for model math. Double keeps finite-difference gradient
/// checks and bitwise-reproducibility contracts simple on CPU.
using Scalar = double;
using Mat = MatX<Scalar>;
using Vec = VecX<Scalar>;

/// Binary masks: 0 = background, 1 = foreground.
using MaskArray = ArrX<std::uint8_t>;

/// Planar RGB image, all channels in [0,1].
struct Image {
  Eigen::ArrayXXf r, g, b;

  Image() = default;
  Image(int height, int width)
      : r(Eigen::ArrayXXf::Zero(height, width)),
        g(Eigen::ArrayXXf::Zero(height, width)),
        b(Eigen::ArrayXXf::Zero(height, width)) {}

  int height() const { return static_cast<int>(r.rows()); }
  int width() const { return static_cast<int>(r.cols()); }
};

/// One ingestion/evaluation unit: image + paired binary mask + provenance.
struct ImageSample {
  Image image;
  MaskArray mask;
  std::string domain_id;
  std::string sample_id;
};

/// A batch of per-layer token features. Each entry is n x c with the spatial
/// grid flattened row-major (row index = y * grid_w + x).
struct FeatureMap {
  std::vector<Mat> data;
  int grid_h = 0;
  int grid_w = 0;

  int batch() const { return static_cast<int>(data.size()); }
  int tokens() const { return data.empty() ? 0 : static_cast<int>(data[0].rows()); }
  int width() const { return data.empty() ? 0 : static_cast<int>(data[0].cols()); }
};

// Error taxonomy. The CLI maps ConfigError/ValidationError/IoError to exit
// code 1 and TrainAbort to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};
struct TrainAbort : std::runtime_error {
  explicit TrainAbort(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace reinseg
