#pragma once

#include "fmdt/core.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace fmdt {

struct ImageShape {
  std::uint32_t channels = 0, height = 0, width = 0;
  std::uint64_t size() const {
    return static_cast<std::uint64_t>(channels) * height * width;
  }
  bool operator==(const ImageShape&) const = default;
};

// Finite point set standing in for the clean-data distribution. Points are the
// columns of a d x n matrix; an optional image shape with c*h*w == d tags
// image-valued data.
class Dataset {
 public:
  Dataset(Mat points, std::string name, std::optional<ImageShape> shape = std::nullopt);

  Eigen::Index dim() const { return points_.rows(); }
  Eigen::Index size() const { return points_.cols(); }
  const Mat& points() const { return points_; }
  Vec point(Eigen::Index i) const { return points_.col(i); }
  const std::string& name() const { return name_; }
  const std::optional<ImageShape>& shape() const { return shape_; }

  Vec mean() const { return points_.rowwise().mean(); }
  // max entry minus min entry, the default PSNR data range
  double value_range() const;

  void save(const std::filesystem::path& file) const;
  static Dataset load(const std::filesystem::path& file);
  static Dataset from_csv(const std::filesystem::path& file, std::string name);

 private:
  Mat points_;
  std::string name_;
  std::optional<ImageShape> shape_;
};

}  // namespace fmdt
