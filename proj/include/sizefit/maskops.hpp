#pragma once

// Garment masks, signed residual masks, part-label maps and the mask
// algebra used to build training targets and compose try-on images.

#include <cstdint>
#include <span>
#include <vector>

#include "sizefit/tensor.hpp"

namespace sizefit {

/// Single-channel H x W image with values in [0, 1].
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width, double fill = 0.0);
  /// Throws DataError if any value lies outside [0, 1].
  Mask(int height, int width, std::vector<double> values);

  /// Accepts 1 x H x W or H x W tensors.
  static Mask from_tensor(const tensor::Tensor& t);
  tensor::Tensor to_tensor() const;

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }

  double operator()(int y, int x) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  /// Unchecked write; callers keep values inside [0, 1].
  double& at(int y, int x) { return values_[static_cast<std::size_t>(y) * width_ + x]; }

  std::span<const double> values() const noexcept { return values_; }
  double sum() const;

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

/// Signed H x W image with values in [-1, 1]; positive where the garment
/// grows, negative where it shrinks.
class ResidualMask {
 public:
  ResidualMask() = default;
  ResidualMask(int height, int width, double fill = 0.0);
  ResidualMask(int height, int width, std::vector<double> values);

  static ResidualMask from_tensor(const tensor::Tensor& t);
  tensor::Tensor to_tensor() const;

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }

  double operator()(int y, int x) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  double& at(int y, int x) { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  std::span<const double> values() const noexcept { return values_; }

  friend bool operator==(const ResidualMask&, const ResidualMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

enum class PartLabel : std::uint8_t {
  background = 0,
  head = 1,
  torso = 2,
  upper_arm = 3,
  lower_arm = 4,
  upper_leg = 5,
};

inline constexpr int kPartLabelCount = 6;

/// Per-pixel body-part labels; exactly one label per pixel.
class PartLabelMap {
 public:
  PartLabelMap() = default;
  PartLabelMap(int height, int width, PartLabel fill = PartLabel::background);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  PartLabel operator()(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  PartLabel& at(int y, int x) { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  std::span<const PartLabel> labels() const noexcept { return labels_; }

  friend bool operator==(const PartLabelMap&, const PartLabelMap&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<PartLabel> labels_;
};

/// Ground-truth residual: m_g - m_r, pixelwise.
ResidualMask residual_from(const Mask& m_g, const Mask& m_r);

/// clamp(m_r + rm, 0, 1), pixelwise.
Mask apply_residual(const Mask& m_r, const ResidualMask& rm);

inline constexpr double kDefaultThreshold = 0.5;

/// 1 where value > threshold, else 0. threshold must lie in (0, 1).
Mask binarize(const Mask& m, double threshold = kDefaultThreshold);

/// Number of pixels strictly above threshold.
std::size_t area(const Mask& m, double threshold = kDefaultThreshold);

/// Alpha composite m_d * cloth + (1 - m_d) * person over 3 x H x W images.
tensor::Tensor composite_tryon(const tensor::Tensor& person, const tensor::Tensor& warped_cloth, const Mask& m_d);

}  // namespace sizefit
