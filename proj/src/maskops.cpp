#include "sizefit/maskops.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "sizefit/errors.hpp"

namespace sizefit {

namespace {

std::size_t checked_area(int height, int width) {
  if (height <= 0 || width <= 0)
    throw ShapeError("mask extents must be positive, got " + std::to_string(height) + "x" + std::to_string(width));
  return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
}

void check_range(std::span<const double> values, double lo, double hi, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= lo && values[i] <= hi))
      throw DataError(std::string(what) + " value " + std::to_string(values[i]) + " at index " + std::to_string(i) +
                      " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

template <typename A, typename B>
void require_same_extent(const A& a, const B& b, const char* op) {
  if (a.height() != b.height() || a.width() != b.width())
    throw ShapeError(std::string(op) + ": extents differ (" + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()) +
                     ")");
}

std::pair<int, int> plane_extent(const tensor::Tensor& t, const char* what) {
  if (t.rank() == 3 && t.dim(0) == 1) return {static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2))};
  if (t.rank() == 2) return {static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1))};
  throw ShapeError(std::string(what) + " tensor must be 1 x H x W or H x W, got " + tensor::to_string(t.shape()));
}

}  // namespace

Mask::Mask(int height, int width, double fill)
    : height_(height), width_(width), values_(checked_area(height, width), fill) {
  check_range(std::span<const double>(&fill, 1), 0.0, 1.0, "mask");
}

Mask::Mask(int height, int width, std::vector<double> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != checked_area(height, width)) throw ShapeError("mask value count does not match extents");
  check_range(values_, 0.0, 1.0, "mask");
}

Mask Mask::from_tensor(const tensor::Tensor& t) {
  const auto [h, w] = plane_extent(t, "mask");
  return Mask(h, w, std::vector<double>(t.values().begin(), t.values().end()));
}

tensor::Tensor Mask::to_tensor() const {
  return tensor::Tensor({1, static_cast<std::size_t>(height_), static_cast<std::size_t>(width_)}, values_);
}

double Mask::sum() const { return std::accumulate(values_.begin(), values_.end(), 0.0); }

ResidualMask::ResidualMask(int height, int width, double fill)
    : height_(height), width_(width), values_(checked_area(height, width), fill) {
  check_range(std::span<const double>(&fill, 1), -1.0, 1.0, "residual");
}

ResidualMask::ResidualMask(int height, int width, std::vector<double> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != checked_area(height, width)) throw ShapeError("residual value count does not match extents");
  check_range(values_, -1.0, 1.0, "residual");
}

ResidualMask ResidualMask::from_tensor(const tensor::Tensor& t) {
  const auto [h, w] = plane_extent(t, "residual");
  return ResidualMask(h, w, std::vector<double>(t.values().begin(), t.values().end()));
}

tensor::Tensor ResidualMask::to_tensor() const {
  return tensor::Tensor({1, static_cast<std::size_t>(height_), static_cast<std::size_t>(width_)}, values_);
}

PartLabelMap::PartLabelMap(int height, int width, PartLabel fill)
    : height_(height), width_(width), labels_(checked_area(height, width), fill) {}

ResidualMask residual_from(const Mask& m_g, const Mask& m_r) {
  require_same_extent(m_g, m_r, "residual_from");
  std::vector<double> r(m_g.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = m_g.values()[i] - m_r.values()[i];
  return ResidualMask(m_g.height(), m_g.width(), std::move(r));
}

Mask apply_residual(const Mask& m_r, const ResidualMask& rm) {
  require_same_extent(m_r, rm, "apply_residual");
  std::vector<double> v(m_r.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(m_r.values()[i] + rm.values()[i], 0.0, 1.0);
  return Mask(m_r.height(), m_r.width(), std::move(v));
}

Mask binarize(const Mask& m, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw UsageError("binarize threshold must lie in (0, 1), got " + std::to_string(threshold));
  std::vector<double> v(m.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.values()[i] > threshold ? 1.0 : 0.0;
  return Mask(m.height(), m.width(), std::move(v));
}

std::size_t area(const Mask& m, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw UsageError("area threshold must lie in (0, 1), got " + std::to_string(threshold));
  return static_cast<std::size_t>(
      std::count_if(m.values().begin(), m.values().end(), [threshold](double v) { return v > threshold; }));
}

tensor::Tensor composite_tryon(const tensor::Tensor& person, const tensor::Tensor& warped_cloth, const Mask& m_d) {
  if (person.shape() != warped_cloth.shape() || person.rank() != 3 || person.dim(0) != 3 ||
      person.dim(1) != static_cast<std::size_t>(m_d.height()) || person.dim(2) != static_cast<std::size_t>(m_d.width()))
    throw ShapeError("composite_tryon: person " + tensor::to_string(person.shape()) + ", cloth " +
                     tensor::to_string(warped_cloth.shape()) + ", mask " + std::to_string(m_d.height()) + "x" +
                     std::to_string(m_d.width()));
  tensor::Tensor out(person.shape());
  const std::size_t plane = m_d.size();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double a = m_d.values()[i];
      out[c * plane + i] = a * warped_cloth[c * plane + i] + (1.0 - a) * person[c * plane + i];
    }
  }
  return out;
}

}  // namespace sizefit
