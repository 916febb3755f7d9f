#include "sizefit/metrics.hpp"

#include <cmath>
#include <string>

#include "sizefit/errors.hpp"

namespace sizefit::metrics {

namespace {

bool is_torso(PartLabel p) { return p == PartLabel::torso || p == PartLabel::upper_leg; }

void require_extent(const Mask& m, const PartLabelMap& p, const char* what) {
  if (m.height() != p.height() || m.width() != p.width())
    throw ShapeError(std::string(what) + ": mask " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                     " vs parts " + std::to_string(p.height()) + "x" + std::to_string(p.width()));
}

struct Areas {
  double torso = 0.0;
  double sleeves = 0.0;
};

Areas torso_sleeve_areas(const Mask& m, const PartLabelMap& parts, SemMode mode) {
  Areas a;
  const auto v = m.values();
  const auto l = parts.labels();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = mode == SemMode::binary ? (v[i] > kDefaultThreshold ? 1.0 : 0.0) : v[i];
    if (is_torso(l[i]))
      a.torso += x;
    else
      a.sleeves += x;
  }
  return a;
}

}  // namespace

TorsoSleeves split_torso_sleeves(const Mask& mask, const PartLabelMap& parts) {
  require_extent(mask, parts, "split_torso_sleeves");
  std::vector<double> torso(mask.size()), sleeves(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double t = is_torso(parts.labels()[i]) ? mask.values()[i] : 0.0;
    torso[i] = t;
    sleeves[i] = std::max(mask.values()[i] - t, 0.0);
  }
  return {Mask(mask.height(), mask.width(), std::move(torso)), Mask(mask.height(), mask.width(), std::move(sleeves))};
}

double harmonic_mean(double t, double s) { return t + s > 0.0 ? 2.0 * t * s / (t + s) : 0.0; }

SemReport sem(const Mask& m_d, const PartLabelMap& parts_r, const Mask& m_g, const PartLabelMap& parts_g,
              SemMode mode) {
  require_extent(m_d, parts_r, "sem (prediction)");
  require_extent(m_g, parts_g, "sem (ground truth)");
  if (m_d.height() != m_g.height() || m_d.width() != m_g.width())
    throw ShapeError("sem: prediction and ground truth extents differ");
  const Areas d = torso_sleeve_areas(m_d, parts_r, mode);
  const Areas g = torso_sleeve_areas(m_g, parts_g, mode);
  const double hw = static_cast<double>(m_d.size());
  SemReport r;
  r.torso_area_pred = d.torso;
  r.sleeve_area_pred = d.sleeves;
  r.torso_area_gt = g.torso;
  r.sleeve_area_gt = g.sleeves;
  r.t_minus = std::abs(g.torso - d.torso) / hw;
  r.s_minus = std::abs(g.sleeves - d.sleeves) / hw;
  r.sem = harmonic_mean(r.t_minus, r.s_minus);
  return r;
}

double iou(const Mask& a, const Mask& b, double threshold) {
  if (a.height() != b.height() || a.width() != b.width()) throw ShapeError("iou: mask extents differ");
  if (!(threshold > 0.0 && threshold < 1.0)) throw UsageError("iou threshold must lie in (0, 1)");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.values()[i] > threshold, y = b.values()[i] > threshold;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

SemAggregate aggregate(const std::vector<SemReport>& reports) {
  std::vector<double> t, s, m;
  for (const auto& r : reports) {
    t.push_back(r.t_minus);
    s.push_back(r.s_minus);
    m.push_back(r.sem);
  }
  return {summarize(t), summarize(s), summarize(m)};
}

nlohmann::json to_json(const SemReport& r) {
  return {{"t_minus", r.t_minus},
          {"s_minus", r.s_minus},
          {"sem", r.sem},
          {"torso_area_pred", r.torso_area_pred},
          {"sleeve_area_pred", r.sleeve_area_pred},
          {"torso_area_gt", r.torso_area_gt},
          {"sleeve_area_gt", r.sleeve_area_gt}};
}

nlohmann::json to_json(const Summary& s) { return {{"mean", s.mean}, {"stddev", s.stddev}, {"count", s.count}}; }

nlohmann::json to_json(const SemAggregate& a) {
  return {{"t_minus", to_json(a.t_minus)}, {"s_minus", to_json(a.s_minus)}, {"sem", to_json(a.sem)}};
}

}  // namespace sizefit::metrics
