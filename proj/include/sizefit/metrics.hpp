#pragma once

// Size Evaluation Metric and mask overlap scores.

#include <utility>
#include <vector>

#include "json.hpp"

#include "sizefit/maskops.hpp"

namespace sizefit::metrics {

struct TorsoSleeves {
  Mask torso;
  Mask sleeves;
};

/// torso = mask where the part label is torso or upper_leg;
/// sleeves = max(mask - torso, 0).
TorsoSleeves split_torso_sleeves(const Mask& mask, const PartLabelMap& parts);

enum class SemMode {
  soft,    // sum mask values directly
  binary,  // binarize at kDefaultThreshold first
};

struct SemReport {
  double t_minus = 0.0;
  double s_minus = 0.0;
  double sem = 0.0;
  double torso_area_pred = 0.0;
  double sleeve_area_pred = 0.0;
  double torso_area_gt = 0.0;
  double sleeve_area_gt = 0.0;
};

/// Harmonic mean of t and s; 0 when t + s == 0.
double harmonic_mean(double t, double s);

/// t_minus = |sum torso(m_g, parts_g) - sum torso(m_d, parts_r)| / (H W),
/// s_minus likewise for sleeves, sem = harmonic_mean(t_minus, s_minus).
SemReport sem(const Mask& m_d, const PartLabelMap& parts_r, const Mask& m_g, const PartLabelMap& parts_g,
              SemMode mode = SemMode::soft);

/// |A & B| / |A | B| after binarizing both; 1 when both are empty.
double iou(const Mask& a, const Mask& b, double threshold = kDefaultThreshold);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t count = 0;
};

Summary summarize(const std::vector<double>& values);

struct SemAggregate {
  Summary t_minus;
  Summary s_minus;
  Summary sem;
};

SemAggregate aggregate(const std::vector<SemReport>& reports);

nlohmann::json to_json(const SemReport& r);
nlohmann::json to_json(const Summary& s);
nlohmann::json to_json(const SemAggregate& a);

}  // namespace sizefit::metrics
