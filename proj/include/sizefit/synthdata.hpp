#pragma once

// Procedural paired try-on data: one body wearing one garment in two
// physical sizes, rendered with garment masks, body-part labels and
// keypoints.
//
// Geometry is in pixels on a 128 x 128 canvas at kMmPerPixel. A body is a
// head disk, neck, shoulders and two three-segment arms (upper arm, lower
// arm, hand) hanging in an A-pose, plus hips and legs. The garment is
//
//   (torso panel U collar) \ (neck skin U exposed arm skin)  U  sleeves
//
// where the torso panel is a trapezoid from the shoulder line (garment
// shoulder width) to the armpit line (garment body width) continued as a
// rectangle down to the hem, and each sleeve is a flat-ended stroke along
// the arm path truncated at the sleeve length. Part labels depend on the
// body alone, so both halves of a pair share them when the pose is
// unchanged.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "sizefit/geometry.hpp"
#include "sizefit/maskops.hpp"
#include "sizefit/rng.hpp"
#include "sizefit/tensor.hpp"

namespace sizefit::synth {

inline constexpr double kMmPerPixel = 12.0;
inline constexpr int kCanvas = 128;
inline constexpr int kMargin = 4;

struct SizeVector {
  double body_length_back = 0.0;
  double sleeve_length = 0.0;
  double shoulder_width = 0.0;
  double body_width = 0.0;
  double neck_size = 0.0;

  std::array<double, 5> values() const {
    return {body_length_back, sleeve_length, shoulder_width, body_width, neck_size};
  }
  static SizeVector from_values(const std::array<double, 5>& v) { return {v[0], v[1], v[2], v[3], v[4]}; }

  friend bool operator==(const SizeVector&, const SizeVector&) = default;
};

inline constexpr std::array<const char*, 5> kSizeFieldNames = {"body_length_back", "sleeve_length", "shoulder_width",
                                                                "body_width", "neck_size"};

/// Field-level validation messages; empty when the vector is valid.
std::vector<std::string> validate(const SizeVector& s);
/// Throws DataError carrying the first validation message.
void require_valid(const SizeVector& s);

nlohmann::json to_json(const SizeVector& s);
SizeVector size_from_json(const nlohmann::json& j);

/// Size M of the canonical table.
SizeVector canonical_m();

enum class SizeLabel { S, M, L, XL };
inline constexpr std::array<SizeLabel, 4> kSizeLabels = {SizeLabel::S, SizeLabel::M, SizeLabel::L, SizeLabel::XL};
std::string size_name(SizeLabel s);
SizeLabel size_from_name(const std::string& name);
int grading_step(SizeLabel s);  // S = -1, M = 0, L = 1, XL = 2

/// body_width and sleeve_length scaled by (1 + grading * step); the other
/// measurements are shared by every size of a garment.
SizeVector graded(const SizeVector& base, int step, double grading = 0.08);

/// Per-garment proportions and stripe texture, derived from the garment id.
struct GarmentStyle {
  int id = 0;
  double length_scale = 1.0;
  double sleeve_scale = 1.0;
  double shoulder_scale = 1.0;
  double width_scale = 1.0;
  double neck_scale = 1.0;
  std::array<double, 3> base_rgb{};
  std::array<double, 3> stripe_rgb{};
  double stripe_period = 6.0;  // px
  double stripe_angle = 0.0;   // radians
};

GarmentStyle garment_style(int garment_id);

/// The M-size measurements of a garment.
SizeVector garment_base_size(int garment_id);
SizeVector garment_size(int garment_id, SizeLabel label);

/// Full-canvas RGB stripe texture of a garment (3 x H x W).
tensor::Tensor garment_texture(int garment_id, int height = kCanvas, int width = kCanvas);

struct ArmPose {
  double shoulder_angle = 0.6;  // upper arm, radians from vertical (outward)
  double elbow_angle = 0.4;     // lower arm, radians from vertical
  double wrist_angle = 0.4;     // hand, radians from vertical
};

struct BodyConfig {
  double center_x = 64.0;
  double head_radius = 7.5;
  double neck_y = 25.0;         // neck keypoint; the collar line
  double shoulder_drop = 2.0;   // shoulder line below the neck
  double shoulder_half = 18.0;  // body shoulder joint offset from center
  double neck_half = 4.5;
  double torso_length = 45.0;   // neck to hip line
  double hip_half = 15.0;
  double upper_arm = 25.0;
  double lower_arm = 22.0;
  double hand = 13.5;
  double arm_radius = 4.0;
  double sleeve_radius = 5.5;   // arm label and sleeve stroke radius
  ArmPose left{};               // image-left arm
  ArmPose right{};
  double mm_per_pixel = kMmPerPixel;
};

/// Random body proportions for body_id and arm angles for pose_id. The
/// proportions depend on (seed, body_id) only.
BodyConfig sample_body(std::uint64_t seed, int body_id, int pose_id);

/// Perturbs elbow and wrist angles by uniform(-jitter, jitter); the head,
/// neck and shoulders stay fixed.
BodyConfig jitter_pose(const BodyConfig& body, double jitter, Rng& rng);

/// Every joint position along one arm in pixel coordinates, shoulder
/// first, then elbow, wrist and hand tip.
std::array<geometry::Point2, 4> arm_path(const BodyConfig& body, bool left);

struct Rendering {
  tensor::Tensor image;  // 3 x H x W: silhouette, part shading, texture gray
  Mask mask;             // garment
  Mask sleeves;          // the sleeve strokes alone (generator ground truth)
  PartLabelMap parts;
  geometry::KeypointSet keypoints;
};

/// DataError when the size is invalid or the figure leaves the canvas
/// margin.
Rendering render_person(const BodyConfig& body, const SizeVector& size, int garment_id);

struct PairedSample {
  std::string pair_id;
  int body_id = 0;
  int pose_id = 0;
  int garment_id = 0;
  SizeLabel ref_label = SizeLabel::M;
  SizeLabel try_label = SizeLabel::M;
  SizeVector s_ref;
  SizeVector s_try;
  Rendering ref;
  Rendering tryon;
  bool jittered = false;
};

PairedSample make_pair(const BodyConfig& body, int garment_id, const SizeVector& s_ref, const SizeVector& s_try,
                       double jitter, Rng& rng);

struct DatasetConfig {
  int n_bodies = 8;
  int n_poses = 2;
  int n_garments = 6;
  int sizes_per_garment = 4;   // first n of S, M, L, XL
  int held_out_bodies = 1;     // test_new_person
  int held_out_garments = 1;   // test_new_clothes
  double val_fraction = 0.1;
  double jitter = 0.0;
  std::uint64_t seed = 7;
};

nlohmann::json to_json(const DatasetConfig& c);
DatasetConfig dataset_config_from_json(const nlohmann::json& j);

inline constexpr std::array<const char*, 4> kSplits = {"train", "val", "test_new_person", "test_new_clothes"};

struct ManifestEntry {
  std::string pair_id;
  std::string split;
  int body_id = 0;
  int pose_id = 0;
  int garment_id = 0;
  SizeLabel ref_label = SizeLabel::M;
  SizeLabel try_label = SizeLabel::M;
};

/// Split assignment for every pair implied by the configuration, in a
/// deterministic order. DataError when a requested held-out partition
/// would leave nothing to train on.
std::vector<ManifestEntry> plan_dataset(const DatasetConfig& c);

/// Renders one planned entry.
PairedSample render_entry(const DatasetConfig& c, const ManifestEntry& e);

/// Writes every pair plus manifest.json under root and returns the
/// manifest. Existing files are overwritten.
nlohmann::json build_dataset(const DatasetConfig& c, const std::filesystem::path& root);

void write_pair(const PairedSample& p, const std::filesystem::path& dir);

/// A pair loaded back from disk.
struct StoredPair {
  std::string pair_id;
  std::string split;
  int garment_id = 0;
  tensor::Tensor ref_image;
  Mask ref_mask;
  PartLabelMap ref_parts;
  geometry::KeypointSet ref_kps;
  tensor::Tensor try_image;
  Mask try_mask;
  PartLabelMap try_parts;
  geometry::KeypointSet try_kps;
  SizeVector s_ref;
  SizeVector s_try;
};

StoredPair read_pair(const std::filesystem::path& dir);

nlohmann::json read_manifest(const std::filesystem::path& root);

}  // namespace sizefit::synth
