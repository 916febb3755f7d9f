#pragma once

// Training, evaluation, ablation runs and checkpoints for the mask
// deformation network.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "sizefit/geometry.hpp"
#include "sizefit/image_io.hpp"
#include "sizefit/losses.hpp"
#include "sizefit/metrics.hpp"
#include "sizefit/nn.hpp"
#include "sizefit/rng.hpp"
#include "sizefit/synthdata.hpp"

namespace sizefit::pipeline {

using tensor::Tensor;

// ---- configuration ----

enum class OptimizerKind { sgd, adam };
enum class LrSchedule { constant, cosine };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.0;  // sgd only
  // cosine: lr * (1 + cos(pi * step / total_steps)) / 2, reaching 0 at the end
  LrSchedule schedule = LrSchedule::cosine;
};

/// Learning rate for optimizer step `step` (0-based) of `total_steps`.
double scheduled_lr(const OptimizerConfig& c, long step, long total_steps);

struct AugmentConfig {
  bool flip = true;
  bool rotation = false;
  double rotation_degrees = 10.0;
  // Probability of repainting the reference garment with random stripes,
  // so the network cannot key on the few textures seen in training.
  double retexture_probability = 0.5;
};

struct TrainConfig {
  std::string dataset_root = "data";
  std::string output_dir;  // empty: keep everything in memory
  std::string train_split = "train";
  std::string val_split = "val";
  int batch_size = 8;
  int epochs = 12;
  long max_steps = 0;        // > 0 stops after this many optimizer steps
  int max_train_pairs = 0;   // > 0 keeps only the first n training pairs
  OptimizerConfig optimizer;
  losses::LossConfig loss;
  AugmentConfig augment;
  nn::MdnConfig model;
  nn::DiscriminatorConfig discriminator;
  std::uint64_t seed = 1;
  int workers = 1;
  bool f32_compute = false;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys take their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);
/// UsageError on a non-positive hyperparameter or incompatible flags.
void validate(const TrainConfig& c);

/// FNV-1a 64 of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

// ---- data ----

/// One pair held in compact form (8-bit rasters).
struct Sample {
  std::string pair_id;
  std::string split;
  int garment_id = 0;
  io::Image8 ref_image;
  io::Image8 ref_mask;
  io::Image8 try_mask;
  PartLabelMap ref_parts;
  PartLabelMap try_parts;
  geometry::KeypointSet ref_kps;
  geometry::KeypointSet try_kps;
  synth::SizeVector s_ref;
  synth::SizeVector s_try;
};

Sample to_sample(const synth::PairedSample& p, const std::string& split = "train");
Sample to_sample(const synth::StoredPair& p);

/// Every pair of a split listed in root/manifest.json, in manifest order.
std::vector<Sample> load_split(const std::filesystem::path& root, const std::string& split);

/// Rigid transform shared by every raster and keypoint of a pair.
struct Stripes {
  double period = 6.0;  // px
  double angle = 0.0;   // radians
  double offset = 0.0;  // px along the stripe normal
  double base = 0.5;    // gray levels of the two stripe colors
  double stripe = 0.8;
};

struct Augmentation {
  bool flip = false;
  double angle = 0.0;  // radians, about the canvas center
  std::optional<Stripes> texture;  // repaints the garment in the texture channel
};

Stripes random_stripes(Rng& rng);

geometry::Homography augmentation_homography(const Augmentation& a, int canvas);

/// Dense training example.
struct Example {
  Tensor person;  // 3 x H x W
  Tensor m_ref;   // 1 x H x W
  Tensor m_g;     // 1 x H x W
  Tensor rm_g;    // 1 x H x W
  PartLabelMap parts_ref;
  PartLabelMap parts_g;
  geometry::KeypointSet kps_ref;
  geometry::KeypointSet kps_g;
};

/// Applies the augmentation to every raster (nearest sampling) and to the
/// keypoints, repaints the reference garment if requested, then checks
/// that the result is still self-consistent.
Example materialize(const Sample& s, const Augmentation& a = {});

/// DataError when garment pixels fall outside the person silhouette or on
/// background/head labels, or a valid head keypoint misses the head label.
void check_consistency(const Example& e);

// ---- checkpoints ----

inline constexpr char kCheckpointMagic[6] = {'S', 'V', 'M', 'D', 'N', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json config;
  std::uint64_t step = 0;
  Rng::State rng_state{};
  std::vector<std::pair<std::string, Tensor>> tensors;

  std::string hash() const { return config_hash(config); }
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c);
/// DataError on bad magic, unsupported version, truncation or checksum
/// mismatch. Nothing is returned unless the whole file is valid.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Appends store's tensors as prefix + name.
void export_parameters(const nn::ParameterStore& store, const std::string& prefix, Checkpoint& c);
/// Copies prefix + name tensors into store. DataError naming the first
/// tensor that is missing or has a different shape.
void import_parameters(const Checkpoint& c, const std::string& prefix, nn::ParameterStore& store);

/// A frozen model restored from a checkpoint.
struct LoadedModel {
  Checkpoint checkpoint;
  TrainConfig config;
  nn::SizeNormalizer normalizer;
  nn::Mdn model;
};

LoadedModel load_model(const std::filesystem::path& path);
LoadedModel restore_model(const Checkpoint& c);

// ---- training ----

struct EpochLog {
  int epoch = 0;
  long step = 0;
  double train_loss = 0.0;
  double train_mask = 0.0;
  double train_residual = 0.0;
  double train_adversarial = 0.0;
  double disc_loss = 0.0;
  std::optional<double> val_sem;
  std::optional<double> val_iou;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochLog& e);

struct TrainResult {
  std::vector<EpochLog> log;
  std::vector<double> step_losses;  // mean total loss of each optimizer step
  Checkpoint best;                  // lowest validation SEM (last step without validation)
  std::optional<double> best_val_sem;
};

using ProgressFn = std::function<void(const EpochLog&)>;

/// Loads train/val splits from config.dataset_root.
TrainResult train(const TrainConfig& config, const ProgressFn& progress = {});
TrainResult train(const TrainConfig& config, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const ProgressFn& progress = {});

// ---- evaluation ----

struct PairResult {
  std::string pair_id;
  metrics::SemReport model;
  metrics::SemReport identity;
  double iou_model = 0.0;
  double iou_identity = 0.0;
};

struct EvalReport {
  std::string split;
  std::vector<PairResult> pairs;
  metrics::SemAggregate model;
  metrics::SemAggregate identity;
  metrics::Summary iou_model;
  metrics::Summary iou_identity;

  /// mean SEM(model) / mean SEM(identity); infinity when the baseline is 0.
  double sem_ratio() const;
};

nlohmann::json to_json(const EvalReport& r, bool include_pairs = false);

/// DataError on an empty split.
EvalReport evaluate(const nn::Mdn& model, const nn::SizeNormalizer& norm, const std::vector<Sample>& samples,
                    const std::string& split, metrics::SemMode mode = metrics::SemMode::soft, int workers = 1);
EvalReport evaluate(const LoadedModel& m, const std::filesystem::path& root, const std::string& split,
                    metrics::SemMode mode = metrics::SemMode::soft, int workers = 1);

// ---- ablations ----

struct Variant {
  std::string name;
  std::function<void(TrainConfig&)> apply;
};

/// full, no_mr, no_rmdn, no_person_input, no_adversarial.
std::vector<Variant> standard_variants();
Variant find_variant(const std::string& name);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<EvalReport> reports;  // one per evaluated split
};

/// Trains every variant for every seed with the base config otherwise
/// unchanged and evaluates each on the given splits.
std::vector<AblationRow> run_ablation_matrix(const TrainConfig& base, const std::vector<Variant>& variants,
                                             const std::vector<std::uint64_t>& seeds,
                                             const std::vector<std::string>& splits,
                                             const std::function<void(const std::string&)>& log = {});

nlohmann::json to_json(const std::vector<AblationRow>& rows);

}  // namespace sizefit::pipeline
