#pragma once

// Mask deformation network: size feature extractor (SFE), residual mask
// deformation encoder-decoder (RMDN), channel-wise fusion, mask refiner
// (MR), and the mask discriminator used by the adversarial loss.
//
//   sizes(10) -> SFE -> g (C)
//   [person, m_ref] (4 x H x W) -> encoder -> F (C x H/16 x W/16)
//   F * g -> decoder -> tanh -> rm_d
//   clamp(rm_d + m_ref, 0, 1) -> MR -> m_d

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "sizefit/maskops.hpp"
#include "sizefit/rng.hpp"
#include "sizefit/synthdata.hpp"
#include "sizefit/tensor.hpp"

namespace sizefit::nn {

using tensor::Shape;
using tensor::Tape;
using tensor::Tensor;
using tensor::Var;

/// Named parameter tensors in registration order.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor& tensor(std::size_t i) { return tensors_.at(i); }
  const Tensor& tensor(std::size_t i) const { return tensors_.at(i); }
  /// Index of a parameter by name; DataError if absent.
  std::size_t index(const std::string& name) const;
  std::size_t total_elements() const;

  /// Binds parameter i on a tape (gradients are keyed by this store).
  Var bind(Tape& tape, std::size_t i) const { return tape.parameter(tensors_[i], this, i); }

  friend bool operator==(const ParameterStore&, const ParameterStore&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

/// Gradient buffers shaped like a ParameterStore.
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(const ParameterStore& store);

  void zero();
  /// Adds every gradient the tape holds for parameters of store.
  void accumulate(const Tape& tape, const ParameterStore& store);
  GradientSet& operator+=(const GradientSet& other);
  void scale(double s);
  double squared_norm() const;
  bool all_finite() const;

  std::size_t size() const { return grads_.size(); }
  Tensor& operator[](std::size_t i) { return grads_.at(i); }
  const Tensor& operator[](std::size_t i) const { return grads_.at(i); }

 private:
  std::vector<Tensor> grads_;
};

/// Kaiming-normal weights with standard deviation sqrt(2 / fan_in).
Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0);

/// Affine map of each measurement to (value - mean) / stddev.
struct SizeNormalizer {
  std::array<double, 5> mean{};
  std::array<double, 5> stddev{1, 1, 1, 1, 1};

  /// Statistics of the graded size table over the given garments.
  static SizeNormalizer from_sizes(const std::vector<synth::SizeVector>& sizes);
  /// Statistics of S..XL over garments 0..n_garments-1.
  static SizeNormalizer from_size_table(int n_garments);

  /// 10-vector [norm(s_ref), norm(s_try)]. DataError on non-finite input.
  Tensor encode(const synth::SizeVector& s_ref, const synth::SizeVector& s_try) const;

  friend bool operator==(const SizeNormalizer&, const SizeNormalizer&) = default;
};

nlohmann::json to_json(const SizeNormalizer& n);
SizeNormalizer size_normalizer_from_json(const nlohmann::json& j);

struct MdnConfig {
  int canvas = 128;
  std::vector<int> sfe_hidden = {64, 128};
  std::vector<int> encoder_channels = {32, 64, 128, 128};
  std::vector<int> decoder_channels = {64, 32, 16, 8};
  int refiner_channels = 16;
  bool sfe_output_relu = true;
  // Negative slope of the encoder, decoder and refiner activations; 0 is a
  // plain ReLU. A narrow decoder with plain ReLUs can die entirely early in
  // adversarial training and then never recover.
  double conv_leak = 0.2;
  // Ablations.
  bool no_rmdn = false;          // decoder predicts the whole mask directly
  bool no_mr = false;            // m_d = clamp(rm_d + m_ref, 0, 1)
  bool no_person_input = false;  // encoder sees m_ref only

  int bottleneck_channels() const { return encoder_channels.back(); }
  int input_channels() const { return no_person_input ? 1 : 4; }

  friend bool operator==(const MdnConfig&, const MdnConfig&) = default;
};

nlohmann::json to_json(const MdnConfig& c);
MdnConfig mdn_config_from_json(const nlohmann::json& j);
/// UsageError when the configuration cannot be instantiated.
void validate(const MdnConfig& c);

struct MdnOutput {
  Var rm_d;   // 1 x H x W in [-1, 1]
  Var whole;  // 1 x H x W in [0, 1], the refiner input
  Var m_d;    // 1 x H x W in (0, 1) (in [0, 1] without the refiner)
};

class Mdn {
 public:
  Mdn(MdnConfig config, std::uint64_t seed);

  const MdnConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// sizes is the normalized 10-vector; output is the C-vector gate.
  Var sfe(Tape& tape, const Tensor& sizes) const;

  /// person: 3 x H x W; m_ref: 1 x H x W; sizes: normalized 10-vector.
  MdnOutput forward(Tape& tape, const Tensor& person, const Tensor& m_ref, const Tensor& sizes) const;

 private:
  Var bind(Tape& tape, std::size_t i) const { return params_.bind(tape, i); }

  MdnConfig config_;
  ParameterStore params_;
  std::vector<std::size_t> sfe_w_, sfe_b_, enc_w_, enc_b_, dec_w_, dec_b_;
  std::size_t head_w_ = 0, head_b_ = 0, mr1_w_ = 0, mr1_b_ = 0, mr2_w_ = 0, mr2_b_ = 0;
};

struct DiscriminatorConfig {
  int canvas = 128;
  std::vector<int> channels = {8, 16, 32};
  double leak = 0.2;
  bool patch = false;  // average a 1-channel logit map instead of a dense head

  friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};

nlohmann::json to_json(const DiscriminatorConfig& c);
DiscriminatorConfig discriminator_config_from_json(const nlohmann::json& j);

class Discriminator {
 public:
  Discriminator(DiscriminatorConfig config, std::uint64_t seed);

  const DiscriminatorConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// mask: 1 x H x W. Returns a one-element logit.
  Var forward(Tape& tape, Var mask) const;

 private:
  DiscriminatorConfig config_;
  ParameterStore params_;
  std::vector<std::size_t> conv_w_, conv_b_;
  std::size_t head_w_ = 0, head_b_ = 0;
};

struct Prediction {
  ResidualMask rm_d;
  Mask m_d;
};

/// Frozen-model inference; safe to call concurrently on a const Mdn.
Prediction predict(const Mdn& model, const SizeNormalizer& norm, const Tensor& person, const Mask& m_ref,
                   const synth::SizeVector& s_ref, const synth::SizeVector& s_try);

}  // namespace sizefit::nn
