#include "sizefit/nn.hpp"

#include <cmath>

#include "sizefit/errors.hpp"

namespace sizefit::nn {

using namespace tensor;

std::size_t ParameterStore::add(std::string name, Tensor value) {
  for (const auto& n : names_)
    if (n == name) throw UsageError("duplicate parameter name '" + name + "'");
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
  return tensors_.size() - 1;
}

std::size_t ParameterStore::index(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw DataError("no parameter named '" + name + "'");
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

GradientSet::GradientSet(const ParameterStore& store) {
  grads_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) grads_.emplace_back(store.tensor(i).shape());
}

void GradientSet::zero() {
  for (auto& g : grads_) g.fill(0.0);
}

void GradientSet::accumulate(const Tape& tape, const ParameterStore& store) {
  tape.for_each_parameter_grad(&store, [this](std::size_t i, const Tensor& g) {
    Tensor& dst = grads_.at(i);
    for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
  });
}

GradientSet& GradientSet::operator+=(const GradientSet& other) {
  if (other.grads_.size() != grads_.size()) throw ShapeError("gradient sets of different models");
  for (std::size_t i = 0; i < grads_.size(); ++i)
    for (std::size_t k = 0; k < grads_[i].size(); ++k) grads_[i][k] += other.grads_[i][k];
  return *this;
}

void GradientSet::scale(double s) {
  for (auto& g : grads_)
    for (double& v : g.values()) v *= s;
}

double GradientSet::squared_norm() const {
  double n = 0.0;
  for (const auto& g : grads_)
    for (double v : g.values()) n += v * v;
  return n;
}

bool GradientSet::all_finite() const {
  for (const auto& g : grads_)
    if (!g.all_finite()) return false;
  return true;
}

Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng, double gain) {
  Tensor t(std::move(shape));
  const double sd = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.normal(0.0, sd);
  return t;
}

// ---- size normalization ----

SizeNormalizer SizeNormalizer::from_sizes(const std::vector<synth::SizeVector>& sizes) {
  if (sizes.empty()) throw DataError("size normalization needs at least one size vector");
  SizeNormalizer n;
  n.mean.fill(0.0);
  n.stddev.fill(0.0);
  for (const auto& s : sizes) {
    const auto v = s.values();
    for (std::size_t i = 0; i < 5; ++i) n.mean[i] += v[i];
  }
  for (double& m : n.mean) m /= static_cast<double>(sizes.size());
  for (const auto& s : sizes) {
    const auto v = s.values();
    for (std::size_t i = 0; i < 5; ++i) n.stddev[i] += (v[i] - n.mean[i]) * (v[i] - n.mean[i]);
  }
  // A measurement that barely varies across the training garments would
  // turn a few millimetres on an unseen garment into many deviations, so
  // the scale never drops below 5% of the mean (or 1 mm).
  for (std::size_t i = 0; i < 5; ++i)
    n.stddev[i] = std::max({std::sqrt(n.stddev[i] / static_cast<double>(sizes.size())), 0.05 * std::abs(n.mean[i]), 1.0});
  return n;
}

SizeNormalizer SizeNormalizer::from_size_table(int n_garments) {
  std::vector<synth::SizeVector> sizes;
  for (int g = 0; g < n_garments; ++g)
    for (auto label : synth::kSizeLabels) sizes.push_back(synth::garment_size(g, label));
  return from_sizes(sizes);
}

Tensor SizeNormalizer::encode(const synth::SizeVector& s_ref, const synth::SizeVector& s_try) const {
  Tensor t(Shape{10});
  const auto a = s_ref.values(), b = s_try.values();
  for (std::size_t i = 0; i < 5; ++i) {
    t[i] = (a[i] - mean[i]) / stddev[i];
    t[5 + i] = (b[i] - mean[i]) / stddev[i];
  }
  if (!t.all_finite()) throw DataError("size vector contains non-finite values");
  return t;
}

nlohmann::json to_json(const SizeNormalizer& n) { return {{"mean", n.mean}, {"stddev", n.stddev}}; }

SizeNormalizer size_normalizer_from_json(const nlohmann::json& j) {
  SizeNormalizer n;
  try {
    n.mean = j.at("mean").get<std::array<double, 5>>();
    n.stddev = j.at("stddev").get<std::array<double, 5>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed size normalizer: ") + e.what());
  }
  for (double sd : n.stddev)
    if (!(sd > 0.0)) throw DataError("size normalizer stddev must be positive");
  return n;
}

// ---- configuration ----

nlohmann::json to_json(const MdnConfig& c) {
  return {{"canvas", c.canvas},
          {"sfe_hidden", c.sfe_hidden},
          {"encoder_channels", c.encoder_channels},
          {"decoder_channels", c.decoder_channels},
          {"refiner_channels", c.refiner_channels},
          {"sfe_output_relu", c.sfe_output_relu},
          {"conv_leak", c.conv_leak},
          {"no_rmdn", c.no_rmdn},
          {"no_mr", c.no_mr},
          {"no_person_input", c.no_person_input}};
}

MdnConfig mdn_config_from_json(const nlohmann::json& j) {
  MdnConfig c;
  try {
    c.canvas = j.value("canvas", c.canvas);
    c.sfe_hidden = j.value("sfe_hidden", c.sfe_hidden);
    c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
    c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
    c.refiner_channels = j.value("refiner_channels", c.refiner_channels);
    c.sfe_output_relu = j.value("sfe_output_relu", c.sfe_output_relu);
    c.conv_leak = j.value("conv_leak", c.conv_leak);
    c.no_rmdn = j.value("no_rmdn", c.no_rmdn);
    c.no_mr = j.value("no_mr", c.no_mr);
    c.no_person_input = j.value("no_person_input", c.no_person_input);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed model config: ") + e.what());
  }
  validate(c);
  return c;
}

void validate(const MdnConfig& c) {
  if (c.encoder_channels.empty() || c.encoder_channels.size() != c.decoder_channels.size())
    throw UsageError("encoder and decoder need the same, non-zero number of stride-2 layers");
  const int down = 1 << c.encoder_channels.size();
  if (c.canvas < down || c.canvas % down != 0)
    throw UsageError("canvas " + std::to_string(c.canvas) + " must be a positive multiple of " + std::to_string(down));
  for (const auto* v : {&c.sfe_hidden, &c.encoder_channels, &c.decoder_channels})
    for (int w : *v)
      if (w < 1) throw UsageError("layer widths must be positive");
  if (c.refiner_channels < 1) throw UsageError("refiner_channels must be positive");
  if (!(c.conv_leak >= 0.0 && c.conv_leak < 1.0)) throw UsageError("conv_leak must lie in [0, 1)");
  if (c.no_rmdn && c.no_mr) throw UsageError("no_rmdn and no_mr cannot be combined: nothing would map to a mask");
}

nlohmann::json to_json(const DiscriminatorConfig& c) {
  return {{"canvas", c.canvas}, {"channels", c.channels}, {"leak", c.leak}, {"patch", c.patch}};
}

DiscriminatorConfig discriminator_config_from_json(const nlohmann::json& j) {
  DiscriminatorConfig c;
  try {
    c.canvas = j.value("canvas", c.canvas);
    c.channels = j.value("channels", c.channels);
    c.leak = j.value("leak", c.leak);
    c.patch = j.value("patch", c.patch);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed discriminator config: ") + e.what());
  }
  if (c.channels.empty()) throw UsageError("discriminator needs at least one conv layer");
  const int down = 1 << c.channels.size();
  if (c.canvas % down != 0) throw UsageError("discriminator canvas must be divisible by " + std::to_string(down));
  return c;
}

// ---- MDN ----

namespace {

constexpr int kEncK = 3, kDecK = 4;

std::size_t usz(int v) { return static_cast<std::size_t>(v); }

}  // namespace

Mdn::Mdn(MdnConfig config, std::uint64_t seed) : config_(std::move(config)) {
  validate(config_);
  Rng rng(seed);
  const int C = config_.bottleneck_channels();

  int in = 10;
  std::vector<int> widths = config_.sfe_hidden;
  widths.push_back(C);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string p = "sfe." + std::to_string(i);
    sfe_w_.push_back(params_.add(p + ".weight", kaiming({usz(widths[i]), usz(in)}, usz(in), rng)));
    sfe_b_.push_back(params_.add(p + ".bias", Tensor({usz(widths[i])})));
    in = widths[i];
  }

  in = config_.input_channels();
  for (std::size_t i = 0; i < config_.encoder_channels.size(); ++i) {
    const int out = config_.encoder_channels[i];
    const std::string p = "encoder." + std::to_string(i);
    enc_w_.push_back(params_.add(p + ".weight", kaiming({usz(out), usz(in), kEncK, kEncK}, usz(in * kEncK * kEncK), rng)));
    enc_b_.push_back(params_.add(p + ".bias", Tensor({usz(out)})));
    in = out;
  }
  for (std::size_t i = 0; i < config_.decoder_channels.size(); ++i) {
    const int out = config_.decoder_channels[i];
    const std::string p = "decoder." + std::to_string(i);
    // A stride-2 transposed 4x4 kernel feeds each output from in * 4 taps.
    dec_w_.push_back(params_.add(p + ".weight", kaiming({usz(in), usz(out), kDecK, kDecK}, usz(in * 4), rng)));
    dec_b_.push_back(params_.add(p + ".bias", Tensor({usz(out)})));
    in = out;
  }
  head_w_ = params_.add("decoder.head.weight", kaiming({1, usz(in), 3, 3}, usz(in * 9), rng, 0.1));
  head_b_ = params_.add("decoder.head.bias", Tensor({1}));

  if (!config_.no_mr) {
    const int r = config_.refiner_channels;
    mr1_w_ = params_.add("refiner.0.weight", kaiming({usz(r), 1, 3, 3}, 9, rng));
    mr1_b_ = params_.add("refiner.0.bias", Tensor({usz(r)}));
    mr2_w_ = params_.add("refiner.1.weight", kaiming({1, usz(r), 3, 3}, usz(r * 9), rng));
    mr2_b_ = params_.add("refiner.1.bias", Tensor({1}));
  }
}

Var Mdn::sfe(Tape& tape, const Tensor& sizes) const {
  if (sizes.shape() != Shape{10}) throw ShapeError("SFE input must be a 10-vector, got " + to_string(sizes.shape()));
  if (!sizes.all_finite()) throw DataError("SFE input contains non-finite values");
  Var h = tape.constant(sizes);
  for (std::size_t i = 0; i < sfe_w_.size(); ++i) {
    h = dense(h, bind(tape, sfe_w_[i]), bind(tape, sfe_b_[i]));
    const bool last = i + 1 == sfe_w_.size();
    if (!last || config_.sfe_output_relu) h = relu(h);
  }
  return h;
}

MdnOutput Mdn::forward(Tape& tape, const Tensor& person, const Tensor& m_ref, const Tensor& sizes) const {
  const auto H = usz(config_.canvas);
  if (m_ref.shape() != Shape{1, H, H})
    throw ShapeError("m_ref must be 1x" + std::to_string(H) + "x" + std::to_string(H) + ", got " +
                     to_string(m_ref.shape()));
  if (!config_.no_person_input && person.shape() != Shape{3, H, H})
    throw ShapeError("person must be 3x" + std::to_string(H) + "x" + std::to_string(H) + ", got " +
                     to_string(person.shape()));

  const Var mref = tape.constant(m_ref);
  Var x = config_.no_person_input ? mref : concat_channels({tape.constant(person), mref});
  for (std::size_t i = 0; i < enc_w_.size(); ++i)
    x = leaky_relu(conv2d(x, bind(tape, enc_w_[i]), bind(tape, enc_b_[i]), 2, 1), config_.conv_leak);

  x = mul(x, sfe(tape, sizes));

  for (std::size_t i = 0; i < dec_w_.size(); ++i)
    x = leaky_relu(conv_transpose2d(x, bind(tape, dec_w_[i]), bind(tape, dec_b_[i]), 2, 1), config_.conv_leak);
  const Var head = conv2d(x, bind(tape, head_w_), bind(tape, head_b_), 1, 1);

  MdnOutput out;
  if (config_.no_rmdn) {
    out.whole = sigmoid(head);
    out.rm_d = sub(out.whole, mref);
  } else {
    out.rm_d = tanh(head);
    out.whole = clamp(add(out.rm_d, mref), 0.0, 1.0);
  }
  if (config_.no_mr) {
    out.m_d = out.whole;
  } else {
    const Var r = leaky_relu(conv2d(out.whole, bind(tape, mr1_w_), bind(tape, mr1_b_), 1, 1), config_.conv_leak);
    out.m_d = sigmoid(conv2d(r, bind(tape, mr2_w_), bind(tape, mr2_b_), 1, 1));
  }
  return out;
}

// ---- discriminator ----

Discriminator::Discriminator(DiscriminatorConfig config, std::uint64_t seed) : config_(std::move(config)) {
  Rng rng(seed);
  int in = 1;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    const int out = config_.channels[i];
    const std::string p = "disc." + std::to_string(i);
    conv_w_.push_back(params_.add(p + ".weight", kaiming({usz(out), usz(in), 4, 4}, usz(in * 16), rng)));
    conv_b_.push_back(params_.add(p + ".bias", Tensor({usz(out)})));
    in = out;
  }
  const std::size_t side = usz(config_.canvas) >> config_.channels.size();
  if (config_.patch) {
    head_w_ = params_.add("disc.head.weight", kaiming({1, usz(in), 3, 3}, usz(in * 9), rng));
  } else {
    const std::size_t n = usz(in) * side * side;
    head_w_ = params_.add("disc.head.weight", kaiming({1, n}, n, rng, 0.5));
  }
  head_b_ = params_.add("disc.head.bias", Tensor({1}));
}

Var Discriminator::forward(Tape& tape, Var mask) const {
  const auto H = usz(config_.canvas);
  if (mask.shape() != Shape{1, H, H}) throw ShapeError("discriminator input must be 1xHxW at the configured canvas");
  Var x = mask;
  for (std::size_t i = 0; i < conv_w_.size(); ++i)
    x = leaky_relu(conv2d(x, params_.bind(tape, conv_w_[i]), params_.bind(tape, conv_b_[i]), 2, 1), config_.leak);
  if (config_.patch)
    return mean(conv2d(x, params_.bind(tape, head_w_), params_.bind(tape, head_b_), 1, 1));
  return dense(reshape(x, {x.value().size()}), params_.bind(tape, head_w_), params_.bind(tape, head_b_));
}

Prediction predict(const Mdn& model, const SizeNormalizer& norm, const Tensor& person, const Mask& m_ref,
                   const synth::SizeVector& s_ref, const synth::SizeVector& s_try) {
  Tape tape;
  const MdnOutput out = model.forward(tape, person, m_ref.to_tensor(), norm.encode(s_ref, s_try));
  // Clamp guards the last ulp; values are in range by construction.
  Tensor rm = out.rm_d.value(), md = out.m_d.value();
  for (double& v : rm.values()) v = std::clamp(v, -1.0, 1.0);
  for (double& v : md.values()) v = std::clamp(v, 0.0, 1.0);
  return {ResidualMask::from_tensor(rm), Mask::from_tensor(md)};
}

}  // namespace sizefit::nn
