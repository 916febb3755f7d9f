#include "sizefit/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "sizefit/errors.hpp"

namespace sizefit::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- configuration ----

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw UsageError("unknown key '" + key + "' in " + where);
}

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const TrainConfig& c) {
  return {{"dataset_root", c.dataset_root},
          {"output_dir", c.output_dir},
          {"train_split", c.train_split},
          {"val_split", c.val_split},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"max_steps", c.max_steps},
          {"max_train_pairs", c.max_train_pairs},
          {"optimizer",
           {{"kind", optimizer_name(c.optimizer.kind)},
            {"lr", c.optimizer.lr},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"momentum", c.optimizer.momentum},
            {"schedule", c.optimizer.schedule == LrSchedule::cosine ? "cosine" : "constant"}}},
          {"loss",
           {{"lambda_w", c.loss.weights.lambda_w},
            {"lambda_d", c.loss.weights.lambda_d},
            {"lambda_a", c.loss.weights.lambda_a},
            {"mask_loss", losses::to_string(c.loss.mask_loss)},
            {"residual_loss", losses::to_string(c.loss.residual_loss)},
            {"use_adversarial", c.loss.use_adversarial}}},
          {"augment",
           {{"flip", c.augment.flip},
            {"rotation", c.augment.rotation},
            {"rotation_degrees", c.augment.rotation_degrees},
            {"retexture_probability", c.augment.retexture_probability}}},
          {"model", nn::to_json(c.model)},
          {"discriminator", nn::to_json(c.discriminator)},
          {"seed", c.seed},
          {"workers", c.workers},
          {"f32_compute", c.f32_compute}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    reject_unknown(j,
                   {"dataset_root", "output_dir", "train_split", "val_split", "batch_size", "epochs", "max_steps",
                    "max_train_pairs", "optimizer", "loss", "augment", "model", "discriminator", "seed", "workers",
                    "f32_compute"},
                   "train config");
    read(j, "dataset_root", c.dataset_root);
    read(j, "output_dir", c.output_dir);
    read(j, "train_split", c.train_split);
    read(j, "val_split", c.val_split);
    read(j, "batch_size", c.batch_size);
    read(j, "epochs", c.epochs);
    read(j, "max_steps", c.max_steps);
    read(j, "max_train_pairs", c.max_train_pairs);
    read(j, "seed", c.seed);
    read(j, "workers", c.workers);
    read(j, "f32_compute", c.f32_compute);
    if (j.contains("optimizer")) {
      const json& o = j["optimizer"];
      reject_unknown(o, {"kind", "lr", "beta1", "beta2", "eps", "momentum", "schedule"}, "optimizer");
      if (o.contains("kind")) {
        const auto k = o["kind"].get<std::string>();
        if (k != "adam" && k != "sgd") throw UsageError("optimizer.kind must be adam or sgd (got '" + k + "')");
        c.optimizer.kind = k == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
      }
      read(o, "lr", c.optimizer.lr);
      read(o, "beta1", c.optimizer.beta1);
      read(o, "beta2", c.optimizer.beta2);
      read(o, "eps", c.optimizer.eps);
      read(o, "momentum", c.optimizer.momentum);
      if (o.contains("schedule")) {
        const std::string k = o["schedule"].get<std::string>();
        if (k != "constant" && k != "cosine")
          throw UsageError("optimizer.schedule must be constant or cosine (got '" + k + "')");
        c.optimizer.schedule = k == "cosine" ? LrSchedule::cosine : LrSchedule::constant;
      }
    }
    if (j.contains("loss")) {
      const json& l = j["loss"];
      reject_unknown(l, {"lambda_w", "lambda_d", "lambda_a", "mask_loss", "residual_loss", "use_adversarial"}, "loss");
      read(l, "lambda_w", c.loss.weights.lambda_w);
      read(l, "lambda_d", c.loss.weights.lambda_d);
      read(l, "lambda_a", c.loss.weights.lambda_a);
      if (l.contains("mask_loss")) c.loss.mask_loss = losses::mask_loss_from_string(l["mask_loss"].get<std::string>());
      if (l.contains("residual_loss"))
        c.loss.residual_loss = losses::residual_loss_from_string(l["residual_loss"].get<std::string>());
      read(l, "use_adversarial", c.loss.use_adversarial);
    }
    if (j.contains("augment")) {
      const json& a = j["augment"];
      reject_unknown(a, {"flip", "rotation", "rotation_degrees", "retexture_probability"}, "augment");
      read(a, "flip", c.augment.flip);
      read(a, "rotation", c.augment.rotation);
      read(a, "rotation_degrees", c.augment.rotation_degrees);
      read(a, "retexture_probability", c.augment.retexture_probability);
    }
    if (j.contains("model")) {
      reject_unknown(j["model"],
                     {"canvas", "sfe_hidden", "encoder_channels", "decoder_channels", "refiner_channels",
                      "sfe_output_relu", "conv_leak", "no_rmdn", "no_mr", "no_person_input"},
                     "model");
      c.model = nn::mdn_config_from_json(j["model"]);
    }
    if (j.contains("discriminator")) {
      reject_unknown(j["discriminator"], {"canvas", "channels", "leak", "patch"}, "discriminator");
      c.discriminator = nn::discriminator_config_from_json(j["discriminator"]);
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed train config: ") + e.what());
  }
  validate(c);
  return c;
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw UsageError("batch_size must be positive");
  if (c.epochs < 1) throw UsageError("epochs must be positive");
  if (c.max_steps < 0 || c.max_train_pairs < 0) throw UsageError("max_steps and max_train_pairs must be >= 0");
  if (c.workers < 1) throw UsageError("workers must be positive");
  const auto& o = c.optimizer;
  if (!(o.lr > 0.0) || !(o.eps > 0.0)) throw UsageError("optimizer lr and eps must be positive");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0) || !(o.beta2 >= 0.0 && o.beta2 < 1.0))
    throw UsageError("adam betas must lie in [0, 1)");
  if (!(o.momentum >= 0.0 && o.momentum < 1.0)) throw UsageError("sgd momentum must lie in [0, 1)");
  if (!(c.augment.rotation_degrees >= 0.0 && c.augment.rotation_degrees <= 180.0))
    throw UsageError("rotation_degrees must lie in [0, 180]");
  if (!(c.augment.retexture_probability >= 0.0 && c.augment.retexture_probability <= 1.0))
    throw UsageError("retexture_probability must lie in [0, 1]");
  losses::validate(c.loss.weights);
  nn::validate(c.model);
  if (c.discriminator.canvas != c.model.canvas) throw UsageError("discriminator canvas must equal the model canvas");
  if (c.model.canvas != synth::kCanvas && c.model.canvas <= 0) throw UsageError("canvas must be positive");
}

std::string config_hash(const json& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- data ----

Sample to_sample(const synth::PairedSample& p, const std::string& split) {
  Sample s;
  s.pair_id = p.pair_id;
  s.split = split;
  s.garment_id = p.garment_id;
  s.ref_image = io::tensor_to_rgb(p.ref.image);
  s.ref_mask = io::mask_to_image(p.ref.mask);
  s.try_mask = io::mask_to_image(p.tryon.mask);
  s.ref_parts = p.ref.parts;
  s.try_parts = p.tryon.parts;
  s.ref_kps = p.ref.keypoints;
  s.try_kps = p.tryon.keypoints;
  s.s_ref = p.s_ref;
  s.s_try = p.s_try;
  return s;
}

Sample to_sample(const synth::StoredPair& p) {
  Sample s;
  s.pair_id = p.pair_id;
  s.split = p.split;
  s.garment_id = p.garment_id;
  s.ref_image = io::tensor_to_rgb(p.ref_image);
  s.ref_mask = io::mask_to_image(p.ref_mask);
  s.try_mask = io::mask_to_image(p.try_mask);
  s.ref_parts = p.ref_parts;
  s.try_parts = p.try_parts;
  s.ref_kps = p.ref_kps;
  s.try_kps = p.try_kps;
  s.s_ref = p.s_ref;
  s.s_try = p.s_try;
  return s;
}

std::vector<Sample> load_split(const fs::path& root, const std::string& split) {
  const json manifest = synth::read_manifest(root);
  std::vector<Sample> out;
  for (const auto& e : manifest["samples"]) {
    if (e["split"].get<std::string>() != split) continue;
    Sample s = to_sample(synth::read_pair(root / e["dir"].get<std::string>()));
    s.split = split;
    out.push_back(std::move(s));
  }
  return out;
}

geometry::Homography augmentation_homography(const Augmentation& a, int canvas) {
  const double c = (canvas - 1) / 2.0;
  const double f = a.flip ? -1.0 : 1.0;
  const double co = std::cos(a.angle), si = std::sin(a.angle);
  // p' = R (F (p - c)) + c with F = diag(f, 1).
  return geometry::Homography(std::array<double, 9>{co * f, -si, c - co * f * c + si * c, si * f, co,
                                                    c - si * f * c - co * c, 0, 0, 1});
}

namespace {

Tensor gray_to_tensor(const io::Image8& img) {
  Tensor t({1, static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width)});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = io::decode_unit(img.pixels[i]);
  return t;
}

Tensor parts_to_tensor(const PartLabelMap& p) {
  Tensor t({1, static_cast<std::size_t>(p.height()), static_cast<std::size_t>(p.width())});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(p.labels()[i]);
  return t;
}

PartLabelMap tensor_to_parts(const Tensor& t) {
  PartLabelMap p(static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)));
  for (int y = 0; y < p.height(); ++y)
    for (int x = 0; x < p.width(); ++x)
      p.at(y, x) = static_cast<PartLabel>(std::lround(t[static_cast<std::size_t>(y) * p.width() + x]));
  return p;
}

geometry::KeypointSet transform_keypoints(const geometry::KeypointSet& k, const geometry::Homography& h, bool flip) {
  geometry::KeypointSet moved = geometry::transform(k, h);
  if (!flip) return moved;
  geometry::KeypointSet out;
  for (std::size_t i = 0; i < geometry::kJointCount; ++i) {
    const auto j = static_cast<geometry::Joint>(i);
    out[geometry::mirror_joint(j)] = moved[j];
  }
  return out;
}

}  // namespace

Example materialize(const Sample& s, const Augmentation& a) {
  Example e;
  e.person = io::rgb_to_tensor(s.ref_image);
  e.m_ref = gray_to_tensor(s.ref_mask);
  e.m_g = gray_to_tensor(s.try_mask);
  e.parts_ref = s.ref_parts;
  e.parts_g = s.try_parts;
  e.kps_ref = s.ref_kps;
  e.kps_g = s.try_kps;
  if (a.flip || a.angle != 0.0) {
    const int canvas = s.ref_image.width;
    const auto h = augmentation_homography(a, canvas);
    const auto nearest = geometry::Interpolation::nearest;
    e.person = geometry::warp_image(e.person, h, nearest);
    e.m_ref = geometry::warp_image(e.m_ref, h, nearest);
    e.m_g = geometry::warp_image(e.m_g, h, nearest);
    e.parts_ref = tensor_to_parts(geometry::warp_image(parts_to_tensor(s.ref_parts), h, nearest));
    e.parts_g = tensor_to_parts(geometry::warp_image(parts_to_tensor(s.try_parts), h, nearest));
    e.kps_ref = transform_keypoints(s.ref_kps, h, a.flip);
    e.kps_g = transform_keypoints(s.try_kps, h, a.flip);
  }
  if (a.texture) {
    const Stripes& t = *a.texture;
    const std::size_t h = e.m_ref.dim(1), w = e.m_ref.dim(2);
    const double ca = std::cos(t.angle), sa = std::sin(t.angle);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (e.m_ref.at(0, y, x) <= 0.5) continue;
        const double u = (static_cast<double>(x) * sa + static_cast<double>(y) * ca + t.offset) / t.period;
        e.person.at(2, y, x) = u - std::floor(u) < 0.5 ? t.base : t.stripe;
      }
  }
  e.rm_g = Tensor(e.m_g.shape());
  for (std::size_t i = 0; i < e.rm_g.size(); ++i) e.rm_g[i] = e.m_g[i] - e.m_ref[i];
  check_consistency(e);
  return e;
}

Stripes random_stripes(Rng& rng) {
  Stripes t;
  t.period = rng.uniform(3.0, 10.0);
  t.angle = rng.uniform(-0.8, 0.8);
  t.offset = rng.uniform(0.0, t.period);
  t.base = rng.uniform(0.2, 0.9);
  t.stripe = t.base > 0.55 ? t.base - rng.uniform(0.15, 0.4) : t.base + rng.uniform(0.15, 0.4);
  return t;
}

void check_consistency(const Example& e) {
  const std::size_t plane = e.m_ref.size();
  auto bad_label = [](PartLabel p) { return p == PartLabel::background || p == PartLabel::head; };
  for (std::size_t i = 0; i < plane; ++i) {
    if (e.m_ref[i] > 0.5) {
      if (e.person[i] <= 0.5) throw DataError("augmentation consistency: garment pixel outside the silhouette");
      if (bad_label(e.parts_ref.labels()[i]))
        throw DataError("augmentation consistency: reference garment pixel on a background/head label");
    }
    if (e.m_g[i] > 0.5 && bad_label(e.parts_g.labels()[i]))
      throw DataError("augmentation consistency: target garment pixel on a background/head label");
  }
  const auto check_head = [](const geometry::KeypointSet& k, const PartLabelMap& parts) {
    const auto& h = k[geometry::Joint::head];
    if (!h.valid) return;
    const long x = std::lround(h.x), y = std::lround(h.y);
    if (x < 0 || y < 0 || x >= parts.width() || y >= parts.height()) return;
    if (parts(static_cast<int>(y), static_cast<int>(x)) != PartLabel::head)
      throw DataError("augmentation consistency: head keypoint off the head label");
  };
  check_head(e.kps_ref, e.parts_ref);
  check_head(e.kps_g, e.parts_g);
}

// ---- checkpoints ----

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    le(static_cast<std::uint64_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw DataError("checkpoint is truncated or corrupted");
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str() {
    const auto n = le<std::uint64_t>();
    need(n);
    std::string s(b_.begin() + static_cast<long>(pos_), b_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr std::uint64_t kMaxRank = 8;

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.le(kCheckpointVersion);
  w.str(c.config.dump());
  w.le(c.step);
  for (std::uint64_t s : c.rng_state) w.le(s);
  w.le(static_cast<std::uint64_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.le(static_cast<std::uint64_t>(t.rank()));
    for (std::size_t d : t.shape()) w.le(static_cast<std::uint64_t>(d));
    for (double v : t.values()) w.f64(v);
  }
  const std::uint64_t sum = fnv1a(w.data().data(), w.data().size());
  w.le(sum);
  return std::move(w.data());
}

void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  const auto bytes = serialize_checkpoint(c);
  // Write-then-rename so a crash never leaves a half-written checkpoint.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed for checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic || !std::equal(kCheckpointMagic, kCheckpointMagic + 6, bytes.begin()))
    throw DataError("not a checkpoint (bad magic)");
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 8) throw DataError("checkpoint is truncated or corrupted");
  Reader header(bytes, bytes.size());
  for (int i = 0; i < 6; ++i) header.le<std::uint8_t>();
  const auto version = header.le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (std::size_t i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (fnv1a(bytes.data(), body) != stored) throw DataError("checkpoint is truncated or corrupted (checksum mismatch)");

  Reader r(bytes, body);
  for (int i = 0; i < 6; ++i) r.le<std::uint8_t>();
  r.le<std::uint32_t>();
  Checkpoint c;
  try {
    c.config = json::parse(r.str());
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  c.step = r.le<std::uint64_t>();
  for (auto& s : c.rng_state) s = r.le<std::uint64_t>();
  const auto n = r.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const auto rank = r.le<std::uint64_t>();
    if (rank == 0 || rank > kMaxRank) throw DataError("checkpoint tensor '" + name + "' has invalid rank");
    tensor::Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = r.le<std::uint64_t>();
      if (d == 0) throw DataError("checkpoint tensor '" + name + "' has a zero extent");
      count *= d;
    }
    r.need(count * 8);
    std::vector<double> values(count);
    for (double& v : values) v = r.f64();
    c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (r.pos() != body) throw DataError("checkpoint has trailing bytes");
  return c;
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes(std::istreambuf_iterator<char>(f), {});
  return deserialize_checkpoint(bytes);
}

void export_parameters(const nn::ParameterStore& store, const std::string& prefix, Checkpoint& c) {
  for (std::size_t i = 0; i < store.size(); ++i) c.tensors.emplace_back(prefix + store.name(i), store.tensor(i));
}

void import_parameters(const Checkpoint& c, const std::string& prefix, nn::ParameterStore& store) {
  std::vector<const Tensor*> found(store.size(), nullptr);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string want = prefix + store.name(i);
    for (const auto& [name, t] : c.tensors) {
      if (name != want) continue;
      if (t.shape() != store.tensor(i).shape())
        throw DataError("checkpoint shape table mismatch at '" + want + "': stored " + tensor::to_string(t.shape()) +
                        ", model expects " + tensor::to_string(store.tensor(i).shape()));
      found[i] = &t;
    }
    if (!found[i]) throw DataError("checkpoint shape table mismatch: missing tensor '" + want + "'");
  }
  for (const auto& [name, t] : c.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    bool known = false;
    for (std::size_t i = 0; i < store.size() && !known; ++i) known = prefix + store.name(i) == name;
    if (!known) throw DataError("checkpoint shape table mismatch: unexpected tensor '" + name + "'");
  }
  for (std::size_t i = 0; i < store.size(); ++i) store.tensor(i) = *found[i];
}

LoadedModel restore_model(const Checkpoint& c) {
  if (!c.config.contains("train") || !c.config.contains("normalizer"))
    throw DataError("checkpoint config lacks train/normalizer sections");
  TrainConfig cfg = train_config_from_json(c.config["train"]);
  LoadedModel m{c, cfg, nn::size_normalizer_from_json(c.config["normalizer"]), nn::Mdn(cfg.model, 0)};
  import_parameters(c, "mdn.", m.model.params());
  return m;
}

LoadedModel load_model(const fs::path& path) { return restore_model(load_checkpoint(path)); }

// ---- optimizers ----

double scheduled_lr(const OptimizerConfig& c, long step, long total_steps) {
  if (c.schedule == LrSchedule::constant || total_steps <= 0) return c.lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const nn::ParameterStore& store) : cfg_(cfg), m_(store), v_(store) {}

  void step(nn::ParameterStore& store, const nn::GradientSet& g, double lr) {
    ++t_;
    if (cfg_.kind == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < store.size(); ++i) {
        Tensor& p = store.tensor(i);
        Tensor& buf = m_[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
          buf[k] = cfg_.momentum * buf[k] + g[i][k];
          p[k] -= lr * buf[k];
        }
      }
      return;
    }
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      Tensor& p = store.tensor(i);
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[i][k];
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
        p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  nn::GradientSet m_, v_;
  long t_ = 0;
};

class PrecisionScope {
 public:
  explicit PrecisionScope(tensor::Precision p) : saved_(tensor::compute_precision()) {
    tensor::set_compute_precision(p);
  }
  ~PrecisionScope() { tensor::set_compute_precision(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  tensor::Precision saved_;
};

struct BatchAccum {
  nn::GradientSet g, d;
  double total = 0, mask = 0, residual = 0, adversarial = 0, disc = 0;
};

void run_sample(const nn::Mdn& model, const nn::Discriminator& disc, const nn::SizeNormalizer& norm,
                const Sample& s, const Augmentation& aug, const losses::LossConfig& loss, bool adversarial,
                BatchAccum& acc) {
  const Example ex = materialize(s, aug);
  const Tensor sizes = norm.encode(s.s_ref, s.s_try);
  tensor::Tape tape;
  const nn::MdnOutput out = model.forward(tape, ex.person, ex.m_ref, sizes);
  std::optional<tensor::Var> fake;
  if (adversarial) fake = disc.forward(tape, out.m_d);
  const losses::LossTerms terms = losses::total_loss(out.m_d, ex.m_g, out.rm_d, ex.rm_g, fake, loss);
  tape.backward(terms.total);
  acc.g.accumulate(tape, model.params());
  acc.total += terms.total.value().item();
  acc.mask += terms.mask.value().item();
  acc.residual += terms.residual.value().item();
  if (adversarial) {
    acc.adversarial += terms.adversarial.value().item();
    tensor::Tape dt;
    const auto real_logit = disc.forward(dt, dt.constant(ex.m_g));
    const auto fake_logit = disc.forward(dt, dt.constant(out.m_d.value()));
    const auto ld = losses::adversarial_discriminator(real_logit, fake_logit);
    dt.backward(ld);
    acc.d.accumulate(dt, disc.params());
    acc.disc += ld.value().item();
  }
}

// Runs f(i) for i in [0, n) over up to `workers` threads in contiguous
// chunks; chunk c only ever writes slot c.
template <typename F>
void parallel_chunks(std::size_t n, int workers, F&& f) {
  const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(workers), n));
  if (w == 1) {
    for (std::size_t i = 0; i < n; ++i) f(0, i);
    return;
  }
  std::vector<std::exception_ptr> errors(w);
  std::vector<std::thread> threads;
  for (std::size_t c = 0; c < w; ++c) {
    threads.emplace_back([&, c] {
      try {
        for (std::size_t i = c * n / w; i < (c + 1) * n / w; ++i) f(c, i);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::size_t chunk_count(std::size_t n, int workers) {
  return std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(workers), n));
}

void write_nan_dump(const TrainConfig& cfg, const std::vector<const Sample*>& batch, long step, int epoch,
                    const std::string& what) {
  if (cfg.output_dir.empty()) return;
  const fs::path dir = fs::path(cfg.output_dir) / "nan_dump";
  fs::create_directories(dir);
  json ids = json::array();
  for (const Sample* s : batch) {
    ids.push_back(s->pair_id);
    io::write_pgm(dir / (s->pair_id + "_ref_mask.pgm"), s->ref_mask);
    io::write_pgm(dir / (s->pair_id + "_try_mask.pgm"), s->try_mask);
    io::write_png(dir / (s->pair_id + "_ref_image.png"), s->ref_image);
  }
  std::ofstream(dir / "info.json") << json{{"step", step}, {"epoch", epoch}, {"error", what}, {"pairs", ids}}.dump(2)
                                   << "\n";
}

Checkpoint snapshot(const TrainConfig& cfg, const nn::SizeNormalizer& norm, const nn::Mdn& model,
                    const nn::Discriminator& disc, long step, const Rng& rng) {
  Checkpoint c;
  c.config = {{"train", to_json(cfg)}, {"normalizer", nn::to_json(norm)}};
  c.step = static_cast<std::uint64_t>(step);
  c.rng_state = rng.state();
  export_parameters(model.params(), "mdn.", c);
  export_parameters(disc.params(), "disc.", c);
  return c;
}

}  // namespace

json to_json(const EpochLog& e) {
  json j = {{"epoch", e.epoch},
            {"step", e.step},
            {"train_loss", e.train_loss},
            {"train_mask", e.train_mask},
            {"train_residual", e.train_residual},
            {"train_adversarial", e.train_adversarial},
            {"disc_loss", e.disc_loss},
            {"seconds", e.seconds}};
  j["val_sem"] = e.val_sem ? json(*e.val_sem) : json(nullptr);
  j["val_iou"] = e.val_iou ? json(*e.val_iou) : json(nullptr);
  return j;
}

TrainResult train(const TrainConfig& config, const ProgressFn& progress) {
  validate(config);
  const auto train_set = load_split(config.dataset_root, config.train_split);
  const auto val_set = config.val_split.empty() ? std::vector<Sample>{} : load_split(config.dataset_root, config.val_split);
  return train(config, train_set, val_set, progress);
}

TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& train_all, const std::vector<Sample>& val_set,
                  const ProgressFn& progress) {
  validate(cfg);
  std::vector<const Sample*> pool;
  for (const auto& s : train_all) pool.push_back(&s);
  if (cfg.max_train_pairs > 0 && pool.size() > static_cast<std::size_t>(cfg.max_train_pairs))
    pool.resize(static_cast<std::size_t>(cfg.max_train_pairs));
  if (pool.empty()) throw DataError("training split '" + cfg.train_split + "' is empty");
  for (const Sample* s : pool)
    if (s->ref_image.width != cfg.model.canvas || s->ref_image.height != cfg.model.canvas)
      throw DataError("pair " + s->pair_id + " does not match the configured canvas");

  PrecisionScope precision(cfg.f32_compute ? tensor::Precision::f32 : tensor::Precision::f64);
#if defined(__GLIBC__)
  // Every step allocates the same large im2col buffers; keeping them on the
  // heap instead of fresh mmaps avoids a page-fault storm per layer.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif

  std::vector<synth::SizeVector> sizes;
  for (const Sample* s : pool) {
    sizes.push_back(s->s_ref);
    sizes.push_back(s->s_try);
  }
  const nn::SizeNormalizer norm = nn::SizeNormalizer::from_sizes(sizes);
  nn::Mdn model(cfg.model, derive_seed(cfg.seed, 1));
  nn::Discriminator disc(cfg.discriminator, derive_seed(cfg.seed, 2));
  Rng rng(derive_seed(cfg.seed, 3));
  Optimizer opt_g(cfg.optimizer, model.params()), opt_d(cfg.optimizer, disc.params());
  const bool adversarial = cfg.loss.use_adversarial && cfg.loss.weights.lambda_a > 0.0;

  fs::path out_dir;
  std::ofstream log_file;
  if (!cfg.output_dir.empty()) {
    out_dir = cfg.output_dir;
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "config.json") << to_json(cfg).dump(2) << "\n";
    log_file.open(out_dir / "train_log.jsonl");
  }

  TrainResult result;
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const double max_angle = cfg.augment.rotation_degrees * std::numbers::pi / 180.0;
  long step = 0;
  bool done = false;
  const long steps_per_epoch = static_cast<long>((pool.size() + cfg.batch_size - 1) / cfg.batch_size);
  long total_steps = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  for (int epoch = 1; epoch <= cfg.epochs && !done; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    EpochLog entry;
    entry.epoch = epoch;
    std::size_t seen = 0;

    for (std::size_t start = 0; start < order.size() && !done; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Sample*> batch;
      std::vector<Augmentation> augs;
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(pool[order[k]]);
        Augmentation a;
        if (cfg.augment.flip) a.flip = rng.uniform() < 0.5;
        if (cfg.augment.rotation) a.angle = rng.uniform(-max_angle, max_angle);
        if (cfg.augment.retexture_probability > 0.0 && rng.uniform() < cfg.augment.retexture_probability)
          a.texture = random_stripes(rng);
        augs.push_back(a);
      }

      const std::size_t chunks = chunk_count(batch.size(), cfg.workers);
      std::vector<BatchAccum> accs(chunks);
      for (auto& a : accs) {
        a.g = nn::GradientSet(model.params());
        a.d = nn::GradientSet(disc.params());
      }
      try {
        parallel_chunks(batch.size(), cfg.workers, [&](std::size_t c, std::size_t i) {
          run_sample(model, disc, norm, *batch[i], augs[i], cfg.loss, adversarial, accs[c]);
        });
        for (std::size_t c = 1; c < chunks; ++c) {
          accs[0].g += accs[c].g;
          accs[0].d += accs[c].d;
          accs[0].total += accs[c].total;
          accs[0].mask += accs[c].mask;
          accs[0].residual += accs[c].residual;
          accs[0].adversarial += accs[c].adversarial;
          accs[0].disc += accs[c].disc;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        accs[0].g.scale(inv);
        accs[0].d.scale(inv);
        if (!accs[0].g.all_finite() || !accs[0].d.all_finite() || !std::isfinite(accs[0].total))
          throw NumericError("non-finite gradient or loss");
      } catch (const NumericError& e) {
        write_nan_dump(cfg, batch, step, epoch, e.what());
        std::string ids;
        for (const Sample* s : batch) ids += (ids.empty() ? "" : ", ") + s->pair_id;
        throw NumericError("training aborted at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                           "): " + e.what() + "; batch: " + ids);
      }
      const double lr = scheduled_lr(cfg.optimizer, step, total_steps);
      opt_g.step(model.params(), accs[0].g, lr);
      if (adversarial) opt_d.step(disc.params(), accs[0].d, lr);

      const double n = static_cast<double>(batch.size());
      result.step_losses.push_back(accs[0].total / n);
      entry.train_loss += accs[0].total;
      entry.train_mask += accs[0].mask;
      entry.train_residual += accs[0].residual;
      entry.train_adversarial += accs[0].adversarial;
      entry.disc_loss += accs[0].disc;
      seen += batch.size();
      ++step;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) done = true;
    }

    const double n = static_cast<double>(std::max<std::size_t>(seen, 1));
    entry.train_loss /= n;
    entry.train_mask /= n;
    entry.train_residual /= n;
    entry.train_adversarial /= n;
    entry.disc_loss /= n;
    entry.step = step;
    if (!val_set.empty()) {
      const EvalReport r = evaluate(model, norm, val_set, cfg.val_split, metrics::SemMode::soft, cfg.workers);
      entry.val_sem = r.model.sem.mean;
      entry.val_iou = r.iou_model.mean;
      if (!result.best_val_sem || *entry.val_sem < *result.best_val_sem) {
        result.best_val_sem = entry.val_sem;
        result.best = snapshot(cfg, norm, model, disc, step, rng);
        if (!out_dir.empty()) save_checkpoint(result.best, out_dir / "best.ckpt");
      }
    }
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    if (log_file.is_open()) log_file << to_json(entry).dump() << "\n" << std::flush;
    if (progress) progress(entry);
  }

  const Checkpoint last = snapshot(cfg, norm, model, disc, step, rng);
  if (!result.best_val_sem) result.best = last;
  if (!out_dir.empty()) {
    save_checkpoint(last, out_dir / "last.ckpt");
    if (!result.best_val_sem) save_checkpoint(last, out_dir / "best.ckpt");
  }
  return result;
}

// ---- evaluation ----

double EvalReport::sem_ratio() const {
  if (identity.sem.mean == 0.0) return std::numeric_limits<double>::infinity();
  return model.sem.mean / identity.sem.mean;
}

json to_json(const EvalReport& r, bool include_pairs) {
  json j = {{"split", r.split},
            {"pairs_evaluated", r.pairs.size()},
            {"model", to_json(r.model)},
            {"identity", to_json(r.identity)},
            {"iou_model", to_json(r.iou_model)},
            {"iou_identity", to_json(r.iou_identity)},
            {"sem_x100_model", 100.0 * r.model.sem.mean},
            {"sem_x100_identity", 100.0 * r.identity.sem.mean}};
  const double ratio = r.sem_ratio();
  j["sem_ratio"] = std::isfinite(ratio) ? json(ratio) : json(nullptr);
  if (include_pairs) {
    json pairs = json::array();
    for (const auto& p : r.pairs)
      pairs.push_back({{"pair_id", p.pair_id},
                       {"model", to_json(p.model)},
                       {"identity", to_json(p.identity)},
                       {"iou_model", p.iou_model},
                       {"iou_identity", p.iou_identity}});
    j["pairs"] = pairs;
  }
  return j;
}

EvalReport evaluate(const nn::Mdn& model, const nn::SizeNormalizer& norm, const std::vector<Sample>& samples,
                    const std::string& split, metrics::SemMode mode, int workers) {
  if (samples.empty()) throw DataError("split '" + split + "' is empty");
  EvalReport report;
  report.split = split;
  report.pairs.resize(samples.size());
  parallel_chunks(samples.size(), workers, [&](std::size_t, std::size_t i) {
    const Sample& s = samples[i];
    const Example ex = materialize(s);
    const Mask m_ref = Mask::from_tensor(ex.m_ref), m_g = Mask::from_tensor(ex.m_g);
    const nn::Prediction pred = nn::predict(model, norm, ex.person, m_ref, s.s_ref, s.s_try);
    PairResult& p = report.pairs[i];
    p.pair_id = s.pair_id;
    p.model = metrics::sem(pred.m_d, ex.parts_ref, m_g, ex.parts_g, mode);
    p.identity = metrics::sem(m_ref, ex.parts_ref, m_g, ex.parts_g, mode);
    p.iou_model = metrics::iou(pred.m_d, m_g);
    p.iou_identity = metrics::iou(m_ref, m_g);
  });
  std::vector<metrics::SemReport> m, id;
  std::vector<double> iou_m, iou_id;
  for (const auto& p : report.pairs) {
    m.push_back(p.model);
    id.push_back(p.identity);
    iou_m.push_back(p.iou_model);
    iou_id.push_back(p.iou_identity);
  }
  report.model = metrics::aggregate(m);
  report.identity = metrics::aggregate(id);
  report.iou_model = metrics::summarize(iou_m);
  report.iou_identity = metrics::summarize(iou_id);
  return report;
}

EvalReport evaluate(const LoadedModel& m, const fs::path& root, const std::string& split, metrics::SemMode mode,
                    int workers) {
  return evaluate(m.model, m.normalizer, load_split(root, split), split, mode, workers);
}

// ---- ablations ----

std::vector<Variant> standard_variants() {
  return {
      {"full", [](TrainConfig&) {}},
      {"no_mr", [](TrainConfig& c) { c.model.no_mr = true; }},
      {"no_rmdn", [](TrainConfig& c) { c.model.no_rmdn = true; }},
      {"no_person_input", [](TrainConfig& c) { c.model.no_person_input = true; }},
      {"no_adversarial", [](TrainConfig& c) { c.loss.use_adversarial = false; }},
      {"mask_bce", [](TrainConfig& c) { c.loss.mask_loss = losses::MaskLoss::bce; }},
      {"mask_dice", [](TrainConfig& c) { c.loss.mask_loss = losses::MaskLoss::dice; }},
      {"residual_mae", [](TrainConfig& c) { c.loss.residual_loss = losses::ResidualLoss::mae; }},
      {"residual_mse", [](TrainConfig& c) { c.loss.residual_loss = losses::ResidualLoss::mse; }},
      {"straightforward",
       [](TrainConfig& c) {
         c.loss.mask_loss = losses::MaskLoss::bce;
         c.loss.weights.lambda_d = 0.0;
         c.loss.weights.lambda_a = 0.0;
         c.loss.use_adversarial = false;
       }},
  };
}

Variant find_variant(const std::string& name) {
  for (auto& v : standard_variants())
    if (v.name == name) return v;
  throw UsageError("unknown ablation variant '" + name + "'");
}

std::vector<AblationRow> run_ablation_matrix(const TrainConfig& base, const std::vector<Variant>& variants,
                                             const std::vector<std::uint64_t>& seeds,
                                             const std::vector<std::string>& splits,
                                             const std::function<void(const std::string&)>& log) {
  validate(base);
  const auto train_set = load_split(base.dataset_root, base.train_split);
  const auto val_set = base.val_split.empty() ? std::vector<Sample>{} : load_split(base.dataset_root, base.val_split);
  std::vector<std::vector<Sample>> eval_sets;
  for (const auto& s : splits) eval_sets.push_back(load_split(base.dataset_root, s));

  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    for (const Variant& v : variants) {
      TrainConfig cfg = base;
      v.apply(cfg);
      cfg.seed = seed;
      if (!base.output_dir.empty())
        cfg.output_dir = (fs::path(base.output_dir) / (v.name + "_seed" + std::to_string(seed))).string();
      validate(cfg);
      if (log) log("training " + v.name + " seed " + std::to_string(seed));
      const TrainResult tr = train(cfg, train_set, val_set);
      const LoadedModel m = restore_model(tr.best);
      AblationRow row{v.name, seed, {}};
      for (std::size_t i = 0; i < splits.size(); ++i) {
        row.reports.push_back(evaluate(m.model, m.normalizer, eval_sets[i], splits[i], metrics::SemMode::soft,
                                       cfg.workers));
        if (log)
          log("  " + splits[i] + ": SEM x100 " + std::to_string(100.0 * row.reports.back().model.sem.mean) +
              " (identity " + std::to_string(100.0 * row.reports.back().identity.sem.mean) + ")");
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

json to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json reports = json::array();
    for (const auto& e : r.reports) reports.push_back(to_json(e));
    out.push_back({{"variant", r.variant}, {"seed", r.seed}, {"reports", reports}});
  }
  return out;
}

}  // namespace sizefit::pipeline
