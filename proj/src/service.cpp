#include "sizefit/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <thread>

#include "httplib.h"

#include "sizefit/errors.hpp"
#include "sizefit/geometry.hpp"
#include "sizefit/metrics.hpp"

namespace sizefit::service {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- base64 ----

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::string s = text;
  // Accept data URLs from browsers.
  if (const auto comma = s.find(','); s.rfind("data:", 0) == 0 && comma != std::string::npos) s = s.substr(comma + 1);
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : s) {
    if (c == '=' || c == '\n' || c == '\r') continue;
    const char* p = std::strchr(kAlphabet, c);
    if (!p || c == '\0') throw DataError("invalid base64 input");
    acc = (acc << 6) | static_cast<std::uint32_t>(p - kAlphabet);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

// ---- gallery ----

std::vector<GalleryEntry> load_gallery(const fs::path& root, const std::vector<std::string>& splits,
                                       std::size_t limit) {
  const json manifest = synth::read_manifest(root);
  std::map<std::string, GalleryEntry> groups;
  for (const auto& e : manifest["samples"]) {
    const std::string split = e["split"].get<std::string>();
    if (!splits.empty() && std::find(splits.begin(), splits.end(), split) == splits.end()) continue;
    const std::string id = "b" + std::to_string(e["body_id"].get<int>()) + "_p" +
                           std::to_string(e["pose_id"].get<int>()) + "_g" + std::to_string(e["garment_id"].get<int>()) +
                           "_" + e["ref_size"].get<std::string>();
    const synth::StoredPair p = synth::read_pair(root / e["dir"].get<std::string>());
    auto [it, fresh] = groups.try_emplace(id);
    GalleryEntry& g = it->second;
    if (fresh) {
      g.id = id;
      g.garment_id = p.garment_id;
      g.person = p.ref_image;
      g.m_ref = p.ref_mask;
      g.parts_ref = p.ref_parts;
      g.s_ref = p.s_ref;
      g.ref_label = e["ref_size"].get<std::string>();
      // The reference rendering is itself the ground truth at s_ref.
      g.truths.push_back({g.ref_label, p.s_ref, p.ref_mask, p.ref_parts});
    }
    const std::string try_label = e["try_size"].get<std::string>();
    if (try_label == g.ref_label) continue;
    g.truths.push_back({try_label, p.s_try, p.try_mask, p.try_parts});
  }
  std::vector<GalleryEntry> out;
  for (auto& [id, g] : groups) {
    std::sort(g.truths.begin(), g.truths.end(), [](const auto& a, const auto& b) {
      return synth::grading_step(synth::size_from_name(a.label)) < synth::grading_step(synth::size_from_name(b.label));
    });
    out.push_back(std::move(g));
    if (limit > 0 && out.size() == limit) break;
  }
  return out;
}

// ---- request handling ----

namespace {

Response json_response(int status, const json& j) { return {status, "application/json", j.dump()}; }

Response error(int status, const std::string& message, const json& fields = json()) {
  json j = {{"error", message}};
  if (!fields.is_null()) j["fields"] = fields;
  return json_response(status, j);
}

std::string png_string(const io::Image8& img) {
  const auto bytes = io::encode_png(img);
  return std::string(bytes.begin(), bytes.end());
}

std::string png_b64(const io::Image8& img) { return base64_encode(io::encode_png(img)); }

// Gray rendering of the person: white background, part shading inside.
tensor::Tensor display_person(const tensor::Tensor& person) {
  const std::size_t plane = person.dim(1) * person.dim(2);
  tensor::Tensor out(person.shape());
  for (std::size_t i = 0; i < plane; ++i) {
    const double v = person[i] > 0.5 ? 0.3 + 0.6 * person[plane + i] : 1.0;
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = v;
  }
  return out;
}

bool same_size(const synth::SizeVector& a, const synth::SizeVector& b) {
  const auto va = a.values(), vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i)
    if (std::abs(va[i] - vb[i]) > 1e-6) return false;
  return true;
}

json size_ranges(const std::vector<GalleryEntry>& gallery) {
  std::array<double, 5> lo, hi;
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(0.0);
  const auto widen = [&](const synth::SizeVector& s) {
    const auto v = s.values();
    for (std::size_t i = 0; i < 5; ++i) {
      lo[i] = std::min(lo[i], v[i]);
      hi[i] = std::max(hi[i], v[i]);
    }
  };
  for (const auto& g : gallery) {
    widen(g.s_ref);
    for (const auto& t : g.truths) widen(t.size);
  }
  json r = json::object();
  if (gallery.empty()) return r;
  for (std::size_t i = 0; i < 5; ++i)
    r[synth::kSizeFieldNames[i]] = {{"min", std::floor(lo[i] * 0.85)}, {"max", std::ceil(hi[i] * 1.15)}, {"unit", "mm"}};
  return r;
}

}  // namespace

Service::Service(pipeline::LoadedModel model, std::vector<GalleryEntry> gallery)
    : model_(std::make_shared<const pipeline::LoadedModel>(std::move(model))),
      gallery_(std::move(gallery)),
      ranges_(size_ranges(gallery_)) {}

const GalleryEntry* Service::find(const std::string& id) const {
  for (const auto& g : gallery_)
    if (g.id == id) return &g;
  return nullptr;
}

Response Service::samples() const {
  if (!ready()) return error(503, "model not loaded");
  json list = json::array();
  for (const auto& g : gallery_) {
    json truths = json::array();
    for (const auto& t : g.truths) truths.push_back({{"label", t.label}, {"size", synth::to_json(t.size)}});
    json presets = json::object();
    if (g.garment_id >= 0)
      for (auto label : synth::kSizeLabels)
        presets[synth::size_name(label)] = synth::to_json(synth::garment_size(g.garment_id, label));
    list.push_back({{"id", g.id},
                    {"thumbnail", "/api/samples/" + g.id + "/thumbnail.png"},
                    {"garment_id", g.garment_id},
                    {"ref_size", g.ref_label},
                    {"s_ref", synth::to_json(g.s_ref)},
                    {"gt_sizes", truths},
                    {"presets", presets}});
  }
  return json_response(200, {{"samples", list}, {"size_ranges", ranges_}});
}

Response Service::thumbnail(const std::string& id) const {
  if (!ready()) return error(503, "model not loaded");
  const GalleryEntry* g = find(id);
  if (!g) return error(404, "unknown sample '" + id + "'");
  return {200, "image/png", png_string(io::tensor_to_rgb(display_person(g->person)))};
}

Response Service::model_info() const {
  if (!ready()) return error(503, "model not loaded");
  const auto& m = *model_;
  const auto& mc = m.config.model;
  return json_response(200, {{"config_hash", m.checkpoint.hash()},
                             {"step", m.checkpoint.step},
                             {"canvas", mc.canvas},
                             {"parameters", m.model.params().total_elements()},
                             {"ablation", {{"no_rmdn", mc.no_rmdn}, {"no_mr", mc.no_mr}, {"no_person_input", mc.no_person_input}}},
                             {"size_fields", synth::kSizeFieldNames},
                             {"size_ranges", ranges_},
                             {"gallery_size", gallery_.size()}});
}

Response Service::deform(const std::string& request_body, const std::string& image) const {
  if (!ready()) return error(503, "model not loaded");
  if (!image.empty() && image != "m_d" && image != "rm_d" && image != "composite")
    return error(400, "image must be one of m_d, rm_d, composite");
  json req;
  try {
    req = json::parse(request_body);
  } catch (const json::exception&) {
    return error(400, "request body is not valid JSON");
  }
  if (!req.is_object()) return error(400, "request body must be a JSON object");

  GalleryEntry uploaded;
  const GalleryEntry* g = nullptr;
  try {
    if (req.contains("sample_id")) {
      const std::string id = req["sample_id"].get<std::string>();
      g = find(id);
      if (!g) return error(404, "unknown sample '" + id + "'");
    } else if (req.contains("bundle")) {
      // Same layout as a stored pair's reference files, base64 encoded.
      const json& b = req["bundle"];
      uploaded.id = "upload";
      uploaded.person = io::rgb_to_tensor(io::decode_png(base64_decode(b.at("image").get<std::string>())));
      uploaded.m_ref = io::image_to_mask(io::decode_png(base64_decode(b.at("mask").get<std::string>())));
      uploaded.parts_ref = io::image_to_parts(io::decode_png(base64_decode(b.at("parts").get<std::string>())));
      uploaded.s_ref = synth::size_from_json(b.at("s_ref"));
      const int canvas = model_->config.model.canvas;
      if (uploaded.person.dim(1) != static_cast<std::size_t>(canvas) ||
          uploaded.person.dim(2) != static_cast<std::size_t>(canvas) || uploaded.m_ref.height() != canvas ||
          uploaded.m_ref.width() != canvas || uploaded.parts_ref.height() != canvas ||
          uploaded.parts_ref.width() != canvas)
        return error(400, "bundle images must be " + std::to_string(canvas) + "x" + std::to_string(canvas));
      if (auto problems = synth::validate(uploaded.s_ref); !problems.empty())
        return error(400, "invalid s_ref", problems);
      g = &uploaded;
    } else {
      return error(400, "request needs sample_id or bundle");
    }
  } catch (const std::exception& e) {
    return error(400, std::string("malformed request: ") + e.what());
  }

  synth::SizeVector s_try;
  double threshold = kDefaultThreshold;
  bool want_overlay = false, want_warp = false;
  try {
    if (!req.contains("s_try")) return error(400, "missing s_try");
    s_try = synth::size_from_json(req["s_try"]);
    if (req.contains("options")) {
      const json& o = req["options"];
      want_overlay = o.value("return_overlay", false);
      want_warp = o.value("return_warp", false);
      threshold = o.value("binarize_threshold", kDefaultThreshold);
    }
  } catch (const std::exception& e) {
    return error(400, std::string("invalid s_try: ") + e.what());
  }
  if (auto problems = synth::validate(s_try); !problems.empty()) return error(400, "invalid s_try", problems);
  if (!(threshold > 0.0 && threshold < 1.0)) return error(400, "binarize_threshold must lie in (0, 1)");

  const auto& m = *model_;
  const nn::Prediction pred = nn::predict(m.model, m.normalizer, g->person, g->m_ref, g->s_ref, s_try);
  const Mask bin = binarize(pred.m_d, threshold);
  const auto split = metrics::split_torso_sleeves(bin, g->parts_ref);
  double mean_abs = 0.0;
  for (double v : pred.rm_d.values()) mean_abs += std::abs(v);
  mean_abs /= static_cast<double>(pred.rm_d.size());

  json sem = nullptr;
  for (const auto& t : g->truths)
    if (same_size(t.size, s_try)) {
      sem = metrics::to_json(metrics::sem(pred.m_d, g->parts_ref, t.mask, t.parts));
      sem["gt_label"] = t.label;
      break;
    }

  std::optional<io::Image8> composite, overlay;
  std::string composite_error;
  if (want_warp || image == "composite") {
    try {
      const tensor::Tensor cloth = g->garment_id >= 0
                                       ? synth::garment_texture(g->garment_id, g->m_ref.height(), g->m_ref.width())
                                       : display_person(g->person);
      const tensor::Tensor warped = geometry::tps_warp_cloth(cloth, g->m_ref, bin);
      composite = io::tensor_to_rgb(composite_tryon(display_person(g->person), warped, pred.m_d));
    } catch (const DataError& e) {
      composite_error = e.what();
    }
  }
  if (want_overlay) {
    tensor::Tensor red(g->person.shape());
    const std::size_t plane = pred.m_d.size();
    for (std::size_t i = 0; i < plane; ++i) red[i] = 1.0;
    Mask half(pred.m_d.height(), pred.m_d.width());
    for (int y = 0; y < half.height(); ++y)
      for (int x = 0; x < half.width(); ++x) half.at(y, x) = 0.5 * pred.m_d(y, x);
    overlay = io::tensor_to_rgb(composite_tryon(display_person(g->person), red, half));
  }

  if (image == "m_d") return {200, "image/png", png_string(io::mask_to_image(pred.m_d))};
  if (image == "rm_d") return {200, "image/png", png_string(io::residual_to_image(pred.rm_d))};
  if (image == "composite") {
    if (!composite) return error(422, "composite unavailable: " + composite_error);
    return {200, "image/png", png_string(*composite)};
  }

  json out = {{"sample_id", g->id},
              {"s_ref", synth::to_json(g->s_ref)},
              {"s_try", synth::to_json(s_try)},
              {"m_d", png_b64(io::mask_to_image(pred.m_d))},
              {"rm_d", png_b64(io::residual_to_image(pred.rm_d))},
              {"threshold", threshold},
              {"torso_area", area(split.torso)},
              {"sleeve_area", area(split.sleeves)},
              {"mask_area", area(bin)},
              {"mean_abs_rm_d", mean_abs},
              {"sem_vs_ref", sem},
              {"composite", composite ? json(png_b64(*composite)) : json(nullptr)},
              {"overlay", overlay ? json(png_b64(*overlay)) : json(nullptr)}};
  if (!composite_error.empty()) out["composite_error"] = composite_error;
  return json_response(200, out);
}

// ---- HTTP binding ----

struct HttpServer::Impl {
  Impl(const Service& s, ServeOptions o) : service(s), options(std::move(o)) {}
  const Service& service;
  ServeOptions options;
  httplib::Server server;
  std::thread thread;
};

HttpServer::HttpServer(const Service& service, ServeOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
  auto& svr = impl_->server;
  const Service& s = impl_->service;
  const auto send = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  svr.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  svr.Post("/api/deform", [&s, send](const httplib::Request& req, httplib::Response& res) {
    send(res, s.deform(req.body, req.has_param("image") ? req.get_param_value("image") : ""));
  });
  svr.Get("/api/samples", [&s, send](const httplib::Request&, httplib::Response& res) { send(res, s.samples()); });
  svr.Get(R"(/api/samples/([^/]+)/thumbnail\.png)", [&s, send](const httplib::Request& req, httplib::Response& res) {
    send(res, s.thumbnail(req.matches[1]));
  });
  svr.Get("/api/model/info", [&s, send](const httplib::Request&, httplib::Response& res) { send(res, s.model_info()); });
  svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", what}}.dump(), "application/json");
  });
  if (!impl_->options.static_dir.empty() && !svr.set_mount_point("/", impl_->options.static_dir.string()))
    throw DataError("static directory " + impl_->options.static_dir.string() + " does not exist");
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start() {
  auto& svr = impl_->server;
  int port = impl_->options.port;
  if (port == 0) {
    port = svr.bind_to_any_port(impl_->options.host);
    if (port < 0) throw DataError("cannot bind " + impl_->options.host);
  } else if (!svr.bind_to_port(impl_->options.host, port)) {
    throw DataError("cannot bind " + impl_->options.host + ":" + std::to_string(port));
  }
  impl_->thread = std::thread([&svr] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  return port;
}

void HttpServer::wait() {
  while (impl_->server.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace sizefit::service
