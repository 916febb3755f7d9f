#include <filesystem>

#include "doctest.h"
#include "httplib.h"

#include "sizefit/errors.hpp"
#include "sizefit/image_io.hpp"
#include "sizefit/service.hpp"

using namespace sizefit;
using namespace sizefit::service;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  fs::path root;
  std::vector<GalleryEntry> gallery;
  pipeline::Checkpoint checkpoint;
};

// One small dataset and one briefly trained model shared by every case.
const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture fx;
    fx.root = fs::temp_directory_path() / "sizefit_test_service";
    fs::remove_all(fx.root);
    synth::DatasetConfig dc;
    dc.n_bodies = 3;
    dc.n_poses = 1;
    dc.n_garments = 3;
    dc.sizes_per_garment = 3;
    synth::build_dataset(dc, fx.root);

    pipeline::TrainConfig tc;
    tc.model.sfe_hidden = {8, 8};
    tc.model.encoder_channels = {4, 8, 8, 8};
    tc.model.decoder_channels = {8, 8, 4, 4};
    tc.model.refiner_channels = 4;
    tc.discriminator.channels = {4, 4, 4};
    tc.epochs = 1;
    tc.max_train_pairs = 4;
    tc.dataset_root = fx.root.string();
    tc.val_split = "";
    fx.checkpoint = pipeline::train(tc).best;
    fx.gallery = load_gallery(fx.root, {}, 5);
    return fx;
  }();
  return f;
}

Service make_service() { return Service(pipeline::restore_model(fixture().checkpoint), fixture().gallery); }

json body(const Response& r) { return json::parse(r.body); }

json deform_request(const GalleryEntry& g, const synth::SizeVector& s) {
  return {{"sample_id", g.id}, {"s_try", synth::to_json(s)}};
}

}  // namespace

TEST_CASE("gallery groups pairs by reference rendering") {
  const auto& g = fixture().gallery;
  REQUIRE(g.size() == 5);
  for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i - 1].id < g[i].id);
  for (const auto& e : g) {
    CHECK(e.garment_id >= 0);
    REQUIRE(!e.truths.empty());
    bool has_ref = false;
    for (const auto& t : e.truths) has_ref |= t.label == e.ref_label;
    CHECK(has_ref);
  }
  CHECK(load_gallery(fixture().root, {}, 0).size() >= 5);
}

TEST_CASE("an empty service answers 503") {
  const Service s;
  CHECK(!s.ready());
  CHECK(s.samples().status == 503);
  CHECK(s.model_info().status == 503);
  CHECK(s.deform("{}").status == 503);
}

TEST_CASE("samples and model info") {
  const Service s = make_service();
  const Response r = s.samples();
  CHECK(r.status == 200);
  const json j = body(r);
  REQUIRE(j["samples"].size() == 5);
  CHECK(j["samples"][0]["presets"].contains("XL"));
  CHECK(j["size_ranges"].contains("body_width"));
  CHECK(s.samples().body == r.body);

  const json info = body(s.model_info());
  CHECK(info["config_hash"] == fixture().checkpoint.hash());
  CHECK(info["canvas"] == 128);
  CHECK(info["gallery_size"] == 5);

  const Response thumb = s.thumbnail(fixture().gallery[0].id);
  CHECK(thumb.status == 200);
  CHECK(thumb.content_type == "image/png");
  CHECK(s.thumbnail("nope").status == 404);
}

TEST_CASE("deform returns masks, areas and a score against the stored truth") {
  const Service s = make_service();
  const GalleryEntry& g = fixture().gallery[0];
  const Response r = s.deform(deform_request(g, g.s_ref).dump());
  REQUIRE(r.status == 200);
  const json j = body(r);
  const io::Image8 m_d = io::decode_png(base64_decode(j["m_d"]));
  CHECK(m_d.width == 128);
  CHECK(m_d.height == 128);
  CHECK(j["mask_area"].get<double>() == j["torso_area"].get<double>() + j["sleeve_area"].get<double>());
  CHECK(!j["sem_vs_ref"].is_null());
  CHECK(j["composite"].is_null());

  // Byte-identical on repeat.
  CHECK(s.deform(deform_request(g, g.s_ref).dump()).body == r.body);

  json with_images = deform_request(g, synth::garment_size(g.garment_id, synth::SizeLabel::L));
  with_images["options"] = {{"return_overlay", true}, {"return_warp", true}};
  const json k = body(s.deform(with_images.dump()));
  CHECK(k["overlay"].is_string());
  CHECK((k["composite"].is_string() || k.contains("composite_error")));
}

TEST_CASE("deform raw image responses") {
  const Service s = make_service();
  const GalleryEntry& g = fixture().gallery[1];
  const std::string req = deform_request(g, g.s_ref).dump();
  const Response m = s.deform(req, "m_d");
  CHECK(m.status == 200);
  CHECK(m.content_type == "image/png");
  const auto decoded = io::decode_png(std::vector<std::uint8_t>(m.body.begin(), m.body.end()));
  CHECK(decoded.channels == 1);
  CHECK(s.deform(req, "rm_d").status == 200);
  const int c = s.deform(req, "composite").status;
  CHECK((c == 200 || c == 422));
  CHECK(s.deform(req, "depth").status == 400);
}

TEST_CASE("deform rejects bad requests") {
  const Service s = make_service();
  const GalleryEntry& g = fixture().gallery[0];
  CHECK(s.deform("not json").status == 400);
  CHECK(s.deform("[1, 2]").status == 400);
  CHECK(s.deform(R"({"s_try": {}})").status == 400);

  json unknown = deform_request(g, g.s_ref);
  unknown["sample_id"] = "missing";
  CHECK(s.deform(unknown.dump()).status == 404);

  synth::SizeVector neg = g.s_ref;
  neg.sleeve_length = -5;
  const Response bad = s.deform(deform_request(g, neg).dump());
  CHECK(bad.status == 400);
  const json err = body(bad);
  REQUIRE(err["fields"].size() == 1);
  CHECK(err["fields"][0].get<std::string>().rfind("sleeve_length", 0) == 0);

  json threshold = deform_request(g, g.s_ref);
  threshold["options"] = {{"binarize_threshold", 1.0}};
  CHECK(s.deform(threshold.dump()).status == 400);
}

TEST_CASE("uploaded bundles behave like gallery samples") {
  const Service s = make_service();
  const GalleryEntry& g = fixture().gallery[0];
  json req = {{"bundle",
               {{"image", base64_encode(io::encode_png(io::tensor_to_rgb(g.person)))},
                {"mask", "data:image/png;base64," + base64_encode(io::encode_png(io::mask_to_image(g.m_ref)))},
                {"parts", base64_encode(io::encode_png(io::parts_to_image(g.parts_ref)))},
                {"s_ref", synth::to_json(g.s_ref)}}},
              {"s_try", synth::to_json(g.s_ref)}};
  const Response up = s.deform(req.dump());
  REQUIRE(up.status == 200);
  const json a = body(up);
  const json b = body(s.deform(deform_request(g, g.s_ref).dump()));
  CHECK(a["m_d"] == b["m_d"]);
  CHECK(a["sample_id"] == "upload");

  req["bundle"]["mask"] = base64_encode(io::encode_png(io::Image8{4, 4, 1, std::vector<std::uint8_t>(16)}));
  CHECK(s.deform(req.dump()).status == 400);
}

TEST_CASE("base64 round trip") {
  for (std::size_t n = 0; n < 10; ++n) {
    std::vector<std::uint8_t> bytes(n);
    for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<std::uint8_t>(i * 37 + 11);
    CHECK(base64_decode(base64_encode(bytes)) == bytes);
  }
  CHECK(base64_encode({'M', 'a', 'n'}) == "TWFu");
  CHECK_THROWS(base64_decode("@@@@"));
}

TEST_CASE("http round trip") {
  const Service s = make_service();
  HttpServer server(s, ServeOptions{"127.0.0.1", 0, {}});
  const int port = server.start();
  REQUIRE(port > 0);
  httplib::Client client("127.0.0.1", port);
  const auto info = client.Get("/api/model/info");
  REQUIRE(info);
  CHECK(info->status == 200);
  CHECK(json::parse(info->body)["config_hash"] == fixture().checkpoint.hash());
  CHECK(info->get_header_value("Access-Control-Allow-Origin") == "*");

  const GalleryEntry& g = fixture().gallery[0];
  const auto r = client.Post("/api/deform", deform_request(g, g.s_ref).dump(), "application/json");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(r->body == s.deform(deform_request(g, g.s_ref).dump()).body);

  const auto png = client.Post("/api/deform?image=m_d", deform_request(g, g.s_ref).dump(), "application/json");
  REQUIRE(png);
  CHECK(png->get_header_value("Content-Type") == "image/png");

  const auto thumb = client.Get("/api/samples/" + g.id + "/thumbnail.png");
  REQUIRE(thumb);
  CHECK(thumb->status == 200);
  const auto missing = client.Get("/api/samples/zzz/thumbnail.png");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  server.stop();
}
