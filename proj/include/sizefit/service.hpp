#pragma once

// HTTP inference server for the size explorer. Request handling lives in
// Service so it can be exercised without sockets; serve() binds it to
// cpp-httplib.
//
//   POST /api/deform                     -> JSON with base64 PNGs
//   POST /api/deform?image=m_d|rm_d|composite -> raw PNG
//   GET  /api/samples                    -> gallery listing
//   GET  /api/samples/<id>/thumbnail.png -> PNG
//   GET  /api/model/info                 -> checkpoint summary
//   GET  /...                            -> static UI bundle, if configured

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "sizefit/pipeline.hpp"

namespace sizefit::service {

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// One person wearing one garment at its reference size, with the
/// ground-truth try-on masks available for other sizes.
struct GalleryEntry {
  std::string id;
  int garment_id = -1;  // -1 for uploaded bundles
  tensor::Tensor person;
  Mask m_ref;
  PartLabelMap parts_ref;
  synth::SizeVector s_ref;
  std::string ref_label;
  struct Truth {
    std::string label;
    synth::SizeVector size;
    Mask mask;
    PartLabelMap parts;
  };
  std::vector<Truth> truths;
};

/// Groups a dataset's pairs by reference image, sorted by id. splits empty
/// means every split in the manifest.
std::vector<GalleryEntry> load_gallery(const std::filesystem::path& root, const std::vector<std::string>& splits = {},
                                       std::size_t limit = 0);

class Service {
 public:
  Service() = default;
  Service(pipeline::LoadedModel model, std::vector<GalleryEntry> gallery);

  bool ready() const { return model_ != nullptr; }

  Response deform(const std::string& request_body, const std::string& image = "") const;
  Response samples() const;
  Response thumbnail(const std::string& id) const;
  Response model_info() const;

 private:
  const GalleryEntry* find(const std::string& id) const;

  std::shared_ptr<const pipeline::LoadedModel> model_;
  std::vector<GalleryEntry> gallery_;
  nlohmann::json ranges_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path static_dir;  // empty: no static files
};

/// Background HTTP listener. port 0 picks a free port.
class HttpServer {
 public:
  HttpServer(const Service& service, ServeOptions options);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds and starts serving on a background thread. Returns the bound
  /// port; DataError if the address cannot be bound.
  int start();
  /// Blocks until stop() is called from another thread.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Base64 without line breaks.
std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace sizefit::service
