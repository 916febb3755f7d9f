#include <filesystem>

#include "doctest.h"

#include "sizefit/errors.hpp"
#include "sizefit/image_io.hpp"
#include "sizefit/rng.hpp"

using namespace sizefit;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "sizefit_test_image_io";
  fs::create_directories(dir);
  return dir / name;
}

io::Image8 random_image(int w, int h, int channels, Rng& rng) {
  io::Image8 img{w, h, channels, {}};
  img.pixels.resize(static_cast<std::size_t>(w) * h * channels);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

}  // namespace

TEST_CASE("signed encoding pins the endpoints") {
  CHECK(io::encode_signed(-1.0) == 0);
  CHECK(io::encode_signed(0.0) == 128);
  CHECK(io::encode_signed(1.0) == 255);
  for (int v = 0; v < 256; ++v) {
    const auto b = static_cast<std::uint8_t>(v);
    CHECK(io::encode_signed(io::decode_signed(b)) == b);
    CHECK(io::encode_unit(io::decode_unit(b)) == b);
  }
}

TEST_CASE("png and pgm files round trip") {
  Rng rng(9);
  const auto gray = random_image(13, 7, 1, rng);
  const auto rgb = random_image(5, 11, 3, rng);
  io::write_image(scratch("g.png"), gray);
  io::write_image(scratch("g.pgm"), gray);
  io::write_image(scratch("c.png"), rgb);
  CHECK(io::read_image(scratch("g.png")) == gray);
  CHECK(io::read_image(scratch("g.pgm")) == gray);
  CHECK(io::read_image(scratch("c.png")) == rgb);
  CHECK(io::decode_png(io::encode_png(rgb)) == rgb);
}

TEST_CASE("png encoding is deterministic") {
  Rng rng(10);
  const auto img = random_image(32, 32, 1, rng);
  CHECK(io::encode_png(img) == io::encode_png(img));
}

TEST_CASE("binary masks, residuals and parts survive the 8-bit encodings") {
  Mask m(2, 2, std::vector<double>{0.0, 1.0, 1.0, 0.0});
  CHECK(io::image_to_mask(io::mask_to_image(m)) == m);
  ResidualMask r(1, 3, std::vector<double>{-1.0, 0.0, 1.0});
  CHECK(io::image_to_residual(io::residual_to_image(r)) == r);
  PartLabelMap p(2, 3);
  p.at(0, 1) = PartLabel::torso;
  p.at(1, 2) = PartLabel::upper_leg;
  CHECK(io::image_to_parts(io::parts_to_image(p)) == p);
}

TEST_CASE("bad files are reported as data errors") {
  CHECK_THROWS_AS(io::read_image(scratch("missing.png")), DataError);
  CHECK_THROWS_AS(io::decode_png({1, 2, 3, 4}), DataError);
  CHECK_THROWS_AS(io::write_image(scratch("x.bmp"), io::Image8{1, 1, 1, {0}}), UsageError);
  io::Image8 labels{1, 1, 1, {9}};
  CHECK_THROWS_AS(io::image_to_parts(labels), DataError);
}
