#include "sizefit/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sizefit/errors.hpp"

namespace sizefit::io {

namespace {

void check_image(const Image8& img) {
  if (img.width <= 0 || img.height <= 0 || (img.channels != 1 && img.channels != 3) ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw ShapeError("malformed Image8 (" + std::to_string(img.width) + "x" + std::to_string(img.height) + "x" +
                     std::to_string(img.channels) + ", " + std::to_string(img.pixels.size()) + " bytes)");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

struct PngReadState {
  const std::vector<std::uint8_t>* bytes;
  std::size_t offset;
};

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

// ---- PGM ----

void write_pgm(const std::filesystem::path& path, const Image8& img) {
  check_image(img);
  if (img.channels != 1) throw UsageError("PGM holds single-channel images only");
  std::ostringstream header;
  header << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  const std::string h = header.str();
  std::vector<std::uint8_t> bytes(h.begin(), h.end());
  bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
  write_file(path, bytes);
}

Image8 read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t pos = 0;
  auto next_token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    return tok;
  };
  if (next_token() != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
  Image8 img;
  try {
    img.width = std::stoi(next_token());
    img.height = std::stoi(next_token());
    if (std::stoi(next_token()) != 255) throw DataError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw DataError(path.string() + ": malformed PGM header");
  }
  ++pos;  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (img.width <= 0 || img.height <= 0 || pos + n > bytes.size())
    throw DataError(path.string() + ": truncated PGM data");
  img.channels = 1;
  img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
  return img;
}

// ---- PNG ----

std::vector<std::uint8_t> encode_png(const Image8& img) {
  check_image(img);
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) throw DataError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw DataError("PNG encode failed: " + err);
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t len) {
        auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        v->insert(v->end(), data, data + len);
      },
      [](png_structp) {});
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y) * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

Image8 decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw DataError("not a PNG stream");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) throw DataError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  PngReadState state{&bytes, 0};
  Image8 img;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    throw DataError("PNG decode failed: " + err);
  }
  png_set_read_fn(png, &state, [](png_structp p, png_bytep data, png_size_t len) {
    auto* s = static_cast<PngReadState*>(png_get_io_ptr(p));
    if (s->offset + len > s->bytes->size()) png_error(p, "truncated PNG stream");
    std::memcpy(data, s->bytes->data() + s->offset, len);
    s->offset += len;
  });
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = static_cast<int>(png_get_channels(png, info));
  if (img.channels != 1 && img.channels != 3) png_error(png, "unsupported channel count");
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y) * stride, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const Image8& img) { write_file(path, encode_png(img)); }

Image8 read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

void write_image(const std::filesystem::path& path, const Image8& img) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return write_pgm(path, img);
  if (ext == ".png") return write_png(path, img);
  throw UsageError("unsupported image extension '" + ext + "' (use .pgm or .png)");
}

Image8 read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return read_pgm(path);
  if (ext == ".png") return read_png(path);
  throw UsageError("unsupported image extension '" + ext + "' (use .pgm or .png)");
}

// ---- value encodings ----

std::uint8_t encode_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

double decode_unit(std::uint8_t v) { return static_cast<double>(v) / 255.0; }

std::uint8_t encode_signed(double r) {
  r = std::clamp(r, -1.0, 1.0);
  const long q = r <= 0 ? 128 + std::lround(128.0 * r) : 128 + std::lround(127.0 * r);
  return static_cast<std::uint8_t>(q);
}

double decode_signed(std::uint8_t v) {
  return v < 128 ? (static_cast<double>(v) - 128.0) / 128.0 : (static_cast<double>(v) - 128.0) / 127.0;
}

namespace {

Image8 gray(int w, int h) {
  Image8 img;
  img.width = w;
  img.height = h;
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(w) * h);
  return img;
}

void require_gray(const Image8& img, const char* what) {
  check_image(img);
  if (img.channels != 1) throw DataError(std::string(what) + " image must be single-channel");
}

}  // namespace

Image8 mask_to_image(const Mask& m) {
  Image8 img = gray(m.width(), m.height());
  for (std::size_t i = 0; i < m.size(); ++i) img.pixels[i] = encode_unit(m.values()[i]);
  return img;
}

Mask image_to_mask(const Image8& img) {
  require_gray(img, "mask");
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = decode_unit(img.pixels[i]);
  return Mask(img.height, img.width, std::move(v));
}

Image8 residual_to_image(const ResidualMask& r) {
  Image8 img = gray(r.width(), r.height());
  for (std::size_t i = 0; i < r.size(); ++i) img.pixels[i] = encode_signed(r.values()[i]);
  return img;
}

ResidualMask image_to_residual(const Image8& img) {
  require_gray(img, "residual");
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = decode_signed(img.pixels[i]);
  return ResidualMask(img.height, img.width, std::move(v));
}

Image8 parts_to_image(const PartLabelMap& p) {
  Image8 img = gray(p.width(), p.height());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(p.labels()[i]);
  return img;
}

PartLabelMap image_to_parts(const Image8& img) {
  require_gray(img, "parts");
  PartLabelMap p(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const std::uint8_t v = img.pixels[static_cast<std::size_t>(y) * img.width + x];
      if (v >= kPartLabelCount) throw DataError("part label " + std::to_string(v) + " out of range");
      p.at(y, x) = static_cast<PartLabel>(v);
    }
  }
  return p;
}

Image8 tensor_to_rgb(const tensor::Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("tensor_to_rgb expects 3 x H x W, got " + tensor::to_string(t.shape()));
  Image8 img;
  img.height = static_cast<int>(t.dim(1));
  img.width = static_cast<int>(t.dim(2));
  img.channels = 3;
  const std::size_t plane = t.dim(1) * t.dim(2);
  img.pixels.resize(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = encode_unit(t[c * plane + i]);
  return img;
}

tensor::Tensor rgb_to_tensor(const Image8& img) {
  check_image(img);
  if (img.channels != 3) throw DataError("person image must be RGB");
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  tensor::Tensor t({3, static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width)});
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) t[c * plane + i] = decode_unit(img.pixels[i * 3 + c]);
  return t;
}

}  // namespace sizefit::io
