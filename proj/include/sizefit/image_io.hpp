#pragma once

// 8-bit image files for masks, residuals, part labels and person images.
//
// Encodings:
//   mask      gray, v in [0,1]  <-> round(255 v)
//   residual  gray, r in [-1,1] <-> 128 + round(128 r) for r <= 0,
//                                   128 + round(127 r) for r > 0
//             so -1 -> 0, 0 -> 128, +1 -> 255
//   parts     gray, raw PartLabel id (0..5)
//   image     RGB, channel c value v in [0,1] <-> round(255 v)
//
// PGM files are binary P5 with maxval 255. PNG files are written with
// libpng at default compression and no timestamps, so output bytes depend
// only on pixel content.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sizefit/maskops.hpp"
#include "sizefit/tensor.hpp"

namespace sizefit::io {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;  // interleaved, row-major

  friend bool operator==(const Image8&, const Image8&) = default;
};

void write_pgm(const std::filesystem::path& path, const Image8& img);
Image8 read_pgm(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image8& img);
Image8 read_png(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const Image8& img);
Image8 decode_png(const std::vector<std::uint8_t>& bytes);

/// Dispatches on extension (.pgm or .png).
void write_image(const std::filesystem::path& path, const Image8& img);
Image8 read_image(const std::filesystem::path& path);

std::uint8_t encode_unit(double v);
double decode_unit(std::uint8_t v);
std::uint8_t encode_signed(double r);
double decode_signed(std::uint8_t v);

Image8 mask_to_image(const Mask& m);
Mask image_to_mask(const Image8& img);
Image8 residual_to_image(const ResidualMask& r);
ResidualMask image_to_residual(const Image8& img);
Image8 parts_to_image(const PartLabelMap& p);
PartLabelMap image_to_parts(const Image8& img);

/// 3 x H x W tensor in [0,1] to RGB (values clamped before encoding).
Image8 tensor_to_rgb(const tensor::Tensor& t);
tensor::Tensor rgb_to_tensor(const Image8& img);

}  // namespace sizefit::io
