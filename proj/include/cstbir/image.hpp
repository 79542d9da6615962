#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cstbir {

// Single-channel raster, row-major, intensities in [0,1].
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  GrayImage() = default;
  GrayImage(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool empty() const { return pixels.empty(); }
  bool operator==(const GrayImage&) const = default;
};

// Interleaved 8-bit RGB raster, row-major HWC.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, 0) {}

  std::uint8_t* px(int y, int x) { return &data[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* px(int y, int x) const {
    return &data[(static_cast<std::size_t>(y) * width + x) * 3];
  }
  bool operator==(const RgbImage&) const = default;
};

// Area-averaging resize (box filter); used for both sketches and images so
// every ingest path shares one resampling rule.
GrayImage resize(const GrayImage& image, int height, int width);
RgbImage resize(const RgbImage& image, int height, int width);

// 8-bit quantization round trip used when sketches are written to disk.
std::vector<std::uint8_t> to_bytes(const GrayImage& image);
GrayImage from_bytes(int height, int width, const std::vector<std::uint8_t>& bytes);

void write_png(const std::filesystem::path& path, const GrayImage& image);
void write_png(const std::filesystem::path& path, const RgbImage& image);
std::vector<std::uint8_t> encode_png(const GrayImage& image);

GrayImage read_gray(const std::filesystem::path& path);
// Accepts PNG or JPEG; grayscale inputs are rejected (non-RGB).
RgbImage read_rgb(const std::filesystem::path& path);
GrayImage decode_gray(const std::vector<std::uint8_t>& encoded);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace cstbir
