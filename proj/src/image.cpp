#include "cstbir/image.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cstbir/error.hpp"

namespace cstbir {
namespace {

cv::Mat to_mat(const GrayImage& image) {
  cv::Mat mat(image.height, image.width, CV_32FC1);
  std::copy(image.pixels.begin(), image.pixels.end(), mat.ptr<float>());
  return mat;
}

cv::Mat to_mat(const RgbImage& image) {
  cv::Mat mat(image.height, image.width, CV_8UC3);
  std::copy(image.data.begin(), image.data.end(), mat.ptr<std::uint8_t>());
  return mat;
}

GrayImage gray_from_mat(const cv::Mat& mat) {
  if (mat.depth() == CV_8U) {
    // Same byte -> float mapping as from_bytes, so decoded and in-memory
    // rasters compare bit-exactly.
    const cv::Mat c = mat.isContinuous() ? mat : mat.clone();
    return from_bytes(c.rows, c.cols, {c.ptr<std::uint8_t>(), c.ptr<std::uint8_t>() + c.total()});
  }
  cv::Mat f;
  mat.convertTo(f, CV_32F);
  if (!f.isContinuous()) f = f.clone();
  GrayImage out(f.rows, f.cols);
  std::copy(f.ptr<float>(), f.ptr<float>() + out.pixels.size(), out.pixels.begin());
  return out;
}

RgbImage rgb_from_bgr(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  RgbImage out(rgb.rows, rgb.cols);
  std::copy(rgb.ptr<std::uint8_t>(), rgb.ptr<std::uint8_t>() + out.data.size(), out.data.begin());
  return out;
}

// PNG settings fixed so encoded bytes are reproducible.
const std::vector<int> kPngParams = {cv::IMWRITE_PNG_COMPRESSION, 6};

}  // namespace

GrayImage resize(const GrayImage& image, int height, int width) {
  if (image.height == height && image.width == width) return image;
  require(!image.empty() && height > 0 && width > 0, ErrorCode::invalid_argument,
          "resize: empty image or target size");
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(width, height), 0, 0, cv::INTER_AREA);
  auto result = gray_from_mat(out);
  for (auto& v : result.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return result;
}

RgbImage resize(const RgbImage& image, int height, int width) {
  if (image.height == height && image.width == width) return image;
  require(!image.data.empty() && height > 0 && width > 0, ErrorCode::invalid_argument,
          "resize: empty image or target size");
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(width, height), 0, 0, cv::INTER_AREA);
  RgbImage result(height, width);
  std::copy(out.ptr<std::uint8_t>(), out.ptr<std::uint8_t>() + result.data.size(),
            result.data.begin());
  return result;
}

std::vector<std::uint8_t> to_bytes(const GrayImage& image) {
  std::vector<std::uint8_t> bytes(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), [](float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  });
  return bytes;
}

GrayImage from_bytes(int height, int width, const std::vector<std::uint8_t>& bytes) {
  require(bytes.size() == static_cast<std::size_t>(height) * width, ErrorCode::shape_mismatch,
          "from_bytes: size mismatch");
  GrayImage image(height, width);
  std::transform(bytes.begin(), bytes.end(), image.pixels.begin(),
                 [](std::uint8_t b) { return static_cast<float>(b) / 255.0f; });
  return image;
}

std::vector<std::uint8_t> encode_png(const GrayImage& image) {
  auto bytes = to_bytes(image);
  cv::Mat mat(image.height, image.width, CV_8UC1, bytes.data());
  std::vector<std::uint8_t> out;
  require(cv::imencode(".png", mat, out, kPngParams), ErrorCode::io, "png encode failed");
  return out;
}

void write_png(const std::filesystem::path& path, const GrayImage& image) {
  auto bytes = to_bytes(image);
  cv::Mat mat(image.height, image.width, CV_8UC1, bytes.data());
  require(cv::imwrite(path.string(), mat, kPngParams), ErrorCode::io,
          "cannot write " + path.string());
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  cv::Mat bgr;
  cv::cvtColor(to_mat(image), bgr, cv::COLOR_RGB2BGR);
  require(cv::imwrite(path.string(), bgr, kPngParams), ErrorCode::io,
          "cannot write " + path.string());
}

GrayImage read_gray(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  require(!mat.empty(), ErrorCode::io, "cannot read image " + path.string());
  return gray_from_mat(mat);
}

RgbImage read_rgb(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  require(!mat.empty(), ErrorCode::io, "cannot read image " + path.string());
  require(mat.depth() == CV_8U, ErrorCode::invalid_argument,
          "expected 8-bit image: " + path.string());
  if (mat.channels() == 4) {
    cv::cvtColor(mat, mat, cv::COLOR_BGRA2BGR);
  }
  require(mat.channels() == 3, ErrorCode::invalid_argument, "non-RGB image: " + path.string());
  return rgb_from_bgr(mat);
}

GrayImage decode_gray(const std::vector<std::uint8_t>& encoded) {
  require(!encoded.empty(), ErrorCode::invalid_argument, "empty image payload");
  cv::Mat mat = cv::imdecode(encoded, cv::IMREAD_GRAYSCALE);
  require(!mat.empty(), ErrorCode::invalid_argument, "undecodable image payload");
  return gray_from_mat(mat);
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    std::uint32_t n = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    for (int s = 18; s >= 0; s -= 6) out += kAlphabet[(n >> s) & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t n = bytes[i] << 16;
    if (i + 1 < bytes.size()) n |= bytes[i + 1] << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += (i + 1 < bytes.size()) ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::array<int, 256> table;
  table.fill(-1);
  for (int i = 0; i < 64; ++i) table[static_cast<std::uint8_t>(kAlphabet[i])] = i;
  // Accept the URL-safe alphabet too.
  table['-'] = 62;
  table['_'] = 63;

  std::string_view body = text;
  if (auto comma = body.find(','); body.starts_with("data:") && comma != std::string_view::npos) {
    body.remove_prefix(comma + 1);
  }
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : body) {
    if (c == '=' || std::isspace(static_cast<unsigned char>(c))) continue;
    int v = table[static_cast<std::uint8_t>(c)];
    require(v >= 0, ErrorCode::invalid_argument, "invalid base64 payload");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

}  // namespace cstbir
