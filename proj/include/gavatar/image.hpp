#pragma once

#include <gavatar/common.hpp>

#include <cctype>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace gavatar {

// Interleaved float image, row-major, values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, fill) {}

  double& at(int x, int y, int c = 0) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  double at(int x, int y, int c = 0) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const { return width == o.width && height == o.height && channels == o.channels; }
};

namespace detail {

inline uint8_t to_byte(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline std::vector<uint8_t> encode_netpbm(const Image& img, const char* magic) {
  std::string header = std::string(magic) + "\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.size());
  for (double v : img.data) out.push_back(to_byte(v));
  return out;
}

inline Image decode_netpbm(std::span<const uint8_t> bytes, const char* magic, int channels) {
  size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    return tok;
  };
  if (next_token() != magic) throw CorruptionError(std::string("expected ") + magic + " image");
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (maxval != 255 || w < 1 || h < 1) throw CorruptionError("unsupported netpbm image");
  ++pos;  // single whitespace before the raster
  const size_t n = static_cast<size_t>(w) * h * channels;
  if (bytes.size() - pos != n) throw CorruptionError("netpbm raster length mismatch");
  Image img(w, h, channels);
  for (size_t i = 0; i < n; ++i) img.data[i] = bytes[pos + i] / 255.0;
  return img;
}

}  // namespace detail

inline void write_ppm(const Image& img, const std::string& path) {
  if (img.channels != 3) throw ShapeError("write_ppm: image must have 3 channels");
  write_file(path, detail::encode_netpbm(img, "P6"));
}
inline void write_pgm(const Image& img, const std::string& path) {
  if (img.channels != 1) throw ShapeError("write_pgm: image must have 1 channel");
  write_file(path, detail::encode_netpbm(img, "P5"));
}
inline Image read_ppm(const std::string& path) { return detail::decode_netpbm(read_file(path), "P6", 3); }
inline Image read_pgm(const std::string& path) { return detail::decode_netpbm(read_file(path), "P5", 1); }

// Rounds every value onto the 8-bit grid used by the image files.
inline Image quantize_8bit(Image img) {
  for (double& v : img.data) v = detail::to_byte(v) / 255.0;
  return img;
}

}  // namespace gavatar
