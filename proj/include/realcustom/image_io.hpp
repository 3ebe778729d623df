#pragma once

// Binary PPM (P6) images and PGM (P5) masks, 8 bits per sample.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "realcustom/checkpoint.hpp"
#include "realcustom/tensor.hpp"

namespace realcustom {

inline std::uint8_t to_byte(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(255.0 * v + 0.5));
}

/// Mask byte: round(255·v), except that a positive value never rounds down
/// to 0, so the stored support equals the mask support.
inline std::uint8_t mask_byte(double v) {
  const auto b = to_byte(v);
  return (v > 0.0 && b == 0) ? std::uint8_t{1} : b;
}

namespace detail {

struct Netpbm {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::vector<std::uint8_t> pixels;
};

inline Netpbm parse_netpbm(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& m) -> void { throw FormatError(path + ": " + m); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#')
      t.push_back(static_cast<char>(bytes[pos++]));
    if (t.empty()) fail("truncated header");
    return t;
  };
  auto number = [&] {
    const auto t = token();
    for (char c : t)
      if (!std::isdigit(static_cast<unsigned char>(c))) fail("bad header field '" + t + "'");
    return static_cast<std::size_t>(std::stoul(t));
  };
  Netpbm img;
  img.magic = token();
  img.width = number();
  img.height = number();
  img.maxval = number();
  if (img.width == 0 || img.height == 0 || img.maxval == 0 || img.maxval > 255) {
    fail("unsupported dimensions or maxval");
  }
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("missing header terminator");
  ++pos;
  const std::size_t channels = img.magic == "P6" ? 3 : 1;
  const std::size_t n = img.width * img.height * channels;
  if (bytes.size() - pos < n) fail("pixel data truncated");
  img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
  return img;
}

inline std::vector<std::uint8_t> netpbm_header(const char* magic, std::size_t w, std::size_t h) {
  const std::string s = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  return {s.begin(), s.end()};
}

}  // namespace detail

/// [3 x H x W] image in [0, 1] -> P6 bytes.
inline std::vector<std::uint8_t> encode_ppm(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("PPM needs [3 x H x W], got " + shape_string(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  auto out = detail::netpbm_header("P6", w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.push_back(to_byte(img.at(c, y, x)));
  return out;
}

inline Tensor decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& path = "<ppm>") {
  const auto p = detail::parse_netpbm(bytes, path);
  if (p.magic != "P6") throw FormatError(path + ": expected binary PPM (P6), got " + p.magic);
  Tensor img({3, p.height, p.width});
  const double scale = 1.0 / static_cast<double>(p.maxval);
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(p.pixels[(y * p.width + x) * 3 + c] * scale);
  return img;
}

/// [G x G] mask in [0, 1] -> P5 bytes.
inline std::vector<std::uint8_t> encode_pgm(const Tensor& mask) {
  require_rank2(mask, "PGM");
  auto out = detail::netpbm_header("P5", mask.dim(1), mask.dim(0));
  for (float v : mask.data()) out.push_back(mask_byte(v));
  return out;
}

/// P5 bytes -> raw byte values as a [H x W] tensor (0..255).
inline Tensor decode_pgm_bytes(const std::vector<std::uint8_t>& bytes, const std::string& path = "<pgm>") {
  const auto p = detail::parse_netpbm(bytes, path);
  if (p.magic != "P5") throw FormatError(path + ": expected binary PGM (P5), got " + p.magic);
  Tensor m({p.height, p.width});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(p.pixels[i]);
  return m;
}

inline void write_ppm(const std::string& path, const Tensor& img) { write_file_bytes(path, encode_ppm(img)); }
inline Tensor read_ppm(const std::string& path) { return decode_ppm(read_file_bytes(path), path); }
inline void write_pgm(const std::string& path, const Tensor& m) { write_file_bytes(path, encode_pgm(m)); }
inline Tensor read_pgm_bytes(const std::string& path) { return decode_pgm_bytes(read_file_bytes(path), path); }

}  // namespace realcustom
