#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fpcnet/tensor.hpp"

namespace fpcnet {

// Binary netpbm I/O: P6 (RGB) and P5 (gray), maxval 255. Values map to [0, 1]
// by /255 on read and round(v * 255) with clamping on write.

namespace detail {

struct NetpbmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

inline NetpbmHeader parse_netpbm_header(const std::vector<unsigned char>& bytes, const std::string& path) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> void {
    throw data_error(path + ": " + why + " at byte offset " + std::to_string(pos));
  };
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
  auto number = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) fail(std::string("expected ") + what);
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) fail(std::string(what) + " too large");
      ++pos;
    }
    return v;
  };
  NetpbmHeader h;
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) fail("not a binary P5/P6 netpbm file");
  h.magic = std::string(bytes.begin(), bytes.begin() + 2);
  pos = 2;
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (h.width == 0 || h.height == 0) fail("zero image dimension");
  if (h.maxval != 255) fail("unsupported maxval " + std::to_string(h.maxval) + " (only 255)");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("expected a single whitespace after maxval");
  h.data_offset = pos + 1;
  return h;
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_netpbm(const std::filesystem::path& path, const char* magic, std::size_t w, std::size_t h,
                         const std::vector<unsigned char>& payload) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write " + path.string());
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw data_error("failed writing " + path.string());
}

}  // namespace detail

/// Reads P6 as a 3-channel tensor or P5 as a 1-channel tensor.
inline Tensor ppm_read(const std::filesystem::path& path) {
  const auto bytes = detail::read_bytes(path);
  const auto h = detail::parse_netpbm_header(bytes, path.string());
  const std::size_t C = h.magic == "P6" ? 3 : 1;
  const std::size_t expected = h.width * h.height * C;
  const std::size_t actual = bytes.size() - h.data_offset;
  if (actual < expected)
    throw data_error(path.string() + ": truncated payload, expected " + std::to_string(expected) +
                     " bytes after offset " + std::to_string(h.data_offset) + ", found " + std::to_string(actual));
  Tensor t({C, h.height, h.width});
  for (std::size_t y = 0; y < h.height; ++y)
    for (std::size_t x = 0; x < h.width; ++x)
      for (std::size_t c = 0; c < C; ++c)
        t.at(c, y, x) = bytes[h.data_offset + (y * h.width + x) * C + c] / 255.0;
  return t;
}

/// Writes a 3-channel tensor as P6 (clamped to [0, 1], 8-bit quantized).
inline void ppm_write(const Tensor& image, const std::filesystem::path& path) {
  if (image.channels() != 3) throw dimension_error("ppm_write needs 3 channels, got " + image.shape().str());
  std::vector<unsigned char> payload(image.size());
  for (std::size_t y = 0; y < image.height(); ++y)
    for (std::size_t x = 0; x < image.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c)
        payload[(y * image.width() + x) * 3 + c] = detail::quantize(image.at(c, y, x));
  detail::write_netpbm(path, "P6", image.width(), image.height(), payload);
}

/// Writes a single-channel field (e.g. a transmission map) as P5.
inline void pgm_write(const Tensor& field, const std::filesystem::path& path) {
  if (field.channels() != 1) throw dimension_error("pgm_write needs 1 channel, got " + field.shape().str());
  std::vector<unsigned char> payload(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) payload[i] = detail::quantize(field[i]);
  detail::write_netpbm(path, "P5", field.width(), field.height(), payload);
}

/// All *.ppm files in a directory, sorted by name.
inline std::vector<std::filesystem::path> list_ppm(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw data_error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace fpcnet
