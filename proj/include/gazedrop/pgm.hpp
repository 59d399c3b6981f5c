#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "gazedrop/error.hpp"
#include "gazedrop/gazefield.hpp"
#include "gazedrop/tensor.hpp"

namespace gazedrop {

// 8-bit grayscale raster as stored in a binary PGM (P5).
struct GrayImage {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> pixels;
};

// Round half up, clamp to [0, 255].
inline std::uint8_t quantize_unit(float v) {
  const double q = std::floor(static_cast<double>(v) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline GrayImage decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> GrayImage { throw ParseError("malformed PGM: " + what, pos); };

  auto skip_space_and_comments = [&] {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* field) -> std::int64_t {
    skip_space_and_comments();
    const std::size_t start = pos;
    std::int64_t v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1 << 24)) throw ParseError(std::string("PGM ") + field + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("expected PGM ") + field, start);
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') return fail("missing P5 magic");
  pos = 2;
  GrayImage img;
  img.width = read_uint("width");
  img.height = read_uint("height");
  const std::int64_t maxval = read_uint("maxval");
  if (img.width < 1 || img.height < 1) return fail("zero extent");
  if (maxval < 1 || maxval > 255) return fail("maxval must be in [1, 255] for 8-bit PGM");
  if (pos >= bytes.size()) return fail("missing header terminator");
  const char term = bytes[pos];
  if (term != ' ' && term != '\t' && term != '\n' && term != '\r') return fail("bad header terminator");
  ++pos;

  const auto n = static_cast<std::size_t>(img.width * img.height);
  if (bytes.size() - pos < n) {
    pos = bytes.size();
    return fail("truncated payload, expected " + std::to_string(n) + " bytes");
  }
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto raw = static_cast<std::uint8_t>(bytes[pos + i]);
    if (raw > maxval) {
      pos += i;
      return fail("pixel exceeds maxval");
    }
    img.pixels[i] = maxval == 255 ? raw
                                  : static_cast<std::uint8_t>(std::lround(raw * 255.0 / static_cast<double>(maxval)));
  }
  return img;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Writes through a sibling temp file and renames, so readers never observe a
// partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp.string() + ": " + ec.message());
}

inline GrayImage load_gray(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  try {
    return decode_pgm(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

// Values must lie in [0, 1].
inline GrayImage to_gray(std::int64_t h, std::int64_t w, std::span<const float> values) {
  GrayImage img{h, w, std::vector<std::uint8_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= 0.0f && values[i] <= 1.0f)) throw ParameterError("PGM values must lie in [0, 1]");
    img.pixels[i] = quantize_unit(values[i]);
  }
  return img;
}

// Stored max-normalized; a map already in [0, 1] with max 1 is unchanged.
inline void save_pgm(const GazeMap& g, const std::filesystem::path& path) {
  const GazeMap n = normalize_max(g);
  write_file_atomic(path, encode_pgm(to_gray(n.height(), n.width(), n.values())));
}

inline GazeMap load_pgm(const std::filesystem::path& path) {
  const GrayImage img = load_gray(path);
  std::vector<float> values(img.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return GazeMap(img.height, img.width, std::move(values));
}

// Grayscale frame of shape (H, W) or (H, W, 1) with values in [0, 1].
inline void save_frame_pgm(const Tensor& frame, const std::filesystem::path& path) {
  if (!(frame.rank() == 2 || (frame.rank() == 3 && frame.extent(2) == 1))) {
    throw ShapeError("frame must be (H, W) or (H, W, 1), got " + shape_string(frame.shape()));
  }
  write_file_atomic(path, encode_pgm(to_gray(frame.extent(0), frame.extent(1), frame.values())));
}

// Returns (H, W, 1) in [0, 1].
inline Tensor load_frame_pgm(const std::filesystem::path& path) {
  const GrayImage img = load_gray(path);
  std::vector<float> values(img.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return Tensor({img.height, img.width, 1}, std::move(values));
}

}  // namespace gazedrop
