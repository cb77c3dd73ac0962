#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cloudmask/errors.hpp"

namespace cloudmask {

inline constexpr std::uint8_t kLabelClear = 0;
inline constexpr std::uint8_t kLabelCloud = 1;
inline constexpr std::uint8_t kLabelUnknown = 255;

/// Multichannel image with optional per-pixel labels. Band data is 32-bit
/// float, channel-major then row-major; labels are bytes {0 clear, 1 cloud,
/// 255 unlabeled}. Proba-V style channel order: Blue, Red, NIR, SWIR.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> bands;
  std::vector<std::uint8_t> labels;  // empty when unlabeled

  Raster() = default;
  Raster(int w, int h, int c, bool with_labels)
      : width(w), height(h), channels(c),
        bands(static_cast<std::size_t>(w) * h * c, 0.0f) {
    if (w < 1 || h < 1 || c < 1) throw DataError("raster dimensions must be >= 1");
    if (with_labels) labels.assign(static_cast<std::size_t>(w) * h, kLabelUnknown);
  }

  bool has_labels() const { return !labels.empty(); }

  std::size_t pixel_index(int row, int col) const {
    return static_cast<std::size_t>(row) * width + col;
  }

  float& at(int channel, int row, int col) {
    return bands[(static_cast<std::size_t>(channel) * height + row) * width + col];
  }
  float at(int channel, int row, int col) const {
    return bands[(static_cast<std::size_t>(channel) * height + row) * width + col];
  }

  std::uint8_t label(int row, int col) const { return labels[pixel_index(row, col)]; }
  void set_label(int row, int col, std::uint8_t v) { labels[pixel_index(row, col)] = v; }
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

/// MSPC v1: "MSP1", u32 width, u32 height, u32 channels, u32 label_flag,
/// band-sequential float32 planes, then the label bytes iff label_flag == 1.
/// Everything little-endian, no padding, no checksum.
inline void save_raster(const Raster& r, const std::string& path) {
  std::string out;
  out.reserve(20 + r.bands.size() * 4 + r.labels.size());
  out.append("MSP1", 4);
  detail::put_u32_le(out, static_cast<std::uint32_t>(r.width));
  detail::put_u32_le(out, static_cast<std::uint32_t>(r.height));
  detail::put_u32_le(out, static_cast<std::uint32_t>(r.channels));
  detail::put_u32_le(out, r.has_labels() ? 1u : 0u);
  for (float v : r.bands) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    detail::put_u32_le(out, u);
  }
  out.append(reinterpret_cast<const char*>(r.labels.data()), r.labels.size());

  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write raster file " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("short write to raster file " + path);
}

inline Raster load_raster(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open raster file " + path);
  std::string blob((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  if (blob.size() < 20)
    throw FormatError(path + ": file shorter than the 20-byte MSPC header");
  if (blob.compare(0, 4, "MSP1") != 0)
    throw FormatError(path + ": bad magic '" + blob.substr(0, 4) +
                      "', expected 'MSP1'");
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint32_t width = detail::get_u32_le(p + 4);
  const std::uint32_t height = detail::get_u32_le(p + 8);
  const std::uint32_t channels = detail::get_u32_le(p + 12);
  const std::uint32_t label_flag = detail::get_u32_le(p + 16);
  if (width < 1 || height < 1 || channels < 1)
    throw FormatError(path + ": degenerate dimensions in header");
  if (label_flag > 1)
    throw FormatError(path + ": label flag must be 0 or 1, got " +
                      std::to_string(label_flag));

  const std::size_t band_count =
      static_cast<std::size_t>(width) * height * channels;
  const std::size_t label_count =
      label_flag ? static_cast<std::size_t>(width) * height : 0;
  const std::size_t expected = 20 + band_count * 4 + label_count;
  if (blob.size() != expected)
    throw FormatError(path + ": payload truncated or oversized; expected " +
                      std::to_string(expected) + " bytes, file has " +
                      std::to_string(blob.size()));

  Raster r(static_cast<int>(width), static_cast<int>(height),
           static_cast<int>(channels), label_flag == 1);
  const unsigned char* bp = p + 20;
  for (std::size_t i = 0; i < band_count; ++i, bp += 4) {
    const std::uint32_t u = detail::get_u32_le(bp);
    float v;
    std::memcpy(&v, &u, 4);
    r.bands[i] = v;
  }
  if (label_flag)
    std::memcpy(r.labels.data(), blob.data() + 20 + band_count * 4, label_count);
  return r;
}

}  // namespace cloudmask
