#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "weaktr/tensor.hpp"

namespace weaktr {

// ---------------------------------------------------------------------------
// WTT1 tensor files: magic "WTT1", u32 LE rank, rank x u64 LE dims, then the
// row-major f32 LE payload. The interchange format for every CLI command.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(buf[i]) << (8 * i);
  return value;
}

}  // namespace detail

inline void write_wtt(const std::string& path, const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument("write_wtt: undefined tensor");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_wtt: cannot open " + path);
  os.write("WTT1", 4);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::int64_t d : t.shape) detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  for (float v : *t.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    detail::write_le<std::uint32_t>(os, bits);
  }
  if (!os) throw std::runtime_error("write_wtt: write failed for " + path);
}

inline Tensor read_wtt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_wtt: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "WTT1", 4) != 0) throw std::runtime_error("read_wtt: bad magic in " + path);
  const std::uint32_t rank = detail::read_le<std::uint32_t>(is);
  if (rank > 8) throw std::runtime_error("read_wtt: implausible rank in " + path);
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<std::int64_t>(detail::read_le<std::uint64_t>(is));
  const std::int64_t n = shape_numel(shape);
  std::vector<float> values(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint32_t bits = detail::read_le<std::uint32_t>(is);
    std::memcpy(&values[static_cast<std::size_t>(i)], &bits, 4);
  }
  if (!is) throw std::runtime_error("read_wtt: truncated file " + path);
  return Tensor::from_vector(std::move(shape), std::move(values));
}

// ---------------------------------------------------------------------------
// 8-bit binary PGM heatmaps, min-max normalized per image.
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, const float* values, std::int64_t h, std::int64_t w) {
  float lo = values[0], hi = values[0];
  for (std::int64_t i = 1; i < h * w; ++i) {
    lo = std::min(lo, values[i]);
    hi = std::max(hi, values[i]);
  }
  const float span = hi - lo > 0.0f ? hi - lo : 1.0f;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  for (std::int64_t i = 0; i < h * w; ++i) {
    const float norm = (values[i] - lo) / span;
    os.put(static_cast<char>(static_cast<unsigned char>(std::clamp(norm, 0.0f, 1.0f) * 255.0f + 0.5f)));
  }
  if (!os) throw std::runtime_error("write_pgm: write failed for " + path);
}

/// Writes channel `ch` of an [h×w×c] tensor as a PGM heatmap.
inline void write_pgm_channel(const std::string& path, const Tensor& t, std::int64_t ch) {
  if (t.rank() == 2) {
    write_pgm(path, t.ptr(), t.shape[0], t.shape[1]);
    return;
  }
  if (t.rank() != 3) throw std::invalid_argument("write_pgm_channel: need rank 2 or 3");
  const std::int64_t h = t.shape[0], w = t.shape[1], c = t.shape[2];
  if (ch < 0 || ch >= c) throw std::out_of_range("write_pgm_channel: channel out of range");
  std::vector<float> plane(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h * w; ++i) plane[static_cast<std::size_t>(i)] = t.ptr()[i * c + ch];
  write_pgm(path, plane.data(), h, w);
}

// ---------------------------------------------------------------------------
// Small text helpers
// ---------------------------------------------------------------------------

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_text_file: cannot open " + path);
  os << content;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_text_file: cannot open " + path);
  std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return s;
}

inline std::string zero_pad(std::int64_t id, int width = 4) {
  std::string s = std::to_string(id);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace weaktr
