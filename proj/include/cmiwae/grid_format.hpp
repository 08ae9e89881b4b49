// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cmiwae/tensor.hpp"

namespace cmiwae {

enum class GridDtype : std::uint8_t { f32 = 1, f64 = 2, u8 = 3 };

/// Contents of one grid file: a [T, C, W, H] array. Masks are stored as u8
/// and come back as 0/1 values.
struct GridArray {
  std::array<std::uint32_t, 4> dims{};  // T, C, W, H
  GridDtype dtype = GridDtype::f64;
  std::vector<double> values;

  std::size_t size() const {
    return std::size_t{dims[0]} * dims[1] * dims[2] * dims[3];
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "grid files assume a little-endian host");

inline constexpr char kGridMagic[4] = {'C', 'M', 'W', '1'};
inline constexpr std::uint32_t kGridVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError(what + ": truncated file");
  return v;
}

}  // namespace detail

inline void write_grid(std::ostream& out, const GridArray& g) {
  if (g.values.size() != g.size()) throw ShapeError("write_grid: payload does not match dimensions");
  out.write(detail::kGridMagic, 4);
  detail::put<std::uint32_t>(out, detail::kGridVersion);
  for (std::uint32_t d : g.dims) detail::put<std::uint32_t>(out, d);
  detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(g.dtype));
  switch (g.dtype) {
    case GridDtype::f64:
      out.write(reinterpret_cast<const char*>(g.values.data()), static_cast<std::streamsize>(g.values.size() * 8));
      break;
    case GridDtype::f32: {
      std::vector<float> buf(g.values.begin(), g.values.end());
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
      break;
    }
    case GridDtype::u8: {
      std::vector<std::uint8_t> buf(g.values.size());
      for (std::size_t i = 0; i < buf.size(); ++i) {
        const double v = g.values[i];
        if (v != 0.0 && v != 1.0) throw DataError("write_grid: mask values must be 0 or 1");
        buf[i] = static_cast<std::uint8_t>(v);
      }
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
      break;
    }
  }
  if (!out) throw DataError("write_grid: write failed");
}

inline void save_grid(const std::string& path, const GridArray& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot create " + path);
  write_grid(out, g);
}

/// Reads a grid file; the result is only returned once the whole payload
/// has been read and checked.
inline GridArray read_grid(std::istream& in, const std::string& what = "grid file") {
  char magic[4];
  if (!in.read(magic, 4)) throw DataError(what + ": truncated header");
  if (std::memcmp(magic, detail::kGridMagic, 4) != 0) throw DataError(what + ": bad magic (not a CMW1 grid file)");
  const auto version = detail::take<std::uint32_t>(in, what);
  if (version != detail::kGridVersion) throw DataError(what + ": unsupported version " + std::to_string(version));
  GridArray g;
  for (auto& d : g.dims) d = detail::take<std::uint32_t>(in, what);
  const auto tag = detail::take<std::uint8_t>(in, what);
  if (tag < 1 || tag > 3) throw DataError(what + ": unknown dtype tag " + std::to_string(tag));
  g.dtype = static_cast<GridDtype>(tag);
  const std::size_t n = g.size();
  g.values.resize(n);
  switch (g.dtype) {
    case GridDtype::f64:
      if (!in.read(reinterpret_cast<char*>(g.values.data()), static_cast<std::streamsize>(n * 8))) {
        throw DataError(what + ": truncated payload");
      }
      break;
    case GridDtype::f32: {
      std::vector<float> buf(n);
      if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4))) {
        throw DataError(what + ": truncated payload");
      }
      std::copy(buf.begin(), buf.end(), g.values.begin());
      break;
    }
    case GridDtype::u8: {
      std::vector<std::uint8_t> buf(n);
      if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n))) {
        throw DataError(what + ": truncated payload");
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (buf[i] > 1) throw DataError(what + ": mask byte other than 0/1");
        g.values[i] = buf[i];
      }
      break;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(g.values[i])) throw DataError(what + ": non-finite value at flat index " + std::to_string(i));
  }
  in.peek();
  if (!in.eof()) throw DataError(what + ": trailing bytes after payload");
  return g;
}

inline GridArray load_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_grid(in, path);
}

}  // namespace cmiwae
