// Copyright 2026 The qwdiff Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "qwdiff/categorical_image.hpp"
#include "qwdiff/errors.hpp"

namespace qwdiff::data {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Grayscale images with labels, as stored in IDX files.
struct RawDataset {
  std::size_t count = 0;
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> pixels;  ///< count * rows * cols, row-major per image
  std::vector<std::uint8_t> labels;

  std::span<const std::uint8_t> image(std::size_t i) const {
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    return {pixels.data() + i * n, n};
  }
};

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw LengthError("IDX header is truncated");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace detail

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline RawDataset parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
  using detail::read_be32;
  if (read_be32(image_bytes, 0) != kIdxImageMagic) throw FormatError("image file does not start with IDX magic 0x803");
  if (read_be32(label_bytes, 0) != kIdxLabelMagic) throw FormatError("label file does not start with IDX magic 0x801");
  RawDataset ds;
  ds.count = read_be32(image_bytes, 4);
  ds.rows = static_cast<int>(read_be32(image_bytes, 8));
  ds.cols = static_cast<int>(read_be32(image_bytes, 12));
  const std::size_t label_count = read_be32(label_bytes, 4);
  if (label_count != ds.count)
    throw LengthError("image file has " + std::to_string(ds.count) + " entries, label file " +
                      std::to_string(label_count));
  const std::size_t payload = ds.count * static_cast<std::size_t>(ds.rows) * static_cast<std::size_t>(ds.cols);
  if (image_bytes.size() < 16 + payload) throw LengthError("image payload is truncated");
  if (label_bytes.size() < 8 + ds.count) throw LengthError("label payload is truncated");
  ds.pixels.assign(image_bytes.begin() + 16, image_bytes.begin() + 16 + static_cast<std::ptrdiff_t>(payload));
  ds.labels.assign(label_bytes.begin() + 8, label_bytes.begin() + 8 + static_cast<std::ptrdiff_t>(ds.count));
  return ds;
}

inline RawDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  return parse_idx(read_file(images), read_file(labels));
}

inline std::vector<std::uint8_t> encode_idx_images(const RawDataset& ds) {
  std::vector<std::uint8_t> out;
  detail::append_be32(out, kIdxImageMagic);
  detail::append_be32(out, static_cast<std::uint32_t>(ds.count));
  detail::append_be32(out, static_cast<std::uint32_t>(ds.rows));
  detail::append_be32(out, static_cast<std::uint32_t>(ds.cols));
  out.insert(out.end(), ds.pixels.begin(), ds.pixels.end());
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(const RawDataset& ds) {
  std::vector<std::uint8_t> out;
  detail::append_be32(out, kIdxLabelMagic);
  detail::append_be32(out, static_cast<std::uint32_t>(ds.count));
  out.insert(out.end(), ds.labels.begin(), ds.labels.end());
  return out;
}

/// Concatenates two datasets with identical image size.
inline RawDataset concat(const RawDataset& a, const RawDataset& b) {
  if (a.count == 0) return b;
  if (b.count == 0) return a;
  if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("datasets have different image sizes");
  RawDataset out = a;
  out.count += b.count;
  out.pixels.insert(out.pixels.end(), b.pixels.begin(), b.pixels.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

/// First `n` images (all of them if fewer).
inline RawDataset take(const RawDataset& ds, std::size_t n) {
  RawDataset out = ds;
  out.count = std::min(ds.count, n);
  out.pixels.resize(out.count * static_cast<std::size_t>(ds.rows) * static_cast<std::size_t>(ds.cols));
  out.labels.resize(out.count);
  return out;
}

inline RawDataset filter_digit(const RawDataset& ds, int digit) {
  if (digit < 0 || digit > 9) throw ParameterError("digit must lie in 0..9, got " + std::to_string(digit));
  RawDataset out;
  out.rows = ds.rows;
  out.cols = ds.cols;
  for (std::size_t i = 0; i < ds.count; ++i) {
    if (ds.labels[i] != digit) continue;
    const auto img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(ds.labels[i]);
    ++out.count;
  }
  return out;
}

/// level = floor(pixel * k / 256).
inline std::uint8_t quantize_pixel(std::uint8_t pixel, int k) {
  return static_cast<std::uint8_t>((static_cast<int>(pixel) * k) / 256);
}

inline std::vector<CategoricalImage> quantize(const RawDataset& ds, int k = 8) {
  if (k < 1 || k > 256) throw ParameterError("quantize: k must lie in [1, 256]");
  std::vector<CategoricalImage> out;
  out.reserve(ds.count);
  for (std::size_t i = 0; i < ds.count; ++i) {
    const auto img = ds.image(i);
    std::vector<std::uint8_t> levels(img.size());
    for (std::size_t p = 0; p < img.size(); ++p) levels[p] = quantize_pixel(img[p], k);
    out.emplace_back(ds.cols, ds.rows, k, std::move(levels));
  }
  return out;
}

/// Binary PGM ("P5") with maxval k-1.
inline std::vector<std::uint8_t> write_pgm(const CategoricalImage& img) {
  const std::string header = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n" +
                             std::to_string(img.k() - 1) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.levels().begin(), img.levels().end());
  return out;
}

/// Reads a binary PGM produced by write_pgm; levels run over 0..maxval.
inline CategoricalImage parse_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P5") throw FormatError("not a binary PGM");
  int width = 0, height = 0, maxval = 0;
  try {
    width = std::stoi(token());
    height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError("malformed PGM header");
  }
  if (maxval < 0 || maxval > 255) throw FormatError("PGM maxval must fit one byte");
  ++pos;  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (bytes.size() < pos + n) throw LengthError("PGM payload is truncated");
  return CategoricalImage(width, height, maxval + 1,
                          std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n)));
}

}  // namespace qwdiff::data
