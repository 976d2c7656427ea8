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

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qwdiff/errors.hpp"

namespace qwdiff {

/// Image whose pixels take one of k levels 0..k-1, stored row-major.
class CategoricalImage {
 public:
  CategoricalImage() = default;

  CategoricalImage(int width, int height, int k, std::vector<std::uint8_t> levels)
      : width_(width), height_(height), k_(k), levels_(std::move(levels)) {
    if (width_ <= 0 || height_ <= 0) throw ShapeError("image dimensions must be positive");
    if (k_ < 1 || k_ > 256) throw ParameterError("category count must lie in [1, 256]");
    if (levels_.size() != static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_))
      throw ShapeError("image has " + std::to_string(levels_.size()) + " levels for " + std::to_string(width_) + "x" +
                       std::to_string(height_));
    for (std::uint8_t v : levels_)
      if (v >= k_) throw ParameterError("pixel level " + std::to_string(v) + " not below k=" + std::to_string(k_));
  }

  static CategoricalImage filled(int width, int height, int k, std::uint8_t level) {
    return CategoricalImage(width, height, k,
                            std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height, level));
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int k() const { return k_; }
  std::size_t pixels() const { return levels_.size(); }
  const std::vector<std::uint8_t>& levels() const { return levels_; }
  std::uint8_t operator[](std::size_t i) const { return levels_[i]; }
  std::uint8_t at(int x, int y) const { return levels_[static_cast<std::size_t>(y) * width_ + x]; }

  bool same_shape(const CategoricalImage& other) const {
    return width_ == other.width_ && height_ == other.height_ && k_ == other.k_;
  }

  friend bool operator==(const CategoricalImage&, const CategoricalImage&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int k_ = 0;
  std::vector<std::uint8_t> levels_;
};

/// Fraction of pixels at each level over a set of images.
inline Eigen::VectorXd level_histogram(const std::vector<CategoricalImage>& images, int k) {
  Eigen::VectorXd h = Eigen::VectorXd::Zero(k);
  double total = 0.0;
  for (const auto& img : images) {
    for (std::uint8_t v : img.levels()) h[v] += 1.0;
    total += static_cast<double>(img.pixels());
  }
  if (total > 0.0) h /= total;
  return h;
}

}  // namespace qwdiff
