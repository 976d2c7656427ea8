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

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "qwdiff/errors.hpp"

namespace qwdiff {

/// Per-step categorical transition matrix of a forward chain. Column j is the
/// distribution of the next category given the current category j.
class WalkKernel {
 public:
  static constexpr double kColumnTolerance = 1e-9;
  static constexpr double kClampTolerance = 1e-12;

  WalkKernel() = default;

  /// Entries within kClampTolerance below zero are clamped to zero.
  WalkKernel(Eigen::MatrixXd entries, int step_index) : entries_(std::move(entries)), step_index_(step_index) {
    if (entries_.rows() != entries_.cols() || entries_.rows() == 0)
      throw ShapeError("walk kernel must be square and nonempty");
    for (Eigen::Index j = 0; j < entries_.cols(); ++j) {
      for (Eigen::Index i = 0; i < entries_.rows(); ++i) {
        double& e = entries_(i, j);
        if (!std::isfinite(e)) throw NumericalInstabilityError("walk kernel has a non-finite entry");
        if (e < 0.0) {
          if (e < -kClampTolerance) throw NumericalInstabilityError("walk kernel has a negative entry");
          e = 0.0;
        }
      }
      if (std::abs(entries_.col(j).sum() - 1.0) > kColumnTolerance)
        throw NumericalInstabilityError("walk kernel column " + std::to_string(j) + " sums to " +
                                        std::to_string(entries_.col(j).sum()));
    }
  }

  Eigen::Index k() const { return entries_.rows(); }
  int step_index() const { return step_index_; }
  const Eigen::MatrixXd& matrix() const { return entries_; }
  double operator()(Eigen::Index to, Eigen::Index from) const { return entries_(to, from); }

  static WalkKernel identity(Eigen::Index k, int step_index) {
    return WalkKernel(Eigen::MatrixXd::Identity(k, k), step_index);
  }

  /// Circulant kernel whose column j is `column0` rotated down by j.
  static WalkKernel circulant(const Eigen::VectorXd& column0, int step_index) {
    const Eigen::Index k = column0.size();
    Eigen::MatrixXd m(k, k);
    for (Eigen::Index j = 0; j < k; ++j)
      for (Eigen::Index i = 0; i < k; ++i) m((i + j) % k, j) = column0[i];
    return WalkKernel(std::move(m), step_index);
  }

  bool is_circulant(double tolerance) const {
    const Eigen::Index k = entries_.rows();
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = 0; j < k; ++j)
        if (std::abs(entries_(i, j) - entries_((i + 1) % k, (j + 1) % k)) > tolerance) return false;
    return true;
  }

 private:
  Eigen::MatrixXd entries_;
  int step_index_ = 0;
};

}  // namespace qwdiff
