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
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qwdiff/errors.hpp"
#include "qwdiff/graphs.hpp"

namespace qwdiff {

inline constexpr double kKlSmoothing = 1e-12;
inline constexpr double kDefaultShrinkage = 1e-3;

struct KlDivergence {
  double value = 0.0;
  /// True when q had zeros under the support of p and was epsilon-smoothed.
  bool smoothed = false;
};

/// sum_i p_i ln(p_i / q_i) with 0 ln 0 = 0. When q vanishes somewhere p does
/// not, q is replaced by (q + eps) / sum(q + eps).
inline KlDivergence kl_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  if (p.size() != q.size())
    throw ShapeError("kl_divergence: lengths " + std::to_string(p.size()) + " and " + std::to_string(q.size()));
  bool needs_smoothing = false;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0 && q[i] <= 0.0) needs_smoothing = true;

  Eigen::VectorXd qq = q;
  if (needs_smoothing) {
    qq.array() += kKlSmoothing;
    qq /= qq.sum();
  }
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / qq[i]);
  // Rounding can push a zero divergence a hair below zero.
  return {std::max(kl, 0.0), needs_smoothing};
}

inline KlDivergence kl_divergence(const ProbabilityVector& p, const ProbabilityVector& q) {
  return kl_divergence(p.values(), q.values());
}

/// KL of p against the uniform distribution of the same length.
inline double kl_to_uniform(const Eigen::VectorXd& p) {
  return kl_divergence(p, Eigen::VectorXd::Constant(p.size(), 1.0 / static_cast<double>(p.size()))).value;
}

/// Principal square root of a symmetric positive semidefinite matrix via
/// eigendecomposition; negative eigenvalues from rounding are clamped to 0.
inline Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m, double symmetry_tolerance = 1e-10) {
  if (m.rows() != m.cols()) throw ShapeError("sqrtm_psd: matrix is not square");
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > symmetry_tolerance)
    throw ParameterError("sqrtm_psd: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  if (eig.info() != Eigen::Success) throw NumericalInstabilityError("sqrtm_psd: eigendecomposition failed");
  const Eigen::VectorXd roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

/// Samples in rows, features in columns.
class FeatureMatrix {
 public:
  explicit FeatureMatrix(Eigen::MatrixXd rows) : data_(std::move(rows)) {
    if (data_.rows() < 2) throw InsufficientSamplesError("feature matrix needs at least 2 samples");
    if (data_.cols() < 1) throw ShapeError("feature matrix has no features");
    if (!data_.allFinite()) throw ParameterError("feature matrix has non-finite entries");
  }

  Eigen::Index samples() const { return data_.rows(); }
  Eigen::Index dimension() const { return data_.cols(); }
  const Eigen::MatrixXd& data() const { return data_; }

 private:
  Eigen::MatrixXd data_;
};

struct GaussianMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Mean and unbiased covariance, shrunk towards tr(cov)/d * I by `shrinkage`.
inline GaussianMoments fit_gaussian(const FeatureMatrix& features, double shrinkage = kDefaultShrinkage) {
  const Eigen::MatrixXd& x = features.data();
  GaussianMoments g;
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - g.mean.transpose();
  g.cov = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  if (shrinkage > 0.0) {
    const double scale = g.cov.trace() / static_cast<double>(g.cov.rows());
    g.cov *= (1.0 - shrinkage);
    g.cov.diagonal().array() += shrinkage * scale;
  }
  return g;
}

/// ||mu - mu'||^2 + tr(S + S' - 2 (S^1/2 S' S^1/2)^1/2).
inline double frechet_distance(const GaussianMoments& a, const GaussianMoments& b) {
  if (a.mean.size() != b.mean.size())
    throw ShapeError("frechet_distance: feature dimensions " + std::to_string(a.mean.size()) + " and " +
                     std::to_string(b.mean.size()));
  const double mean_term = (a.mean - b.mean).squaredNorm();
  const Eigen::MatrixXd sa = 0.5 * (a.cov + a.cov.transpose());
  const Eigen::MatrixXd sb = 0.5 * (b.cov + b.cov.transpose());
  const Eigen::MatrixXd root_a = sqrtm_psd(sa);
  Eigen::MatrixXd inner = root_a * sb * root_a;
  inner = 0.5 * (inner + inner.transpose());
  const double cross = sqrtm_psd(inner).trace();
  const double d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
  if (d < -1e-8) throw NumericalInstabilityError("frechet_distance: negative result " + std::to_string(d));
  return std::max(d, 0.0);
}

inline double frechet_distance(const FeatureMatrix& a, const FeatureMatrix& b, double shrinkage = kDefaultShrinkage) {
  if (a.dimension() != b.dimension())
    throw ShapeError("frechet_distance: feature dimensions " + std::to_string(a.dimension()) + " and " +
                     std::to_string(b.dimension()));
  return frechet_distance(fit_gaussian(a, shrinkage), fit_gaussian(b, shrinkage));
}

struct BoxStats {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double whisker_low = 0.0;
  double whisker_high = 0.0;
  std::vector<double> outliers;
  double mean = 0.0;
  double sem = 0.0;
  std::size_t count = 0;
};

/// Quantile of sorted data by linear interpolation between order statistics
/// at position q * (n - 1).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline BoxStats boxplot_stats(std::vector<double> values) {
  if (values.size() < 5)
    throw InsufficientSamplesError("box statistics need at least 5 values, got " + std::to_string(values.size()));
  std::sort(values.begin(), values.end());
  BoxStats s;
  s.count = values.size();
  s.median = quantile_sorted(values, 0.5);
  s.q1 = quantile_sorted(values, 0.25);
  s.q3 = quantile_sorted(values, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo_fence = s.q1 - 1.5 * iqr;
  const double hi_fence = s.q3 + 1.5 * iqr;
  s.whisker_low = s.q1;
  s.whisker_high = s.q3;
  bool low_set = false;
  for (double v : values) {
    if (v < lo_fence || v > hi_fence) {
      s.outliers.push_back(v);
      continue;
    }
    if (!low_set) {
      s.whisker_low = v;
      low_set = true;
    }
    s.whisker_high = v;
  }
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  const double stdev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  s.sem = stdev / std::sqrt(static_cast<double>(values.size()));
  return s;
}

}  // namespace qwdiff
