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
#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "qwdiff/categorical_image.hpp"
#include "qwdiff/errors.hpp"
#include "qwdiff/graphs.hpp"
#include "qwdiff/random.hpp"
#include "qwdiff/walk_kernel.hpp"

namespace qwdiff {

/// Forward transition matrices Q_1..Q_T in column convention
/// (entry (i, j) = q(x_t = i | x_{t-1} = j)) and their cumulative products
/// Qbar_t = Q_t Qbar_{t-1}, Qbar_0 = I, so q(x_t | x_0) = Qbar_t(x_t, x_0).
class QSchedule {
 public:
  QSchedule() = default;

  explicit QSchedule(std::vector<Eigen::MatrixXd> q) : q_(std::move(q)) {
    if (q_.empty()) throw ShapeError("schedule needs at least one step");
    const Eigen::Index k = q_.front().rows();
    q_bar_.push_back(Eigen::MatrixXd::Identity(k, k));
    for (std::size_t t = 0; t < q_.size(); ++t) {
      const auto& m = q_[t];
      if (m.rows() != k || m.cols() != k)
        throw ShapeError("schedule step " + std::to_string(t + 1) + " has inconsistent category count");
      for (Eigen::Index j = 0; j < k; ++j)
        if (std::abs(m.col(j).sum() - 1.0) > 1e-9 || (m.col(j).array() < 0.0).any())
          throw ParameterError("schedule step " + std::to_string(t + 1) + " is not column-stochastic");
      q_bar_.push_back(m * q_bar_.back());
    }
    cumulative_.resize(q_.size());
    for (std::size_t t = 0; t < q_.size(); ++t) {
      cumulative_[t].resize(k, k);
      for (Eigen::Index j = 0; j < k; ++j) {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < k; ++i) cumulative_[t](i, j) = (acc += q_[t](i, j));
      }
    }
  }

  int k() const { return q_.empty() ? 0 : static_cast<int>(q_.front().rows()); }
  int steps() const { return static_cast<int>(q_.size()); }

  const Eigen::MatrixXd& q(int t) const { return q_.at(static_cast<std::size_t>(check_step(t, 1)) - 1); }
  const Eigen::MatrixXd& q_bar(int t) const { return q_bar_.at(static_cast<std::size_t>(check_step(t, 0))); }

  /// Draws x_t given x_{t-1} from u in [0, 1).
  std::uint8_t sample_next(int t, std::uint8_t prev, double u) const {
    const Eigen::MatrixXd& c = cumulative_[static_cast<std::size_t>(t) - 1];
    const double target = u * c(c.rows() - 1, prev);
    for (Eigen::Index i = 0; i < c.rows(); ++i)
      if (target < c(i, prev) && q_[static_cast<std::size_t>(t) - 1](i, prev) > 0.0) return static_cast<std::uint8_t>(i);
    for (Eigen::Index i = c.rows(); i-- > 0;)
      if (q_[static_cast<std::size_t>(t) - 1](i, prev) > 0.0) return static_cast<std::uint8_t>(i);
    return prev;
  }

 private:
  int check_step(int t, int lo) const {
    if (t < lo || t > steps())
      throw ParameterError("schedule step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                           std::to_string(steps()) + "]");
    return t;
  }

  std::vector<Eigen::MatrixXd> q_;
  std::vector<Eigen::MatrixXd> q_bar_;
  std::vector<Eigen::MatrixXd> cumulative_;
};

inline QSchedule q_schedule_from_kernels(const std::vector<WalkKernel>& kernels) {
  if (kernels.empty()) throw ShapeError("no kernels");
  std::vector<Eigen::MatrixXd> q;
  q.reserve(kernels.size());
  for (const auto& kernel : kernels) {
    if (kernel.k() != kernels.front().k()) throw ShapeError("kernels have inconsistent category counts");
    q.push_back(kernel.matrix());
  }
  return QSchedule(std::move(q));
}

/// Images x_0 .. x_T of one forward run.
struct Trajectory {
  std::vector<CategoricalImage> steps;

  int t_steps() const { return static_cast<int>(steps.size()) - 1; }
  const CategoricalImage& at(int t) const { return steps.at(static_cast<std::size_t>(t)); }
};

/// Each pixel walks independently: x_t is drawn from column x_{t-1} of Q_t.
inline Trajectory forward_sample(const CategoricalImage& x0, const QSchedule& sched, std::uint64_t seed) {
  if (x0.k() != sched.k())
    throw ShapeError("image has k=" + std::to_string(x0.k()) + ", schedule k=" + std::to_string(sched.k()));
  Rng rng(seed);
  Trajectory traj;
  traj.steps.reserve(static_cast<std::size_t>(sched.steps()) + 1);
  traj.steps.push_back(x0);
  std::vector<std::uint8_t> levels = x0.levels();
  for (int t = 1; t <= sched.steps(); ++t) {
    for (auto& v : levels) v = sched.sample_next(t, v, rng.uniform());
    traj.steps.emplace_back(x0.width(), x0.height(), x0.k(), levels);
  }
  return traj;
}

/// Forward runs for a whole dataset; image i uses seed derive_seed(seed, {i})
/// so the result does not depend on the worker count.
inline std::vector<Trajectory> forward_dataset(const std::vector<CategoricalImage>& images, const QSchedule& sched,
                                               std::uint64_t seed, unsigned workers = 1) {
  std::vector<Trajectory> out(images.size());
  auto run = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < images.size(); i += stride) out[i] = forward_sample(images[i], sched, derive_seed(seed, {i}));
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(images.size(), 1))));
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
  }
  return out;
}

/// Rotates a distribution measured from start node 0 so it starts at `start`.
inline Eigen::VectorXd shift_remap(const Eigen::VectorXd& dist, int start) {
  const Eigen::Index k = dist.size();
  const Eigen::Index s = ((start % k) + k) % k;
  Eigen::VectorXd out(k);
  for (Eigen::Index i = 0; i < k; ++i) out[(i + s) % k] = dist[i];
  return out;
}

/// q(x_{t-1} | x_t, x_0) = q(x_t | x_{t-1}) q(x_{t-1} | x_0) / q(x_t | x_0).
inline Eigen::VectorXd posterior(int x_t, int x_0, int t, const QSchedule& sched) {
  if (t < 1 || t > sched.steps()) throw ParameterError("posterior: step " + std::to_string(t) + " out of range");
  const int k = sched.k();
  if (x_t < 0 || x_t >= k || x_0 < 0 || x_0 >= k) throw ParameterError("posterior: level out of range");
  const double evidence = sched.q_bar(t)(x_t, x_0);
  if (!(evidence > 0.0))
    throw DegeneratePosteriorError("q(x_t=" + std::to_string(x_t) + " | x_0=" + std::to_string(x_0) + ") is zero at t=" +
                                   std::to_string(t));
  const Eigen::MatrixXd& qt = sched.q(t);
  const Eigen::MatrixXd& prev = sched.q_bar(t - 1);
  Eigen::VectorXd out(k);
  for (int j = 0; j < k; ++j) out[j] = qt(x_t, j) * prev(j, x_0) / evidence;
  return out;
}

namespace trajectory_io {

inline constexpr std::array<char, 4> kMagic{'Q', 'D', 'T', '1'};

namespace detail {
inline void put_le32(std::vector<std::uint8_t>& out, std::int32_t v) {
  const auto u = static_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
}
inline std::int32_t get_le32(std::span<const std::uint8_t> in, std::size_t off) {
  if (off + 4 > in.size()) throw LengthError("trajectory header is truncated");
  std::uint32_t u = 0;
  for (int b = 0; b < 4; ++b) u |= std::uint32_t{in[off + static_cast<std::size_t>(b)]} << (8 * b);
  return static_cast<std::int32_t>(u);
}
}  // namespace detail

/// "QDT1", then K, T, width, height, count as little-endian int32, then for
/// each trajectory the T+1 images as width*height level bytes each.
inline std::vector<std::uint8_t> encode(const std::vector<Trajectory>& trajs, int k, int t_steps, int width, int height) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  for (std::int32_t v : {k, t_steps, width, height, static_cast<std::int32_t>(trajs.size())}) detail::put_le32(out, v);
  for (const auto& tr : trajs) {
    if (tr.t_steps() != t_steps) throw ShapeError("trajectory length differs from header");
    for (const auto& img : tr.steps) {
      if (img.width() != width || img.height() != height || img.k() != k)
        throw ShapeError("trajectory image shape differs from header");
      out.insert(out.end(), img.levels().begin(), img.levels().end());
    }
  }
  return out;
}

inline std::vector<std::uint8_t> encode(const std::vector<Trajectory>& trajs) {
  if (trajs.empty() || trajs.front().steps.empty()) throw ShapeError("cannot infer trajectory header from empty set");
  const auto& first = trajs.front().steps.front();
  return encode(trajs, first.k(), trajs.front().t_steps(), first.width(), first.height());
}

struct Decoded {
  int k = 0;
  int t_steps = 0;
  int width = 0;
  int height = 0;
  std::vector<Trajectory> trajectories;
};

inline Decoded decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw FormatError("trajectory file does not start with QDT1");
  Decoded d;
  d.k = detail::get_le32(bytes, 4);
  d.t_steps = detail::get_le32(bytes, 8);
  d.width = detail::get_le32(bytes, 12);
  d.height = detail::get_le32(bytes, 16);
  const std::int32_t count = detail::get_le32(bytes, 20);
  if (d.k < 1 || d.k > 256 || d.t_steps < 0 || d.width <= 0 || d.height <= 0 || count < 0)
    throw FormatError("trajectory header has invalid fields");
  const std::size_t px = static_cast<std::size_t>(d.width) * static_cast<std::size_t>(d.height);
  const std::size_t need = 24 + static_cast<std::size_t>(count) * static_cast<std::size_t>(d.t_steps + 1) * px;
  if (bytes.size() != need)
    throw LengthError("trajectory file has " + std::to_string(bytes.size()) + " bytes, expected " + std::to_string(need));
  std::size_t off = 24;
  d.trajectories.resize(static_cast<std::size_t>(count));
  for (auto& tr : d.trajectories) {
    tr.steps.reserve(static_cast<std::size_t>(d.t_steps) + 1);
    for (int t = 0; t <= d.t_steps; ++t) {
      tr.steps.emplace_back(d.width, d.height, d.k,
                            std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                                                      bytes.begin() + static_cast<std::ptrdiff_t>(off + px)));
      off += px;
    }
  }
  return d;
}

}  // namespace trajectory_io

}  // namespace qwdiff
