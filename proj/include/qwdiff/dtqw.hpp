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

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qwdiff/errors.hpp"
#include "qwdiff/graphs.hpp"
#include "qwdiff/lindblad.hpp"
#include "qwdiff/random.hpp"
#include "qwdiff/walk_kernel.hpp"

// Coined quantum walk on a cycle. The walker space is coin (x) position with
// index coin * n + node; coin 0 is "up" (moves +1) and coin 1 is "down"
// (moves -1). For the noisy walk the 2n-dimensional space is read as a qubit
// register: the coin is the most significant qubit, followed by the
// log2(n) position bits, most significant first.

namespace qwdiff::dtqw {

inline constexpr std::size_t kCoinUp = 0;
inline constexpr std::size_t kCoinDown = 1;

inline Eigen::Matrix2cd hadamard_coin() {
  const double s = 1.0 / std::numbers::sqrt2;
  Eigen::Matrix2cd h;
  h << s, s, s, -s;
  return h;
}

inline ComplexMatrix shift_operator(std::size_t n) {
  if (n < 3) throw ParameterError("shift operator needs at least 3 nodes");
  const auto size = static_cast<Eigen::Index>(n);
  ComplexMatrix s = ComplexMatrix::Zero(2 * size, 2 * size);
  for (Eigen::Index v = 0; v < size; ++v) {
    s(kCoinUp * size + (v + 1) % size, kCoinUp * size + v) = 1.0;
    s(kCoinDown * size + (v + size - 1) % size, kCoinDown * size + v) = 1.0;
  }
  return s;
}

/// shift * (coin (x) identity).
inline ComplexMatrix step_unitary(std::size_t n) {
  const auto size = static_cast<Eigen::Index>(n);
  const Eigen::Matrix2cd h = hadamard_coin();
  ComplexMatrix coin = ComplexMatrix::Zero(2 * size, 2 * size);
  for (Eigen::Index a = 0; a < 2; ++a)
    for (Eigen::Index b = 0; b < 2; ++b)
      for (Eigen::Index v = 0; v < size; ++v) coin(a * size + v, b * size + v) = h(a, b);
  return shift_operator(n) * coin;
}

class CoinedState {
 public:
  CoinedState(std::size_t n_nodes, Eigen::VectorXcd amplitudes) : n_(n_nodes), amps_(std::move(amplitudes)) {
    if (amps_.size() != static_cast<Eigen::Index>(2 * n_)) throw ShapeError("coined state has the wrong length");
    if (std::abs(amps_.norm() - 1.0) > 1e-12) throw ParameterError("coined state is not normalized");
  }

  static CoinedState basis(std::size_t n_nodes, std::size_t coin, std::size_t node) {
    Eigen::VectorXcd a = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(2 * n_nodes));
    a[static_cast<Eigen::Index>(coin * n_nodes + node)] = 1.0;
    return CoinedState(n_nodes, std::move(a));
  }

  std::size_t n_nodes() const { return n_; }
  const Eigen::VectorXcd& amplitudes() const { return amps_; }

  Eigen::VectorXd position_marginal() const {
    const auto n = static_cast<Eigen::Index>(n_);
    return amps_.head(n).cwiseAbs2() + amps_.tail(n).cwiseAbs2();
  }

 private:
  std::size_t n_;
  Eigen::VectorXcd amps_;
};

/// Position distribution after t noiseless steps.
inline ProbabilityVector evolve_pure(const CoinedState& psi0, std::size_t t) {
  const ComplexMatrix u = step_unitary(psi0.n_nodes());
  Eigen::VectorXcd psi = psi0.amplitudes();
  for (std::size_t s = 0; s < t; ++s) psi = u * psi;
  Eigen::VectorXd p = CoinedState(psi0.n_nodes(), psi.normalized()).position_marginal();
  return ProbabilityVector(p / p.sum());
}

struct NoiseSchedule {
  double c = 5e4;
  double dt_seconds = 5e-10;
  double t1_seconds = 200e-6;
  double t2_seconds = 150e-6;
  int total_steps = 20;

  void validate() const {
    if (!(c >= 0.0)) throw ParameterError("noise schedule: c must be nonnegative");
    if (!(dt_seconds > 0.0 && t1_seconds > 0.0 && t2_seconds > 0.0))
      throw ParameterError("noise schedule: dt, T1 and T2 must be positive");
    if (t2_seconds > 2.0 * t1_seconds) throw ParameterError("noise schedule: T2 must not exceed 2 T1");
    if (total_steps < 2) throw ParameterError("noise schedule: need at least 2 steps");
  }
};

/// Number of idle samples inserted at step t: c sin^2(pi/2 t/(T-1)) floored
/// to a multiple of 8.
inline std::int64_t delay_samples(int t, const NoiseSchedule& sched) {
  sched.validate();
  if (t < 0 || t > sched.total_steps - 1)
    throw ParameterError("delay schedule: step " + std::to_string(t) + " outside [0, T-1]");
  const double x = std::sin(std::numbers::pi / 2.0 * static_cast<double>(t) / (sched.total_steps - 1));
  const double samples = sched.c * x * x;
  return static_cast<std::int64_t>(std::floor(samples / 8.0)) * 8;
}

inline double delay_schedule(int t, const NoiseSchedule& sched) {
  return static_cast<double>(delay_samples(t, sched)) * sched.dt_seconds;
}

/// Single-qubit channel in Kraus form.
class Channel {
 public:
  explicit Channel(std::vector<Eigen::Matrix2cd> kraus) : kraus_(std::move(kraus)) {
    if (kraus_.empty()) throw ParameterError("channel needs at least one Kraus operator");
    Eigen::Matrix2cd sum = Eigen::Matrix2cd::Zero();
    for (const auto& k : kraus_) sum += k.adjoint() * k;
    if ((sum - Eigen::Matrix2cd::Identity()).cwiseAbs().maxCoeff() > 1e-12)
      throw ParameterError("Kraus operators are not complete");
  }

  const std::vector<Eigen::Matrix2cd>& kraus_ops() const { return kraus_; }

  Eigen::Matrix2cd apply(const Eigen::Matrix2cd& rho) const {
    Eigen::Matrix2cd out = Eigen::Matrix2cd::Zero();
    for (const auto& k : kraus_) out += k * rho * k.adjoint();
    return out;
  }

 private:
  std::vector<Eigen::Matrix2cd> kraus_;
};

struct DampingStrengths {
  double gamma = 0.0;   ///< amplitude damping probability
  double lambda = 0.0;  ///< pure dephasing probability
};

inline DampingStrengths damping_strengths(double delay, const NoiseSchedule& sched) {
  if (!(delay >= 0.0)) throw ParameterError("damping channel: delay must be nonnegative");
  if (sched.t2_seconds > 2.0 * sched.t1_seconds) throw ParameterError("damping channel: T2 must not exceed 2 T1");
  DampingStrengths d;
  d.gamma = -std::expm1(-delay / sched.t1_seconds);
  const double dephasing_rate = 1.0 / sched.t2_seconds - 1.0 / (2.0 * sched.t1_seconds);
  d.lambda = -std::expm1(-delay * dephasing_rate * 2.0);
  return d;
}

/// Amplitude damping followed by pure dephasing over an idle period.
inline Channel damping_channel(double delay, const NoiseSchedule& sched) {
  const DampingStrengths d = damping_strengths(delay, sched);
  Eigen::Matrix2cd a0, a1, p0, p1;
  a0 << 1.0, 0.0, 0.0, std::sqrt(1.0 - d.gamma);
  a1 << 0.0, std::sqrt(d.gamma), 0.0, 0.0;
  p0 << 1.0, 0.0, 0.0, std::sqrt(1.0 - d.lambda);
  p1 << 0.0, 0.0, 0.0, std::sqrt(d.lambda);
  return Channel({p0 * a0, p0 * a1, p1 * a0, p1 * a1});
}

inline std::size_t register_qubits(std::size_t n_nodes) {
  if (n_nodes < 4 || !std::has_single_bit(n_nodes))
    throw ParameterError("noisy walk needs a power-of-two node count >= 4, got " + std::to_string(n_nodes));
  return 1 + static_cast<std::size_t>(std::countr_zero(n_nodes));
}

/// Applies a single-qubit channel to qubit `qubit` (0 = most significant) of
/// a density matrix over `n_qubits` qubits.
inline ComplexMatrix apply_to_qubit(const ComplexMatrix& rho, const Channel& channel, std::size_t qubit,
                                    std::size_t n_qubits) {
  const Eigen::Index dim = rho.rows();
  const std::size_t shift = n_qubits - 1 - qubit;
  const Eigen::Index mask = Eigen::Index{1} << shift;
  ComplexMatrix out = ComplexMatrix::Zero(dim, dim);
  for (const auto& k : channel.kraus_ops()) {
    ComplexMatrix full = ComplexMatrix::Zero(dim, dim);
    for (Eigen::Index r = 0; r < dim; ++r) {
      const Eigen::Index rbit = (r & mask) ? 1 : 0;
      for (Eigen::Index cbit = 0; cbit < 2; ++cbit) {
        const Eigen::Index c = (r & ~mask) | (cbit ? mask : 0);
        full(r, c) = k(rbit, cbit);
      }
    }
    out.noalias() += full * rho * full.adjoint();
  }
  return out;
}

struct NoisyWalkOptions {
  /// 0 keeps exact marginals; otherwise column 0 is resampled from this many shots.
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  /// Bit q (q = 0 is the coin) set means the delay channel acts on qubit q.
  std::uint32_t qubit_mask = 0xFFFFFFFFu;
};

inline Eigen::VectorXd position_marginal(const ComplexMatrix& rho, std::size_t n_nodes) {
  const auto n = static_cast<Eigen::Index>(n_nodes);
  Eigen::VectorXd p = rho.diagonal().head(n).real() + rho.diagonal().tail(n).real();
  p = p.cwiseMax(0.0);
  return p / p.sum();
}

/// One coined step followed by the idle-period channel for delay step
/// `delay_step` on every selected qubit.
inline ComplexMatrix noisy_step(const ComplexMatrix& rho, const ComplexMatrix& u, int delay_step,
                                const NoiseSchedule& sched, std::size_t n_qubits, std::uint32_t qubit_mask) {
  ComplexMatrix out = u * rho * u.adjoint();
  const Channel channel = damping_channel(delay_schedule(delay_step, sched), sched);
  for (std::size_t q = 0; q < n_qubits; ++q)
    if (qubit_mask & (1u << q)) out = apply_to_qubit(out, channel, q, n_qubits);
  return out;
}

/// Per-step forward kernels of the noisy walk. Kernel t (1-based) is the
/// position marginal of a single noisy step from |up, 0> at the noise level of
/// delay step t-1, rotated to every start node.
inline std::vector<WalkKernel> noisy_walk_kernels(std::size_t n_nodes, const NoiseSchedule& sched,
                                                  const NoisyWalkOptions& options = {}) {
  sched.validate();
  const std::size_t n_qubits = register_qubits(n_nodes);
  const ComplexMatrix u = step_unitary(n_nodes);
  const auto dim = static_cast<Eigen::Index>(2 * n_nodes);
  std::vector<WalkKernel> kernels;
  kernels.reserve(static_cast<std::size_t>(sched.total_steps));
  for (int t = 1; t <= sched.total_steps; ++t) {
    ComplexMatrix rho = ComplexMatrix::Zero(dim, dim);
    rho(static_cast<Eigen::Index>(kCoinUp * n_nodes), static_cast<Eigen::Index>(kCoinUp * n_nodes)) = 1.0;
    rho = noisy_step(rho, u, t - 1, sched, n_qubits, options.qubit_mask);
    Eigen::VectorXd column = position_marginal(rho, n_nodes);
    if (options.shots > 0) {
      Rng rng(derive_seed(options.seed, {static_cast<std::uint64_t>(t)}));
      Eigen::VectorXd counts = Eigen::VectorXd::Zero(column.size());
      for (std::size_t s = 0; s < options.shots; ++s)
        counts[static_cast<Eigen::Index>(rng.categorical({column.data(), static_cast<std::size_t>(column.size())}))] += 1.0;
      column = counts / static_cast<double>(options.shots);
    }
    kernels.push_back(WalkKernel::circulant(column, t));
  }
  return kernels;
}

/// Position distributions of one walker evolved through all noisy steps
/// without intermediate measurement; entry t-1 is the state after t steps.
inline std::vector<Eigen::VectorXd> noisy_walk_trace(std::size_t n_nodes, const NoiseSchedule& sched,
                                                     std::uint32_t qubit_mask = 0xFFFFFFFFu) {
  sched.validate();
  const std::size_t n_qubits = register_qubits(n_nodes);
  const ComplexMatrix u = step_unitary(n_nodes);
  const auto dim = static_cast<Eigen::Index>(2 * n_nodes);
  ComplexMatrix rho = ComplexMatrix::Zero(dim, dim);
  rho(0, 0) = 1.0;
  std::vector<Eigen::VectorXd> out;
  for (int t = 1; t <= sched.total_steps; ++t) {
    rho = noisy_step(rho, u, t - 1, sched, n_qubits, qubit_mask);
    out.push_back(position_marginal(rho, n_nodes));
  }
  return out;
}

}  // namespace qwdiff::dtqw
