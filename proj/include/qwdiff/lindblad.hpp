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
#include <complex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qwdiff/errors.hpp"
#include "qwdiff/graphs.hpp"
#include "qwdiff/metrics.hpp"
#include "qwdiff/walk_kernel.hpp"

namespace qwdiff {

using ComplexMatrix = Eigen::MatrixXcd;
using Complex = std::complex<double>;

/// Amplitude given to the jump operator of a directed edge j -> i.
enum class AmplitudeConvention {
  kLinear,  ///< L_ij = S_ij |i><j|, hopping rate S_ij^2
  kSqrt,    ///< L_ij = sqrt(S_ij) |i><j|, hopping rate S_ij
};

enum class HamiltonianKind { kAdjacency, kLaplacian };

/// Walker state: Hermitian, unit trace, positive semidefinite.
class DensityMatrix {
 public:
  static constexpr double kHermitianTolerance = 1e-10;
  static constexpr double kTraceTolerance = 1e-10;
  static constexpr double kEigenvalueFloor = -1e-9;
  /// Floor for integrator output; RK4 truncation leaves O(tau h^4) negative
  /// eigenvalues on pure states.
  static constexpr double kIntegratedEigenvalueFloor = -1e-8;

  explicit DensityMatrix(ComplexMatrix rho) : rho_(std::move(rho)) {
    if (auto problem = check(rho_)) throw ParameterError("invalid density matrix: " + *problem);
  }

  /// Wraps a matrix already checked against `check(rho, floor)`.
  static DensityMatrix checked(ComplexMatrix rho) { return DensityMatrix(std::move(rho), Unchecked{}); }

  static DensityMatrix basis(std::size_t dim, std::size_t node) {
    ComplexMatrix r = ComplexMatrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    r(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(node)) = 1.0;
    return DensityMatrix(std::move(r));
  }

  /// Returns a description of the first violated invariant, if any.
  static std::optional<std::string> check(const ComplexMatrix& rho, double eigenvalue_floor = kEigenvalueFloor) {
    if (rho.rows() != rho.cols() || rho.rows() == 0) return "not square";
    if (!rho.allFinite()) return "non-finite entries";
    const double herm = (rho - rho.adjoint()).cwiseAbs().maxCoeff();
    if (herm > kHermitianTolerance) return "not Hermitian (" + std::to_string(herm) + ")";
    const Complex tr = rho.trace();
    if (std::abs(tr - Complex(1.0, 0.0)) > kTraceTolerance) return "trace " + std::to_string(tr.real());
    const ComplexMatrix sym = 0.5 * (rho + rho.adjoint());
    Eigen::SelfAdjointEigenSolver<ComplexMatrix> eig(sym, Eigen::EigenvaluesOnly);
    if (const double low = eig.eigenvalues().minCoeff(); low < eigenvalue_floor) {
      std::ostringstream msg;
      msg << "negative eigenvalue " << std::scientific << low;
      return msg.str();
    }
    return std::nullopt;
  }

  std::size_t dim() const { return static_cast<std::size_t>(rho_.rows()); }
  const ComplexMatrix& matrix() const { return rho_; }

  /// Diagonal with small negative values clamped to zero and the remainder
  /// renormalized to unit sum.
  Eigen::VectorXd populations() const {
    Eigen::VectorXd p = rho_.diagonal().real().cwiseMax(0.0);
    return p / p.sum();
  }

  double purity() const { return (rho_ * rho_).trace().real(); }

 private:
  struct Unchecked {};
  DensityMatrix(ComplexMatrix rho, Unchecked) : rho_(std::move(rho)) {}

  ComplexMatrix rho_;
};

/// Generator of the omega-interpolated quantum stochastic walk:
///   L[rho] = -(1 - omega) i [H, rho] + omega sum_k (L_k rho L_k^+ - 1/2 {L_k^+ L_k, rho}).
class Liouvillian {
 public:
  Liouvillian(double omega, ComplexMatrix hamiltonian, std::vector<ComplexMatrix> lindblad_ops,
              AmplitudeConvention convention)
      : omega_(omega), hamiltonian_(std::move(hamiltonian)), ops_(std::move(lindblad_ops)), convention_(convention) {
    if (!(omega_ >= 0.0 && omega_ <= 1.0)) throw ParameterError("omega must lie in [0, 1], got " + std::to_string(omega_));
    const Eigen::Index n = hamiltonian_.rows();
    if (n == 0 || hamiltonian_.cols() != n) throw ShapeError("hamiltonian must be square and nonempty");
    if ((hamiltonian_ - hamiltonian_.adjoint()).cwiseAbs().maxCoeff() > 1e-12)
      throw ParameterError("hamiltonian is not Hermitian");
    jump_sum_ = ComplexMatrix::Zero(n, n);
    for (const auto& op : ops_) {
      if (op.rows() != n || op.cols() != n) throw ShapeError("lindblad operator has the wrong dimension");
      jump_sum_ += op.adjoint() * op;
    }
  }

  std::size_t dim() const { return static_cast<std::size_t>(hamiltonian_.rows()); }
  double omega() const { return omega_; }
  AmplitudeConvention convention() const { return convention_; }
  const ComplexMatrix& hamiltonian() const { return hamiltonian_; }
  const std::vector<ComplexMatrix>& lindblad_ops() const { return ops_; }

  /// -i [H, rho], without the (1 - omega) weight.
  ComplexMatrix coherent_part(const ComplexMatrix& rho) const {
    const Complex minus_i(0.0, -1.0);
    return minus_i * (hamiltonian_ * rho - rho * hamiltonian_);
  }

  /// sum_k L_k rho L_k^+ - 1/2 {L_k^+ L_k, rho}, without the omega weight.
  ComplexMatrix dissipative_part(const ComplexMatrix& rho) const {
    ComplexMatrix out = -0.5 * (jump_sum_ * rho + rho * jump_sum_);
    for (const auto& op : ops_) out.noalias() += op * rho * op.adjoint();
    return out;
  }

  ComplexMatrix apply(const ComplexMatrix& rho) const {
    ComplexMatrix out = ComplexMatrix::Zero(rho.rows(), rho.cols());
    if (omega_ < 1.0) out += (1.0 - omega_) * coherent_part(rho);
    if (omega_ > 0.0) out += omega_ * dissipative_part(rho);
    return out;
  }

 private:
  double omega_;
  ComplexMatrix hamiltonian_;
  std::vector<ComplexMatrix> ops_;
  ComplexMatrix jump_sum_;
  AmplitudeConvention convention_;
};

inline Liouvillian build_generator(const Graph& g, double omega,
                                   AmplitudeConvention convention = AmplitudeConvention::kSqrt,
                                   HamiltonianKind hamiltonian = HamiltonianKind::kAdjacency) {
  if (!(omega >= 0.0 && omega <= 1.0)) throw ParameterError("omega must lie in [0, 1], got " + std::to_string(omega));
  if (!g.connected()) throw InvalidGraphError("quantum stochastic walk needs a connected graph");
  const auto n = static_cast<Eigen::Index>(g.n_nodes());
  ComplexMatrix h = g.adjacency().cast<double>().cast<Complex>();
  if (hamiltonian == HamiltonianKind::kLaplacian) {
    h = -h;
    for (Eigen::Index i = 0; i < n; ++i) h(i, i) = static_cast<double>(g.degree(static_cast<std::size_t>(i)));
  }
  const StochasticMatrix s = transition_matrix(g);
  std::vector<ComplexMatrix> ops;
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sij = s.matrix()(i, j);
      if (sij <= 0.0) continue;
      ComplexMatrix op = ComplexMatrix::Zero(n, n);
      op(i, j) = convention == AmplitudeConvention::kLinear ? sij : std::sqrt(sij);
      ops.push_back(std::move(op));
    }
  }
  return Liouvillian(omega, std::move(h), std::move(ops), convention);
}

/// Largest RK4 substep used when the caller does not choose one.
inline constexpr double kMaxSubstep = 0.6 / 128.0;

inline std::size_t default_substeps(double tau) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(tau / kMaxSubstep - 1e-9)));
}

/// Integrates the master equation for time `tau` with classical RK4 using
/// `substeps` equal steps. After each step the state is re-Hermitized and its
/// trace renormalized.
inline DensityMatrix propagate(const Liouvillian& l, const DensityMatrix& rho, double tau, std::size_t substeps) {
  if (!(tau > 0.0)) throw ParameterError("propagate: tau must be positive");
  if (substeps == 0) throw ParameterError("propagate: substeps must be positive");
  if (rho.dim() != l.dim()) throw ShapeError("propagate: state and generator dimensions differ");
  const double h = tau / static_cast<double>(substeps);
  ComplexMatrix r = rho.matrix();
  for (std::size_t s = 0; s < substeps; ++s) {
    const ComplexMatrix k1 = l.apply(r);
    const ComplexMatrix k2 = l.apply(r + (0.5 * h) * k1);
    const ComplexMatrix k3 = l.apply(r + (0.5 * h) * k2);
    const ComplexMatrix k4 = l.apply(r + h * k3);
    r += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    r = 0.5 * (r + r.adjoint()).eval();
    r /= r.trace().real();
  }
  if (auto problem = DensityMatrix::check(r, DensityMatrix::kIntegratedEigenvalueFloor))
    throw NumericalInstabilityError("propagate: " + *problem + "; try more substeps");
  return DensityMatrix::checked(std::move(r));
}

inline DensityMatrix propagate(const Liouvillian& l, const DensityMatrix& rho, double tau) {
  return propagate(l, rho, tau, default_substeps(tau));
}

/// Kernel of one evolve-then-measure step: column j holds the populations
/// reached after time tau from the basis state |j><j|.
inline WalkKernel step_kernel(const Liouvillian& l, double tau, std::size_t substeps, int step_index = 1) {
  const auto n = static_cast<Eigen::Index>(l.dim());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    k.col(j) = propagate(l, DensityMatrix::basis(l.dim(), static_cast<std::size_t>(j)), tau, substeps).populations();
  return WalkKernel(std::move(k), step_index);
}

inline WalkKernel step_kernel(const Liouvillian& l, double tau) { return step_kernel(l, tau, default_substeps(tau)); }

/// KL divergence from uniform of a single walker started at node 0 and evolved
/// continuously (no measurement between steps); entry t-1 is the value after
/// t steps of length tau.
inline std::vector<double> kl_trace(const Liouvillian& l, std::size_t t_steps, double tau, std::size_t substeps) {
  std::vector<double> out;
  out.reserve(t_steps);
  DensityMatrix rho = DensityMatrix::basis(l.dim(), 0);
  for (std::size_t t = 0; t < t_steps; ++t) {
    rho = propagate(l, rho, tau, substeps);
    out.push_back(kl_to_uniform(rho.populations()));
  }
  return out;
}

inline std::vector<double> kl_trace(double omega, std::size_t n_nodes, std::size_t t_steps, double tau,
                                    AmplitudeConvention convention = AmplitudeConvention::kSqrt) {
  return kl_trace(build_generator(cycle_graph(n_nodes), omega, convention), t_steps, tau, default_substeps(tau));
}

}  // namespace qwdiff
