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

// Reference computations used only by tests. Each one takes a different route
// from the library code it checks.

#include <cmath>
#include <complex>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "qwdiff/diffusion.hpp"
#include "qwdiff/lindblad.hpp"

namespace qwdiff::oracle {

/// Column-stacked superoperator of the generator, assembled from H and the
/// jump operators with vec(A X B) = (B^T (x) A) vec(X).
inline Eigen::MatrixXcd superoperator(const Liouvillian& l) {
  const Eigen::Index d = static_cast<Eigen::Index>(l.dim());
  const Eigen::MatrixXcd id = Eigen::MatrixXcd::Identity(d, d);
  auto kron = [](const Eigen::MatrixXcd& a, const Eigen::MatrixXcd& b) {
    Eigen::MatrixXcd out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
  };
  const std::complex<double> minus_i(0.0, -1.0);
  const Eigen::MatrixXcd& h = l.hamiltonian();
  Eigen::MatrixXcd s = (1.0 - l.omega()) * minus_i * (kron(id, h) - kron(h.transpose(), id));
  for (const auto& op : l.lindblad_ops()) {
    const Eigen::MatrixXcd ldl = op.adjoint() * op;
    s += l.omega() * (kron(op.conjugate(), op) - 0.5 * kron(id, ldl) - 0.5 * kron(ldl.transpose(), id));
  }
  return s;
}

inline Eigen::MatrixXcd expm_propagate(const Liouvillian& l, const Eigen::MatrixXcd& rho, double tau) {
  const Eigen::Index d = rho.rows();
  const Eigen::MatrixXcd prop = (tau * superoperator(l)).exp();
  Eigen::VectorXcd v = Eigen::Map<const Eigen::VectorXcd>(rho.data(), d * d);
  Eigen::VectorXcd out = prop * v;
  return Eigen::Map<Eigen::MatrixXcd>(out.data(), d, d);
}

/// Classical master equation dp/dt = R p - diag(sum_i R_ij) p for hopping
/// rates R_ij, solved with the matrix exponential.
inline Eigen::VectorXd classical_rates_propagate(const Eigen::MatrixXd& rates, const Eigen::VectorXd& p0, double tau) {
  Eigen::MatrixXd g = rates;
  for (Eigen::Index j = 0; j < g.cols(); ++j) g(j, j) -= rates.col(j).sum();
  return (tau * g).exp() * p0;
}

/// q(x_{t-1} = j | x_t, x_0) by enumerating every path x_1 .. x_t of the chain
/// and summing path probabilities, without cumulative products.
inline Eigen::VectorXd posterior_by_paths(int x_t, int x_0, int t, const std::vector<Eigen::MatrixXd>& q) {
  const int k = static_cast<int>(q.front().rows());
  Eigen::VectorXd joint = Eigen::VectorXd::Zero(k);
  std::vector<int> path(static_cast<std::size_t>(t) + 1, 0);
  path[0] = x_0;
  path[static_cast<std::size_t>(t)] = x_t;
  // Odometer over the free intermediate states x_1 .. x_{t-1}.
  const int free = t - 1;
  long total = 1;
  for (int i = 0; i < free; ++i) total *= k;
  for (long code = 0; code < total; ++code) {
    long c = code;
    for (int i = 1; i <= free; ++i) {
      path[static_cast<std::size_t>(i)] = static_cast<int>(c % k);
      c /= k;
    }
    double prob = 1.0;
    for (int s = 1; s <= t; ++s)
      prob *= q[static_cast<std::size_t>(s) - 1](path[static_cast<std::size_t>(s)], path[static_cast<std::size_t>(s) - 1]);
    joint[path[static_cast<std::size_t>(t) - 1]] += prob;
  }
  return joint / joint.sum();
}

inline Eigen::MatrixXd random_column_stochastic(int k, std::mt19937_64& rng, double floor = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd m(k, k);
  for (int j = 0; j < k; ++j) {
    for (int i = 0; i < k; ++i) m(i, j) = floor + u(rng);
    m.col(j) /= m.col(j).sum();
  }
  return m;
}

}  // namespace qwdiff::oracle
