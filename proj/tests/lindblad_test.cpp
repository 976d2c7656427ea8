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

#include "qwdiff/lindblad.hpp"

#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace qwdiff;

namespace {

double max_abs(const ComplexMatrix& m) { return m.cwiseAbs().maxCoeff(); }

DensityMatrix random_density(std::mt19937_64& rng, Eigen::Index dim) {
  std::normal_distribution<double> g;
  ComplexMatrix a(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) a(i, j) = Complex(g(rng), g(rng));
  ComplexMatrix rho = a * a.adjoint();
  rho /= rho.trace().real();
  return DensityMatrix(0.5 * (rho + rho.adjoint()));
}

double min_eigenvalue(const ComplexMatrix& rho) {
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> eig(rho, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

}  // namespace

TEST(density_matrix, rejects_invalid_states) {
  ComplexMatrix r = ComplexMatrix::Identity(2, 2);
  EXPECT_THROW(DensityMatrix{r}, ParameterError);  // trace 2
  r(0, 0) = 1.5;
  r(1, 1) = -0.5;
  EXPECT_THROW(DensityMatrix{r}, ParameterError);  // negative eigenvalue
  ComplexMatrix nh = ComplexMatrix::Identity(2, 2) * 0.5;
  nh(0, 1) = 0.1;
  EXPECT_THROW(DensityMatrix{nh}, ParameterError);
}

TEST(build_generator, validates_omega_and_graph) {
  EXPECT_THROW(build_generator(cycle_graph(8), -0.1), ParameterError);
  EXPECT_THROW(build_generator(cycle_graph(8), 1.5), ParameterError);
  Eigen::MatrixXi a = Eigen::MatrixXi::Zero(4, 4);
  a(0, 1) = a(1, 0) = a(2, 3) = a(3, 2) = 1;
  EXPECT_THROW(build_generator(Graph(a), 0.5), InvalidGraphError);
}

TEST(build_generator, linear_operators_have_one_entry) {
  const Liouvillian l = build_generator(cycle_graph(8), 1.0, AmplitudeConvention::kLinear);
  EXPECT_EQ(l.lindblad_ops().size(), 16u);
  for (const auto& op : l.lindblad_ops()) {
    int nonzero = 0;
    for (Eigen::Index i = 0; i < 8; ++i)
      for (Eigen::Index j = 0; j < 8; ++j)
        if (op(i, j) != Complex(0.0)) {
          ++nonzero;
          EXPECT_DOUBLE_EQ(op(i, j).real(), 0.5);
        }
    EXPECT_EQ(nonzero, 1);
  }
  EXPECT_LT(max_abs(l.hamiltonian() - l.hamiltonian().adjoint()), 1e-12);
}

TEST(build_generator, laplacian_hamiltonian) {
  const Liouvillian l = build_generator(cycle_graph(5), 0.0, AmplitudeConvention::kSqrt, HamiltonianKind::kLaplacian);
  EXPECT_DOUBLE_EQ(l.hamiltonian()(0, 0).real(), 2.0);
  EXPECT_DOUBLE_EQ(l.hamiltonian()(0, 1).real(), -1.0);
  EXPECT_DOUBLE_EQ(l.hamiltonian()(0, 2).real(), 0.0);
}

TEST(build_generator, unitary_limit_preserves_trace_and_purity) {
  std::mt19937_64 rng(17);
  const Liouvillian l = build_generator(cycle_graph(8), 0.0);
  for (int trial = 0; trial < 10; ++trial) {
    const DensityMatrix rho = random_density(rng, 8);
    const ComplexMatrix d = l.apply(rho.matrix());
    EXPECT_LT(std::abs(d.trace()), 1e-12);
    // d/dt tr(rho^2) = 2 Re tr(rho L[rho]).
    EXPECT_LT(std::abs((rho.matrix() * d).trace().real()), 1e-12);
  }
}

TEST(build_generator, half_omega_is_average_of_pure_cases) {
  std::mt19937_64 rng(19);
  const Graph g = cycle_graph(8);
  const Liouvillian half = build_generator(g, 0.5);
  const Liouvillian coherent = build_generator(g, 0.0);
  const Liouvillian dissipative = build_generator(g, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    const ComplexMatrix rho = random_density(rng, 8).matrix();
    const ComplexMatrix mix = 0.5 * coherent.apply(rho) + 0.5 * dissipative.apply(rho);
    EXPECT_LT(max_abs(half.apply(rho) - mix), 1e-14);
  }
}

TEST(build_generator, full_dissipation_matches_classical_rates) {
  const Graph g = cycle_graph(8);
  const Eigen::MatrixXd s = transition_matrix(g).matrix();
  struct Case {
    AmplitudeConvention convention;
    Eigen::MatrixXd rates;
  };
  for (const Case& c : {Case{AmplitudeConvention::kLinear, s.cwiseProduct(s)}, Case{AmplitudeConvention::kSqrt, s}}) {
    const Liouvillian l = build_generator(g, 1.0, c.convention);
    for (double tau : {0.6, 3.0}) {
      const Eigen::VectorXd pops = propagate(l, DensityMatrix::basis(8, 0), tau).populations();
      const Eigen::VectorXd expected = oracle::classical_rates_propagate(c.rates, Eigen::VectorXd::Unit(8, 0), tau);
      EXPECT_LT((pops - expected).cwiseAbs().maxCoeff(), 1e-8);
    }
  }
}

TEST(propagate, relaxes_to_uniform) {
  const Liouvillian l = build_generator(cycle_graph(8), 1.0);
  const DensityMatrix rho = propagate(l, DensityMatrix::basis(8, 0), 50.0);
  const ComplexMatrix& m = rho.matrix();
  for (Eigen::Index i = 0; i < 8; ++i) {
    EXPECT_NEAR(m(i, i).real(), 0.125, 1e-6);
    for (Eigen::Index j = 0; j < 8; ++j)
      if (i != j) EXPECT_LT(std::abs(m(i, j)), 1e-6);
  }
}

TEST(propagate, unitary_limit_keeps_state_pure) {
  const Liouvillian l = build_generator(cycle_graph(8), 0.0);
  for (double tau : {0.6, 6.0, 20.0}) EXPECT_NEAR(propagate(l, DensityMatrix::basis(8, 0), tau).purity(), 1.0, 1e-8);
}

TEST(propagate, rejects_bad_arguments) {
  const Liouvillian l = build_generator(cycle_graph(8), 0.5);
  EXPECT_THROW(propagate(l, DensityMatrix::basis(8, 0), 0.0, 10), ParameterError);
  EXPECT_THROW(propagate(l, DensityMatrix::basis(8, 0), 0.6, 0), ParameterError);
  EXPECT_THROW(propagate(l, DensityMatrix::basis(4, 0), 0.6, 10), ShapeError);
}

TEST(propagate, too_few_substeps_is_reported) {
  const Liouvillian l = build_generator(cycle_graph(8), 0.0);
  EXPECT_THROW(propagate(l, DensityMatrix::basis(8, 0), 50.0, 1), NumericalInstabilityError);
}

TEST(propagate, sixty_four_substeps_match_superoperator_exponential) {
  for (double omega : {0.0, 0.5, 1.0}) {
    const Liouvillian l = build_generator(cycle_graph(8), omega);
    const DensityMatrix rho0 = DensityMatrix::basis(8, 0);
    const ComplexMatrix got = propagate(l, rho0, 0.6, 64).matrix();
    EXPECT_LE(max_abs(got - oracle::expm_propagate(l, rho0.matrix(), 0.6)), 1e-8) << "omega=" << omega;
  }
}

TEST(propagate, default_substeps_match_superoperator_exponential_on_grid) {
  std::mt19937_64 rng(23);
  const DensityMatrix mixed = random_density(rng, 8);
  for (auto convention : {AmplitudeConvention::kSqrt, AmplitudeConvention::kLinear}) {
    for (double omega : {0.0, 0.3, 0.5, 1.0}) {
      const Liouvillian l = build_generator(cycle_graph(8), omega, convention);
      for (double tau : {0.06, 0.6, 6.0}) {
        for (const DensityMatrix& rho0 : {DensityMatrix::basis(8, 0), mixed}) {
          const ComplexMatrix got = propagate(l, rho0, tau).matrix();
          EXPECT_LE(max_abs(got - oracle::expm_propagate(l, rho0.matrix(), tau)), 1e-8)
              << "omega=" << omega << " tau=" << tau;
        }
      }
    }
  }
}

TEST(propagate, preserves_state_invariants_for_random_states) {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Graph g = cycle_graph(8);
  for (int trial = 0; trial < 50; ++trial) {
    const Liouvillian l = build_generator(g, u(rng));
    const DensityMatrix rho = propagate(l, random_density(rng, 8), 0.6);
    const ComplexMatrix& m = rho.matrix();
    EXPECT_LT(std::abs(m.trace() - Complex(1.0)), 1e-10);
    EXPECT_LT(max_abs(m - m.adjoint()), 1e-10);
    EXPECT_GE(min_eigenvalue(m), -1e-8);
  }
}

TEST(propagate, semigroup) {
  std::mt19937_64 rng(31);
  for (double omega : {0.0, 0.4, 1.0}) {
    const Liouvillian l = build_generator(cycle_graph(8), omega);
    const DensityMatrix rho0 = random_density(rng, 8);
    const DensityMatrix split = propagate(l, propagate(l, rho0, 0.6), 1.8);
    const DensityMatrix joint = propagate(l, rho0, 2.4);
    EXPECT_LT(max_abs(split.matrix() - joint.matrix()), 1e-7);
  }
}

TEST(step_kernel, circulant_on_cycle) {
  for (double omega : {0.0, 0.3, 1.0}) {
    const WalkKernel k = step_kernel(build_generator(cycle_graph(8), omega), 0.6);
    for (Eigen::Index i = 0; i < 8; ++i)
      for (Eigen::Index j = 0; j < 8; ++j)
        EXPECT_NEAR(k.matrix()(i, j), k.matrix()((i + 1) % 8, (j + 1) % 8), 1e-10);
    for (Eigen::Index j = 0; j < 8; ++j) {
      EXPECT_NEAR(k.matrix().col(j).sum(), 1.0, 1e-9);
      EXPECT_GE(k.matrix().col(j).minCoeff(), 0.0);
    }
  }
}

TEST(step_kernel, long_time_is_uniform) {
  const WalkKernel k = step_kernel(build_generator(cycle_graph(8), 1.0), 50.0);
  EXPECT_LT((k.matrix() - Eigen::MatrixXd::Constant(8, 8, 0.125)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(step_kernel, short_time_is_near_identity) {
  for (double omega : {0.0, 0.5, 1.0}) {
    const Liouvillian l = build_generator(cycle_graph(8), omega);
    for (double tau : {1e-2, 1e-3}) {
      const WalkKernel k = step_kernel(l, tau);
      EXPECT_LT((k.matrix() - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff(), 2.0 * tau);
    }
  }
}

TEST(kl_trace, full_dissipation_is_monotone_and_decreasing) {
  const std::vector<double> trace = kl_trace(1.0, 8, 20, 0.6);
  ASSERT_EQ(trace.size(), 20u);
  for (std::size_t t = 1; t < trace.size(); ++t) EXPECT_LE(trace[t] - trace[t - 1], 1e-9);
  EXPECT_LT(trace.back(), trace.front());
  EXPECT_LT(trace.back(), std::log(8.0));
}

TEST(kl_trace, unitary_walk_oscillates) {
  const std::vector<double> trace = kl_trace(0.0, 8, 20, 0.6);
  double max_rise = 0.0;
  for (std::size_t t = 1; t < trace.size(); ++t) max_rise = std::max(max_rise, trace[t] - trace[t - 1]);
  EXPECT_GT(max_rise, 1e-3);
}
