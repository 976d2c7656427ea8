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
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qwdiff/errors.hpp"

namespace qwdiff {

inline constexpr double kStochasticTolerance = 1e-12;

/// Probability distribution over graph nodes (or categories). Entries are
/// nonnegative and sum to one.
class ProbabilityVector {
 public:
  ProbabilityVector() = default;

  explicit ProbabilityVector(Eigen::VectorXd probs, double tolerance = kStochasticTolerance)
      : probs_(std::move(probs)) {
    if (probs_.size() == 0) throw ShapeError("probability vector is empty");
    for (Eigen::Index i = 0; i < probs_.size(); ++i)
      if (!(probs_[i] >= -tolerance)) throw ParameterError("probability vector has a negative entry");
    if (std::abs(probs_.sum() - 1.0) > tolerance)
      throw ParameterError("probability vector sums to " + std::to_string(probs_.sum()));
  }

  static ProbabilityVector delta(std::size_t n, std::size_t node) {
    Eigen::VectorXd p = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    p[static_cast<Eigen::Index>(node)] = 1.0;
    return ProbabilityVector(std::move(p));
  }

  static ProbabilityVector uniform(std::size_t n) {
    return ProbabilityVector(Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n)));
  }

  std::size_t size() const { return static_cast<std::size_t>(probs_.size()); }
  double operator[](std::size_t i) const { return probs_[static_cast<Eigen::Index>(i)]; }
  const Eigen::VectorXd& values() const { return probs_; }

 private:
  Eigen::VectorXd probs_;
};

/// Nonnegative square matrix whose columns sum to one: entry (i, j) is the
/// probability of moving to i from j.
class StochasticMatrix {
 public:
  StochasticMatrix() = default;

  explicit StochasticMatrix(Eigen::MatrixXd entries, double tolerance = kStochasticTolerance)
      : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols() || entries_.rows() == 0)
      throw ShapeError("stochastic matrix must be square and nonempty");
    if ((entries_.array() < -tolerance).any()) throw ParameterError("stochastic matrix has a negative entry");
    for (Eigen::Index j = 0; j < entries_.cols(); ++j)
      if (std::abs(entries_.col(j).sum() - 1.0) > tolerance)
        throw ParameterError("stochastic matrix column " + std::to_string(j) + " does not sum to 1");
  }

  std::size_t size() const { return static_cast<std::size_t>(entries_.rows()); }
  double operator()(std::size_t i, std::size_t j) const {
    return entries_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  const Eigen::MatrixXd& matrix() const { return entries_; }

 private:
  Eigen::MatrixXd entries_;
};

/// Simple undirected graph given by its 0/1 adjacency matrix.
class Graph {
 public:
  explicit Graph(Eigen::MatrixXi adjacency) : adjacency_(std::move(adjacency)) {
    const Eigen::Index n = adjacency_.rows();
    if (n == 0 || adjacency_.cols() != n) throw InvalidGraphError("adjacency must be square and nonempty");
    for (Eigen::Index i = 0; i < n; ++i) {
      if (adjacency_(i, i) != 0) throw InvalidGraphError("adjacency has a self loop");
      for (Eigen::Index j = 0; j < n; ++j) {
        const int a = adjacency_(i, j);
        if (a != 0 && a != 1) throw InvalidGraphError("adjacency entries must be 0 or 1");
        if (a != adjacency_(j, i)) throw InvalidGraphError("adjacency must be symmetric");
      }
    }
    degrees_.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) degrees_[static_cast<std::size_t>(i)] = adjacency_.row(i).sum();
  }

  std::size_t n_nodes() const { return degrees_.size(); }
  const Eigen::MatrixXi& adjacency() const { return adjacency_; }
  const std::vector<int>& degrees() const { return degrees_; }
  int degree(std::size_t node) const { return degrees_[node]; }
  bool adjacent(std::size_t i, std::size_t j) const {
    return adjacency_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) != 0;
  }

  bool connected() const {
    std::vector<bool> seen(n_nodes(), false);
    std::vector<std::size_t> stack{0};
    seen[0] = true;
    std::size_t count = 1;
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      for (std::size_t u = 0; u < n_nodes(); ++u) {
        if (adjacent(v, u) && !seen[u]) {
          seen[u] = true;
          ++count;
          stack.push_back(u);
        }
      }
    }
    return count == n_nodes();
  }

 private:
  Eigen::MatrixXi adjacency_;
  std::vector<int> degrees_;
};

inline Graph cycle_graph(std::size_t n) {
  if (n < 3) throw InvalidGraphError("cycle graph needs at least 3 nodes, got " + std::to_string(n));
  const auto size = static_cast<Eigen::Index>(n);
  Eigen::MatrixXi a = Eigen::MatrixXi::Zero(size, size);
  for (Eigen::Index i = 0; i < size; ++i) {
    a(i, (i + 1) % size) = 1;
    a((i + 1) % size, i) = 1;
  }
  return Graph(std::move(a));
}

inline Graph path_graph(std::size_t n) {
  if (n < 2) throw InvalidGraphError("path graph needs at least 2 nodes");
  const auto size = static_cast<Eigen::Index>(n);
  Eigen::MatrixXi a = Eigen::MatrixXi::Zero(size, size);
  for (Eigen::Index i = 0; i + 1 < size; ++i) a(i, i + 1) = a(i + 1, i) = 1;
  return Graph(std::move(a));
}

/// Random-walk transition matrix, normalized by the degree of the source node
/// so that columns sum to one.
inline StochasticMatrix transition_matrix(const Graph& g) {
  const auto n = static_cast<Eigen::Index>(g.n_nodes());
  for (std::size_t j = 0; j < g.n_nodes(); ++j)
    if (g.degree(j) == 0) throw InvalidGraphError("node " + std::to_string(j) + " is isolated");
  Eigen::MatrixXd s(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      s(i, j) = static_cast<double>(g.adjacency()(i, j)) / g.degree(static_cast<std::size_t>(j));
  return StochasticMatrix(std::move(s));
}

inline ProbabilityVector crw_step(const ProbabilityVector& p, const StochasticMatrix& s) {
  if (p.size() != s.size())
    throw ShapeError("crw_step: vector of size " + std::to_string(p.size()) + " vs matrix of size " +
                     std::to_string(s.size()));
  return ProbabilityVector(s.matrix() * p.values());
}

/// d_i / sum_j d_j; uniform for regular graphs.
inline ProbabilityVector stationary_distribution(const Graph& g) {
  if (!g.connected()) throw InvalidGraphError("stationary distribution requires a connected graph");
  Eigen::VectorXd p(static_cast<Eigen::Index>(g.n_nodes()));
  double total = 0.0;
  for (int d : g.degrees()) total += d;
  for (std::size_t i = 0; i < g.n_nodes(); ++i) p[static_cast<Eigen::Index>(i)] = g.degree(i) / total;
  return ProbabilityVector(std::move(p));
}

}  // namespace qwdiff
