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
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "qwdiff/categorical_image.hpp"
#include "qwdiff/diffusion.hpp"
#include "qwdiff/errors.hpp"
#include "qwdiff/random.hpp"

// Backward model: one-hot(x_t) -> shared head (ReLU) -> tail t: dense (ReLU)
// -> dense -> per-pixel logits over K levels for x_{t-1}. Tails are indexed by
// the diffusion step, so time conditioning is purely structural.

namespace qwdiff::denoiser {

inline constexpr int kDefaultHidden = 800;

struct Shape {
  int width = 28;
  int height = 28;
  int k = 8;
  int t_steps = 20;
  int hidden = kDefaultHidden;

  Eigen::Index pixels() const { return static_cast<Eigen::Index>(width) * height; }
  Eigen::Index io_width() const { return pixels() * k; }

  void validate() const {
    if (width <= 0 || height <= 0 || k <= 1 || t_steps <= 0 || hidden <= 0)
      throw ParameterError("denoiser dimensions must be positive (k >= 2)");
  }

  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Fully connected layer; `w` is out x in.
struct Dense {
  Eigen::MatrixXd w;
  Eigen::VectorXd b;

  static Dense zeros(Eigen::Index out, Eigen::Index in) {
    return {Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)};
  }
  Eigen::Index size() const { return w.size() + b.size(); }
};

struct Tail {
  Dense hidden;  ///< hidden -> hidden, ReLU
  Dense out;     ///< hidden -> pixels * k, linear

  static Tail zeros(const Shape& s) { return {Dense::zeros(s.hidden, s.hidden), Dense::zeros(s.io_width(), s.hidden)}; }
};

struct DenoiserParams {
  Shape shape;
  Dense head;               ///< pixels * k -> hidden, ReLU
  std::vector<Tail> tails;  ///< tails[t - 1] serves step t

  static DenoiserParams zeros(const Shape& s) {
    s.validate();
    DenoiserParams p;
    p.shape = s;
    p.head = Dense::zeros(s.hidden, s.io_width());
    p.tails.reserve(static_cast<std::size_t>(s.t_steps));
    for (int t = 0; t < s.t_steps; ++t) p.tails.push_back(Tail::zeros(s));
    return p;
  }

  Tail& tail(int t) { return tails.at(static_cast<std::size_t>(t) - 1); }
  const Tail& tail(int t) const { return tails.at(static_cast<std::size_t>(t) - 1); }

  std::size_t parameter_count() const {
    std::size_t n = static_cast<std::size_t>(head.size());
    for (const auto& t : tails) n += static_cast<std::size_t>(t.hidden.size() + t.out.size());
    return n;
  }

  /// Visits every tensor in checkpoint order: head.w, head.b, then for each
  /// step hidden.w, hidden.b, out.w, out.b.
  template <typename Self, typename Fn>
  static void for_each_tensor(Self& self, Fn&& fn) {
    fn(self.head.w);
    fn(self.head.b);
    for (auto& t : self.tails) {
      fn(t.hidden.w);
      fn(t.hidden.b);
      fn(t.out.w);
      fn(t.out.b);
    }
  }
};

/// Weights uniform in +-1/sqrt(fan_in), biases zero.
inline DenoiserParams init_params(int width, int height, int k, int t_steps, std::uint64_t seed,
                                  int hidden = kDefaultHidden) {
  DenoiserParams p = DenoiserParams::zeros(Shape{width, height, k, t_steps, hidden});
  Rng rng(seed);
  auto fill = [&rng](Eigen::MatrixXd& w) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    // Row-major draw order so the sequence matches the checkpoint layout.
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = (2.0 * rng.uniform() - 1.0) * bound;
  };
  fill(p.head.w);
  for (auto& t : p.tails) {
    fill(t.hidden.w);
    fill(t.out.w);
  }
  return p;
}

inline void check_image(const Shape& s, const CategoricalImage& img) {
  if (img.width() != s.width || img.height() != s.height || img.k() != s.k)
    throw ShapeError("image shape does not match the denoiser");
}

inline void check_step(const Shape& s, int t) {
  if (t < 1 || t > s.t_steps)
    throw ParameterError("step " + std::to_string(t) + " outside [1, " + std::to_string(s.t_steps) + "]");
}

/// Per-pixel softmax over consecutive blocks of k rows, for every column.
inline Eigen::MatrixXd softmax_blocks(const Eigen::MatrixXd& logits, int k) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    for (Eigen::Index base = 0; base < logits.rows(); base += k) {
      const auto block = logits.col(c).segment(base, k);
      const double m = block.maxCoeff();
      auto dst = out.col(c).segment(base, k);
      dst = (block.array() - m).exp().matrix();
      dst /= dst.sum();
    }
  }
  return out;
}

namespace detail {

/// Activations of one forward pass over a batch sharing step t.
struct Activations {
  Eigen::MatrixXd head_pre;  // hidden x B
  Eigen::MatrixXd head;      // hidden x B
  Eigen::MatrixXd tail_pre;  // hidden x B
  Eigen::MatrixXd tail;      // hidden x B
  Eigen::MatrixXd logits;    // pixels*k x B
};

inline Eigen::MatrixXd head_preactivation(const DenoiserParams& p, std::span<const CategoricalImage* const> inputs) {
  const int k = p.shape.k;
  Eigen::MatrixXd pre(p.shape.hidden, static_cast<Eigen::Index>(inputs.size()));
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    auto col = pre.col(static_cast<Eigen::Index>(b));
    col = p.head.b;
    const auto& levels = inputs[b]->levels();
    for (std::size_t px = 0; px < levels.size(); ++px)
      col += p.head.w.col(static_cast<Eigen::Index>(px) * k + levels[px]);
  }
  return pre;
}

inline Activations forward(const DenoiserParams& p, std::span<const CategoricalImage* const> inputs, int t) {
  const Tail& tail = p.tail(t);
  Activations a;
  a.head_pre = head_preactivation(p, inputs);
  a.head = a.head_pre.cwiseMax(0.0);
  a.tail_pre = tail.hidden.w * a.head;
  a.tail_pre.colwise() += tail.hidden.b;
  a.tail = a.tail_pre.cwiseMax(0.0);
  a.logits = tail.out.w * a.tail;
  a.logits.colwise() += tail.out.b;
  return a;
}

}  // namespace detail

/// Logits for a batch of inputs at step t, one column per input.
inline Eigen::MatrixXd forward_logits_batch(const DenoiserParams& p, std::span<const CategoricalImage* const> inputs,
                                            int t) {
  check_step(p.shape, t);
  for (const auto* img : inputs) check_image(p.shape, *img);
  return detail::forward(p, inputs, t).logits;
}

inline Eigen::VectorXd forward_logits(const DenoiserParams& p, const CategoricalImage& x_t, int t) {
  const CategoricalImage* in[] = {&x_t};
  return forward_logits_batch(p, in, t).col(0);
}

/// Post-ReLU head output, usable as a learned feature map.
inline Eigen::VectorXd head_activations(const DenoiserParams& p, const CategoricalImage& img) {
  check_image(p.shape, img);
  const CategoricalImage* in[] = {&img};
  return detail::head_preactivation(p, in).col(0).cwiseMax(0.0);
}

/// Gradient buffers shaped like DenoiserParams; only tails touched by the
/// last batch are marked active.
struct Gradients {
  Shape shape;
  Dense head;
  std::vector<Tail> tails;
  std::vector<bool> active;

  void reset(const Shape& s) {
    if (!(shape == s) || head.w.size() == 0) {
      shape = s;
      head = Dense::zeros(s.hidden, s.io_width());
      tails.assign(static_cast<std::size_t>(s.t_steps), Tail{});
    } else {
      head.w.setZero();
      head.b.setZero();
    }
    active.assign(static_cast<std::size_t>(s.t_steps), false);
  }

  Tail& activate(int t) {
    auto idx = static_cast<std::size_t>(t) - 1;
    Tail& tail = tails[idx];
    if (!active[idx]) {
      if (tail.out.w.size() == 0) {
        tail = Tail::zeros(shape);
      } else {
        tail.hidden.w.setZero();
        tail.hidden.b.setZero();
        tail.out.w.setZero();
        tail.out.b.setZero();
      }
      active[idx] = true;
    }
    return tail;
  }

  bool is_active(int t) const { return active.at(static_cast<std::size_t>(t) - 1); }
  const Tail& tail(int t) const { return tails.at(static_cast<std::size_t>(t) - 1); }
};

/// One training example: the input x_t at step t and a target distribution
/// over the K levels of every pixel of x_{t-1} (pixels*k values, blockwise).
struct Example {
  const CategoricalImage* x_t = nullptr;
  int t = 1;
  Eigen::VectorXd target;
};

inline Eigen::VectorXd one_hot(const CategoricalImage& img) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(img.pixels()) * img.k());
  for (std::size_t px = 0; px < img.pixels(); ++px) v[static_cast<Eigen::Index>(px) * img.k() + img[px]] = 1.0;
  return v;
}

/// Mean over examples and pixels of KL(target || softmax(logits)); with
/// one-hot targets this is the categorical cross-entropy. Gradients are
/// written into `grads` when given.
inline double loss_and_grads(const DenoiserParams& p, std::span<const Example> batch, Gradients* grads) {
  if (batch.empty()) throw ParameterError("empty batch");
  const Shape& s = p.shape;
  const int k = s.k;
  for (const auto& ex : batch) {
    check_step(s, ex.t);
    check_image(s, *ex.x_t);
    if (ex.target.size() != s.io_width()) throw ShapeError("target has the wrong length");
  }
  if (grads) grads->reset(s);
  const double norm = 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(s.pixels()));

  // Group by step; ties keep input order so the reduction order is fixed.
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) groups[batch[i].t].push_back(i);

  double loss = 0.0;
  for (const auto& [t, members] : groups) {
    std::vector<const CategoricalImage*> inputs;
    inputs.reserve(members.size());
    for (std::size_t i : members) inputs.push_back(batch[i].x_t);
    const detail::Activations a = detail::forward(p, inputs, t);
    const Eigen::MatrixXd probs = softmax_blocks(a.logits, k);

    Eigen::MatrixXd d_logits(a.logits.rows(), a.logits.cols());
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto col = static_cast<Eigen::Index>(m);
      const Eigen::VectorXd& q = batch[members[m]].target;
      for (Eigen::Index base = 0; base < a.logits.rows(); base += k) {
        const auto z = a.logits.col(col).segment(base, k);
        const double zmax = z.maxCoeff();
        const double lse = zmax + std::log((z.array() - zmax).exp().sum());
        for (int j = 0; j < k; ++j) {
          const double qj = q[base + j];
          if (qj > 0.0) loss += qj * (std::log(qj) - (z[j] - lse));
        }
      }
      d_logits.col(col) = (probs.col(col) - q) * norm;
    }
    if (!grads) continue;

    const Tail& tail = p.tail(t);
    Tail& g = grads->activate(t);
    g.out.w.noalias() += d_logits * a.tail.transpose();
    g.out.b += d_logits.rowwise().sum();
    Eigen::MatrixXd d_tail = tail.out.w.transpose() * d_logits;
    d_tail = d_tail.cwiseProduct((a.tail_pre.array() > 0.0).cast<double>().matrix());
    g.hidden.w.noalias() += d_tail * a.head.transpose();
    g.hidden.b += d_tail.rowwise().sum();
    Eigen::MatrixXd d_head = tail.hidden.w.transpose() * d_tail;
    d_head = d_head.cwiseProduct((a.head_pre.array() > 0.0).cast<double>().matrix());
    grads->head.b += d_head.rowwise().sum();
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto col = d_head.col(static_cast<Eigen::Index>(m));
      const auto& levels = inputs[m]->levels();
      for (std::size_t px = 0; px < levels.size(); ++px)
        grads->head.w.col(static_cast<Eigen::Index>(px) * k + levels[px]) += col;
    }
  }
  return loss * norm;
}

/// A (x_t, x_{t-1}, t) pair for the cross-entropy objective.
struct TransitionPair {
  const CategoricalImage* x_t = nullptr;
  const CategoricalImage* x_prev = nullptr;
  int t = 1;
};

inline double ce_loss_and_grads(const DenoiserParams& p, std::span<const TransitionPair> batch, Gradients* grads) {
  std::vector<Example> ex;
  ex.reserve(batch.size());
  for (const auto& pair : batch) {
    check_image(p.shape, *pair.x_prev);
    ex.push_back({pair.x_t, pair.t, one_hot(*pair.x_prev)});
  }
  return loss_and_grads(p, ex, grads);
}

/// A (x_t, x_0, t) triple for the posterior-KL objective.
struct PosteriorTriple {
  const CategoricalImage* x_t = nullptr;
  const CategoricalImage* x_0 = nullptr;
  int t = 1;
};

/// Per-pixel posterior q(x_{t-1} | x_t, x_0), laid out like the logits.
inline Eigen::VectorXd posterior_target(const CategoricalImage& x_t, const CategoricalImage& x_0, int t,
                                        const QSchedule& sched) {
  if (!x_t.same_shape(x_0)) throw ShapeError("x_t and x_0 differ in shape");
  const int k = x_t.k();
  Eigen::VectorXd out(static_cast<Eigen::Index>(x_t.pixels()) * k);
  for (std::size_t px = 0; px < x_t.pixels(); ++px)
    out.segment(static_cast<Eigen::Index>(px) * k, k) = posterior(x_t[px], x_0[px], t, sched);
  return out;
}

inline double posterior_kl_loss_and_grads(const DenoiserParams& p, std::span<const PosteriorTriple> batch,
                                          const QSchedule& sched, Gradients* grads) {
  std::vector<Example> ex;
  ex.reserve(batch.size());
  for (const auto& tr : batch) {
    check_image(p.shape, *tr.x_0);
    ex.push_back({tr.x_t, tr.t, posterior_target(*tr.x_t, *tr.x_0, tr.t, sched)});
  }
  return loss_and_grads(p, ex, grads);
}

inline double posterior_kl_loss(const DenoiserParams& p, std::span<const PosteriorTriple> batch, const QSchedule& sched) {
  return posterior_kl_loss_and_grads(p, batch, sched, nullptr);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments shaped like the parameters. Each block (head, every tail)
/// keeps its own step count and is only advanced when it received a gradient.
struct OptimizerState {
  AdamConfig config;
  DenoiserParams m;
  DenoiserParams v;
  long head_step = 0;
  std::vector<long> tail_steps;

  static OptimizerState create(const Shape& s, AdamConfig cfg = {}) {
    OptimizerState st;
    st.config = cfg;
    st.m = DenoiserParams::zeros(s);
    st.v = DenoiserParams::zeros(s);
    st.tail_steps.assign(static_cast<std::size_t>(s.t_steps), 0);
    return st;
  }
};

namespace detail {

inline void adam_update(Eigen::Ref<Eigen::MatrixXd> param, const Eigen::Ref<const Eigen::MatrixXd>& grad,
                        Eigen::Ref<Eigen::MatrixXd> m, Eigen::Ref<Eigen::MatrixXd> v, const AdamConfig& c, long step) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols() || m.rows() != param.rows() ||
      m.cols() != param.cols() || v.rows() != param.rows() || v.cols() != param.cols())
    throw ShapeError("adam: parameter, gradient and moment shapes differ");
  const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  const double step_size = c.lr / c1;
  const double inv_sqrt_c2 = 1.0 / std::sqrt(c2);
  double* pp = param.data();
  const double* gp = grad.data();
  double* mp = m.data();
  double* vp = v.data();
  const Eigen::Index n = param.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double g = gp[i];
    mp[i] = c.beta1 * mp[i] + (1.0 - c.beta1) * g;
    vp[i] = c.beta2 * vp[i] + (1.0 - c.beta2) * g * g;
    pp[i] -= step_size * mp[i] / (std::sqrt(vp[i]) * inv_sqrt_c2 + c.eps);
  }
}

inline void adam_dense(Dense& p, const Dense& g, Dense& m, Dense& v, const AdamConfig& c, long step) {
  adam_update(p.w, g.w, m.w, v.w, c, step);
  adam_update(p.b, g.b, m.b, v.b, c, step);
}

}  // namespace detail

/// Bias-corrected Adam on the head and on every tail with a gradient.
inline void adam_step(DenoiserParams& p, const Gradients& g, OptimizerState& s) {
  if (!(p.shape == g.shape) || !(p.shape == s.m.shape)) throw ShapeError("adam: shapes differ");
  ++s.head_step;
  detail::adam_dense(p.head, g.head, s.m.head, s.v.head, s.config, s.head_step);
  for (int t = 1; t <= p.shape.t_steps; ++t) {
    if (!g.is_active(t)) continue;
    const long step = ++s.tail_steps[static_cast<std::size_t>(t) - 1];
    Tail& pt = p.tail(t);
    const Tail& gt = g.tail(t);
    detail::adam_dense(pt.hidden, gt.hidden, s.m.tail(t).hidden, s.v.tail(t).hidden, s.config, step);
    detail::adam_dense(pt.out, gt.out, s.m.tail(t).out, s.v.tail(t).out, s.config, step);
  }
}

enum class Objective { kCrossEntropy, kPosteriorKl };

/// How timesteps are assigned inside a minibatch.
enum class BatchTimestep {
  kShared,  ///< one t ~ U{1..T} per minibatch
  kMixed,   ///< independent t ~ U{1..T} per example
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 16;
  double lr = 1e-3;
  Objective objective = Objective::kCrossEntropy;
  BatchTimestep batch_timestep = BatchTimestep::kShared;
  std::uint64_t seed = 0;
  int hidden = kDefaultHidden;
  /// Redraw forward trajectories from x_0 every epoch (needs the schedule).
  bool resample_forward = false;
  std::function<void(int epoch, double mean_loss)> on_epoch;

  void validate() const {
    if (epochs <= 0 || batch_size <= 0 || hidden <= 0 || !(lr > 0.0))
      throw ParameterError("training configuration values must be positive");
  }
};

struct TrainResult {
  DenoiserParams params;
  std::vector<double> loss_curve;  ///< mean minibatch loss per epoch
};

/// Minibatch training over shuffled images; each example pairs x_t with
/// x_{t-1} (cross-entropy) or with x_0 (posterior KL).
inline TrainResult train(const std::vector<Trajectory>& data, const TrainConfig& cfg,
                         const QSchedule* sched = nullptr) {
  cfg.validate();
  if (data.empty()) throw ParameterError("training set is empty");
  const CategoricalImage& first = data.front().at(0);
  const int t_steps = data.front().t_steps();
  if (t_steps < 1) throw ParameterError("trajectories need at least one forward step");
  for (const auto& tr : data)
    if (tr.t_steps() != t_steps || !tr.at(0).same_shape(first)) throw ShapeError("trajectories differ in shape");
  if ((cfg.objective == Objective::kPosteriorKl || cfg.resample_forward) && sched == nullptr)
    throw ParameterError("posterior-KL objective and forward resampling need the forward schedule");

  TrainResult result;
  result.params = init_params(first.width(), first.height(), first.k(), t_steps, derive_seed(cfg.seed, {1}), cfg.hidden);
  OptimizerState opt = OptimizerState::create(result.params.shape, AdamConfig{.lr = cfg.lr});
  Gradients grads;
  Rng rng(derive_seed(cfg.seed, {2}));

  std::vector<Trajectory> resampled;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<Trajectory>* current = &data;
    if (cfg.resample_forward && epoch > 0) {
      std::vector<CategoricalImage> x0;
      x0.reserve(data.size());
      for (const auto& tr : data) x0.push_back(tr.at(0));
      resampled = forward_dataset(x0, *sched, derive_seed(cfg.seed, {3, static_cast<std::uint64_t>(epoch)}));
      current = &resampled;
    }
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const int shared_t = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(t_steps)));
      double loss = 0.0;
      if (cfg.objective == Objective::kCrossEntropy) {
        std::vector<TransitionPair> batch;
        for (std::size_t i = start; i < end; ++i) {
          const int t = cfg.batch_timestep == BatchTimestep::kShared
                            ? shared_t
                            : 1 + static_cast<int>(rng.below(static_cast<std::size_t>(t_steps)));
          const Trajectory& tr = (*current)[order[i]];
          batch.push_back({&tr.at(t), &tr.at(t - 1), t});
        }
        loss = ce_loss_and_grads(result.params, batch, &grads);
      } else {
        std::vector<PosteriorTriple> batch;
        for (std::size_t i = start; i < end; ++i) {
          const int t = cfg.batch_timestep == BatchTimestep::kShared
                            ? shared_t
                            : 1 + static_cast<int>(rng.below(static_cast<std::size_t>(t_steps)));
          const Trajectory& tr = (*current)[order[i]];
          batch.push_back({&tr.at(t), &tr.at(0), t});
        }
        loss = posterior_kl_loss_and_grads(result.params, batch, *sched, &grads);
      }
      adam_step(result.params, grads, opt);
      epoch_loss += loss;
      ++batches;
    }
    result.loss_curve.push_back(epoch_loss / batches);
    if (cfg.on_epoch) cfg.on_epoch(epoch + 1, result.loss_curve.back());
  }
  return result;
}

/// Ancestral sampling: x_T uniform per pixel, then x_{t-1} ~ softmax(logits(x_t, t)).
inline std::vector<CategoricalImage> generate(const DenoiserParams& p, std::size_t n, std::uint64_t seed,
                                              std::size_t chunk = 128) {
  const Shape& s = p.shape;
  Rng rng(seed);
  std::vector<CategoricalImage> images;
  images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> levels(static_cast<std::size_t>(s.pixels()));
    for (auto& v : levels) v = static_cast<std::uint8_t>(rng.below(static_cast<std::size_t>(s.k)));
    images.emplace_back(s.width, s.height, s.k, std::move(levels));
  }
  std::vector<double> weights(static_cast<std::size_t>(s.k));
  for (int t = s.t_steps; t >= 1; --t) {
    for (std::size_t begin = 0; begin < n; begin += chunk) {
      const std::size_t end = std::min(n, begin + chunk);
      std::vector<const CategoricalImage*> inputs;
      for (std::size_t i = begin; i < end; ++i) inputs.push_back(&images[i]);
      const Eigen::MatrixXd probs = softmax_blocks(detail::forward(p, inputs, t).logits, s.k);
      for (std::size_t i = begin; i < end; ++i) {
        const auto col = static_cast<Eigen::Index>(i - begin);
        std::vector<std::uint8_t> levels(static_cast<std::size_t>(s.pixels()));
        for (Eigen::Index px = 0; px < s.pixels(); ++px) {
          for (int j = 0; j < s.k; ++j) weights[static_cast<std::size_t>(j)] = probs(px * s.k + j, col);
          levels[static_cast<std::size_t>(px)] = static_cast<std::uint8_t>(rng.categorical(weights));
        }
        images[i] = CategoricalImage(s.width, s.height, s.k, std::move(levels));
      }
    }
  }
  return images;
}

// Checkpoint: "QDNP", u32 version, u32 W, H, K, T, then little-endian float64
// tensors in DenoiserParams::for_each_tensor order, matrices row-major. The
// hidden width is implied by the payload length.
namespace checkpoint {

inline constexpr std::array<char, 4> kMagic{'Q', 'D', 'N', 'P'};
inline constexpr std::uint32_t kVersion = 1;

inline std::uint64_t payload_doubles(const Shape& s) {
  const auto h = static_cast<std::uint64_t>(s.hidden);
  const auto io = static_cast<std::uint64_t>(s.io_width());
  const auto t = static_cast<std::uint64_t>(s.t_steps);
  return h * io + h + t * (h * h + h + io * h + io);
}

/// Solves payload_doubles(shape) == doubles for the hidden width.
inline int infer_hidden(int width, int height, int k, int t_steps, std::uint64_t doubles) {
  const double io = static_cast<double>(width) * height * k;
  const double t = t_steps;
  const double a = t, b = io + 1.0 + t * (1.0 + io), c = t * io - static_cast<double>(doubles);
  const double root = (-b + std::sqrt(b * b - 4.0 * a * c)) / (2.0 * a);
  const auto h = static_cast<int>(std::llround(root));
  if (h <= 0 || payload_doubles(Shape{width, height, k, t_steps, h}) != doubles)
    throw LengthError("checkpoint payload length does not match any hidden width");
  return h;
}

inline void save(const DenoiserParams& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic.data(), 4);
  auto put_u32 = [&out](std::uint32_t v) {
    std::array<char, 4> b{};
    for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b.data(), 4);
  };
  put_u32(kVersion);
  for (int v : {p.shape.width, p.shape.height, p.shape.k, p.shape.t_steps}) put_u32(static_cast<std::uint32_t>(v));
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  std::vector<double> row;
  DenoiserParams::for_each_tensor(p, [&](const auto& tensor) {
    if constexpr (std::is_same_v<std::decay_t<decltype(tensor)>, Eigen::MatrixXd>) {
      row.resize(static_cast<std::size_t>(tensor.cols()));
      for (Eigen::Index r = 0; r < tensor.rows(); ++r) {
        for (Eigen::Index c = 0; c < tensor.cols(); ++c) row[static_cast<std::size_t>(c)] = tensor(r, c);
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(double)));
      }
    } else {
      out.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    }
  });
  if (!out) throw IoError("short write to checkpoint " + path.string());
}

inline DenoiserParams load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || magic != kMagic) throw FormatError("checkpoint does not start with QDNP");
  auto get_u32 = [&in]() {
    std::array<unsigned char, 4> b{};
    in.read(reinterpret_cast<char*>(b.data()), 4);
    if (!in) throw LengthError("checkpoint header is truncated");
    return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
  };
  if (get_u32() != kVersion) throw FormatError("unsupported checkpoint version");
  const int w = static_cast<int>(get_u32()), h = static_cast<int>(get_u32()), k = static_cast<int>(get_u32()),
            t = static_cast<int>(get_u32());
  const auto header_end = in.tellg();
  in.seekg(0, std::ios::end);
  const auto payload_bytes = static_cast<std::uint64_t>(in.tellg() - header_end);
  in.seekg(header_end);
  if (payload_bytes % sizeof(double) != 0) throw LengthError("checkpoint payload is not a whole number of doubles");
  DenoiserParams p = DenoiserParams::zeros(Shape{w, h, k, t, infer_hidden(w, h, k, t, payload_bytes / sizeof(double))});
  std::vector<double> row;
  DenoiserParams::for_each_tensor(p, [&](auto& tensor) {
    if constexpr (std::is_same_v<std::decay_t<decltype(tensor)>, Eigen::MatrixXd>) {
      row.resize(static_cast<std::size_t>(tensor.cols()));
      for (Eigen::Index r = 0; r < tensor.rows(); ++r) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(double)));
        for (Eigen::Index c = 0; c < tensor.cols(); ++c) tensor(r, c) = row[static_cast<std::size_t>(c)];
      }
    } else {
      in.read(reinterpret_cast<char*>(tensor.data()), static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    }
  });
  if (!in) throw LengthError("checkpoint payload is truncated");
  return p;
}

}  // namespace checkpoint

}  // namespace qwdiff::denoiser
