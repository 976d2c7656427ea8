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

#include "qwdiff/denoiser.hpp"

#include <filesystem>
#include <random>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "qwdiff/data.hpp"
#include "qwdiff/lindblad.hpp"
#include "qwdiff/metrics.hpp"

using namespace qwdiff;
using namespace qwdiff::denoiser;

namespace {

std::vector<double*> scalars(DenoiserParams& p) {
  std::vector<double*> out;
  DenoiserParams::for_each_tensor(p, [&](auto& tensor) {
    for (Eigen::Index i = 0; i < tensor.size(); ++i) out.push_back(tensor.data() + i);
  });
  return out;
}

/// Gradient entries in the same order as `scalars`; inactive tails are zero.
std::vector<double> flatten(const Gradients& g) {
  std::vector<double> out;
  auto push = [&](const auto& tensor) { out.insert(out.end(), tensor.data(), tensor.data() + tensor.size()); };
  auto zeros = [&](Eigen::Index n) { out.insert(out.end(), static_cast<std::size_t>(n), 0.0); };
  push(g.head.w);
  push(g.head.b);
  const Tail shape_only = Tail::zeros(g.shape);
  for (int t = 1; t <= g.shape.t_steps; ++t) {
    if (g.is_active(t)) {
      const Tail& tail = g.tail(t);
      push(tail.hidden.w);
      push(tail.hidden.b);
      push(tail.out.w);
      push(tail.out.b);
    } else {
      zeros(shape_only.hidden.size() + shape_only.out.size());
    }
  }
  return out;
}

CategoricalImage random_image(std::mt19937_64& rng, int w, int h, int k) {
  std::uniform_int_distribution<int> level(0, k - 1);
  std::vector<std::uint8_t> v(static_cast<std::size_t>(w * h));
  for (auto& x : v) x = static_cast<std::uint8_t>(level(rng));
  return CategoricalImage(w, h, k, v);
}

std::vector<CategoricalImage> digit_zero_images(std::size_t count) {
  const std::filesystem::path dir(QWDIFF_DATA_DIR);
  const data::RawDataset ds = data::load_idx(dir / "mnist5k-images-idx3-ubyte", dir / "mnist5k-labels-idx1-ubyte");
  return data::quantize(data::take(data::filter_digit(ds, 0), count), 8);
}

std::vector<Trajectory> identity_trajectories(const std::vector<CategoricalImage>& images, int t_steps) {
  std::vector<Trajectory> out;
  for (const auto& img : images) out.push_back(Trajectory{std::vector<CategoricalImage>(static_cast<std::size_t>(t_steps) + 1, img)});
  return out;
}

}  // namespace

TEST(init_params, shapes_and_determinism) {
  const DenoiserParams a = init_params(28, 28, 8, 3, 5, 16);
  EXPECT_EQ(a.head.w.cols(), 6272);
  EXPECT_EQ(a.tail(1).out.w.rows(), 6272);
  EXPECT_EQ(a.tails.size(), 3u);
  const DenoiserParams b = init_params(28, 28, 8, 3, 5, 16);
  EXPECT_EQ(a.head.w, b.head.w);
  EXPECT_EQ(a.tail(3).out.w, b.tail(3).out.w);
  const double bound = 1.0 / std::sqrt(6272.0);
  EXPECT_LE(a.head.w.cwiseAbs().maxCoeff(), bound);
  EXPECT_EQ(a.head.b.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(init_params(0, 28, 8, 3, 5), ParameterError);
}

TEST(forward_logits, zero_params_give_uniform_softmax) {
  const DenoiserParams p = DenoiserParams::zeros(Shape{1, 1, 8, 2, 4});
  const Eigen::VectorXd logits = forward_logits(p, CategoricalImage::filled(1, 1, 8, 3), 1);
  ASSERT_EQ(logits.size(), 8);
  EXPECT_EQ(logits, Eigen::VectorXd::Zero(8));
  const Eigen::MatrixXd probs = softmax_blocks(logits, 8);
  EXPECT_LT((probs - Eigen::VectorXd::Constant(8, 0.125)).cwiseAbs().maxCoeff(), 1e-16);
}

TEST(forward_logits, validates_step_and_shape) {
  const DenoiserParams p = init_params(2, 2, 4, 3, 1, 4);
  EXPECT_THROW(forward_logits(p, CategoricalImage::filled(2, 2, 4, 0), 0), ParameterError);
  EXPECT_THROW(forward_logits(p, CategoricalImage::filled(2, 2, 4, 0), 4), ParameterError);
  EXPECT_THROW(forward_logits(p, CategoricalImage::filled(3, 2, 4, 0), 1), ShapeError);
}

TEST(softmax_blocks, normalized_and_shift_invariant) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 5.0);
  Eigen::MatrixXd logits(24, 3);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = g(rng);
  const Eigen::MatrixXd p = softmax_blocks(logits, 8);
  for (Eigen::Index c = 0; c < 3; ++c)
    for (Eigen::Index b = 0; b < 24; b += 8) EXPECT_NEAR(p.col(c).segment(b, 8).sum(), 1.0, 1e-12);
  Eigen::MatrixXd shifted = logits;
  shifted.col(1).segment(8, 8).array() += 123.0;
  EXPECT_LT((softmax_blocks(shifted, 8) - p).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ce_loss, zero_params_give_log_k) {
  const DenoiserParams p = DenoiserParams::zeros(Shape{3, 2, 8, 2, 5});
  std::mt19937_64 rng(4);
  const CategoricalImage a = random_image(rng, 3, 2, 8), b = random_image(rng, 3, 2, 8);
  const TransitionPair batch[] = {{&a, &b, 1}, {&b, &a, 2}};
  EXPECT_NEAR(ce_loss_and_grads(p, batch, nullptr), std::log(8.0), 1e-15);
  EXPECT_NEAR(std::log(8.0), 2.07944, 1e-5);
}

TEST(ce_loss, nonnegative) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const DenoiserParams p = init_params(2, 2, 4, 2, static_cast<std::uint64_t>(trial), 8);
    const CategoricalImage a = random_image(rng, 2, 2, 4), b = random_image(rng, 2, 2, 4);
    const TransitionPair batch[] = {{&a, &b, 1 + trial % 2}};
    EXPECT_GE(ce_loss_and_grads(p, batch, nullptr), 0.0);
  }
}

TEST(ce_loss, gradients_match_central_differences_on_single_pixel) {
  DenoiserParams p = init_params(1, 1, 8, 1, 9, 6);
  std::mt19937_64 rng(6);
  for (auto* x : scalars(p)) *x += 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
  const CategoricalImage xt = CategoricalImage::filled(1, 1, 8, 2), xp = CategoricalImage::filled(1, 1, 8, 5);
  const TransitionPair batch[] = {{&xt, &xp, 1}};
  Gradients g;
  ce_loss_and_grads(p, batch, &g);
  const std::vector<double> analytic = flatten(g);
  const auto params = scalars(p);
  ASSERT_EQ(analytic.size(), params.size());
  const double h = 1e-5;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = *params[i];
    *params[i] = saved + h;
    const double up = ce_loss_and_grads(p, batch, nullptr);
    *params[i] = saved - h;
    const double down = ce_loss_and_grads(p, batch, nullptr);
    *params[i] = saved;
    const double fd = (up - down) / (2 * h);
    EXPECT_LE(std::abs(fd - analytic[i]), 1e-4 * std::max({std::abs(fd), std::abs(analytic[i]), 1e-8})) << "param " << i;
  }
}

TEST(ce_loss, gradients_match_central_differences_across_head_and_tails) {
  DenoiserParams p = init_params(2, 2, 3, 3, 10, 6);
  std::mt19937_64 rng(7);
  for (auto* x : scalars(p)) *x += 0.2 * std::uniform_real_distribution<double>(-1, 1)(rng);
  const CategoricalImage a = random_image(rng, 2, 2, 3), b = random_image(rng, 2, 2, 3), c = random_image(rng, 2, 2, 3);
  const TransitionPair batch[] = {{&a, &b, 1}, {&b, &c, 3}, {&c, &a, 1}};
  Gradients g;
  ce_loss_and_grads(p, batch, &g);
  EXPECT_TRUE(g.is_active(1));
  EXPECT_FALSE(g.is_active(2));
  EXPECT_TRUE(g.is_active(3));
  const std::vector<double> analytic = flatten(g);
  const auto params = scalars(p);
  const double h = 1e-5;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = *params[i];
    *params[i] = saved + h;
    const double up = ce_loss_and_grads(p, batch, nullptr);
    *params[i] = saved - h;
    const double down = ce_loss_and_grads(p, batch, nullptr);
    *params[i] = saved;
    const double fd = (up - down) / (2 * h);
    EXPECT_LE(std::abs(fd - analytic[i]), 1e-4 * std::max({std::abs(fd), std::abs(analytic[i]), 1e-8})) << "param " << i;
    ++checked;
  }
  EXPECT_GE(checked, 200u);
}

TEST(ce_loss, head_gradient_accumulates_over_steps) {
  const DenoiserParams p = init_params(2, 2, 4, 2, 11, 5);
  std::mt19937_64 rng(8);
  const CategoricalImage a = random_image(rng, 2, 2, 4), b = random_image(rng, 2, 2, 4);
  const TransitionPair both[] = {{&a, &b, 1}, {&b, &a, 2}};
  const TransitionPair first[] = {{&a, &b, 1}};
  const TransitionPair second[] = {{&b, &a, 2}};
  Gradients g_both, g1, g2;
  ce_loss_and_grads(p, both, &g_both);
  ce_loss_and_grads(p, first, &g1);
  ce_loss_and_grads(p, second, &g2);
  // Losses are means over the batch, so scale back to sums.
  EXPECT_LT((2.0 * g_both.head.w - (g1.head.w + g2.head.w)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((2.0 * g_both.head.b - (g1.head.b + g2.head.b)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(posterior_kl_loss, zero_when_model_matches_posterior) {
  std::mt19937_64 rng(12);
  std::vector<Eigen::MatrixXd> q;
  for (int t = 0; t < 3; ++t) q.push_back(oracle::random_column_stochastic(8, rng, 0.05));
  const QSchedule sched(q);
  const CategoricalImage x0 = CategoricalImage::filled(1, 1, 8, 2), xt = CategoricalImage::filled(1, 1, 8, 6);
  DenoiserParams p = DenoiserParams::zeros(Shape{1, 1, 8, 3, 4});
  p.tail(3).out.b = posterior(6, 2, 3, sched).array().log().matrix();
  const PosteriorTriple batch[] = {{&xt, &x0, 3}};
  EXPECT_NEAR(posterior_kl_loss(p, batch, sched), 0.0, 1e-15);
}

TEST(posterior_kl_loss, first_step_reduces_to_cross_entropy) {
  std::mt19937_64 rng(13);
  std::vector<Eigen::MatrixXd> q;
  for (int t = 0; t < 2; ++t) q.push_back(oracle::random_column_stochastic(4, rng, 0.05));
  const QSchedule sched(q);
  const DenoiserParams p = init_params(2, 2, 4, 2, 14, 6);
  const CategoricalImage x0 = random_image(rng, 2, 2, 4), x1 = random_image(rng, 2, 2, 4);
  const PosteriorTriple kl[] = {{&x1, &x0, 1}};
  const TransitionPair ce[] = {{&x1, &x0, 1}};
  EXPECT_NEAR(posterior_kl_loss(p, kl, sched), ce_loss_and_grads(p, ce, nullptr), 1e-14);
}

TEST(posterior_kl_loss, matches_enumeration) {
  std::mt19937_64 rng(15);
  std::vector<Eigen::MatrixXd> q;
  for (int t = 0; t < 3; ++t) q.push_back(oracle::random_column_stochastic(4, rng, 0.05));
  const QSchedule sched(q);
  const DenoiserParams p = init_params(3, 1, 4, 3, 16, 7);
  const CategoricalImage x0 = random_image(rng, 3, 1, 4), xa = random_image(rng, 3, 1, 4), xb = random_image(rng, 3, 1, 4);
  const PosteriorTriple batch[] = {{&xa, &x0, 3}, {&xb, &x0, 2}};
  double expected = 0.0;
  for (const auto& tr : batch) {
    const Eigen::VectorXd logits = forward_logits(p, *tr.x_t, tr.t);
    for (int px = 0; px < 3; ++px) {
      const Eigen::VectorXd target = oracle::posterior_by_paths((*tr.x_t)[px], (*tr.x_0)[px], tr.t, q);
      const Eigen::VectorXd z = logits.segment(px * 4, 4);
      const Eigen::VectorXd model = z.array().exp() / z.array().exp().sum();
      for (int j = 0; j < 4; ++j) expected += target[j] * std::log(target[j] / model[j]);
    }
  }
  expected /= 2.0 * 3.0;
  EXPECT_NEAR(posterior_kl_loss(p, batch, sched), expected, 1e-10);
}

TEST(posterior_kl_loss, gradients_match_central_differences) {
  std::mt19937_64 rng(17);
  std::vector<Eigen::MatrixXd> q;
  for (int t = 0; t < 2; ++t) q.push_back(oracle::random_column_stochastic(3, rng, 0.05));
  const QSchedule sched(q);
  DenoiserParams p = init_params(2, 1, 3, 2, 18, 5);
  const CategoricalImage x0 = random_image(rng, 2, 1, 3), xt = random_image(rng, 2, 1, 3);
  const PosteriorTriple batch[] = {{&xt, &x0, 2}};
  Gradients g;
  posterior_kl_loss_and_grads(p, batch, sched, &g);
  const std::vector<double> analytic = flatten(g);
  const auto params = scalars(p);
  const double h = 1e-5;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = *params[i];
    *params[i] = saved + h;
    const double up = posterior_kl_loss(p, batch, sched);
    *params[i] = saved - h;
    const double down = posterior_kl_loss(p, batch, sched);
    *params[i] = saved;
    const double fd = (up - down) / (2 * h);
    EXPECT_LE(std::abs(fd - analytic[i]), 1e-4 * std::max({std::abs(fd), std::abs(analytic[i]), 1e-8})) << "param " << i;
  }
}

TEST(adam_step, first_step_moves_by_learning_rate) {
  DenoiserParams p = init_params(2, 2, 3, 2, 19, 4);
  const DenoiserParams before = p;
  OptimizerState st = OptimizerState::create(p.shape, AdamConfig{.lr = 1e-3});
  Gradients g;
  g.reset(p.shape);
  g.head.w.setConstant(0.5);
  g.head.b.setConstant(-2.0);
  Tail& t1 = g.activate(1);
  t1.hidden.w.setConstant(0.25);
  t1.hidden.b.setConstant(0.25);
  t1.out.w.setConstant(-0.25);
  t1.out.b.setConstant(1.0);
  adam_step(p, g, st);
  EXPECT_LT(((p.head.w - before.head.w).array() + 1e-3).abs().maxCoeff(), 1e-10);
  EXPECT_LT(((p.head.b - before.head.b).array() - 1e-3).abs().maxCoeff(), 1e-10);
  EXPECT_LT(((p.tail(1).out.w - before.tail(1).out.w).array() - 1e-3).abs().maxCoeff(), 1e-10);
  // Tail 2 had no gradient and keeps both its values and its step count.
  EXPECT_EQ(p.tail(2).out.w, before.tail(2).out.w);
  EXPECT_EQ(st.tail_steps[0], 1);
  EXPECT_EQ(st.tail_steps[1], 0);
}

TEST(adam_step, zero_gradient_leaves_params) {
  DenoiserParams p = init_params(2, 2, 3, 2, 20, 4);
  const DenoiserParams before = p;
  OptimizerState st = OptimizerState::create(p.shape);
  Gradients g;
  g.reset(p.shape);
  g.activate(1);
  g.activate(2);
  adam_step(p, g, st);
  EXPECT_EQ(p.head.w, before.head.w);
  EXPECT_EQ(p.tail(2).hidden.w, before.tail(2).hidden.w);
}

TEST(adam_step, shape_mismatch) {
  DenoiserParams p = init_params(2, 2, 3, 2, 20, 4);
  OptimizerState st = OptimizerState::create(Shape{2, 2, 3, 2, 5});
  Gradients g;
  g.reset(p.shape);
  EXPECT_THROW(adam_step(p, g, st), ShapeError);
}

TEST(train, memorizes_identity_trajectories) {
  const auto images = digit_zero_images(10);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 2;
  cfg.seed = 3;
  const TrainResult r = train(identity_trajectories(images, 2), cfg);
  ASSERT_EQ(r.loss_curve.size(), 50u);
  EXPECT_LT(r.loss_curve.back(), 0.05);
}

TEST(train, loss_decreases_on_forward_trajectories) {
  const auto images = digit_zero_images(100);
  const Liouvillian l = build_generator(cycle_graph(8), 1.0);
  const WalkKernel k = step_kernel(l, 0.6);
  std::vector<WalkKernel> ks;
  for (int t = 1; t <= 20; ++t) ks.emplace_back(k.matrix(), t);
  const QSchedule sched = q_schedule_from_kernels(ks);
  const auto trajs = forward_dataset(images, sched, 21);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.hidden = 64;
  cfg.seed = 4;
  const TrainResult r = train(trajs, cfg);
  EXPECT_LT(r.loss_curve[49], r.loss_curve[0]);
}

TEST(train, deterministic_under_fixed_seed) {
  const auto images = digit_zero_images(6);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.hidden = 16;
  cfg.seed = 8;
  cfg.batch_timestep = BatchTimestep::kMixed;
  const auto trajs = identity_trajectories(images, 3);
  const TrainResult a = train(trajs, cfg);
  const TrainResult b = train(trajs, cfg);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_EQ(a.params.head.w, b.params.head.w);
  EXPECT_EQ(a.params.tail(2).out.w, b.params.tail(2).out.w);
}

TEST(train, rejects_bad_configuration) {
  const auto trajs = identity_trajectories(digit_zero_images(2), 2);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train(trajs, cfg), ParameterError);
  cfg.epochs = 1;
  EXPECT_THROW(train({}, cfg), ParameterError);
  cfg.objective = Objective::kPosteriorKl;
  EXPECT_THROW(train(trajs, cfg), ParameterError);
}

TEST(generate, zero_params_sample_uniform_levels) {
  const DenoiserParams p = DenoiserParams::zeros(Shape{10, 10, 8, 3, 4});
  const auto images = generate(p, 100, 31);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(8);
  for (const auto& img : images)
    for (std::uint8_t v : img.levels()) counts[v] += 1.0;
  const double expected = 10000.0 / 8.0;
  const double chi2 = ((counts.array() - expected).square() / expected).sum();
  const double p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(7.0), chi2));
  EXPECT_GT(p_value, 0.001);
}

TEST(generate, deterministic_given_seed) {
  const DenoiserParams p = init_params(4, 4, 8, 3, 22, 8);
  EXPECT_EQ(generate(p, 5, 1), generate(p, 5, 1));
  EXPECT_NE(generate(p, 5, 1), generate(p, 5, 2));
  EXPECT_EQ(generate(p, 5, 1, 2), generate(p, 5, 1, 128));
}

TEST(generate, trained_model_matches_training_histogram_better_than_uniform) {
  const auto images = digit_zero_images(100);
  const auto kernels = [] {
    const WalkKernel k = step_kernel(build_generator(cycle_graph(8), 1.0), 0.6);
    std::vector<WalkKernel> ks;
    for (int t = 1; t <= 20; ++t) ks.emplace_back(k.matrix(), t);
    return ks;
  }();
  const auto trajs = forward_dataset(images, q_schedule_from_kernels(kernels), 23);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.hidden = 64;
  cfg.seed = 5;
  const TrainResult r = train(trajs, cfg);
  const Eigen::VectorXd train_hist = level_histogram(images, 8);
  const Eigen::VectorXd gen_hist = level_histogram(generate(r.params, 100, 6), 8);
  EXPECT_LT(kl_divergence(gen_hist, train_hist).value, kl_divergence(Eigen::VectorXd::Constant(8, 0.125), train_hist).value);
}

TEST(checkpoint, round_trip_and_hidden_inference) {
  const DenoiserParams p = init_params(3, 2, 4, 3, 24, 7);
  const auto path = std::filesystem::temp_directory_path() / "qwdiff_checkpoint_test.qdnp";
  checkpoint::save(p, path);
  EXPECT_EQ(std::filesystem::file_size(path), 24u + 8u * checkpoint::payload_doubles(p.shape));
  const DenoiserParams back = checkpoint::load(path);
  EXPECT_EQ(back.shape, p.shape);
  EXPECT_EQ(back.head.w, p.head.w);
  EXPECT_EQ(back.tail(3).out.b, p.tail(3).out.b);
  EXPECT_EQ(back.tail(2).hidden.w, p.tail(2).hidden.w);

  // First payload double is head.w(0, 0), then head.w(0, 1): row-major.
  const auto bytes = data::read_file(path);
  double first = 0.0, second = 0.0;
  std::memcpy(&first, bytes.data() + 24, 8);
  std::memcpy(&second, bytes.data() + 32, 8);
  EXPECT_EQ(first, p.head.w(0, 0));
  EXPECT_EQ(second, p.head.w(0, 1));

  auto truncated = bytes;
  truncated.resize(truncated.size() - 8);
  data::write_file(path, truncated);
  EXPECT_THROW(checkpoint::load(path), LengthError);
  auto bad = bytes;
  bad[0] = 'X';
  data::write_file(path, bad);
  EXPECT_THROW(checkpoint::load(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(checkpoint::load(path), IoError);
}
