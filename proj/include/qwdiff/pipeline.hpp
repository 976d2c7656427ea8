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
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "qwdiff/config.hpp"
#include "qwdiff/data.hpp"
#include "qwdiff/denoiser.hpp"
#include "qwdiff/diffusion.hpp"
#include "qwdiff/dtqw.hpp"
#include "qwdiff/graphs.hpp"
#include "qwdiff/lindblad.hpp"
#include "qwdiff/metrics.hpp"
#include "qwdiff/random.hpp"

#ifndef QWDIFF_VERSION
#define QWDIFF_VERSION "unknown"
#endif

namespace qwdiff::pipeline {

namespace fs = std::filesystem;
using config::ExperimentConfig;
using config::Mode;
using json = nlohmann::json;

inline constexpr const char* kConfigFile = "config.txt";
inline constexpr const char* kKernelsFile = "kernels.csv";
inline constexpr const char* kKlTraceFile = "kl_trace.csv";
inline constexpr const char* kTrajectoriesFile = "trajectories.qdt";
inline constexpr const char* kForwardHistFile = "forward_hist.csv";
inline constexpr const char* kCheckpointFile = "checkpoint.qdnp";
inline constexpr const char* kLossFile = "loss.csv";
inline constexpr const char* kSamplesFile = "samples.qdt";
inline constexpr const char* kGeneratedDir = "generated";
inline constexpr const char* kGeneratedHistFile = "generated_hist.csv";
inline constexpr const char* kMetricsFile = "metrics.json";
inline constexpr const char* kSweepFile = "sweep.csv";
inline constexpr const char* kSweepSummaryFile = "sweep_summary.csv";
inline constexpr const char* kBoxStatsFile = "box_stats.json";
inline constexpr const char* kManifestFile = "manifest.json";

inline constexpr int kMinSweepRepetitions = 5;

/// Stream identifiers mixed into the master seed, one per stage.
enum class Stage : std::uint64_t { kKernels = 1, kForward = 2, kTrain = 3, kGenerate = 4, kEvaluate = 5 };

inline std::uint64_t stage_seed(const ExperimentConfig& cfg, Stage stage) {
  return derive_seed(cfg.seed, {static_cast<std::uint64_t>(stage)});
}

/// Seed of sweep cell (omega, rep) under master seed `master`.
inline std::uint64_t sweep_seed(std::uint64_t master, double omega, int rep) {
  return derive_seed(master, {seed_bits(omega), static_cast<std::uint64_t>(rep)});
}

/// A library error annotated with the stage that raised it; keeps the
/// original category so exit codes are unchanged.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.category(), stage + ": " + cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

inline int exit_code(Error::Category c) {
  switch (c) {
    case Error::Category::kConfig:
      return 2;
    case Error::Category::kIo:
      return 3;
    case Error::Category::kNumerical:
      return 4;
  }
  return 1;
}

struct Context {
  ExperimentConfig cfg;
  /// Forces one worker everywhere so reruns are byte-identical.
  bool serial = false;
  std::ostream* log = nullptr;

  unsigned workers() const { return serial ? 1u : cfg.workers; }
  fs::path out() const { return cfg.out; }
};

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot hash " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("sha256 context setup failed");
  }
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned i = 0; i < len; ++i) {
    hex.push_back(kHex[md[i] >> 4]);
    hex.push_back(kHex[md[i] & 0xF]);
  }
  return hex;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Throws PipelineError naming the stage that produces a missing input.
inline void require_input(const fs::path& path, const char* producer) {
  if (!fs::exists(path))
    throw PipelineError("missing input " + path.string() + "; run the " + std::string(producer) + " stage first");
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

/// Record of one finished stage; `files` are relative to the output directory.
struct StageRecord {
  std::string name;
  std::uint64_t seed = 0;
  std::vector<std::string> files;
  json metrics = json::object();
  double seconds = 0.0;
};

/// Merges `rec` into out/manifest.json. Each listed file is hashed now, so
/// the manifest always matches the bytes on disk when the stage ends.
inline void record_stage(const Context& ctx, const StageRecord& rec) {
  const fs::path path = ctx.out() / kManifestFile;
  json manifest = json::object();
  if (fs::exists(path)) {
    try {
      manifest = json::parse(read_text(path));
    } catch (const json::exception&) {
      manifest = json::object();
    }
  }
  json cfg = json::object();
  for (const auto& f : config::detail::fields()) cfg[f.key] = f.get(ctx.cfg);
  manifest["version"] = QWDIFF_VERSION;
  manifest["config"] = cfg;
  manifest["serial"] = ctx.serial;
  json files = json::array();
  for (const auto& rel : rec.files) {
    const fs::path p = ctx.out() / rel;
    files.push_back({{"path", rel}, {"sha256", sha256_file(p)}, {"bytes", fs::file_size(p)}});
  }
  manifest["stages"][rec.name] = {
      {"seed", rec.seed}, {"seconds", rec.seconds}, {"files", files}, {"metrics", rec.metrics}};
  write_text(path, manifest.dump(2) + "\n");
}

/// Runs `body` as stage `name`: writes the resolved config, times the body,
/// tags library errors with the stage and records the manifest entry.
template <typename Body>
void run_stage(const Context& ctx, const std::string& name, Stage stage, Body&& body) {
  try {
    ctx.cfg.validate();
    ensure_dir(ctx.out());
    write_text(ctx.out() / kConfigFile, config::to_text(ctx.cfg));
    StageRecord rec;
    rec.name = name;
    rec.seed = stage_seed(ctx.cfg, stage);
    const auto start = std::chrono::steady_clock::now();
    body(rec);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rec.files.insert(rec.files.begin(), kConfigFile);
    record_stage(ctx, rec);
    if (ctx.log) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f", rec.seconds);
      *ctx.log << name << ": done in " << buf << " s\n";
    }
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

inline Liouvillian qsw_generator(const ExperimentConfig& cfg, double omega) {
  return build_generator(cycle_graph(static_cast<std::size_t>(cfg.n_nodes)), omega, cfg.amplitude, cfg.hamiltonian);
}

/// Per-step forward kernels Q_1..Q_T of the configured walk.
inline std::vector<WalkKernel> build_kernels(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(cfg.n_nodes);
  std::vector<WalkKernel> kernels;
  switch (cfg.mode) {
    case Mode::kQsw: {
      const WalkKernel k = step_kernel(qsw_generator(cfg, cfg.omega), cfg.tau, cfg.rk4_substeps());
      for (int t = 1; t <= cfg.t_steps; ++t) kernels.emplace_back(k.matrix(), t);
      break;
    }
    case Mode::kDtqwNoisy:
      kernels = dtqw::noisy_walk_kernels(n, cfg.noise_schedule(), {cfg.shots, seed, cfg.delay_qubits});
      break;
    case Mode::kClassical: {
      const StochasticMatrix s = transition_matrix(cycle_graph(n));
      for (int t = 1; t <= cfg.t_steps; ++t) kernels.emplace_back(s.matrix(), t);
      break;
    }
  }
  return kernels;
}

struct KlSeries {
  std::string mode;
  std::string omega;  ///< empty outside qsw mode
  std::vector<double> kl;
};

/// KL-from-uniform of one walker started at node 0 without intermediate
/// measurement. In qsw mode the configured omega comes first, then every
/// other entry of `omegas`.
inline std::vector<KlSeries> kl_traces(const ExperimentConfig& cfg) {
  const auto n = static_cast<std::size_t>(cfg.n_nodes);
  const auto steps = static_cast<std::size_t>(cfg.t_steps);
  std::vector<KlSeries> out;
  switch (cfg.mode) {
    case Mode::kQsw: {
      std::vector<double> list{cfg.omega};
      for (double w : cfg.omegas)
        if (std::find(list.begin(), list.end(), w) == list.end()) list.push_back(w);
      for (double w : list)
        out.push_back({"qsw", config::detail::format_double(w),
                       kl_trace(qsw_generator(cfg, w), steps, cfg.tau, cfg.rk4_substeps())});
      break;
    }
    case Mode::kDtqwNoisy: {
      KlSeries s{"dtqw-noisy", "", {}};
      for (const auto& p : dtqw::noisy_walk_trace(n, cfg.noise_schedule(), cfg.delay_qubits))
        s.kl.push_back(kl_to_uniform(p));
      out.push_back(std::move(s));
      break;
    }
    case Mode::kClassical: {
      const StochasticMatrix s = transition_matrix(cycle_graph(n));
      ProbabilityVector p = ProbabilityVector::delta(n, 0);
      KlSeries series{"classical", "", {}};
      for (std::size_t t = 0; t < steps; ++t) {
        p = crw_step(p, s);
        series.kl.push_back(kl_to_uniform(p.values()));
      }
      out.push_back(std::move(series));
      break;
    }
  }
  return out;
}

inline std::string kernels_csv(const std::vector<WalkKernel>& kernels) {
  std::string out = "step,row,col,prob\n";
  for (const auto& k : kernels)
    for (Eigen::Index i = 0; i < k.k(); ++i)
      for (Eigen::Index j = 0; j < k.k(); ++j)
        out += std::to_string(k.step_index()) + "," + std::to_string(i) + "," + std::to_string(j) + "," + fmt(k(i, j)) + "\n";
  return out;
}

/// Parses kernels.csv back into T kernels of size K x K.
inline std::vector<WalkKernel> parse_kernels_csv(const std::string& text, int t_steps, int k) {
  std::vector<Eigen::MatrixXd> m(static_cast<std::size_t>(t_steps), Eigen::MatrixXd::Constant(k, k, -1.0));
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line) || config::detail::trim(line) != "step,row,col,prob")
    throw FormatError("kernel file has an unexpected header");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (config::detail::trim(line).empty()) continue;
    const auto cells = config::detail::split_list(line);
    if (cells.size() != 4) throw FormatError("kernel row '" + line + "' does not have 4 fields");
    int step = 0, i = 0, j = 0;
    double p = 0.0;
    try {
      step = config::detail::parse_number<int>("step", cells[0]);
      i = config::detail::parse_number<int>("row", cells[1]);
      j = config::detail::parse_number<int>("col", cells[2]);
      p = config::detail::parse_number<double>("prob", cells[3]);
    } catch (const ParameterError& e) {
      throw FormatError(std::string("kernel file: ") + e.what());
    }
    if (step < 1 || step > t_steps || i < 0 || i >= k || j < 0 || j >= k)
      throw PipelineError("kernel file does not match t_steps=" + std::to_string(t_steps) + ", n_nodes=" +
                          std::to_string(k) + "; rerun the kernels stage");
    m[static_cast<std::size_t>(step) - 1](i, j) = p;
    ++rows;
  }
  if (rows != static_cast<std::size_t>(t_steps) * static_cast<std::size_t>(k) * static_cast<std::size_t>(k))
    throw PipelineError("kernel file has " + std::to_string(rows) + " entries, expected " +
                        std::to_string(t_steps * k * k) + "; rerun the kernels stage");
  std::vector<WalkKernel> kernels;
  for (int t = 1; t <= t_steps; ++t) kernels.emplace_back(std::move(m[static_cast<std::size_t>(t) - 1]), t);
  return kernels;
}

inline QSchedule load_schedule(const Context& ctx) {
  const fs::path path = ctx.out() / kKernelsFile;
  require_input(path, "kernels");
  return q_schedule_from_kernels(parse_kernels_csv(read_text(path), ctx.cfg.t_steps, ctx.cfg.n_nodes));
}

inline void cmd_kernels(const Context& ctx) {
  run_stage(ctx, "kernels", Stage::kKernels, [&](StageRecord& rec) {
    const auto kernels = build_kernels(ctx.cfg, rec.seed);
    write_text(ctx.out() / kKernelsFile, kernels_csv(kernels));
    std::string trace = "mode,omega,t,kl\n";
    json finals = json::object();
    for (const auto& s : kl_traces(ctx.cfg)) {
      for (std::size_t t = 0; t < s.kl.size(); ++t)
        trace += s.mode + "," + s.omega + "," + std::to_string(t + 1) + "," + fmt(s.kl[t]) + "\n";
      finals[s.mode + (s.omega.empty() ? "" : ":" + s.omega)] = s.kl.back();
    }
    write_text(ctx.out() / kKlTraceFile, trace);
    rec.files = {kKernelsFile, kKlTraceFile};
    rec.metrics = {{"final_kl", finals}};
  });
}

/// Digit-filtered, truncated and quantized training images.
inline std::vector<CategoricalImage> load_images(const ExperimentConfig& cfg) {
  data::RawDataset ds = data::load_idx(cfg.train_images, cfg.train_labels);
  if (cfg.combine_splits) ds = data::concat(ds, data::load_idx(cfg.test_images, cfg.test_labels));
  ds = data::filter_digit(ds, cfg.digit);
  if (cfg.max_images > 0) ds = data::take(ds, cfg.max_images);
  if (ds.count == 0) throw ParameterError("dataset has no images of digit " + std::to_string(cfg.digit));
  return data::quantize(ds, cfg.n_nodes);
}

/// Header: t, p_0..p_{K-1}, kl_uniform; one row per step of the trajectories.
inline std::string histogram_csv(const std::vector<Trajectory>& trajs, int k) {
  std::string out = "t";
  for (int j = 0; j < k; ++j) out += ",p" + std::to_string(j);
  out += ",kl_uniform\n";
  const int steps = trajs.front().t_steps();
  std::vector<CategoricalImage> at_t;
  for (int t = 0; t <= steps; ++t) {
    at_t.clear();
    for (const auto& tr : trajs) at_t.push_back(tr.at(t));
    const Eigen::VectorXd h = level_histogram(at_t, k);
    out += std::to_string(t);
    for (int j = 0; j < k; ++j) out += "," + fmt(h[j]);
    out += "," + fmt(kl_to_uniform(h)) + "\n";
  }
  return out;
}

inline void cmd_forward(const Context& ctx) {
  run_stage(ctx, "forward", Stage::kForward, [&](StageRecord& rec) {
    const QSchedule sched = load_schedule(ctx);
    const auto images = load_images(ctx.cfg);
    const auto trajs = forward_dataset(images, sched, rec.seed, ctx.workers());
    data::write_file(ctx.out() / kTrajectoriesFile, trajectory_io::encode(trajs));
    const std::string hist = histogram_csv(trajs, ctx.cfg.n_nodes);
    write_text(ctx.out() / kForwardHistFile, hist);
    const Eigen::VectorXd final_hist = [&] {
      std::vector<CategoricalImage> last;
      for (const auto& tr : trajs) last.push_back(tr.at(tr.t_steps()));
      return level_histogram(last, ctx.cfg.n_nodes);
    }();
    rec.files = {kTrajectoriesFile, kForwardHistFile};
    rec.metrics = {{"images", trajs.size()}, {"final_kl_uniform", kl_to_uniform(final_hist)}};
  });
}

inline std::vector<Trajectory> load_trajectories(const Context& ctx) {
  const fs::path path = ctx.out() / kTrajectoriesFile;
  require_input(path, "forward");
  auto decoded = trajectory_io::decode(data::read_file(path));
  if (decoded.k != ctx.cfg.n_nodes || decoded.t_steps != ctx.cfg.t_steps)
    throw PipelineError("trajectories have K=" + std::to_string(decoded.k) + ", T=" + std::to_string(decoded.t_steps) +
                        " but the config asks for K=" + std::to_string(ctx.cfg.n_nodes) + ", T=" +
                        std::to_string(ctx.cfg.t_steps) + "; rerun the forward stage");
  if (decoded.trajectories.empty()) throw PipelineError("trajectory file is empty; rerun the forward stage");
  return std::move(decoded.trajectories);
}

inline void cmd_train(const Context& ctx) {
  run_stage(ctx, "train", Stage::kTrain, [&](StageRecord& rec) {
    const auto trajs = load_trajectories(ctx);
    std::optional<QSchedule> sched;
    if (ctx.cfg.objective == denoiser::Objective::kPosteriorKl || ctx.cfg.resample_forward) sched = load_schedule(ctx);
    denoiser::TrainConfig tc;
    tc.epochs = ctx.cfg.epochs;
    tc.batch_size = ctx.cfg.batch_size;
    tc.lr = ctx.cfg.lr;
    tc.objective = ctx.cfg.objective;
    tc.batch_timestep = ctx.cfg.batch_timestep;
    tc.seed = rec.seed;
    tc.hidden = ctx.cfg.hidden;
    tc.resample_forward = ctx.cfg.resample_forward;
    if (ctx.log)
      tc.on_epoch = [&ctx](int epoch, double loss) {
        if (epoch == 1 || epoch % 10 == 0 || epoch == ctx.cfg.epochs)
          *ctx.log << "train: epoch " << epoch << "/" << ctx.cfg.epochs << " loss " << loss << "\n" << std::flush;
      };
    const auto result = denoiser::train(trajs, tc, sched ? &*sched : nullptr);
    denoiser::checkpoint::save(result.params, ctx.out() / kCheckpointFile);
    std::string loss = "epoch,loss\n";
    for (std::size_t e = 0; e < result.loss_curve.size(); ++e)
      loss += std::to_string(e + 1) + "," + fmt(result.loss_curve[e]) + "\n";
    write_text(ctx.out() / kLossFile, loss);
    rec.files = {kCheckpointFile, kLossFile};
    rec.metrics = {{"final_loss", result.loss_curve.back()},
                   {"parameters", result.params.parameter_count()},
                   {"images", trajs.size()}};
  });
}

inline std::vector<Trajectory> as_single_steps(const std::vector<CategoricalImage>& images) {
  std::vector<Trajectory> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(Trajectory{{img}});
  return out;
}

inline std::string level_csv(const Eigen::VectorXd& h) {
  std::string out = "level,fraction\n";
  for (Eigen::Index j = 0; j < h.size(); ++j) out += std::to_string(j) + "," + fmt(h[j]) + "\n";
  return out;
}

inline void cmd_generate(const Context& ctx) {
  run_stage(ctx, "generate", Stage::kGenerate, [&](StageRecord& rec) {
    const fs::path ckpt = ctx.out() / kCheckpointFile;
    require_input(ckpt, "train");
    const auto params = denoiser::checkpoint::load(ckpt);
    if (params.shape.k != ctx.cfg.n_nodes || params.shape.t_steps != ctx.cfg.t_steps)
      throw PipelineError("checkpoint does not match n_nodes/t_steps; rerun the train stage");
    const auto images = denoiser::generate(params, ctx.cfg.generate_count, rec.seed);
    const fs::path dir = ctx.out() / kGeneratedDir;
    std::error_code ec;
    fs::remove_all(dir, ec);
    ensure_dir(dir);
    const int width = std::max<int>(4, static_cast<int>(std::to_string(images.size() - 1).size()));
    for (std::size_t i = 0; i < images.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "sample_%0*zu.pgm", width, i);
      data::write_file(dir / name, data::write_pgm(images[i]));
      rec.files.push_back(std::string(kGeneratedDir) + "/" + name);
    }
    data::write_file(ctx.out() / kSamplesFile, trajectory_io::encode(as_single_steps(images)));
    const Eigen::VectorXd h = level_histogram(images, ctx.cfg.n_nodes);
    write_text(ctx.out() / kGeneratedHistFile, level_csv(h));
    rec.files.push_back(kSamplesFile);
    rec.files.push_back(kGeneratedHistFile);
    rec.metrics = {{"images", images.size()}, {"kl_uniform", kl_to_uniform(h)}};
  });
}

/// One row per image, one column per pixel level value.
inline FeatureMatrix pixel_features(const std::vector<CategoricalImage>& images) {
  if (images.empty()) throw InsufficientSamplesError("no images to featurize");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(images.front().pixels()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].same_shape(images.front())) throw ShapeError("images differ in shape");
    for (std::size_t p = 0; p < images[i].pixels(); ++p)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = images[i][p];
  }
  return FeatureMatrix(std::move(x));
}

/// Frechet distance between Gaussians fitted to pixel features.
inline double fid_proxy(const std::vector<CategoricalImage>& a, const std::vector<CategoricalImage>& b) {
  return frechet_distance(pixel_features(a), pixel_features(b));
}

inline std::vector<CategoricalImage> uniform_noise_images(const CategoricalImage& like, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CategoricalImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> levels(like.pixels());
    for (auto& v : levels) v = static_cast<std::uint8_t>(rng.below(static_cast<std::size_t>(like.k())));
    out.emplace_back(like.width(), like.height(), like.k(), std::move(levels));
  }
  return out;
}

inline std::vector<CategoricalImage> load_samples(const Context& ctx) {
  const fs::path path = ctx.out() / kSamplesFile;
  require_input(path, "generate");
  auto decoded = trajectory_io::decode(data::read_file(path));
  std::vector<CategoricalImage> out;
  for (auto& tr : decoded.trajectories) out.push_back(std::move(tr.steps.front()));
  if (out.empty()) throw PipelineError("sample file is empty; rerun the generate stage");
  return out;
}

inline void cmd_evaluate(const Context& ctx) {
  run_stage(ctx, "evaluate", Stage::kEvaluate, [&](StageRecord& rec) {
    std::vector<CategoricalImage> train;
    for (auto& tr : load_trajectories(ctx)) train.push_back(std::move(tr.steps.front()));
    const auto generated = load_samples(ctx);
    const int k = ctx.cfg.n_nodes;
    const Eigen::VectorXd h_train = level_histogram(train, k);
    const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(k, 1.0 / k);
    json m;
    m["train_images"] = train.size();
    m["generated_images"] = generated.size();
    m["fid_proxy"] = fid_proxy(generated, train);
    m["kl_generated_vs_train"] = kl_divergence(level_histogram(generated, k), h_train).value;
    m["kl_uniform_vs_train"] = kl_divergence(uniform, h_train).value;
    const auto noise = uniform_noise_images(train.front(), generated.size(), rec.seed);
    m["noise_baseline_fid_proxy"] = fid_proxy(noise, train);
    if (ctx.cfg.untrained_baseline) {
      // The weights training starts from, so this isolates what training added.
      const auto init = denoiser::init_params(train.front().width(), train.front().height(), k, ctx.cfg.t_steps,
                                              derive_seed(stage_seed(ctx.cfg, Stage::kTrain), {1}), ctx.cfg.hidden);
      const auto untrained = denoiser::generate(init, generated.size(), derive_seed(rec.seed, {1}));
      m["untrained_fid_proxy"] = fid_proxy(untrained, train);
      m["kl_untrained_vs_train"] = kl_divergence(level_histogram(untrained, k), h_train).value;
    }
    write_text(ctx.out() / kMetricsFile, m.dump(2) + "\n");
    rec.files = {kMetricsFile};
    rec.metrics = m;
  });
}

inline json read_metrics(const fs::path& out) {
  const fs::path path = out / kMetricsFile;
  require_input(path, "evaluate");
  return json::parse(read_text(path));
}

inline void cmd_run_all(const Context& ctx) {
  cmd_kernels(ctx);
  cmd_forward(ctx);
  cmd_train(ctx);
  cmd_generate(ctx);
  cmd_evaluate(ctx);
}

struct SweepCell {
  double omega = 0.0;
  int rep = 0;
  std::uint64_t seed = 0;
  double fid_proxy = 0.0;
  double kl_generated_vs_train = 0.0;
};

inline std::string cell_dir(double omega, int rep) {
  return "sweep/omega_" + config::detail::format_double(omega) + "/rep_" + std::to_string(rep);
}

/// Full pipeline per (omega, repetition) in qsw mode, then box statistics of
/// fid_proxy per omega. Cells run on up to `workers` threads; results are
/// written in (omega, rep) order regardless.
inline void cmd_sweep(const Context& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  try {
    cfg.validate();
    if (cfg.mode != Mode::kQsw) throw ParameterError("sweep varies omega and needs mode = qsw");
    if (cfg.repetitions < kMinSweepRepetitions)
      throw InsufficientSamplesError("sweep needs at least " + std::to_string(kMinSweepRepetitions) +
                                     " repetitions for box statistics, got " + std::to_string(cfg.repetitions));
  } catch (const Error& e) {
    throw StageError("sweep", e);
  }
  std::vector<SweepCell> cells;
  for (double w : cfg.omegas)
    for (int r = 0; r < cfg.repetitions; ++r) cells.push_back({w, r, sweep_seed(cfg.seed, w, r), 0.0, 0.0});

  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const unsigned workers = std::max(1u, std::min<unsigned>(ctx.workers(), static_cast<unsigned>(cells.size())));
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      SweepCell& cell = cells[i];
      Context sub;
      sub.cfg = cfg;
      sub.cfg.omega = cell.omega;
      sub.cfg.seed = cell.seed;
      sub.cfg.workers = workers == 1 ? cfg.workers : 1;
      sub.cfg.out = (ctx.out() / cell_dir(cell.omega, cell.rep)).string();
      sub.serial = ctx.serial;
      try {
        cmd_run_all(sub);
        const json m = read_metrics(sub.out());
        cell.fid_proxy = m.at("fid_proxy").get<double>();
        cell.kl_generated_vs_train = m.at("kl_generated_vs_train").get<double>();
        if (ctx.log) {
          std::lock_guard lock(log_mutex);
          *ctx.log << "sweep: omega=" << cell.omega << " rep=" << cell.rep << " fid_proxy=" << cell.fid_proxy << "\n"
                   << std::flush;
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = cells.size();
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  run_stage(ctx, "sweep", Stage::kEvaluate, [&](StageRecord& rec) {
    std::string table = "omega,rep,seed,fid_proxy,kl_generated_vs_train\n";
    for (const auto& c : cells)
      table += config::detail::format_double(c.omega) + "," + std::to_string(c.rep) + "," + std::to_string(c.seed) + "," +
               fmt(c.fid_proxy) + "," + fmt(c.kl_generated_vs_train) + "\n";
    write_text(ctx.out() / kSweepFile, table);

    std::string summary = "omega,count,median,q1,q3,whisker_low,whisker_high,outliers,mean,sem\n";
    json box = json::array();
    for (double w : cfg.omegas) {
      std::vector<double> fids;
      for (const auto& c : cells)
        if (c.omega == w) fids.push_back(c.fid_proxy);
      const BoxStats s = boxplot_stats(fids);
      summary += config::detail::format_double(w) + "," + std::to_string(s.count) + "," + fmt(s.median) + "," +
                 fmt(s.q1) + "," + fmt(s.q3) + "," + fmt(s.whisker_low) + "," + fmt(s.whisker_high) + "," +
                 std::to_string(s.outliers.size()) + "," + fmt(s.mean) + "," + fmt(s.sem) + "\n";
      box.push_back({{"omega", w},
                     {"count", s.count},
                     {"median", s.median},
                     {"q1", s.q1},
                     {"q3", s.q3},
                     {"whisker_low", s.whisker_low},
                     {"whisker_high", s.whisker_high},
                     {"outliers", s.outliers},
                     {"mean", s.mean},
                     {"sem", s.sem}});
    }
    write_text(ctx.out() / kSweepSummaryFile, summary);
    write_text(ctx.out() / kBoxStatsFile, json{{"metric", "fid_proxy"}, {"omegas", box}}.dump(2) + "\n");
    rec.seed = cfg.seed;
    rec.files = {kSweepFile, kSweepSummaryFile, kBoxStatsFile};
    rec.metrics = {{"cells", cells.size()}};
  });
}

}  // namespace qwdiff::pipeline
