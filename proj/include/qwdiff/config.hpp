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

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qwdiff/denoiser.hpp"
#include "qwdiff/dtqw.hpp"
#include "qwdiff/errors.hpp"
#include "qwdiff/lindblad.hpp"

#ifndef QWDIFF_DEFAULT_DATA_DIR
#define QWDIFF_DEFAULT_DATA_DIR "data"
#endif

namespace qwdiff::config {

enum class Mode { kQsw, kDtqwNoisy, kClassical };

/// Every knob of an experiment. Defaults follow the reference setup where
/// one exists and the desk-scale run otherwise.
struct ExperimentConfig {
  Mode mode = Mode::kQsw;
  double omega = 1.0;
  std::vector<double> omegas{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  int n_nodes = 8;
  int t_steps = 20;
  double tau = 0.6;
  int substeps = 0;
  AmplitudeConvention amplitude = AmplitudeConvention::kSqrt;
  HamiltonianKind hamiltonian = HamiltonianKind::kAdjacency;

  double noise_c = 5e4;
  double noise_dt = 5e-10;
  double t1 = 200e-6;
  double t2 = 150e-6;
  std::size_t shots = 0;
  std::uint32_t delay_qubits = 0xFFFFFFFFu;

  int digit = 0;
  std::string train_images = std::string(QWDIFF_DEFAULT_DATA_DIR) + "/mnist5k-images-idx3-ubyte";
  std::string train_labels = std::string(QWDIFF_DEFAULT_DATA_DIR) + "/mnist5k-labels-idx1-ubyte";
  std::string test_images;
  std::string test_labels;
  bool combine_splits = false;
  std::size_t max_images = 500;

  int hidden = denoiser::kDefaultHidden;
  int epochs = 200;
  int batch_size = 16;
  double lr = 1e-3;
  denoiser::Objective objective = denoiser::Objective::kCrossEntropy;
  denoiser::BatchTimestep batch_timestep = denoiser::BatchTimestep::kShared;
  bool resample_forward = false;

  std::size_t generate_count = 500;
  bool untrained_baseline = true;
  int repetitions = 10;
  std::uint64_t seed = 0;
  std::string out = "qwdiff_out";
  unsigned workers = 1;

  dtqw::NoiseSchedule noise_schedule() const {
    return dtqw::NoiseSchedule{noise_c, noise_dt, t1, t2, t_steps};
  }
  std::size_t rk4_substeps() const {
    return substeps > 0 ? static_cast<std::size_t>(substeps) : default_substeps(tau);
  }

  void validate() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Prefer the shortest text that reads back to the same value.
  for (int prec = 1; prec <= 17; ++prec) {
    char shorter[32];
    std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
    if (std::strtod(shorter, nullptr) == v) return shorter;
  }
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) throw ParameterError("config key '" + key + "': cannot parse '" + text + "'");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ParameterError("config key '" + key + "' must be finite");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ParameterError("config key '" + key + "': expected true or false, got '" + text + "'");
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename E>
E parse_enum(const std::string& key, const std::string& text, const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [name, value] : names)
    if (name == text) return value;
  std::string allowed;
  for (const auto& entry : names) allowed += (allowed.empty() ? "" : ", ") + entry.first;
  throw ParameterError("config key '" + key + "': '" + text + "' is not one of " + allowed);
}

template <typename E>
std::string enum_name(E value, const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [name, v] : names)
    if (v == value) return name;
  return "?";
}

inline const std::vector<std::pair<std::string, Mode>> kModes{
    {"qsw", Mode::kQsw}, {"dtqw-noisy", Mode::kDtqwNoisy}, {"classical", Mode::kClassical}};
inline const std::vector<std::pair<std::string, AmplitudeConvention>> kAmplitudes{
    {"sqrt", AmplitudeConvention::kSqrt}, {"linear", AmplitudeConvention::kLinear}};
inline const std::vector<std::pair<std::string, HamiltonianKind>> kHamiltonians{
    {"adjacency", HamiltonianKind::kAdjacency}, {"laplacian", HamiltonianKind::kLaplacian}};
inline const std::vector<std::pair<std::string, denoiser::Objective>> kObjectives{
    {"cross-entropy", denoiser::Objective::kCrossEntropy}, {"posterior-kl", denoiser::Objective::kPosteriorKl}};
inline const std::vector<std::pair<std::string, denoiser::BatchTimestep>> kBatchTimesteps{
    {"shared", denoiser::BatchTimestep::kShared}, {"mixed", denoiser::BatchTimestep::kMixed}};

inline std::string format_mask(std::uint32_t mask) {
  if (mask == 0xFFFFFFFFu) return "all";
  if (mask == 0) return "none";
  std::string out;
  for (int q = 0; q < 32; ++q)
    if (mask & (1u << q)) out += (out.empty() ? "" : ",") + std::to_string(q);
  return out;
}

inline std::uint32_t parse_mask(const std::string& key, const std::string& text) {
  if (text == "all") return 0xFFFFFFFFu;
  if (text == "none") return 0;
  std::uint32_t mask = 0;
  for (const auto& item : split_list(text)) {
    const int q = parse_number<int>(key, item);
    if (q < 0 || q > 31) throw ParameterError("config key '" + key + "': qubit index out of range");
    mask |= 1u << q;
  }
  return mask;
}

struct Field {
  std::string key;
  std::string help;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define QWDIFF_NUMBER_FIELD(name, type, help)                                                                     \
  Field {                                                                                                         \
    #name, help, [](ExperimentConfig& c, const std::string& v) { c.name = parse_number<type>(#name, v); },        \
        [](const ExperimentConfig& c) {                                                                           \
          if constexpr (std::is_floating_point_v<type>) return format_double(c.name);                             \
          else return std::to_string(c.name);                                                                     \
        }                                                                                                         \
  }

#define QWDIFF_STRING_FIELD(name, help) \
  Field { #name, help, [](ExperimentConfig& c, const std::string& v) { c.name = v; }, [](const ExperimentConfig& c) { return c.name; } }

#define QWDIFF_BOOL_FIELD(name, help)                                                                       \
  Field {                                                                                                   \
    #name, help, [](ExperimentConfig& c, const std::string& v) { c.name = parse_bool(#name, v); },          \
        [](const ExperimentConfig& c) { return std::string(c.name ? "true" : "false"); }                    \
  }

#define QWDIFF_ENUM_FIELD(name, table, help)                                                                \
  Field {                                                                                                   \
    #name, help, [](ExperimentConfig& c, const std::string& v) { c.name = parse_enum(#name, v, table); },   \
        [](const ExperimentConfig& c) { return enum_name(c.name, table); }                                  \
  }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      QWDIFF_ENUM_FIELD(mode, kModes, "forward kernel family: qsw, dtqw-noisy or classical"),
      QWDIFF_NUMBER_FIELD(omega, double, "QSW mixing parameter in [0, 1]; 1 is the classical walk"),
      Field{"omegas",
            "comma-separated omega list for the sweep and the KL-trace series",
            [](ExperimentConfig& c, const std::string& v) {
              c.omegas.clear();
              for (const auto& item : split_list(v)) c.omegas.push_back(parse_number<double>("omegas", item));
            },
            [](const ExperimentConfig& c) {
              std::string out;
              for (double w : c.omegas) out += (out.empty() ? "" : ",") + format_double(w);
              return out;
            }},
      QWDIFF_NUMBER_FIELD(n_nodes, int, "cycle size; also the number of pixel levels K"),
      QWDIFF_NUMBER_FIELD(t_steps, int, "forward steps T"),
      QWDIFF_NUMBER_FIELD(tau, double, "QSW evolution time per step"),
      QWDIFF_NUMBER_FIELD(substeps, int, "RK4 substeps per step; 0 picks a step of at most 0.6/128"),
      QWDIFF_ENUM_FIELD(amplitude, kAmplitudes, "jump amplitude: sqrt (rates S_ij) or linear (rates S_ij^2)"),
      QWDIFF_ENUM_FIELD(hamiltonian, kHamiltonians, "coherent part: adjacency or laplacian"),
      QWDIFF_NUMBER_FIELD(noise_c, double, "delay amplitude in samples"),
      QWDIFF_NUMBER_FIELD(noise_dt, double, "sample duration in seconds"),
      QWDIFF_NUMBER_FIELD(t1, double, "relaxation time T1 in seconds"),
      QWDIFF_NUMBER_FIELD(t2, double, "dephasing time T2 in seconds (at most 2 T1)"),
      QWDIFF_NUMBER_FIELD(shots, std::size_t, "measurement shots per noisy kernel; 0 keeps exact marginals"),
      Field{"delay_qubits", "qubits receiving the delay channel: all, none or a list (0 is the coin)",
            [](ExperimentConfig& c, const std::string& v) { c.delay_qubits = parse_mask("delay_qubits", v); },
            [](const ExperimentConfig& c) { return format_mask(c.delay_qubits); }},
      QWDIFF_NUMBER_FIELD(digit, int, "MNIST digit class to train on"),
      QWDIFF_STRING_FIELD(train_images, "IDX image file of the training split"),
      QWDIFF_STRING_FIELD(train_labels, "IDX label file of the training split"),
      QWDIFF_STRING_FIELD(test_images, "IDX image file of the test split (used with combine_splits)"),
      QWDIFF_STRING_FIELD(test_labels, "IDX label file of the test split (used with combine_splits)"),
      QWDIFF_BOOL_FIELD(combine_splits, "append the test split before filtering by digit"),
      QWDIFF_NUMBER_FIELD(max_images, std::size_t, "keep at most this many images; 0 keeps all"),
      QWDIFF_NUMBER_FIELD(hidden, int, "denoiser hidden width"),
      QWDIFF_NUMBER_FIELD(epochs, int, "training epochs"),
      QWDIFF_NUMBER_FIELD(batch_size, int, "minibatch size"),
      QWDIFF_NUMBER_FIELD(lr, double, "Adam learning rate"),
      QWDIFF_ENUM_FIELD(objective, kObjectives, "training target: cross-entropy (x_{t-1}) or posterior-kl"),
      QWDIFF_ENUM_FIELD(batch_timestep, kBatchTimesteps, "shared: one t per minibatch; mixed: one t per image"),
      QWDIFF_BOOL_FIELD(resample_forward, "redraw forward trajectories every epoch"),
      QWDIFF_NUMBER_FIELD(generate_count, std::size_t, "images drawn by the generate stage"),
      QWDIFF_BOOL_FIELD(untrained_baseline, "evaluate also scores the model at its initial weights"),
      QWDIFF_NUMBER_FIELD(repetitions, int, "sweep repetitions per omega (at least 5)"),
      QWDIFF_NUMBER_FIELD(seed, std::uint64_t, "master seed; stage seeds derive from it"),
      QWDIFF_STRING_FIELD(out, "output directory"),
      QWDIFF_NUMBER_FIELD(workers, unsigned, "worker threads for forward sampling and sweep cells"),
  };
  return table;
}

#undef QWDIFF_NUMBER_FIELD
#undef QWDIFF_STRING_FIELD
#undef QWDIFF_BOOL_FIELD
#undef QWDIFF_ENUM_FIELD

inline const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ParameterError("unknown config key '" + key + "'");
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  auto fail = [](const std::string& what) { throw ParameterError("config: " + what); };
  if (!(omega >= 0.0 && omega <= 1.0)) fail("omega must lie in [0, 1], got " + detail::format_double(omega));
  if (omegas.empty()) fail("omegas must not be empty");
  for (double w : omegas)
    if (!(w >= 0.0 && w <= 1.0)) fail("every entry of omegas must lie in [0, 1]");
  if (n_nodes < 3 || n_nodes > 256) fail("n_nodes must lie in [3, 256]");
  if (t_steps < 1) fail("t_steps must be positive");
  if (!(tau > 0.0)) fail("tau must be positive");
  if (substeps < 0) fail("substeps must be nonnegative");
  if (mode == Mode::kDtqwNoisy) {
    noise_schedule().validate();
    dtqw::register_qubits(static_cast<std::size_t>(n_nodes));
  }
  if (digit < 0 || digit > 9) fail("digit must lie in [0, 9]");
  if (combine_splits && (test_images.empty() || test_labels.empty()))
    fail("combine_splits needs test_images and test_labels");
  if (hidden <= 0 || epochs <= 0 || batch_size <= 0) fail("hidden, epochs and batch_size must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (generate_count == 0) fail("generate_count must be positive");
  if (repetitions < 1) fail("repetitions must be positive");
  if (workers == 0) fail("workers must be positive");
  if (out.empty()) fail("out must not be empty");
}

/// Applies one "key = value" assignment.
inline void set(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  detail::field(key).set(cfg, detail::trim(value));
}

inline std::string get(const ExperimentConfig& cfg, const std::string& key) { return detail::field(key).get(cfg); }

/// Applies "key = value" lines on top of `cfg`. Blank lines and text after
/// '#' are ignored; a key may appear once.
inline void apply_text(ExperimentConfig& cfg, const std::string& text) {
  std::stringstream in(text);
  std::string line;
  std::map<std::string, int> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParameterError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    if (seen.count(key)) throw ParameterError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen[key] = lineno;
    set(cfg, key, line.substr(eq + 1));
  }
}

inline ExperimentConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg;
  apply_text(cfg, ss.str());
  return cfg;
}

/// Canonical text form; apply_text(to_text(cfg)) reproduces cfg.
inline std::string to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

/// One line per key with its default and meaning.
inline std::string explain() {
  const ExperimentConfig defaults;
  std::string out;
  for (const auto& f : detail::fields()) {
    std::string line = f.key + " = " + f.get(defaults);
    if (line.size() < 40) line.resize(40, ' ');
    out += line + "  # " + f.help + "\n";
  }
  return out;
}

inline std::string mode_name(Mode m) { return detail::enum_name(m, detail::kModes); }

}  // namespace qwdiff::config
