#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcnn/checkpoint.hpp"
#include "gcnn/dataset.hpp"
#include "gcnn/gconv.hpp"

namespace gcnn {

struct TrainConfig {
  NetworkSpec network;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  std::string manifest;
  std::vector<SetKind> test_sets{SetKind::normal, SetKind::o_rotate, SetKind::rotate};

  /// Throws ShapeError on lr <= 0, batch_size == 0, epochs == 0 or a bad network spec.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainLog {
  std::vector<double> epoch_loss;  // sample-weighted mean cross-entropy per epoch
  double seconds = 0;
};

/// Called after each epoch with (epoch index, mean loss).
using EpochCallback = std::function<void(std::size_t, double)>;

/// Initialization seed of the model trained with `held_out` excluded.
std::uint64_t fold_seed(std::uint64_t seed, std::optional<std::size_t> held_out);

/// Trains on the normal-set records outside `held_out` (all of them when
/// unset). Throws ShapeError on a class-count mismatch or empty training set
/// and NumericError on a non-finite loss.
template <typename T>
Network<T> train(const TrainConfig& cfg, const Dataset& data, std::optional<std::size_t> held_out,
                 TrainLog* log = nullptr, const EpochCallback& on_epoch = {});

struct EvalResult {
  SetKind set = SetKind::normal;
  std::optional<std::size_t> fold;
  double accuracy = 0;  // percent
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> predictions;

  nlohmann::json to_json() const;
  /// Throws FormatError on malformed input.
  static EvalResult from_json(const nlohmann::json& j);
};

/// Index of the largest entry; ties go to the lower index.
std::size_t argmax(std::span<const double> scores);

/// Classifies the records of `set` in `fold` (all folds when unset).
/// Throws FormatError if the set or fold is absent.
template <typename T>
EvalResult evaluate(const Network<T>& net, const Dataset& data, SetKind set, std::optional<std::size_t> fold,
                    std::size_t batch_size = 16);

struct SetSummary {
  std::vector<double> accuracies;  // per fold, percent
  double mean = 0;
  double std = 0;  // sample standard deviation, 0 for a single fold
  std::vector<std::vector<std::size_t>> confusion;  // summed over folds
};

SetSummary summarize(const std::vector<EvalResult>& folds, SetKind set, std::size_t classes);

struct CVResult {
  nlohmann::json config;
  std::vector<std::string> class_names;
  std::vector<EvalResult> folds;
  std::map<SetKind, SetSummary> summary;
  std::vector<TrainLog> logs;
  nlohmann::json audit = nlohmann::json::object();

  /// Deterministic content only: wall times go to timing_json().
  nlohmann::json to_json() const;
  nlohmann::json timing_json() const;
  /// Inverse of to_json (wall times are not restored). Throws FormatError.
  static CVResult from_json(const nlohmann::json& j);
};

using Progress = std::function<void(const std::string&)>;

/// k-fold cross-validation over the manifest's fold assignment: one fresh
/// model per fold, evaluated on its held-out fold of every requested set
/// that the dataset contains.
template <typename T>
CVResult run_cv(const TrainConfig& cfg, const Dataset& data, const Progress& progress = {});
CVResult run_cv(const TrainConfig& cfg, const Dataset& data, const Progress& progress = {});

struct AuditReport {
  std::string variant;
  std::string group;
  std::size_t trials = 0;
  std::size_t dim = 0;
  std::vector<double> max_logit_deviation_per_element;
  std::vector<double> mean_logit_deviation_per_element;
  double max_logit_deviation = 0;
  double mean_logit_deviation = 0;
  // Features of the transformed input against the transformed features of
  // the input (spatial rotation plus orientation permutation where oriented):
  // first-stage maps and the pre-dense pooled features.
  double max_stage1_deviation = 0;
  double max_feature_deviation = 0;

  nlohmann::json to_json() const;
};

/// Unit-variance directional test volume for audit trials.
std::vector<float> audit_volume(std::size_t dim, std::uint64_t seed);

/// Compares the network's outputs on each trial input with those on every
/// transform of it under the spec's group (O for the Z3 variant).
template <typename T>
AuditReport audit_equivariance(const Network<T>& net, std::size_t trials, std::size_t dim, std::uint64_t seed);

}  // namespace gcnn
