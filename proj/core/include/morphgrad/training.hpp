#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "morphgrad/datagen.hpp"
#include "morphgrad/network.hpp"

namespace morphgrad {

inline constexpr std::string_view kToolVersion = "1.0.0";
inline constexpr std::string_view kCsvHeaderComment = "# morphgrad-csv v1";

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  std::size_t batch_size = 1;  // fixed at 1
  std::size_t folds = 5;       // k
  std::uint64_t seed = 1;
  bool normalize = true;  // z-score + clip images when loading datasets

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

/// Adam with bias correction; state is keyed by parameter name.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const TrainConfig& cfg) : cfg_(cfg) {}
  /// Reads gradients of `tracked` from `tape` and updates `params`.
  void step(ParamStore& params, const ParamStore& tracked, Tape& tape);

 private:
  struct State {
    std::vector<double> m, v;
  };
  TrainConfig cfg_;
  std::map<std::string, State> state_;
  std::size_t t_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  SegmentationModel model;  // parameters of the best validation epoch
  std::vector<EpochRecord> history;
};

/// dice_loss(softmax(forward(model, image)), one_hot(label)); no gradient.
double evaluate_loss(const SegmentationModel& model, const VolumeSample& sample);

/// Adam on the Dice loss with per-epoch shuffling, early stopping on the
/// validation loss (strict improvement, `patience` epochs of grace), and
/// restoration of the best parameters.
TrainResult train_fold(const SegmentationModel& init,
                       const std::vector<const VolumeSample*>& train_set,
                       const std::vector<const VolumeSample*>& val_set,
                       const TrainConfig& cfg);

/// Shuffled partition of [0, n) into k folds of size floor(n/k) or
/// ceil(n/k), larger folds first.
std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k,
                                                  std::uint64_t seed);

/// Mean of the member models' softmax probabilities.
Tensor ensemble_predict(const std::vector<const SegmentationModel*>& models,
                        const Tensor& image);

/// Per-class and per-region overlap measures. Regions mirror the nested
/// synthetic classes: whole = all foreground, core = classes >= 2,
/// enhancing = classes >= 3. A class absent from both volumes scores 1.
struct Metrics {
  std::vector<double> dice;         // per class
  std::vector<double> sensitivity;  // per class
  double whole_dice = 1.0, core_dice = 1.0, enhancing_dice = 1.0;
  double whole_sensitivity = 1.0, core_sensitivity = 1.0, enhancing_sensitivity = 1.0;
};

Metrics compute_metrics(const Tensor& predicted, const Tensor& truth,
                        std::size_t num_classes);
Metrics mean_metrics(const std::vector<Metrics>& all);

// ---------------------------------------------------------------------------
// Cross-validated experiment
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  NetworkConfig network;
  TrainConfig train;
};

struct FoldOutcome {
  TrainResult result;
  std::vector<std::size_t> val_indices;
};

struct ExperimentResult {
  std::vector<FoldOutcome> folds;
  /// Sample-mean metrics of the all-fold ensemble, each sample evaluated on
  /// the validation split it belongs to.
  Metrics ensemble;
};

/// Runs k-fold training; folds may run on up to `workers` threads without
/// changing any result.
ExperimentResult run_experiment(const std::vector<VolumeSample>& data,
                                const ExperimentConfig& cfg, std::size_t workers = 1);

/// Worker count from the MORPHGRAD_THREADS environment variable (default 1).
std::size_t env_worker_count();

// CSV emission (all floats are written with round-trip precision).
std::string history_csv(const std::vector<FoldOutcome>& folds);
std::string metrics_csv(Variant variant, const Metrics& m);
std::string compare_table_csv(std::vector<std::pair<Variant, Metrics>> rows);

std::string metrics_to_json(Variant variant, const Metrics& m);
std::pair<Variant, Metrics> metrics_from_json(const std::string& text);

}  // namespace morphgrad
