// Semi-supervised training from scratch on X plus U with per-epoch history.
//
// Every algorithm minimises labeled cross-entropy plus a weighted unlabeled
// term. The optimiser is shared: Nesterov SGD with weight decay and the
// cosine schedule lr * cos(7 pi k / 16 K) over the K total steps.
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sslpoison/data_core.hpp"
#include "sslpoison/model_zoo.hpp"

namespace sslpoison {

enum class SslAlgorithm { supervised, pseudolabel, pimodel, meanteacher, vat, ict, fixmatch };
std::string to_string(SslAlgorithm algorithm);
SslAlgorithm ssl_algorithm_from_string(const std::string& s);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or parameters. `epoch` is zero-based.
class TrainingDiverged : public TrainingError {
 public:
  TrainingDiverged(int epoch, const std::string& what);
  [[nodiscard]] int epoch() const { return epoch_; }

 private:
  int epoch_;
};

struct SSLConfig {
  SslAlgorithm algorithm = SslAlgorithm::fixmatch;
  ClassifierSpec model;
  int epochs = 30;
  /// Optimiser steps per epoch; 0 means one pass over U (or X without U).
  int steps_per_epoch = 0;
  int labeled_batch = 32;
  int unlabeled_batch = 64;
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  double threshold = 0.95;  ///< tau, FixMatch and pseudo-label
  double ema_decay = 0.999;  ///< teacher of mean teacher and ICT
  /// Unlabeled-loss weight; a negative value picks the algorithm default
  /// (pseudolabel 1, pimodel 10, meanteacher 50, vat 0.3, ict 100, fixmatch 1).
  double unlabeled_weight = -1.0;
  /// Sigmoid ramp-up of the unlabeled weight over this fraction of training.
  /// FixMatch is never ramped; its threshold gates the term instead.
  double ramp_fraction = 0.3;
  double vat_radius = 384.0;  ///< L2, pixel units
  double vat_xi = 10.0;       ///< finite-difference step, pixel units
  double mixup_alpha = 1.0;
  AugmentOptions augment;
  std::uint64_t seed = 0;

  /// Throws TrainingError on non-positive dimensional settings or tau
  /// outside (0, 1].
  void validate() const;
  [[nodiscard]] double default_weight() const;
};

struct EpochRecord {
  int epoch = 0;  ///< zero-based
  double labeled_loss = 0.0;
  double unlabeled_loss = 0.0;
  double ca = 0.0;
  std::optional<double> asr;
  std::optional<double> d;
  std::optional<double> c;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

/// Called once per epoch with an eval-mode deep copy of the model; fills the
/// optional fields of the record.
using EpochProbe = std::function<void(const ClassifierModel& snapshot, EpochRecord& record)>;

struct TrainResult {
  ClassifierModel model;
  TrainHistory history;
};

/// Trains a fresh classifier (seeded by config.seed). Labeled examples are
/// splits.labeled, unlabeled pixels splits.unlabeled (their oracle labels
/// are never read), CA is measured on splits.validation every epoch.
TrainResult train_ssl(const DatasetSplits& splits, const SSLConfig& config, const std::vector<EpochProbe>& probes = {});

/// State handed to the unlabeled loss of one step.
struct UnlabeledContext {
  const ClassifierModel* student = nullptr;
  const ClassifierModel* teacher = nullptr;  ///< EMA model; mean teacher and ICT only
  std::mt19937_64* rng = nullptr;
  const SSLConfig* config = nullptr;
  /// Replaces both the weak and the strong view (tests use `none`).
  std::optional<AugmentKind> view_override;
  /// Fixes the ICT mixing coefficient instead of drawing Beta(alpha, alpha).
  std::optional<double> fixed_mix;
};

/// Unweighted unlabeled term for a non-empty batch of raw pixels. Returns
/// zero for the supervised baseline.
torch::Tensor ssl_unlabeled_loss(SslAlgorithm algorithm, const torch::Tensor& unlabeled, const UnlabeledContext& ctx);

/// Sigmoid ramp exp(-5 (1 - t)^2) for progress t in [0, 1] scaled by the
/// ramp fraction; 1 afterwards.
double consistency_ramp(double progress, double ramp_fraction);

/// Learning rate at step k of K.
double cosine_lr(double base, std::int64_t step, std::int64_t total);

/// `epoch,labeled_loss,unlabeled_loss,ca,asr,D,C`; absent values are empty.
void write_epochs_csv(const TrainHistory& history, const std::filesystem::path& path);

}  // namespace sslpoison
