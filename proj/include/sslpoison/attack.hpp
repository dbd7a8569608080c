// Zero-knowledge backdoor crafting against semi-supervised training.
//
// The attacker trains a surrogate on its own labeled data, caches the
// gradient of the target-class loss over a confident target pool, and fits
// a pattern generator so that patterned images of any class produce the
// same surrogate gradient under the target label:
//
//   L_bt   = || grad L_t - grad L_b(x + G(x)) ||^2
//   L_ins  = E || x_b - x ||^2            (pixels scaled to [0,1])
//   L      = E[L_bt] + lambda_ins * L_ins
//
// Only data_core and model_zoo are visible from here: nothing in this module
// can reach a victim model, victim training config or victim RNG.
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sslpoison/data_core.hpp"
#include "sslpoison/model_zoo.hpp"

namespace sslpoison {

class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Which surrogate parameters enter the gradient-matching objective: all of
/// them, or only the final linear layer (cheaper).
enum class ParameterSubset { all, head };
std::string to_string(ParameterSubset subset);
ParameterSubset parameter_subset_from_string(const std::string& s);

/// How the crafting loss is differentiated through the surrogate gradient.
enum class HvpMode { exact, finite_difference };
std::string to_string(HvpMode mode);
HvpMode hvp_mode_from_string(const std::string& s);

struct SurrogateConfig {
  ClassifierSpec model;
  int epochs = 30;
  int batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool augment = true;
  AugmentOptions augment_options;
  /// Validation accuracy (percent) the surrogate must reach.
  double min_accuracy = 85.0;
  std::uint64_t seed = 0;
};

struct SurrogateBundle {
  ClassifierModel surrogate;
  std::string dataset_id;
  double validation_accuracy = 0.0;
  ParameterSubset subset = ParameterSubset::all;

  int target_class = -1;
  std::vector<ImageExample> target_pool;
  std::vector<double> pool_confidence;  ///< non-increasing
  torch::Tensor target_gradient;        ///< flat, detached
  std::vector<std::string> warnings;

  /// Parameters entering L_bt, in a fixed order.
  [[nodiscard]] std::vector<torch::Tensor> matched_parameters() const;
};

/// Supervised training of F^s on `dataset.train`, validated on
/// `dataset.test`. Throws AttackError when the accuracy guard is unmet.
SurrogateBundle train_surrogate(const RawDataset& dataset, const SurrogateConfig& config);

/// Ranks target-class `candidates` by surrogate target probability, keeps
/// the top `pool_size` and caches grad of mean CE(y^t, F^s(pool)).
/// Too few candidates: all are used and a warning is recorded.
void select_target_pool(SurrogateBundle& bundle, std::span<const ImageExample> candidates, int target_class,
                        int pool_size, ParameterSubset subset = ParameterSubset::all);

/// Flat batch-mean gradient of CE(y^t, F^s(x)) w.r.t. the matched
/// parameters. The surrogate is evaluated in eval mode.
torch::Tensor backdoor_gradient(const SurrogateBundle& bundle, const torch::Tensor& x_b, bool create_graph);

/// L_bt for a batch of patterned images, differentiable w.r.t. `x_b`
/// (second order through the surrogate).
torch::Tensor grad_match_loss(const SurrogateBundle& bundle, const torch::Tensor& x_b);

struct GradMatchStep {
  double value = 0.0;
  torch::Tensor input_gradient;  ///< dL_bt / dx_b
};

/// L_bt and its input gradient. `exact` uses double backpropagation;
/// `finite_difference` needs first-order gradients only: with
/// v = g_b - g_t, dL/dx = 2 d<g_b(x), v>/dx, and the mixed derivative is
/// taken as a central difference of grad_x CE along theta +- h v, with
/// |h v| = fd_scale (1 + |theta|). fd_scale <= 0 picks 1e-6 in double and
/// 1e-3 in single precision.
GradMatchStep grad_match_step(const SurrogateBundle& bundle, const torch::Tensor& x_b, HvpMode mode,
                              double fd_scale = 0.0);

struct CraftConfig {
  GeneratorSpec generator;
  double lambda_ins = 0.05;
  double lambda_multiplier = 2.0;
  /// lambda_ins is multiplied every `reference_period` epochs of a
  /// `reference_epochs` horizon; shorter runs scale the period
  /// proportionally.
  int reference_period = 50;
  int reference_epochs = 150;
  int epochs = 20;
  int batch_size = 32;
  /// Optimiser steps per epoch; 0 means one pass over the crafting set.
  int steps_per_epoch = 0;
  double lr = 1e-3;  ///< Adam
  HvpMode hvp = HvpMode::exact;
  std::uint64_t seed = 0;

  [[nodiscard]] int lambda_period() const;
  [[nodiscard]] double lambda_at(int epoch) const;
  void validate() const;
};

struct CraftEpoch {
  int epoch = 0;
  double grad_match = 0.0;  ///< mean L_bt
  double instance = 0.0;    ///< mean L_ins
  double lambda_ins = 0.0;
};

struct CraftResult {
  GeneratorModel generator;
  std::vector<CraftEpoch> history;
};

/// Fits G on batches drawn from every class of `surrogate_examples`.
/// The surrogate is left untouched.
CraftResult craft_generator(const SurrogateBundle& bundle, std::span<const ImageExample> surrogate_examples,
                            const CraftConfig& config,
                            const std::function<void(const CraftEpoch&)>& on_epoch = {});

/// Patterned, 8-bit quantised copy of one example within floor(epsilon).
ImageExample poison_example(const GeneratorModel& generator, const ImageExample& clean);

/// Replaces every planned unlabeled example by its patterned version and
/// marks it poisoned. With plan.label_fraction > 0 the first
/// round(fraction * count) poisons move to the labeled split with their
/// correct label.
DatasetSplits poison_unlabeled(const GeneratorModel& generator, const PoisonPlan& plan, const DatasetSplits& splits);

enum class PatchVariant { badnets, clb };
std::string to_string(PatchVariant variant);
PatchVariant patch_variant_from_string(const std::string& s);

struct ClbOptions {
  double epsilon = 16.0;  ///< L-inf radius of the adversarial step, pixel units
  int steps = 10;
  double step_size = 3.0;
};

/// Pastes `patch` on every planned example. The clb variant first pushes
/// each example away from its correct class with projected gradient ascent
/// on the surrogate (required for clb, ignored for badnets).
DatasetSplits baseline_patch_poison(const PoisonPlan& plan, const DatasetSplits& splits, const PatchSpec& patch,
                                    PatchVariant variant, const SurrogateBundle* surrogate = nullptr,
                                    const ClbOptions& clb = {});

}  // namespace sslpoison
