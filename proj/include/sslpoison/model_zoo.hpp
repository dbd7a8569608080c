// Classifier and generator models, the budget-clamped pattern pipeline and
// conversions between ImageExample lists and NCHW tensors.
//
// Every model consumes raw pixel tensors on the [0,255] scale, shape
// [N, C, H, W]. Classifiers normalise internally with per-channel constants;
// generators emit patterns in pixel units bounded by their budget.
#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sslpoison/data_core.hpp"

namespace sslpoison {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- tensors

/// Stacks examples into a float [N, C, H, W] tensor of raw pixel values.
torch::Tensor to_tensor(std::span<const ImageExample> examples);
/// Labels as int64 [N]; throws DataError for unlabeled examples.
torch::Tensor labels_tensor(std::span<const ImageExample> examples);
/// Rounds a [C, H, W] pixel tensor to 8-bit HWC storage.
std::vector<std::uint8_t> to_pixels(const torch::Tensor& image);

// ------------------------------------------------------------ classifiers

enum class ClassifierArch { small_cnn, cnn13, wrn28_2, lenet };
std::string to_string(ClassifierArch arch);
ClassifierArch classifier_arch_from_string(const std::string& s);

struct ClassifierSpec {
  ClassifierArch arch = ClassifierArch::small_cnn;
  int num_classes = 10;
  ImageShape input{32, 32, 3};
  /// Base channel count of small-cnn (w, 2w, 4w); ignored by the
  /// fixed-width architectures.
  int width = 32;
  double dropout = 0.0;
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> std{0.2470, 0.2435, 0.2616};
};

/// Network body: feature maps of the last convolutional block, then a
/// head mapping (masked) feature maps to logits.
class ClassifierNet : public torch::nn::Module {
 public:
  virtual torch::Tensor features(const torch::Tensor& normalized) = 0;
  virtual torch::Tensor head(const torch::Tensor& feature_maps) = 0;
  /// Input to the final linear layer, the "last hidden layer".
  virtual torch::Tensor hidden(const torch::Tensor& feature_maps) = 0;
  [[nodiscard]] virtual int last_block_channels() const = 0;
};

/// Handle to a classifier. Copies share parameters; use clone() for an
/// independent deep copy.
class ClassifierModel {
 public:
  ClassifierModel() = default;
  ClassifierModel(ClassifierSpec spec, std::uint64_t seed);

  [[nodiscard]] const ClassifierSpec& spec() const { return spec_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] bool defined() const { return net_ != nullptr; }

  torch::Tensor logits(const torch::Tensor& pixels) const;
  /// Softmax class distributions.
  torch::Tensor forward(const torch::Tensor& pixels) const;
  /// Activations feeding the final linear layer.
  torch::Tensor hidden(const torch::Tensor& pixels) const;
  /// Mean activation of each last-block channel over a batch, shape [C].
  torch::Tensor channel_activations(const torch::Tensor& pixels) const;

  /// Per-channel multiplicative mask on the last block (1 keeps, 0 prunes).
  void set_channel_mask(const torch::Tensor& mask);
  [[nodiscard]] torch::Tensor channel_mask() const { return mask_; }
  [[nodiscard]] int last_block_channels() const { return net_->last_block_channels(); }

  [[nodiscard]] std::vector<torch::Tensor> parameters() const { return net_->parameters(); }
  [[nodiscard]] std::int64_t parameter_count() const;
  [[nodiscard]] torch::nn::Module& module() const { return *net_; }

  void train(bool on = true) const { net_->train(on); }
  [[nodiscard]] bool is_training() const { return net_->is_training(); }
  void to(torch::Dtype dtype);
  [[nodiscard]] torch::Dtype dtype() const;

  [[nodiscard]] ClassifierModel clone() const;
  /// Copies parameter and buffer values from `other` (same architecture).
  void load_state_from(const ClassifierModel& other);

  /// Throws ModelError naming the expected shape when `pixels` does not match.
  void check_input(const torch::Tensor& pixels) const;

 private:
  torch::Tensor normalize(const torch::Tensor& pixels) const;

  ClassifierSpec spec_;
  std::uint64_t seed_ = 0;
  std::shared_ptr<ClassifierNet> net_;
  torch::Tensor mask_;
};

/// Evaluation-mode class distributions (rows on the simplex).
torch::Tensor forward_classifier(const ClassifierModel& model, const torch::Tensor& batch);

/// Runs `model` in eval mode over `pixels` in chunks without autograd.
torch::Tensor predict_probabilities(const ClassifierModel& model, const torch::Tensor& pixels,
                                    int chunk = 256);

/// Flattened gradient of the mean cross-entropy of `pixels` against
/// `labels` w.r.t. `params`. With `create_graph` the result stays
/// differentiable (for second-order use).
torch::Tensor flat_loss_gradient(const ClassifierModel& model, const torch::Tensor& pixels,
                                 const torch::Tensor& labels, const std::vector<torch::Tensor>& params,
                                 bool create_graph = false);

// ------------------------------------------------------------- generators

enum class GeneratorArch { simple_conv, unet };
std::string to_string(GeneratorArch arch);
GeneratorArch generator_arch_from_string(const std::string& s);

struct GeneratorSpec {
  GeneratorArch arch = GeneratorArch::unet;
  ImageShape input{32, 32, 3};
  /// Hidden channels of simple-conv, base channels of the encoder-decoder.
  /// Zero selects the architecture default (64 and 16).
  int width = 0;
  double epsilon = 27.0;  ///< pixel units, [0,255] scale
};

class GeneratorNet : public torch::nn::Module {
 public:
  /// Unbounded output for inputs scaled to [-1, 1].
  virtual torch::Tensor raw(const torch::Tensor& scaled) = 0;
};

/// Image-to-image pattern generator G. Emitted patterns are epsilon * tanh(.)
/// so every value lies in [-epsilon, +epsilon].
class GeneratorModel {
 public:
  GeneratorModel() = default;
  GeneratorModel(GeneratorSpec spec, std::uint64_t seed);

  [[nodiscard]] const GeneratorSpec& spec() const { return spec_; }
  [[nodiscard]] double epsilon() const { return spec_.epsilon; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] bool defined() const { return net_ != nullptr; }

  /// Pattern in pixel units, same shape as `pixels`.
  torch::Tensor pattern(const torch::Tensor& pixels) const;

  [[nodiscard]] std::vector<torch::Tensor> parameters() const { return net_->parameters(); }
  [[nodiscard]] std::int64_t parameter_count() const;
  [[nodiscard]] torch::nn::Module& module() const { return *net_; }
  void train(bool on = true) const { net_->train(on); }
  void to(torch::Dtype dtype);
  [[nodiscard]] GeneratorModel clone() const;

 private:
  GeneratorSpec spec_;
  std::uint64_t seed_ = 0;
  std::shared_ptr<GeneratorNet> net_;
};

/// Eval-mode pattern for a batch.
torch::Tensor generate_pattern(const GeneratorModel& generator, const torch::Tensor& pixels);

/// clip(x + pattern, 0, 255). Differentiable in both arguments.
torch::Tensor apply_pattern(const torch::Tensor& pixels, const torch::Tensor& pattern);

/// Rounds a poisoned float image to 8 bits without leaving the L-inf ball
/// of radius floor(epsilon) around the clean 8-bit image.
std::vector<std::uint8_t> quantize_within_budget(const torch::Tensor& poisoned,
                                                 std::span<const std::uint8_t> clean, double epsilon);

// ------------------------------------------------------------------ patch

/// A fixed square trigger block pasted at (top, left).
struct PatchSpec {
  int top = 20;
  int left = 20;
  int size = 8;
  /// size*size*channels HWC values; empty means the default block.
  std::vector<std::uint8_t> block;

  /// Deterministic block whose channels are each 0 or 255.
  static PatchSpec standard(int channels = 3, int top = 20, int left = 20, int size = 8);
};

/// Pastes the patch into a copy of `example`. Throws ModelError when the
/// patch does not fit.
ImageExample apply_patch(const ImageExample& example, const PatchSpec& patch);
torch::Tensor apply_patch(const torch::Tensor& pixels, const PatchSpec& patch);

struct IdentityPattern {};
/// P_val: how a backdoor is applied at evaluation time.
using PatternSource = std::variant<IdentityPattern, const GeneratorModel*, PatchSpec>;

/// Applies a pattern source to a pixel batch (eval mode, no autograd).
torch::Tensor apply_pattern_source(const PatternSource& source, const torch::Tensor& pixels);

// --------------------------------------------------------------- augment

enum class AugmentKind { none, weak, strong };
AugmentKind augment_kind_from_string(const std::string& s);

struct AugmentOptions {
  bool horizontal_flip = true;  ///< disabled for digit datasets (SVHN)
  int crop_padding = 4;
  int strong_ops = 2;
  double cutout_fraction = 0.5;  ///< cutout side as a fraction of image side (max)
};

/// Seeded batch augmentation. Outputs stay on [0,255].
torch::Tensor augment(const torch::Tensor& pixels, AugmentKind kind, std::mt19937_64& rng,
                      const AugmentOptions& options = {});

// ------------------------------------------------------------ checkpoints

/// Single-file archive: architecture id, parameter tensors, normalisation
/// constants and seed.
void save_classifier(const ClassifierModel& model, const std::filesystem::path& path);
ClassifierModel load_classifier(const std::filesystem::path& path);
void save_generator(const GeneratorModel& model, const std::filesystem::path& path);
GeneratorModel load_generator(const std::filesystem::path& path);

/// SHA-256 over all parameter and buffer bytes.
std::string parameter_checksum(const torch::nn::Module& module);

}  // namespace sslpoison
