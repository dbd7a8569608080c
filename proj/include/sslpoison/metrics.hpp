// Clean accuracy, attack success rate, imperceptibility (PSNR / SSIM / L-inf)
// and the training-dynamics diagnostics D and C.
#pragma once

#include <array>
#include <span>
#include <vector>

#include "sslpoison/data_core.hpp"
#include "sslpoison/model_zoo.hpp"

namespace sslpoison {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Percentage of examples whose argmax prediction equals the label.
double clean_accuracy(const ClassifierModel& model, std::span<const ImageExample> validation);
double clean_accuracy(const ClassifierModel& model, const torch::Tensor& pixels, const torch::Tensor& labels);

struct AttackOutcome {
  std::int64_t to_target = 0;
  std::int64_t to_other = 0;

  [[nodiscard]] std::int64_t total() const { return to_target + to_other; }
  /// Percentage classified as the target class.
  [[nodiscard]] double asr() const;
  /// Percentage classified as any other class; asr() + other() == 100.
  [[nodiscard]] double other() const;
};

/// Applies `pattern` to every example (none may belong to `target_class`)
/// and counts predictions of the target class.
AttackOutcome attack_outcome(const ClassifierModel& model, std::span<const ImageExample> validation_nontarget,
                             const PatternSource& pattern, int target_class);
double attack_success_rate(const ClassifierModel& model, std::span<const ImageExample> validation_nontarget,
                           const PatternSource& pattern, int target_class);

/// Examples whose label differs from `target_class`.
std::vector<ImageExample> non_target(std::span<const ImageExample> examples, int target_class);

// ------------------------------------------------------- imperceptibility

/// PSNR reported for identical images instead of +infinity.
inline constexpr double kPsnrCap = 99.0;

struct Imperceptibility {
  double psnr = 0.0;  ///< dB, mean over pairs
  double ssim = 0.0;  ///< mean over pairs
  double linf = 0.0;  ///< max over pairs and pixels
  std::size_t pairs = 0;
};

/// 10 log10(255^2 / MSE), capped at kPsnrCap.
double psnr(const ImageExample& clean, const ImageExample& poisoned);

/// SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// L = 255, evaluated at every pixel. Near borders the window is truncated
/// to the image and its weights renormalised. Mean over pixels and channels.
double ssim(const ImageExample& clean, const ImageExample& poisoned);

double linf(const ImageExample& clean, const ImageExample& poisoned);

/// Pairs examples by id; throws MetricError on unpaired ids or shape mismatch.
Imperceptibility imperceptibility(std::span<const ImageExample> clean_set, std::span<const ImageExample> poisoned_set);

// ------------------------------------------------------------ diagnostics

/// D: mean cross-entropy of poisoned unlabeled examples against the target
/// label under the current model (eval mode).
double poison_fit_loss_D(const ClassifierModel& model, std::span<const ImageExample> poisoned_unlabeled,
                         int target_class);

struct GradMatchDegree {
  double value = 0.0;  ///< mean ratio over included examples
  int used = 0;
  int excluded = 0;  ///< zero-denominator pairs
};

/// C: mean over `validation_sample` of
///   |grad l(y^t, F(P(x))) - g_t|^2 / |grad l(y, F(P(x))) - g_t|^2
/// where g_t is the gradient of the mean target-class loss over
/// `target_pool`; gradients are w.r.t. all model parameters, eval mode.
GradMatchDegree grad_match_degree_C(const ClassifierModel& model, std::span<const ImageExample> validation_sample,
                                    const PatternSource& pattern, std::span<const ImageExample> target_pool,
                                    int target_class);

}  // namespace sslpoison
