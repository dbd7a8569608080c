#include "sslpoison/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace sslpoison {

namespace {

/// Restores the training flag of a model on scope exit.
class EvalScope {
 public:
  explicit EvalScope(const ClassifierModel& model) : model_(model), was_training_(model.is_training()) {
    model_.train(false);
  }
  ~EvalScope() { model_.train(was_training_); }
  EvalScope(const EvalScope&) = delete;
  EvalScope& operator=(const EvalScope&) = delete;

 private:
  const ClassifierModel& model_;
  bool was_training_;
};

void check_pair(const ImageExample& a, const ImageExample& b) {
  if (!(a.shape == b.shape) || a.pixels.size() != b.pixels.size()) {
    throw MetricError("shape mismatch between '" + a.id + "' and '" + b.id + "'");
  }
}

torch::Tensor as_model_dtype(const ClassifierModel& model, const torch::Tensor& t) {
  return t.to(model.dtype());
}

}  // namespace

double clean_accuracy(const ClassifierModel& model, const torch::Tensor& pixels, const torch::Tensor& labels) {
  if (pixels.size(0) == 0) throw MetricError("clean accuracy of an empty set");
  const auto probs = predict_probabilities(model, pixels);
  const auto correct = probs.argmax(1).eq(labels).sum().item<std::int64_t>();
  return 100.0 * static_cast<double>(correct) / static_cast<double>(pixels.size(0));
}

double clean_accuracy(const ClassifierModel& model, std::span<const ImageExample> validation) {
  if (validation.empty()) throw MetricError("clean accuracy of an empty set");
  return clean_accuracy(model, to_tensor(validation), labels_tensor(validation));
}

double AttackOutcome::asr() const {
  return total() == 0 ? 0.0 : 100.0 * static_cast<double>(to_target) / static_cast<double>(total());
}

double AttackOutcome::other() const {
  return total() == 0 ? 0.0 : 100.0 - asr();
}

AttackOutcome attack_outcome(const ClassifierModel& model, std::span<const ImageExample> validation_nontarget,
                             const PatternSource& pattern, int target_class) {
  if (validation_nontarget.empty()) throw MetricError("attack success rate of an empty set");
  for (const auto& ex : validation_nontarget) {
    if (ex.label && *ex.label == target_class) {
      throw MetricError("attack evaluation set contains target-class example '" + ex.id + "'");
    }
  }
  const auto triggered = apply_pattern_source(pattern, to_tensor(validation_nontarget));
  const auto predicted = predict_probabilities(model, triggered).argmax(1);
  AttackOutcome out;
  out.to_target = predicted.eq(target_class).sum().item<std::int64_t>();
  out.to_other = predicted.size(0) - out.to_target;
  return out;
}

double attack_success_rate(const ClassifierModel& model, std::span<const ImageExample> validation_nontarget,
                           const PatternSource& pattern, int target_class) {
  return attack_outcome(model, validation_nontarget, pattern, target_class).asr();
}

std::vector<ImageExample> non_target(std::span<const ImageExample> examples, int target_class) {
  std::vector<ImageExample> out;
  for (const auto& ex : examples) {
    if (!ex.label || *ex.label != target_class) out.push_back(ex);
  }
  return out;
}

// ------------------------------------------------------- imperceptibility

double psnr(const ImageExample& clean, const ImageExample& poisoned) {
  check_pair(clean, poisoned);
  double sse = 0.0;
  for (std::size_t i = 0; i < clean.pixels.size(); ++i) {
    const double d = static_cast<double>(clean.pixels[i]) - poisoned.pixels[i];
    sse += d * d;
  }
  if (sse == 0.0) return kPsnrCap;
  const double mse = sse / static_cast<double>(clean.pixels.size());
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

double ssim(const ImageExample& clean, const ImageExample& poisoned) {
  check_pair(clean, poisoned);
  constexpr int kRadius = 5;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = (0.01 * 255.0) * (0.01 * 255.0);
  constexpr double kC2 = (0.03 * 255.0) * (0.03 * 255.0);
  const int h = clean.shape.height, w = clean.shape.width, ch = clean.shape.channels;

  std::array<double, 2 * kRadius + 1> g{};
  for (int k = -kRadius; k <= kRadius; ++k) g[k + kRadius] = std::exp(-(k * k) / (2.0 * kSigma * kSigma));

  // The 2-D window is separable, and so is its truncation to the image.
  // Blur every statistic along x, then y, then divide by the truncated mass.
  const std::size_t n = static_cast<std::size_t>(h) * w;
  auto blur = [&](const std::vector<double>& in) {
    std::vector<double> tmp(n), out(n);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int k = std::max(-kRadius, -x); k <= std::min(kRadius, w - 1 - x); ++k) s += g[k + kRadius] * in[y * w + x + k];
        tmp[y * w + x] = s;
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int k = std::max(-kRadius, -y); k <= std::min(kRadius, h - 1 - y); ++k) s += g[k + kRadius] * tmp[(y + k) * w + x];
        out[y * w + x] = s;
      }
    }
    return out;
  };
  const auto mass = blur(std::vector<double>(n, 1.0));

  double total = 0.0;
  std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
  for (int c = 0; c < ch; ++c) {
    for (std::size_t p = 0; p < n; ++p) {
      a[p] = clean.pixels[p * ch + c];
      b[p] = poisoned.pixels[p * ch + c];
      aa[p] = a[p] * a[p];
      bb[p] = b[p] * b[p];
      ab[p] = a[p] * b[p];
    }
    const auto ma = blur(a), mb = blur(b), maa = blur(aa), mbb = blur(bb), mab = blur(ab);
    for (std::size_t p = 0; p < n; ++p) {
      const double mu_a = ma[p] / mass[p], mu_b = mb[p] / mass[p];
      const double var_a = maa[p] / mass[p] - mu_a * mu_a;
      const double var_b = mbb[p] / mass[p] - mu_b * mu_b;
      const double cov = mab[p] / mass[p] - mu_a * mu_b;
      total += ((2.0 * mu_a * mu_b + kC1) * (2.0 * cov + kC2)) /
               ((mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2));
    }
  }
  return total / static_cast<double>(n * ch);
}

double linf(const ImageExample& clean, const ImageExample& poisoned) {
  check_pair(clean, poisoned);
  int m = 0;
  for (std::size_t i = 0; i < clean.pixels.size(); ++i) {
    m = std::max(m, std::abs(static_cast<int>(clean.pixels[i]) - static_cast<int>(poisoned.pixels[i])));
  }
  return m;
}

Imperceptibility imperceptibility(std::span<const ImageExample> clean_set, std::span<const ImageExample> poisoned_set) {
  if (clean_set.size() != poisoned_set.size()) {
    throw MetricError("imperceptibility: " + std::to_string(clean_set.size()) + " clean vs " +
                      std::to_string(poisoned_set.size()) + " poisoned examples");
  }
  std::unordered_map<std::string, const ImageExample*> by_id;
  for (const auto& ex : clean_set) by_id.emplace(ex.id, &ex);
  Imperceptibility out;
  for (const auto& p : poisoned_set) {
    const auto it = by_id.find(p.id);
    if (it == by_id.end()) throw MetricError("poisoned example '" + p.id + "' has no clean counterpart");
    out.psnr += psnr(*it->second, p);
    out.ssim += ssim(*it->second, p);
    out.linf = std::max(out.linf, linf(*it->second, p));
    ++out.pairs;
  }
  if (out.pairs > 0) {
    out.psnr /= static_cast<double>(out.pairs);
    out.ssim /= static_cast<double>(out.pairs);
  }
  return out;
}

// ------------------------------------------------------------ diagnostics

double poison_fit_loss_D(const ClassifierModel& model, std::span<const ImageExample> poisoned_unlabeled,
                         int target_class) {
  if (poisoned_unlabeled.empty()) throw MetricError("D of an empty poison set");
  const auto probs = predict_probabilities(model, to_tensor(poisoned_unlabeled)).to(torch::kFloat64);
  const auto p = probs.select(1, target_class).clamp_min(1e-300);
  return -p.log().mean().item<double>();
}

GradMatchDegree grad_match_degree_C(const ClassifierModel& model, std::span<const ImageExample> validation_sample,
                                    const PatternSource& pattern, std::span<const ImageExample> target_pool,
                                    int target_class) {
  if (validation_sample.empty() || target_pool.empty()) throw MetricError("C needs a sample and a target pool");
  EvalScope eval(model);
  const auto params = model.parameters();
  const auto pool = as_model_dtype(model, to_tensor(target_pool));
  const auto g_t = flat_loss_gradient(model, pool, torch::full({pool.size(0)}, target_class, torch::kInt64), params).detach();

  const auto triggered = as_model_dtype(model, apply_pattern_source(pattern, to_tensor(validation_sample)));
  const auto labels = labels_tensor(validation_sample);
  const auto target = torch::full({1}, target_class, torch::kInt64);

  GradMatchDegree out;
  double sum = 0.0;
  for (std::int64_t i = 0; i < triggered.size(0); ++i) {
    const auto x = triggered.slice(0, i, i + 1);
    const double num = (flat_loss_gradient(model, x, target, params) - g_t).pow(2).sum().item<double>();
    const double den = (flat_loss_gradient(model, x, labels.slice(0, i, i + 1), params) - g_t).pow(2).sum().item<double>();
    if (den == 0.0) {
      ++out.excluded;
      continue;
    }
    sum += num / den;
    ++out.used;
  }
  out.value = out.used > 0 ? sum / out.used : 0.0;
  return out;
}

}  // namespace sslpoison
