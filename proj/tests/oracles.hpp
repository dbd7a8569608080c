// Independent reference computations shared by the unit and acceptance tests.
#pragma once

#include <cmath>
#include <vector>

#include "fixtures.hpp"
#include "sslpoison/attack.hpp"
#include "sslpoison/metrics.hpp"

namespace oracles {

using namespace sslpoison;

// Direct nested-loop formulas, written independently of the library.

inline double brute_psnr(const ImageExample& a, const ImageExample& b) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = double(a.pixels[i]) - double(b.pixels[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  return mse == 0.0 ? sslpoison::kPsnrCap : std::min(sslpoison::kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

inline double brute_ssim(const ImageExample& a, const ImageExample& b) {
  const int h = a.shape.height, w = a.shape.width, ch = a.shape.channels;
  const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
  double total = 0.0;
  for (int c = 0; c < ch; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double wsum = 0, mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int dy = -5; dy <= 5; ++dy) {
          for (int dx = -5; dx <= 5; ++dx) {
            const int yy_ = y + dy, xx_ = x + dx;
            if (yy_ < 0 || yy_ >= h || xx_ < 0 || xx_ >= w) continue;
            const double wt = std::exp(-(dy * dy + dx * dx) / (2 * 1.5 * 1.5));
            const double va = a.at(yy_, xx_, c), vb = b.at(yy_, xx_, c);
            wsum += wt;
            mx += wt * va;
            my += wt * vb;
            xx += wt * va * va;
            yy += wt * vb * vb;
            xy += wt * va * vb;
          }
        }
        mx /= wsum;
        my /= wsum;
        const double vx = xx / wsum - mx * mx, vy = yy / wsum - my * my, cov = xy / wsum - mx * my;
        total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    }
  }
  return total / (h * w * ch);
}

inline double brute_linf(const ImageExample& a, const ImageExample& b) {
  int m = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(int(a.pixels[i]) - int(b.pixels[i])));
  return m;
}

/// Double-precision bundle around a small 8x8 surrogate with a cached target
/// gradient over `pool` random target-class images.
inline SurrogateBundle tiny_bundle(int target = 1, int pool = 6, std::uint64_t seed = 3) {
  SurrogateBundle b;
  b.surrogate = ClassifierModel(fixtures::tiny_classifier(3, {8, 8, 3}, 2), seed);
  b.surrogate.to(torch::kFloat64);
  b.surrogate.train(false);
  b.target_class = target;
  for (int i = 0; i < pool; ++i) {
    b.target_pool.push_back(fixtures::random_image("t" + std::to_string(i), 8, 8, 3, 100 + seed + i, target));
  }
  b.target_gradient = backdoor_gradient(b, to_tensor(b.target_pool).to(torch::kFloat64), false).detach();
  return b;
}

inline std::int64_t parameter_count(const std::vector<torch::Tensor>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

/// Mid-range pixels so the clip in x + G(x) stays inactive.
inline torch::Tensor mid_range_batch(int n, std::uint64_t seed) {
  torch::manual_seed(seed);
  return (torch::rand({n, 3, 8, 8}, torch::kFloat64) * 150.0 + 50.0);
}

struct DerivativeCheck {
  double relative_error = 0.0;
  std::int64_t surrogate_parameters = 0;
  int coordinates = 0;
};

/// d E[L_bt(x + G(x))] / d theta_G: the derivative produced by `mode`
/// against central differences of the loss value, on `coords` generator
/// coordinates spread over every parameter tensor.
inline DerivativeCheck lbt_generator_derivative(HvpMode mode, int coords_per_tensor = 3) {
  const auto bundle = tiny_bundle();
  GeneratorSpec gs;
  gs.arch = GeneratorArch::simple_conv;
  gs.input = {8, 8, 3};
  gs.width = 2;
  gs.epsilon = 27.0;
  GeneratorModel g(gs, 9);
  g.to(torch::kFloat64);
  g.train(false);
  const auto x = mid_range_batch(4, 17);

  auto params = g.parameters();
  for (auto& p : params) {
    if (p.grad().defined()) p.mutable_grad().zero_();
  }
  const auto x_b = apply_pattern(x, g.pattern(x));
  if (mode == HvpMode::exact) {
    grad_match_loss(bundle, x_b).backward();
  } else {
    const auto step = grad_match_step(bundle, x_b, HvpMode::finite_difference);
    (x_b * step.input_gradient).sum().backward();
  }
  std::vector<double> analytic, numeric;
  auto value = [&] { return grad_match_loss(bundle, apply_pattern(x, g.pattern(x))).item<double>(); };
  const double h = 1e-5;
  for (auto& p : params) {
    auto flat = p.view(-1);
    const auto grad = p.grad().view(-1);
    for (int k = 0; k < coords_per_tensor; ++k) {
      const std::int64_t i = (flat.numel() - 1) * k / std::max(1, coords_per_tensor - 1);
      const double orig = flat[i].item<double>();
      {
        torch::NoGradGuard guard;
        flat[i] = orig + h;
      }
      const double up = value();
      {
        torch::NoGradGuard guard;
        flat[i] = orig - h;
      }
      const double down = value();
      {
        torch::NoGradGuard guard;
        flat[i] = orig;
      }
      numeric.push_back((up - down) / (2 * h));
      analytic.push_back(grad[i].item<double>());
    }
  }
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    norm += numeric[i] * numeric[i];
  }
  for (auto& p : bundle.surrogate.parameters()) {
    if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
  }
  return {std::sqrt(diff) / std::max(std::sqrt(norm), 1e-300),
          parameter_count(bundle.matched_parameters()), static_cast<int>(numeric.size())};
}

}  // namespace oracles
