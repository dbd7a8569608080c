#include <algorithm>
#include <cmath>
#include <numeric>

#include "sslpoison/attack.hpp"
#include "sslpoison/random.hpp"

namespace sslpoison {

namespace {

/// Mean over the batch of the per-image squared L2 distance on [0,1] pixels.
torch::Tensor instance_loss(const torch::Tensor& x_b, const torch::Tensor& x) {
  return ((x_b - x) / 255.0).pow(2).flatten(1).sum(1).mean();
}

/// grad_x of the batch-mean target CE with the matched parameters shifted
/// by `shift` (restored bit-exactly afterwards).
torch::Tensor input_gradient_at(const SurrogateBundle& bundle, const torch::Tensor& x, const torch::Tensor& shift) {
  auto params = bundle.matched_parameters();
  std::vector<torch::Tensor> saved;
  {
    torch::NoGradGuard guard;
    std::int64_t offset = 0;
    for (auto& p : params) {
      saved.push_back(p.detach().clone());
      p.add_(shift.slice(0, offset, offset + p.numel()).view_as(p));
      offset += p.numel();
    }
  }
  auto xi = x.detach().clone().requires_grad_(true);
  const auto labels = torch::full({x.size(0)}, bundle.target_class, torch::kInt64);
  const auto loss = torch::cross_entropy_loss(bundle.surrogate.logits(xi), labels);
  auto grad = torch::autograd::grad({loss}, {xi})[0].detach();
  {
    torch::NoGradGuard guard;
    for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(saved[i]);
  }
  return grad;
}

}  // namespace

torch::Tensor grad_match_loss(const SurrogateBundle& bundle, const torch::Tensor& x_b) {
  if (!bundle.target_gradient.defined()) throw AttackError("target gradient has not been cached");
  return (backdoor_gradient(bundle, x_b, true) - bundle.target_gradient).pow(2).sum();
}

GradMatchStep grad_match_step(const SurrogateBundle& bundle, const torch::Tensor& x_b, HvpMode mode,
                              double fd_scale) {
  GradMatchStep out;
  if (mode == HvpMode::exact) {
    auto x = x_b.detach().clone().requires_grad_(true);
    const auto loss = grad_match_loss(bundle, x);
    out.value = loss.item<double>();
    out.input_gradient = torch::autograd::grad({loss}, {x})[0].detach();
    return out;
  }
  bundle.surrogate.train(false);
  const auto v = (backdoor_gradient(bundle, x_b.detach(), false) - bundle.target_gradient).detach();
  out.value = v.pow(2).sum().item<double>();
  const double vnorm = v.norm().item<double>();
  if (vnorm == 0.0) {
    out.input_gradient = torch::zeros_like(x_b);
    return out;
  }
  double theta_norm = 0.0;
  for (const auto& p : bundle.matched_parameters()) theta_norm += p.detach().pow(2).sum().item<double>();
  if (fd_scale <= 0.0) fd_scale = x_b.scalar_type() == torch::kFloat64 ? 1e-6 : 1e-3;
  const double h = fd_scale * (1.0 + std::sqrt(theta_norm)) / vnorm;
  const auto plus = input_gradient_at(bundle, x_b, h * v);
  const auto minus = input_gradient_at(bundle, x_b, -h * v);
  out.input_gradient = (plus - minus) / h;
  return out;
}

int CraftConfig::lambda_period() const {
  const double scaled = static_cast<double>(epochs) * reference_period / reference_epochs;
  return std::max(1, static_cast<int>(std::lround(scaled)));
}

double CraftConfig::lambda_at(int epoch) const {
  return lambda_ins * std::pow(lambda_multiplier, epoch / lambda_period());
}

void CraftConfig::validate() const {
  if (!(lambda_ins > 0.0)) throw AttackError("lambda_ins must be positive");
  if (!(generator.epsilon >= 0.0)) throw AttackError("epsilon must be >= 0");
  if (epochs <= 0 || batch_size <= 0 || steps_per_epoch < 0 || !(lr > 0.0)) {
    throw AttackError("crafting epochs, batch size and lr must be positive");
  }
  if (reference_period <= 0 || reference_epochs <= 0 || !(lambda_multiplier > 0.0)) {
    throw AttackError("lambda schedule must be positive");
  }
}

CraftResult craft_generator(const SurrogateBundle& bundle, std::span<const ImageExample> surrogate_examples,
                            const CraftConfig& config, const std::function<void(const CraftEpoch&)>& on_epoch) {
  config.validate();
  if (!bundle.target_gradient.defined()) throw AttackError("select a target pool before crafting");
  if (surrogate_examples.empty()) throw AttackError("no crafting examples");

  GeneratorSpec gspec = config.generator;
  gspec.input = surrogate_examples.front().shape;
  CraftResult result{GeneratorModel(gspec, config.seed), {}};
  auto& generator = result.generator;
  generator.to(bundle.surrogate.dtype());
  generator.train(true);

  const auto pixels = to_tensor(surrogate_examples).to(bundle.surrogate.dtype());
  const auto n = pixels.size(0);
  const int batch = static_cast<int>(std::min<std::int64_t>(config.batch_size, n));
  const int steps = config.steps_per_epoch > 0 ? config.steps_per_epoch : static_cast<int>((n + batch - 1) / batch);

  torch::optim::Adam optimizer(generator.parameters(), torch::optim::AdamOptions(config.lr));
  std::mt19937_64 rng(config.seed ^ 0xc4a7f00dc4a7f00dULL);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lambda = config.lambda_at(epoch);
    CraftEpoch rec{epoch, 0.0, 0.0, lambda};
    for (int s = 0; s < steps; ++s) {
      std::vector<std::int64_t> idx;
      while (static_cast<int>(idx.size()) < batch) {
        if (cursor == order.size()) {
          rnd::shuffle(order, rng);
          cursor = 0;
        }
        idx.push_back(order[cursor++]);
      }
      const auto x = pixels.index_select(0, torch::tensor(idx, torch::kInt64));
      const auto x_b = apply_pattern(x, generator.pattern(x));
      const auto ins = instance_loss(x_b, x);
      torch::Tensor objective;
      double match = 0.0;
      if (config.hvp == HvpMode::exact) {
        const auto bt = grad_match_loss(bundle, x_b);
        match = bt.item<double>();
        objective = bt + lambda * ins;
      } else {
        const auto step = grad_match_step(bundle, x_b, HvpMode::finite_difference);
        match = step.value;
        objective = (x_b * step.input_gradient).sum() + lambda * ins;
      }
      if (!std::isfinite(match) || !torch::isfinite(ins).item<bool>()) {
        throw AttackError("crafting diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(s) +
                          " (L_bt " + std::to_string(match) + ")");
      }
      optimizer.zero_grad();
      objective.backward();
      optimizer.step();
      rec.grad_match += match;
      rec.instance += ins.item<double>();
    }
    rec.grad_match /= steps;
    rec.instance /= steps;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  // Surrogate parameter gradients accumulate during the objective backward
  // pass; clear them so the bundle leaves crafting as it entered.
  for (auto& p : bundle.surrogate.parameters()) {
    if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
  }
  generator.train(false);
  return result;
}

}  // namespace sslpoison
