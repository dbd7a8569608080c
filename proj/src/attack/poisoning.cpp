#include <cmath>
#include <unordered_map>

#include "sslpoison/attack.hpp"

namespace sslpoison {

namespace {

constexpr std::int64_t kChunk = 128;

/// Applies `transform` (pixels -> poisoned pixels, both NCHW float) to every
/// planned unlabeled example and handles the labeled share of situation S2.
template <typename Transform>
DatasetSplits poison_with(const PoisonPlan& plan, const DatasetSplits& splits, Transform transform,
                          double linf_budget) {
  validate_plan(plan, splits);
  DatasetSplits out = splits;
  if (plan.selected_ids.empty()) return out;

  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < out.unlabeled.size(); ++i) index.emplace(out.unlabeled[i].id, i);
  std::vector<std::size_t> slots;
  for (const auto& id : plan.selected_ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw AttackError("planned id '" + id + "' is not in the unlabeled split");
    slots.push_back(it->second);
  }

  for (std::size_t b = 0; b < slots.size(); b += kChunk) {
    std::vector<ImageExample> chunk;
    for (std::size_t i = b; i < std::min(slots.size(), b + kChunk); ++i) chunk.push_back(out.unlabeled[slots[i]]);
    const auto poisoned = transform(to_tensor(chunk), chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      auto& ex = out.unlabeled[slots[b + i]];
      ex.pixels = std::isfinite(linf_budget) ? quantize_within_budget(poisoned[static_cast<std::int64_t>(i)], ex.pixels, linf_budget)
                                             : to_pixels(poisoned[static_cast<std::int64_t>(i)]);
      ex.origin = Origin::poisoned;
    }
  }

  const auto move = static_cast<std::size_t>(std::lround(plan.label_fraction * static_cast<double>(slots.size())));
  if (move > 0) {
    std::vector<bool> moved(out.unlabeled.size(), false);
    for (std::size_t i = 0; i < move; ++i) {
      auto ex = out.unlabeled[slots[i]];
      if (!ex.label) throw AttackError("poison '" + ex.id + "' has no label to place in the labeled split");
      out.labeled.push_back(std::move(ex));
      moved[slots[i]] = true;
    }
    std::vector<ImageExample> kept;
    kept.reserve(out.unlabeled.size() - move);
    for (std::size_t i = 0; i < out.unlabeled.size(); ++i) {
      if (!moved[i]) kept.push_back(std::move(out.unlabeled[i]));
    }
    out.unlabeled = std::move(kept);
  }
  return out;
}

}  // namespace

std::string to_string(PatchVariant variant) { return variant == PatchVariant::badnets ? "badnets" : "clb"; }

PatchVariant patch_variant_from_string(const std::string& s) {
  if (s == "badnets") return PatchVariant::badnets;
  if (s == "clb") return PatchVariant::clb;
  throw AttackError("unknown patch variant: " + s);
}

ImageExample poison_example(const GeneratorModel& generator, const ImageExample& clean) {
  const std::vector<ImageExample> one{clean};
  const auto x = to_tensor(one).to(generator.parameters().front().scalar_type());
  const auto poisoned = apply_pattern(x, generate_pattern(generator, x));
  ImageExample out = clean;
  out.pixels = quantize_within_budget(poisoned[0], clean.pixels, generator.epsilon());
  out.origin = Origin::poisoned;
  return out;
}

DatasetSplits poison_unlabeled(const GeneratorModel& generator, const PoisonPlan& plan, const DatasetSplits& splits) {
  const auto dtype = generator.parameters().front().scalar_type();
  return poison_with(
      plan, splits,
      [&](const torch::Tensor& x, const std::vector<ImageExample>&) {
        const auto xt = x.to(dtype);
        return apply_pattern(xt, generate_pattern(generator, xt));
      },
      generator.epsilon());
}

DatasetSplits baseline_patch_poison(const PoisonPlan& plan, const DatasetSplits& splits, const PatchSpec& patch,
                                    PatchVariant variant, const SurrogateBundle* surrogate, const ClbOptions& clb) {
  if (patch.size > 0 && (patch.top + patch.size > splits.shape.height || patch.left + patch.size > splits.shape.width)) {
    throw ModelError("patch does not fit a " + std::to_string(splits.shape.height) + "x" +
                     std::to_string(splits.shape.width) + " image");
  }
  if (variant == PatchVariant::clb && surrogate == nullptr) throw AttackError("clb needs a surrogate");
  auto transform = [&](const torch::Tensor& x, const std::vector<ImageExample>& chunk) {
    torch::Tensor out = x;
    if (variant == PatchVariant::clb) {
      const auto& model = surrogate->surrogate;
      model.train(false);
      const auto labels = labels_tensor(chunk);
      const auto clean = x.to(model.dtype());
      auto adv = clean.clone();
      for (int s = 0; s < clb.steps; ++s) {
        auto xi = adv.detach().requires_grad_(true);
        const auto loss = torch::cross_entropy_loss(model.logits(xi), labels);
        const auto g = torch::autograd::grad({loss}, {xi})[0];
        torch::NoGradGuard guard;
        adv = adv + clb.step_size * g.sign();
        adv = torch::max(torch::min(adv, clean + clb.epsilon), clean - clb.epsilon).clamp(0, 255);
      }
      for (auto& p : model.parameters()) {
        if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
      }
      out = adv.detach().round().to(x.scalar_type());
    }
    return apply_patch(out, patch);
  };
  return poison_with(plan, splits, transform, std::numeric_limits<double>::infinity());
}

}  // namespace sslpoison
