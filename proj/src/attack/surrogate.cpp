#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "sslpoison/attack.hpp"
#include "sslpoison/random.hpp"

namespace sslpoison {

std::string to_string(ParameterSubset subset) { return subset == ParameterSubset::all ? "all" : "head"; }

ParameterSubset parameter_subset_from_string(const std::string& s) {
  if (s == "all") return ParameterSubset::all;
  if (s == "head") return ParameterSubset::head;
  throw AttackError("unknown parameter subset: " + s);
}

std::string to_string(HvpMode mode) { return mode == HvpMode::exact ? "exact" : "finite-difference"; }

HvpMode hvp_mode_from_string(const std::string& s) {
  if (s == "exact") return HvpMode::exact;
  if (s == "finite-difference" || s == "fd") return HvpMode::finite_difference;
  throw AttackError("unknown hessian-vector mode: " + s);
}

std::vector<torch::Tensor> SurrogateBundle::matched_parameters() const {
  auto params = surrogate.parameters();
  if (subset == ParameterSubset::head && params.size() > 2) {
    params.erase(params.begin(), params.end() - 2);
  }
  return params;
}

SurrogateBundle train_surrogate(const RawDataset& dataset, const SurrogateConfig& config) {
  if (dataset.train.empty() || dataset.test.empty()) throw AttackError("surrogate dataset needs train and test examples");
  if (config.epochs <= 0 || config.batch_size <= 0 || !(config.lr > 0.0)) {
    throw AttackError("surrogate epochs, batch size and lr must be positive");
  }
  ClassifierSpec spec = config.model;
  spec.num_classes = dataset.num_classes;
  spec.input = dataset.shape;
  ClassifierModel model(spec, config.seed);
  model.train(true);

  const auto pixels = to_tensor(dataset.train);
  const auto labels = labels_tensor(dataset.train);
  std::mt19937_64 rng(config.seed ^ 0x5151c0de5151c0deULL);
  torch::optim::SGD optimizer(model.parameters(), torch::optim::SGDOptions(config.lr)
                                                      .momentum(config.momentum)
                                                      .nesterov(config.momentum > 0.0)
                                                      .weight_decay(config.weight_decay));
  const auto n = static_cast<std::int64_t>(dataset.train.size());
  const std::int64_t steps = (n + config.batch_size - 1) / config.batch_size;
  const std::int64_t total = steps * config.epochs;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rnd::shuffle(order, rng);
    for (std::int64_t b = 0; b < n; b += config.batch_size, ++step) {
      const double lr = config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
      for (auto& group : optimizer.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
      const auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + b, order.begin() + std::min(n, b + config.batch_size)),
                                     torch::kInt64);
      auto x = pixels.index_select(0, idx);
      if (config.augment) x = augment(x, AugmentKind::weak, rng, config.augment_options);
      const auto loss = torch::cross_entropy_loss(model.logits(x), labels.index_select(0, idx));
      if (!torch::isfinite(loss).item<bool>()) {
        throw AttackError("surrogate training diverged at epoch " + std::to_string(epoch));
      }
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
    }
  }
  model.train(false);

  SurrogateBundle bundle;
  bundle.surrogate = model;
  bundle.dataset_id = dataset.name;
  const auto probs = predict_probabilities(model, to_tensor(dataset.test));
  const auto correct = probs.argmax(1).eq(labels_tensor(dataset.test)).sum().item<double>();
  bundle.validation_accuracy = 100.0 * correct / static_cast<double>(dataset.test.size());
  if (bundle.validation_accuracy < config.min_accuracy) {
    throw AttackError("surrogate validation accuracy " + std::to_string(bundle.validation_accuracy) +
                      "% is below the " + std::to_string(config.min_accuracy) +
                      "% guard; train longer (surrogate.epochs) or on more data");
  }
  return bundle;
}

void select_target_pool(SurrogateBundle& bundle, std::span<const ImageExample> candidates, int target_class,
                        int pool_size, ParameterSubset subset) {
  if (!bundle.surrogate.defined()) throw AttackError("surrogate is not trained");
  if (pool_size <= 0) throw AttackError("target pool size must be positive");
  std::vector<ImageExample> members;
  for (const auto& ex : candidates) {
    if (ex.label && *ex.label == target_class) members.push_back(ex);
  }
  if (members.empty()) throw AttackError("no candidates of target class " + std::to_string(target_class));
  if (static_cast<int>(members.size()) < pool_size) {
    bundle.warnings.push_back("target pool: only " + std::to_string(members.size()) + " candidates for " +
                              std::to_string(pool_size) + " slots; using all");
  }

  const auto probs = predict_probabilities(bundle.surrogate, to_tensor(members)).select(1, target_class);
  const auto p = probs.to(torch::kFloat64).contiguous();
  std::vector<std::size_t> order(members.size());
  std::iota(order.begin(), order.end(), 0);
  const double* pp = p.data_ptr<double>();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pp[a] > pp[b]; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(pool_size)));

  bundle.target_class = target_class;
  bundle.subset = subset;
  bundle.target_pool.clear();
  bundle.pool_confidence.clear();
  for (const auto i : order) {
    bundle.target_pool.push_back(members[i]);
    bundle.pool_confidence.push_back(pp[i]);
  }
  const auto pool = to_tensor(bundle.target_pool).to(bundle.surrogate.dtype());
  bundle.target_gradient = backdoor_gradient(bundle, pool, false).detach();
}

torch::Tensor backdoor_gradient(const SurrogateBundle& bundle, const torch::Tensor& x_b, bool create_graph) {
  if (bundle.target_class < 0) throw AttackError("target pool has not been selected");
  bundle.surrogate.train(false);
  const auto labels = torch::full({x_b.size(0)}, bundle.target_class, torch::kInt64);
  return flat_loss_gradient(bundle.surrogate, x_b, labels, bundle.matched_parameters(), create_graph);
}

}  // namespace sslpoison
