#include "sslpoison/ssl_trainers.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <numbers>

#include "sslpoison/random.hpp"

namespace sslpoison {

namespace {

constexpr std::array<std::pair<SslAlgorithm, const char*>, 7> kNames{{
    {SslAlgorithm::supervised, "supervised"},
    {SslAlgorithm::pseudolabel, "pseudolabel"},
    {SslAlgorithm::pimodel, "pimodel"},
    {SslAlgorithm::meanteacher, "meanteacher"},
    {SslAlgorithm::vat, "vat"},
    {SslAlgorithm::ict, "ict"},
    {SslAlgorithm::fixmatch, "fixmatch"},
}};

/// Cycles through a shuffled index permutation, reshuffling on wrap.
class IndexStream {
 public:
  IndexStream(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = static_cast<std::int64_t>(i);
    rnd::shuffle(order_, rng_);
  }

  torch::Tensor next(int count) {
    std::vector<std::int64_t> out;
    out.reserve(count);
    while (static_cast<int>(out.size()) < count) {
      if (pos_ == order_.size()) {
        rnd::shuffle(order_, rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return torch::tensor(out, torch::kInt64);
  }

 private:
  std::vector<std::int64_t> order_;
  std::mt19937_64& rng_;
  std::size_t pos_ = 0;
};

torch::Tensor view(const torch::Tensor& x, AugmentKind kind, const UnlabeledContext& ctx) {
  return augment(x, ctx.view_override.value_or(kind), *ctx.rng, ctx.config->augment);
}

torch::Tensor squared_prob_diff(const torch::Tensor& logits, const torch::Tensor& target_probs) {
  return (torch::softmax(logits, 1) - target_probs).pow(2).mean();
}

torch::Tensor masked_hard_ce(const torch::Tensor& logits, const torch::Tensor& probs, double threshold) {
  const auto [conf, hard] = probs.max(1);
  const auto mask = conf.ge(threshold).to(logits.scalar_type());
  const auto ce = torch::nn::functional::cross_entropy(
      logits, hard, torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kNone));
  return (ce * mask).mean();
}

torch::Tensor teacher_probs(const UnlabeledContext& ctx, const torch::Tensor& x) {
  if (ctx.teacher == nullptr) throw TrainingError("algorithm needs a teacher model");
  torch::NoGradGuard guard;
  const bool was = ctx.teacher->is_training();
  ctx.teacher->train(false);
  auto p = ctx.teacher->forward(x);
  ctx.teacher->train(was);
  return p;
}

/// Per-example unit L2 direction.
torch::Tensor unit(const torch::Tensor& d) {
  const auto norm = d.flatten(1).norm(2, 1).clamp_min(1e-12);
  return d / norm.view({-1, 1, 1, 1});
}

torch::Tensor kl_from_probs(const torch::Tensor& p, const torch::Tensor& q_logits) {
  const auto logq = torch::log_softmax(q_logits, 1);
  const auto logp = torch::log(p.clamp_min(1e-12));
  return (p * (logp - logq)).sum(1).mean();
}

void ema_update(const ClassifierModel& teacher, const ClassifierModel& student, double decay) {
  torch::NoGradGuard guard;
  auto tp = teacher.module().named_parameters(true);
  for (const auto& item : student.module().named_parameters(true)) {
    tp[item.key()].mul_(decay).add_(item.value(), 1.0 - decay);
  }
  auto tb = teacher.module().named_buffers(true);
  for (const auto& item : student.module().named_buffers(true)) tb[item.key()].copy_(item.value());
}

bool parameters_finite(const ClassifierModel& model) {
  for (const auto& p : model.parameters()) {
    if (!torch::isfinite(p).all().item<bool>()) return false;
  }
  return true;
}

}  // namespace

std::string to_string(SslAlgorithm algorithm) {
  for (const auto& [a, name] : kNames) {
    if (a == algorithm) return name;
  }
  return "unknown";
}

SslAlgorithm ssl_algorithm_from_string(const std::string& s) {
  for (const auto& [a, name] : kNames) {
    if (s == name) return a;
  }
  if (s == "mean-teacher") return SslAlgorithm::meanteacher;
  if (s == "pi-model") return SslAlgorithm::pimodel;
  if (s == "pseudo-label") return SslAlgorithm::pseudolabel;
  throw TrainingError("unknown SSL algorithm: " + s);
}

TrainingDiverged::TrainingDiverged(int epoch, const std::string& what)
    : TrainingError("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}

void SSLConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw TrainingError(std::string(name) + " must be positive");
  };
  positive(epochs, "epochs");
  positive(labeled_batch, "labeled_batch");
  positive(unlabeled_batch, "unlabeled_batch");
  positive(lr, "lr");
  positive(vat_radius, "vat_radius");
  positive(vat_xi, "vat_xi");
  positive(mixup_alpha, "mixup_alpha");
  if (steps_per_epoch < 0) throw TrainingError("steps_per_epoch must be >= 0");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw TrainingError("threshold must lie in (0, 1]");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw TrainingError("ema_decay must lie in [0, 1)");
  if (momentum < 0.0 || weight_decay < 0.0 || ramp_fraction < 0.0) {
    throw TrainingError("momentum, weight_decay and ramp_fraction must be >= 0");
  }
}

double SSLConfig::default_weight() const {
  if (unlabeled_weight >= 0.0) return unlabeled_weight;
  switch (algorithm) {
    case SslAlgorithm::supervised: return 0.0;
    case SslAlgorithm::pseudolabel: return 1.0;
    case SslAlgorithm::pimodel: return 10.0;
    case SslAlgorithm::meanteacher: return 50.0;
    case SslAlgorithm::vat: return 0.3;
    case SslAlgorithm::ict: return 100.0;
    case SslAlgorithm::fixmatch: return 1.0;
  }
  return 1.0;
}

double consistency_ramp(double progress, double ramp_fraction) {
  if (ramp_fraction <= 0.0 || progress >= ramp_fraction) return 1.0;
  const double t = std::clamp(progress / ramp_fraction, 0.0, 1.0);
  return std::exp(-5.0 * (1.0 - t) * (1.0 - t));
}

double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) return base;
  return base * std::cos(7.0 * std::numbers::pi * static_cast<double>(step) / (16.0 * static_cast<double>(total)));
}

torch::Tensor ssl_unlabeled_loss(SslAlgorithm algorithm, const torch::Tensor& unlabeled, const UnlabeledContext& ctx) {
  if (unlabeled.size(0) == 0) throw TrainingError("unlabeled loss of an empty batch");
  const auto& student = *ctx.student;
  const auto& cfg = *ctx.config;
  switch (algorithm) {
    case SslAlgorithm::supervised:
      return torch::zeros({}, unlabeled.options());

    case SslAlgorithm::pseudolabel: {
      const auto logits = student.logits(view(unlabeled, AugmentKind::weak, ctx));
      return masked_hard_ce(logits, torch::softmax(logits, 1).detach(), cfg.threshold);
    }

    case SslAlgorithm::pimodel: {
      const auto a = student.logits(view(unlabeled, AugmentKind::weak, ctx));
      const auto b = student.logits(view(unlabeled, AugmentKind::weak, ctx));
      return squared_prob_diff(a, torch::softmax(b, 1).detach());
    }

    case SslAlgorithm::meanteacher: {
      const auto s = student.logits(view(unlabeled, AugmentKind::weak, ctx));
      return squared_prob_diff(s, teacher_probs(ctx, view(unlabeled, AugmentKind::weak, ctx)));
    }

    case SslAlgorithm::vat: {
      const auto x = view(unlabeled, AugmentKind::weak, ctx);
      torch::Tensor p;
      {
        torch::NoGradGuard guard;
        p = torch::softmax(student.logits(x), 1);
      }
      std::vector<float> noise(static_cast<std::size_t>(x.numel()));
      for (auto& v : noise) v = static_cast<float>(rnd::normal(*ctx.rng));
      auto d = torch::from_blob(noise.data(), x.sizes(), torch::kFloat32).clone().to(x.scalar_type());
      d = (cfg.vat_xi * unit(d)).requires_grad_(true);
      const auto adv_loss = kl_from_probs(p, student.logits(x + d));
      const auto grad = torch::autograd::grad({adv_loss}, {d})[0].detach();
      const auto r_adv = cfg.vat_radius * unit(grad);
      return kl_from_probs(p, student.logits(x + r_adv));
    }

    case SslAlgorithm::ict: {
      const auto x = view(unlabeled, AugmentKind::weak, ctx);
      const double lam = ctx.fixed_mix.value_or(rnd::beta(*ctx.rng, cfg.mixup_alpha, cfg.mixup_alpha));
      std::vector<std::int64_t> perm(static_cast<std::size_t>(x.size(0)));
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<std::int64_t>(i);
      rnd::shuffle(perm, *ctx.rng);
      const auto idx = torch::tensor(perm, torch::kInt64);
      const auto pt = teacher_probs(ctx, x);
      const auto mixed = lam * x + (1.0 - lam) * x.index_select(0, idx);
      const auto target = lam * pt + (1.0 - lam) * pt.index_select(0, idx);
      return squared_prob_diff(student.logits(mixed), target);
    }

    case SslAlgorithm::fixmatch: {
      torch::Tensor probs;
      {
        torch::NoGradGuard guard;
        probs = torch::softmax(student.logits(view(unlabeled, AugmentKind::weak, ctx)), 1);
      }
      return masked_hard_ce(student.logits(view(unlabeled, AugmentKind::strong, ctx)), probs, cfg.threshold);
    }
  }
  throw TrainingError("unhandled algorithm");
}

TrainResult train_ssl(const DatasetSplits& splits, const SSLConfig& config, const std::vector<EpochProbe>& probes) {
  config.validate();
  if (splits.labeled.empty()) throw TrainingError("no labeled examples");
  if (splits.validation.empty()) throw TrainingError("no validation examples");

  ClassifierSpec spec = config.model;
  spec.num_classes = splits.num_classes;
  spec.input = splits.shape;
  ClassifierModel student(spec, config.seed);
  student.train(true);

  const bool use_unlabeled = config.algorithm != SslAlgorithm::supervised && !splits.unlabeled.empty();
  const bool needs_teacher = config.algorithm == SslAlgorithm::meanteacher || config.algorithm == SslAlgorithm::ict;
  std::optional<ClassifierModel> teacher;
  if (needs_teacher && use_unlabeled) teacher = student.clone();

  const auto x_pixels = to_tensor(splits.labeled);
  const auto x_labels = labels_tensor(splits.labeled);
  const auto u_pixels = use_unlabeled ? to_tensor(splits.unlabeled) : torch::Tensor();
  const auto val_pixels = to_tensor(splits.validation);
  const auto val_labels = labels_tensor(splits.validation);

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  IndexStream x_stream(splits.labeled.size(), rng);
  std::optional<IndexStream> u_stream;
  if (use_unlabeled) u_stream.emplace(splits.unlabeled.size(), rng);

  const int steps = config.steps_per_epoch > 0
                        ? config.steps_per_epoch
                        : static_cast<int>(std::max<std::size_t>(
                              1, use_unlabeled ? (splits.unlabeled.size() + config.unlabeled_batch - 1) /
                                                     config.unlabeled_batch
                                               : (splits.labeled.size() + config.labeled_batch - 1) /
                                                     config.labeled_batch));
  const std::int64_t total_steps = static_cast<std::int64_t>(steps) * config.epochs;

  torch::optim::SGD optimizer(student.parameters(), torch::optim::SGDOptions(config.lr)
                                                        .momentum(config.momentum)
                                                        .nesterov(config.momentum > 0.0)
                                                        .weight_decay(config.weight_decay));
  UnlabeledContext ctx{&student, teacher ? &*teacher : nullptr, &rng, &config, std::nullopt, std::nullopt};
  const double weight = config.default_weight();
  const bool ramped = config.algorithm != SslAlgorithm::fixmatch;

  TrainResult result;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double sum_l = 0.0, sum_u = 0.0;
    for (int s = 0; s < steps; ++s, ++step) {
      for (auto& group : optimizer.param_groups()) {
        static_cast<torch::optim::SGDOptions&>(group.options()).lr(cosine_lr(config.lr, step, total_steps));
      }
      const auto xi = x_stream.next(config.labeled_batch);
      const auto xb = augment(x_pixels.index_select(0, xi), AugmentKind::weak, rng, config.augment);
      const auto labeled_loss = torch::cross_entropy_loss(student.logits(xb), x_labels.index_select(0, xi));
      auto loss = labeled_loss;
      torch::Tensor unlabeled_loss = torch::zeros({});
      if (use_unlabeled) {
        const auto ub = u_pixels.index_select(0, u_stream->next(config.unlabeled_batch));
        unlabeled_loss = ssl_unlabeled_loss(config.algorithm, ub, ctx);
        const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
        loss = loss + weight * (ramped ? consistency_ramp(progress, config.ramp_fraction) : 1.0) * unlabeled_loss;
      }
      if (!torch::isfinite(loss).item<bool>()) throw TrainingDiverged(epoch, "non-finite loss at step " + std::to_string(step));
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      if (teacher) {
        const double decay = std::min(config.ema_decay, 1.0 - 1.0 / static_cast<double>(step + 2));
        ema_update(*teacher, student, decay);
      }
      sum_l += labeled_loss.item<double>();
      sum_u += unlabeled_loss.item<double>();
    }
    if (!parameters_finite(student)) throw TrainingDiverged(epoch, "non-finite parameters");

    EpochRecord record;
    record.epoch = epoch;
    record.labeled_loss = sum_l / steps;
    record.unlabeled_loss = sum_u / steps;
    record.ca = 0.0;
    {
      const auto probs = predict_probabilities(student, val_pixels);
      record.ca = 100.0 * probs.argmax(1).eq(val_labels).sum().item<double>() / static_cast<double>(val_labels.size(0));
    }
    if (!probes.empty()) {
      auto snapshot = student.clone();
      snapshot.train(false);
      for (const auto& probe : probes) probe(snapshot, record);
    }
    result.history.epochs.push_back(record);
  }
  student.train(false);
  result.model = student;
  return result;
}

void write_epochs_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw TrainingError("cannot write " + path.string());
  out << "epoch,labeled_loss,unlabeled_loss,ca,asr,D,C\n";
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    std::ostringstream os;
    os.precision(10);
    os << *v;
    return os.str();
  };
  out.precision(10);
  for (const auto& r : history.epochs) {
    out << r.epoch << ',' << r.labeled_loss << ',' << r.unlabeled_loss << ',' << r.ca << ',' << opt(r.asr) << ','
        << opt(r.d) << ',' << opt(r.c) << '\n';
  }
}

}  // namespace sslpoison
