#include "sslpoison/defenses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "sslpoison/metrics.hpp"
#include "sslpoison/random.hpp"

namespace sslpoison {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void clear_grads(const ClassifierModel& model) {
  for (auto& p : model.parameters()) {
    if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
  }
}

}  // namespace

// ---------------------------------------------------- activation clustering

torch::Tensor pca_project(const torch::Tensor& points, int components) {
  const auto x = points.to(torch::kFloat64);
  const auto centered = x - x.mean(0, true);
  const auto cov = centered.t().matmul(centered) / std::max<std::int64_t>(1, x.size(0) - 1);
  const auto [evals, evecs] = torch::linalg_eigh(cov);
  const auto k = std::min<std::int64_t>(components, x.size(1));
  // eigh sorts ascending; take the trailing k columns, largest first.
  const auto basis = evecs.slice(1, x.size(1) - k, x.size(1)).flip({1});
  return centered.matmul(basis);
}

std::vector<int> two_means(const torch::Tensor& points, std::uint64_t seed, int iterations) {
  const auto x = points.to(torch::kFloat64).contiguous();
  const auto n = x.size(0);
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  if (n < 2) return assign;
  std::mt19937_64 rng(seed);
  const auto first = static_cast<std::int64_t>(rnd::below(rng, static_cast<std::uint64_t>(n)));
  const auto d2 = (x - x[first]).pow(2).sum(1);
  const double total = d2.sum().item<double>();
  std::int64_t second = (first + 1) % n;
  if (total > 0.0) {
    double r = rnd::uniform01(rng) * total, acc = 0.0;
    const double* d = d2.data_ptr<double>();
    for (std::int64_t i = 0; i < n; ++i) {
      acc += d[i];
      if (acc >= r && d[i] > 0.0) {
        second = i;
        break;
      }
    }
  }
  auto centers = torch::stack({x[first], x[second]});
  for (int it = 0; it < iterations; ++it) {
    const auto dist = torch::cdist(x, centers);
    const auto lab = dist.argmin(1).contiguous();
    bool changed = false;
    const auto* lp = lab.data_ptr<std::int64_t>();
    for (std::int64_t i = 0; i < n; ++i) {
      if (assign[i] != static_cast<int>(lp[i])) changed = true;
      assign[i] = static_cast<int>(lp[i]);
    }
    if (!changed && it > 0) break;
    for (int c = 0; c < 2; ++c) {
      const auto members = lab.eq(c);
      if (members.sum().item<std::int64_t>() > 0) centers[c] = x.index({members}).mean(0);
    }
  }
  return assign;
}

double silhouette_score(const torch::Tensor& points, const std::vector<int>& assignment) {
  const auto x = points.to(torch::kFloat64);
  const auto n = x.size(0);
  std::array<std::int64_t, 2> sizes{0, 0};
  for (int a : assignment) ++sizes[a];
  if (sizes[0] == 0 || sizes[1] == 0) return 0.0;
  const auto dist = torch::cdist(x, x).contiguous();
  const double* d = dist.data_ptr<double>();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int own = assignment[i];
    if (sizes[own] == 1) continue;  // singleton: s = 0
    std::array<double, 2> sum{0.0, 0.0};
    for (std::int64_t j = 0; j < n; ++j) sum[assignment[j]] += d[i * n + j];
    const double a = sum[own] / static_cast<double>(sizes[own] - 1);
    const double b = sum[1 - own] / static_cast<double>(sizes[1 - own]);
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

bool ac_verdict(double smaller_fraction, double silhouette, const AcOptions& options) {
  return smaller_fraction < options.size_threshold && silhouette > options.silhouette_threshold;
}

DefenseReport activation_clustering(const ClassifierModel& model, std::span<const ImageExample> labeled,
                                    const AcOptions& options) {
  DefenseReport report;
  report.defense = "ac";
  report.settings = {{"components", std::to_string(options.components)},
                     {"size_threshold", fmt(options.size_threshold)},
                     {"silhouette_threshold", fmt(options.silhouette_threshold)},
                     {"rule", "flag if smaller_fraction < size_threshold and silhouette > silhouette_threshold"}};
  const int k = model.spec().num_classes;
  torch::Tensor hidden;
  {
    const bool was = model.is_training();
    model.train(false);
    torch::NoGradGuard guard;
    hidden = model.hidden(to_tensor(labeled).to(model.dtype()));
    model.train(was);
  }
  auto& sil = report.series["silhouette"];
  for (int c = 0; c < k; ++c) {
    std::vector<std::int64_t> rows;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      if (labeled[i].label && *labeled[i].label == c) rows.push_back(static_cast<std::int64_t>(i));
    }
    if (static_cast<int>(rows.size()) < options.min_examples) {
      report.notes.push_back("class " + std::to_string(c) + " skipped: " + std::to_string(rows.size()) + " examples");
      continue;
    }
    const auto reduced = pca_project(hidden.index_select(0, torch::tensor(rows, torch::kInt64)), options.components);
    const auto assign = two_means(reduced, options.seed + static_cast<std::uint64_t>(c), options.kmeans_iterations);
    const auto ones = std::count(assign.begin(), assign.end(), 1);
    const double smaller = static_cast<double>(std::min<std::int64_t>(ones, static_cast<std::int64_t>(assign.size()) - ones)) /
                           static_cast<double>(assign.size());
    const double s = silhouette_score(reduced, assign);
    report.keys.push_back(std::to_string(c));
    report.scores.push_back(smaller);
    sil.push_back(s);
    const bool flag = ac_verdict(smaller, s, options);
    report.flagged.push_back(flag);
    report.suspicious = report.suspicious || flag;
  }
  report.summary["flagged_classes"] = static_cast<double>(std::count(report.flagged.begin(), report.flagged.end(), true));
  return report;
}

// ---------------------------------------------------------- neural cleanse

std::vector<double> anomaly_indices(const std::vector<double>& norms) {
  if (norms.empty()) return {};
  const double med = median_of(norms);
  std::vector<double> dev;
  dev.reserve(norms.size());
  for (double v : norms) dev.push_back(std::abs(v - med));
  const double mad = median_of(dev);
  std::vector<double> out;
  out.reserve(norms.size());
  for (double v : norms) {
    const double d = std::abs(v - med);
    if (mad == 0.0) {
      out.push_back(d == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
    } else {
      out.push_back(d / (kMadConsistency * mad));
    }
  }
  return out;
}

DefenseReport neural_cleanse(const ClassifierModel& model, std::span<const ImageExample> validation_sample,
                             const NcOptions& options) {
  if (validation_sample.empty()) throw DefenseError("neural cleanse needs a validation sample");
  DefenseReport report;
  report.defense = "nc";
  report.settings = {{"flip_target", fmt(options.flip_target)},
                     {"steps", std::to_string(options.steps)},
                     {"initial_penalty", fmt(options.initial_penalty)},
                     {"penalty_factor", fmt(options.penalty_factor)},
                     {"anomaly_threshold", fmt(options.anomaly_threshold)},
                     {"rule", "flag if anomaly index > anomaly_threshold"}};
  const bool was = model.is_training();
  model.train(false);
  const auto dtype = model.dtype();
  const auto x_all = to_tensor(validation_sample).to(dtype);
  const auto n = x_all.size(0);
  const auto shape = model.spec().input;
  std::vector<double> norms;
  std::mt19937_64 rng(options.seed);
  for (int c = 0; c < model.spec().num_classes; ++c) {
    auto mask_raw = torch::zeros({1, 1, shape.height, shape.width}, dtype).requires_grad_(true);
    std::vector<double> init(static_cast<std::size_t>(shape.channels * shape.height * shape.width));
    for (auto& v : init) v = rnd::normal(rng);
    auto pattern_raw = torch::tensor(init, dtype).view({1, shape.channels, shape.height, shape.width}).requires_grad_(true);
    torch::optim::Adam opt({mask_raw, pattern_raw}, torch::optim::AdamOptions(options.lr));
    double penalty = options.initial_penalty;
    double best = std::numeric_limits<double>::infinity();
    auto blend = [&](const torch::Tensor& x) {
      const auto m = (torch::tanh(mask_raw) + 1.0) / 2.0;
      const auto p = 255.0 * (torch::tanh(pattern_raw) + 1.0) / 2.0;
      return std::make_pair((1.0 - m) * x + m * p, m);
    };
    const auto target_all = torch::full({n}, c, torch::kInt64);
    for (int step = 0; step < options.steps; ++step) {
      std::vector<std::int64_t> idx(static_cast<std::size_t>(std::min<std::int64_t>(options.batch_size, n)));
      for (auto& i : idx) i = static_cast<std::int64_t>(rnd::below(rng, static_cast<std::uint64_t>(n)));
      const auto x = x_all.index_select(0, torch::tensor(idx, torch::kInt64));
      auto [xt, m] = blend(x);
      const auto loss = torch::cross_entropy_loss(model.logits(xt), torch::full({x.size(0)}, c, torch::kInt64)) +
                        penalty * m.sum();
      const auto grads = torch::autograd::grad({loss}, {mask_raw, pattern_raw});
      mask_raw.mutable_grad() = grads[0];
      pattern_raw.mutable_grad() = grads[1];
      opt.step();
      if ((step + 1) % options.patience == 0) {
        torch::NoGradGuard guard;
        auto [xa, ma] = blend(x_all);
        const double flip = predict_probabilities(model, xa).argmax(1).eq(target_all).to(torch::kFloat64).mean().item<double>();
        if (flip >= options.flip_target) {
          best = std::min(best, ma.sum().item<double>());
          penalty *= options.penalty_factor;
        } else {
          penalty /= options.penalty_factor;
        }
      }
    }
    if (!std::isfinite(best)) {
      report.notes.push_back("class " + std::to_string(c) + ": flip target not reached; norm recorded as infinite");
    }
    norms.push_back(best);
  }
  model.train(was);

  // Infinite norms (failed reverse engineering) are excluded from the
  // median statistics and never flagged.
  std::vector<double> finite;
  for (double v : norms) {
    if (std::isfinite(v)) finite.push_back(v);
  }
  const auto finite_idx = anomaly_indices(finite);
  std::size_t fi = 0;
  auto& norm_series = report.series["norm"];
  for (std::size_t c = 0; c < norms.size(); ++c) {
    const double index = std::isfinite(norms[c]) ? finite_idx[fi++] : 0.0;
    report.keys.push_back(std::to_string(c));
    report.scores.push_back(index);
    norm_series.push_back(norms[c]);
    const bool flag = index > options.anomaly_threshold;
    report.flagged.push_back(flag);
    report.suspicious = report.suspicious || flag;
  }
  report.summary["max_anomaly_index"] = report.scores.empty() ? 0.0 : *std::max_element(report.scores.begin(), report.scores.end());
  return report;
}

// ------------------------------------------------------------ fine-pruning

int pruned_channel_count(double rate, int channels) {
  if (!(rate >= 0.0 && rate <= 100.0)) throw DefenseError("prune rate " + fmt(rate) + " outside [0, 100]");
  return static_cast<int>(std::floor(rate / 100.0 * channels + 1e-9));
}

DefenseReport fine_prune(const ClassifierModel& model, std::span<const ImageExample> clean_examples,
                         std::span<const ImageExample> finetune_set, std::span<const ImageExample> validation,
                         std::span<const ImageExample> attack_set, const PatternSource& pattern, int target_class,
                         const FinePruneOptions& options) {
  for (double r : options.rates) pruned_channel_count(r, 1);
  if (clean_examples.empty()) throw DefenseError("fine-pruning needs clean examples");
  DefenseReport report;
  report.defense = "fp";
  report.settings = {{"finetune_epochs", std::to_string(options.finetune_epochs)}, {"lr", fmt(options.lr)}};

  torch::Tensor activity;
  {
    const bool was = model.is_training();
    model.train(false);
    torch::NoGradGuard guard;
    activity = model.channel_activations(to_tensor(clean_examples).to(model.dtype())).to(torch::kFloat64);
    model.train(was);
  }
  const int channels = model.last_block_channels();
  const auto order = std::get<1>(activity.sort(0, false, false)).contiguous();  // ascending, stable
  const auto* ord = order.data_ptr<std::int64_t>();

  const auto ft_pixels = finetune_set.empty() ? torch::Tensor() : to_tensor(finetune_set);
  const auto ft_labels = finetune_set.empty() ? torch::Tensor() : labels_tensor(finetune_set);
  auto& ca = report.series["ca"];
  auto& asr = report.series["asr"];
  auto& pruned = report.series["pruned_channels"];
  for (double rate : options.rates) {
    const int k = pruned_channel_count(rate, channels);
    auto copy = model.clone();
    auto mask = model.channel_mask().clone();
    for (int i = 0; i < k; ++i) mask[ord[i]] = 0.0;
    copy.set_channel_mask(mask);
    if (options.finetune_epochs > 0 && !finetune_set.empty()) {
      std::mt19937_64 rng(options.seed);
      copy.train(true);
      torch::optim::SGD opt(copy.parameters(), torch::optim::SGDOptions(options.lr).momentum(0.9));
      std::vector<std::int64_t> idx(finetune_set.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (int e = 0; e < options.finetune_epochs; ++e) {
        rnd::shuffle(idx, rng);
        for (std::size_t b = 0; b < idx.size(); b += options.batch_size) {
          const auto sel = torch::tensor(std::vector<std::int64_t>(idx.begin() + b, idx.begin() + std::min(idx.size(), b + options.batch_size)),
                                         torch::kInt64);
          const auto x = augment(ft_pixels.index_select(0, sel), AugmentKind::weak, rng).to(copy.dtype());
          const auto loss = torch::cross_entropy_loss(copy.logits(x), ft_labels.index_select(0, sel));
          opt.zero_grad();
          loss.backward();
          opt.step();
        }
      }
      copy.train(false);
    }
    report.keys.push_back(fmt(rate));
    pruned.push_back(k);
    ca.push_back(clean_accuracy(copy, validation));
    asr.push_back(attack_set.empty() ? 0.0 : attack_success_rate(copy, attack_set, pattern, target_class));
    report.scores.push_back(asr.back());
    report.flagged.push_back(false);
  }
  report.notes.push_back("fine-pruning removes rather than detects; verdicts are not applicable");
  return report;
}

// ------------------------------------------------------------------- STRIP

double mean_entropy(const torch::Tensor& probs) {
  const auto p = probs.to(torch::kFloat64);
  const auto terms = torch::where(p > 0.0, -p * torch::log(p), torch::zeros_like(p));
  return terms.sum(1).mean().item<double>();
}

double strip_entropy(const ClassifierModel& model, const ImageExample& example, std::span<const ImageExample> clean_pool,
                     int blends, std::mt19937_64& rng) {
  if (clean_pool.empty()) throw DefenseError("STRIP needs a clean pool");
  if (blends <= 0 || static_cast<std::size_t>(blends) > clean_pool.size()) {
    throw DefenseError("STRIP needs 1.." + std::to_string(clean_pool.size()) + " blends");
  }
  std::vector<std::size_t> pick(clean_pool.size());
  std::iota(pick.begin(), pick.end(), 0);
  for (int i = 0; i < blends; ++i) std::swap(pick[i], pick[i + rnd::below(rng, pick.size() - i)]);
  std::vector<ImageExample> chosen;
  for (int i = 0; i < blends; ++i) chosen.push_back(clean_pool[pick[i]]);
  const std::vector<ImageExample> one{example};
  const auto x = to_tensor(one);
  const auto mixed = (to_tensor(chosen) + x) / 2.0;
  return mean_entropy(predict_probabilities(model, mixed.to(model.dtype())));
}

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw DefenseError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

DefenseReport strip(const ClassifierModel& model, std::span<const ImageExample> suspects,
                    std::span<const ImageExample> clean_calibration, std::span<const ImageExample> clean_pool,
                    const StripOptions& options) {
  if (clean_calibration.empty()) throw DefenseError("STRIP needs clean calibration examples");
  DefenseReport report;
  report.defense = "strip";
  std::mt19937_64 rng(options.seed);
  auto& clean = report.series["clean_entropy"];
  for (const auto& ex : clean_calibration) clean.push_back(strip_entropy(model, ex, clean_pool, options.blends, rng));
  const double threshold = percentile(clean, options.percentile);
  auto& sus = report.series["suspect_entropy"];
  std::size_t flagged = 0;
  for (const auto& ex : suspects) {
    const double h = strip_entropy(model, ex, clean_pool, options.blends, rng);
    sus.push_back(h);
    report.keys.push_back(ex.id);
    report.scores.push_back(h);
    report.flagged.push_back(h < threshold);
    flagged += h < threshold ? 1 : 0;
  }
  const double fraction = suspects.empty() ? 0.0 : static_cast<double>(flagged) / static_cast<double>(suspects.size());
  report.summary["threshold"] = threshold;
  report.summary["flagged_fraction"] = fraction;
  // A clean set trips the 1st-percentile threshold about 1% of the time.
  report.suspicious = fraction > 5.0 * options.percentile / 100.0;
  report.settings = {{"blends", std::to_string(options.blends)},
                     {"percentile", fmt(options.percentile)},
                     {"rule", "flag example if entropy < percentile of clean entropies; set suspicious if "
                              "flagged fraction > 5x percentile"}};
  return report;
}

// ------------------------------------------------------------------- DePuD

double auroc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw DefenseError("auroc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with average ranks for ties.
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (positive[order[t]]) rank_sum += avg_rank;
    }
    i = j;
  }
  for (bool p : positive) n_pos += p ? 1 : 0;
  const std::size_t n_neg = positive.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DefenseError("auroc needs positives and negatives");
  const double u = rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

DefenseReport depud(std::span<const ImageExample> labeled, std::span<const ImageExample> unlabeled,
                    const DepudOptions& options) {
  if (labeled.empty() || unlabeled.empty()) throw DefenseError("DePuD needs labeled and unlabeled examples");
  DefenseReport report;
  report.defense = "depud";
  report.settings = {{"weight_decay", fmt(options.base_weight_decay * options.weight_decay_factor)},
                     {"dropout", fmt(options.dropout)},
                     {"blur", options.blur ? "3x3 mean" : "none"},
                     {"epochs", std::to_string(options.epochs)},
                     {"auroc_threshold", fmt(options.auroc_threshold)},
                     {"rule", "dataset suspicious if AUROC(poisoned vs clean unlabeled) > auroc_threshold"}};
  ClassifierSpec spec = options.model;
  spec.num_classes = 2;
  spec.input = labeled.front().shape;
  spec.dropout = options.dropout;
  ClassifierModel net(spec, options.seed);
  auto prep = [&](const torch::Tensor& x) {
    if (!options.blur) return x;
    return torch::avg_pool2d(x, 3, 1, 1, false, false);
  };

  const auto xl = to_tensor(labeled);
  const auto xu = to_tensor(unlabeled);
  const int half = std::max(1, options.batch_size / 2);
  const int steps = options.steps_per_epoch > 0 ? options.steps_per_epoch
                                                : static_cast<int>((unlabeled.size() + half - 1) / half);
  torch::optim::SGD opt(net.parameters(), torch::optim::SGDOptions(options.lr)
                                              .momentum(0.9)
                                              .weight_decay(options.base_weight_decay * options.weight_decay_factor));
  std::mt19937_64 rng(options.seed ^ 0xdeb0dULL);
  const auto targets = torch::cat({torch::zeros({half}, torch::kInt64), torch::ones({half}, torch::kInt64)});
  net.train(true);
  for (int e = 0; e < options.epochs; ++e) {
    for (int s = 0; s < steps; ++s) {
      std::vector<std::int64_t> li(half), ui(half);
      for (auto& i : li) i = static_cast<std::int64_t>(rnd::below(rng, labeled.size()));
      for (auto& i : ui) i = static_cast<std::int64_t>(rnd::below(rng, unlabeled.size()));
      const auto x = torch::cat({xl.index_select(0, torch::tensor(li, torch::kInt64)),
                                 xu.index_select(0, torch::tensor(ui, torch::kInt64))});
      const auto loss = torch::cross_entropy_loss(net.logits(prep(x)), targets);
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  net.train(false);

  const auto probs = predict_probabilities(net, prep(xu)).select(1, 1).to(torch::kFloat64).contiguous();
  std::vector<double> scores(probs.data_ptr<double>(), probs.data_ptr<double>() + probs.numel());
  std::vector<bool> positive;
  for (const auto& ex : unlabeled) {
    positive.push_back(ex.origin == Origin::poisoned);
    report.keys.push_back(ex.id);
  }
  report.scores = scores;
  const auto n_pos = std::count(positive.begin(), positive.end(), true);
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  if (n_pos == 0) {
    report.notes.push_back("no poisoned examples: AUROC not applicable");
    report.summary["applicable"] = 0.0;
  } else if (static_cast<std::size_t>(n_pos) == positive.size()) {
    report.notes.push_back("every unlabeled example is poisoned: AUROC not applicable");
    report.summary["applicable"] = 0.0;
  } else {
    report.summary["applicable"] = 1.0;
    double a = 0.5;
    if (*hi - *lo < 1e-12) {
      report.notes.push_back("discriminator output is constant; AUROC reported as 0.5");
    } else {
      a = auroc(scores, positive);
    }
    report.summary["auroc"] = a;
    report.suspicious = a > options.auroc_threshold;
  }
  for (double s : scores) report.flagged.push_back(false);
  report.summary["mean_score"] = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  return report;
}

}  // namespace sslpoison
