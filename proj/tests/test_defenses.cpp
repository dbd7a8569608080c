#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "sslpoison/defenses.hpp"
#include "sslpoison/metrics.hpp"

// Last, so its CHECK macros win over the ones in the torch headers.
#include <doctest.h>

using namespace sslpoison;

namespace {

/// Two Gaussian blobs in 5-d, `minority` of the rows in the second one.
torch::Tensor blobs(int n, int minority, double separation, std::uint64_t seed) {
  torch::manual_seed(seed);
  auto x = torch::randn({n, 5}, torch::kFloat64);
  x.slice(0, n - minority, n).add_(separation);
  return x;
}

}  // namespace

TEST_CASE("anomaly index on a hand-computed norm set") {
  const std::vector<double> norms{10, 11, 9, 12, 10, 11, 9, 10, 11, 2};
  // median 10, |x - 10| = {0,1,1,2,0,1,1,0,1,8} -> MAD 1.
  const auto a = anomaly_indices(norms);
  CHECK(std::abs(a[9] - 8.0 / 1.4826) <= 1e-9);
  CHECK(std::abs(a[3] - 2.0 / 1.4826) <= 1e-9);
  CHECK(std::count_if(a.begin(), a.end(), [](double v) { return v > 2.0; }) == 1);
  const auto flat = anomaly_indices({3, 3, 3, 3});
  CHECK(std::all_of(flat.begin(), flat.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("entropy of uniform and one-hot predictions") {
  const auto uniform = torch::full({7, 10}, 0.1, torch::kFloat64);
  CHECK(std::abs(mean_entropy(uniform) - std::log(10.0)) <= 1e-9);
  const auto onehot = torch::eye(10, torch::kFloat64);
  CHECK(mean_entropy(onehot) == 0.0);
}

TEST_CASE("percentile interpolates linearly") {
  CHECK(percentile({1, 2, 3, 4, 5}, 50) == 3.0);
  CHECK(percentile({5, 1, 4, 2, 3}, 25) == 2.0);
  CHECK(percentile({0, 10}, 1) == doctest::Approx(0.1));
  CHECK(percentile({7}, 99) == 7.0);
}

TEST_CASE("AUROC against a pair-counting oracle") {
  std::mt19937_64 rng(3);
  std::vector<double> s;
  std::vector<bool> pos;
  for (int i = 0; i < 60; ++i) {
    pos.push_back(i % 3 == 0);
    s.push_back(static_cast<double>(rng() % 7) + (pos.back() ? 1.5 : 0.0));
  }
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!pos[i] || pos[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  CHECK(auroc(s, pos) == doctest::Approx(wins / pairs).epsilon(1e-12));
  CHECK(auroc({1, 1, 1}, {true, false, true}) == 0.5);
  CHECK_THROWS_AS(auroc({1, 2}, {true, true}), DefenseError);
}

TEST_CASE("pruned channel count is floor(rate% * channels)") {
  CHECK(pruned_channel_count(0, 64) == 0);
  CHECK(pruned_channel_count(20, 64) == 12);
  CHECK(pruned_channel_count(99, 64) == 63);
  CHECK(pruned_channel_count(100, 64) == 64);
  CHECK(pruned_channel_count(10, 10) == 1);
  CHECK_THROWS_AS(pruned_channel_count(101, 64), DefenseError);
}

TEST_CASE("fine-pruning at rate 0 without fine-tuning is the identity") {
  const auto data = fixtures::small_toy(1, 10, 10);
  ClassifierModel m(fixtures::tiny_classifier(), 2);
  const auto patch = PatchSpec::standard();
  const auto attack_set = non_target(data.test, 1);
  FinePruneOptions o;
  o.rates = {0.0};
  o.finetune_epochs = 0;
  const auto r = fine_prune(m, data.train, data.train, data.test, attack_set, PatternSource(patch), 1, o);
  CHECK(r.series.at("ca").at(0) == clean_accuracy(m, data.test));
  CHECK(r.series.at("asr").at(0) == attack_success_rate(m, attack_set, PatternSource(patch), 1));
  CHECK(r.series.at("pruned_channels").at(0) == 0.0);
}

TEST_CASE("silhouette and 2-means separate planted clusters") {
  const auto x = blobs(60, 12, 8.0, 4);
  const auto labels = two_means(x, 1);
  int minority = 0;
  for (int i = 48; i < 60; ++i) minority += labels[static_cast<std::size_t>(i)] == labels[59] ? 1 : 0;
  CHECK(minority == 12);
  CHECK(std::count(labels.begin(), labels.end(), labels[59]) == 12);
  CHECK(silhouette_score(x, labels) > 0.5);

  AcOptions o;
  CHECK(ac_verdict(12.0 / 60.0, silhouette_score(x, labels), o));
  // Negative control: a single blob splits into halves with a weak silhouette.
  const auto y = blobs(60, 0, 0.0, 5);
  const auto split = two_means(y, 1);
  const double frac = std::min<double>(std::count(split.begin(), split.end(), 0), std::count(split.begin(), split.end(), 1)) / 60.0;
  CHECK_FALSE(ac_verdict(frac, silhouette_score(y, split), o));
}

TEST_CASE("pca keeps the dominant axis") {
  torch::manual_seed(6);
  auto x = torch::randn({50, 4}, torch::kFloat64) * torch::tensor({10.0, 0.1, 0.1, 0.1}, torch::kFloat64);
  const auto p = pca_project(x, 1);
  CHECK(p.size(1) == 1);
  const auto centred = x.select(1, 0) - x.select(1, 0).mean();
  const double corr = std::abs((p.select(1, 0) * centred).sum().item<double>()) /
                      (p.select(1, 0).norm().item<double>() * centred.norm().item<double>());
  CHECK(corr > 0.999);
}

TEST_CASE("activation clustering reports every class") {
  const auto data = fixtures::small_toy(2, 10, 2);
  ClassifierModel m(fixtures::tiny_classifier(), 3);
  AcOptions o;
  o.components = 3;
  const auto r = activation_clustering(m, data.train, o);
  CHECK(r.scores.size() == 4);
  CHECK(r.series.at("silhouette").size() == 4);
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    CHECK(r.scores[i] <= 0.5);
    CHECK(r.flagged[i] == ac_verdict(r.scores[i], r.series.at("silhouette")[i], o));
  }
}

TEST_CASE("neural cleanse produces one norm per class") {
  const auto data = fixtures::small_toy(3, 6, 4);
  ClassifierModel m(fixtures::tiny_classifier(), 4);
  NcOptions o;
  o.steps = 20;
  const auto r = neural_cleanse(m, data.test, o);
  CHECK(r.series.at("norm").size() == 4);
  CHECK(r.scores.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.flagged[i] == (r.scores[i] > 2.0));
}

TEST_CASE("STRIP verdicts follow the calibrated threshold") {
  const auto data = fixtures::small_toy(4, 10, 10);
  ClassifierModel m(fixtures::tiny_classifier(), 5);
  StripOptions o;
  o.percentile = 10;
  const auto r = strip(m, data.train, data.test, data.train, o);
  const double t = r.summary.at("threshold");
  CHECK(t == doctest::Approx(percentile(r.series.at("clean_entropy"), 10)));
  for (std::size_t i = 0; i < r.scores.size(); ++i) CHECK(r.flagged[i] == (r.scores[i] < t));
}

TEST_CASE("DePuD without poisons is not applicable") {
  const auto data = fixtures::small_toy(5, 20, 2);
  const auto splits = make_ssl_splits(data, 8, 1);
  DepudOptions o;
  o.model = fixtures::tiny_classifier();
  o.epochs = 1;
  o.steps_per_epoch = 2;
  const auto r = depud(splits.labeled, splits.unlabeled, o);
  CHECK(r.summary.at("applicable") == 0.0);
  CHECK(r.summary.count("auroc") == 0);
  CHECK(r.scores.size() == splits.unlabeled.size());
  for (const double s : r.scores) {
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
}
