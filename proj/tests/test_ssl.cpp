#include <cmath>
#include <fstream>
#include <numbers>

#include "fixtures.hpp"
#include "sslpoison/metrics.hpp"
#include "sslpoison/ssl_trainers.hpp"

// Last, so its CHECK macros win over the ones in the torch headers.
#include <doctest.h>

using namespace sslpoison;

namespace {

struct LossBench {
  SSLConfig cfg;
  ClassifierModel student{fixtures::tiny_classifier(), 3};
  ClassifierModel teacher;
  std::mt19937_64 rng{5};
  torch::Tensor x;

  LossBench() {
    student.train(false);
    teacher = student.clone();
    torch::manual_seed(2);
    x = torch::randint(0, 256, {6, 3, 32, 32}).to(torch::kFloat32);
  }

  torch::Tensor loss(SslAlgorithm alg, std::optional<double> mix = std::nullopt) {
    UnlabeledContext ctx{&student, &teacher, &rng, &cfg, AugmentKind::none, mix};
    return ssl_unlabeled_loss(alg, x, ctx);
  }

  /// Oracle for the thresholded hard-label losses with identical views.
  double hard_label_oracle(double threshold) {
    torch::NoGradGuard guard;
    const auto logits = student.logits(x);
    const auto probs = torch::softmax(logits, 1);
    double total = 0.0;
    for (std::int64_t i = 0; i < x.size(0); ++i) {
      const auto row = probs[i];
      const auto k = row.argmax().item<std::int64_t>();
      if (row[k].item<double>() >= threshold) total += -std::log(row[k].item<double>());
    }
    return total / static_cast<double>(x.size(0));
  }
};

}  // namespace

TEST_CASE("ramp and cosine schedule endpoints") {
  CHECK(consistency_ramp(0.0, 0.3) == doctest::Approx(std::exp(-5.0)));
  CHECK(consistency_ramp(0.15, 0.3) == doctest::Approx(std::exp(-1.25)));
  CHECK(consistency_ramp(0.3, 0.3) == 1.0);
  CHECK(consistency_ramp(0.9, 0.3) == 1.0);
  CHECK(cosine_lr(0.03, 0, 100) == doctest::Approx(0.03));
  CHECK(cosine_lr(0.03, 100, 100) == doctest::Approx(0.03 * std::cos(7.0 * std::numbers::pi / 16.0)));
}

TEST_CASE("algorithm names round-trip and defaults resolve") {
  for (auto a : {SslAlgorithm::supervised, SslAlgorithm::pseudolabel, SslAlgorithm::pimodel, SslAlgorithm::meanteacher,
                 SslAlgorithm::vat, SslAlgorithm::ict, SslAlgorithm::fixmatch}) {
    CHECK(ssl_algorithm_from_string(to_string(a)) == a);
  }
  SSLConfig c;
  c.algorithm = SslAlgorithm::meanteacher;
  CHECK(c.default_weight() == 50.0);
  c.threshold = 0.0;
  CHECK_THROWS_AS(c.validate(), TrainingError);
}

TEST_CASE("unlabeled losses against closed-form oracles") {
  LossBench b;
  SUBCASE("supervised has no unlabeled term") { CHECK(b.loss(SslAlgorithm::supervised).item<double>() == 0.0); }
  SUBCASE("pi-model of identical views is zero") { CHECK(b.loss(SslAlgorithm::pimodel).item<double>() == 0.0); }
  SUBCASE("mean teacher against an identical teacher is zero") {
    CHECK(b.loss(SslAlgorithm::meanteacher).item<double>() == doctest::Approx(0.0).scale(1.0));
  }
  SUBCASE("ict with mixing weight one reduces to teacher matching") {
    CHECK(b.loss(SslAlgorithm::ict, 1.0).item<double>() == doctest::Approx(0.0).scale(1.0));
  }
  SUBCASE("fixmatch with identical views is masked hard-label cross-entropy") {
    for (double tau : {0.01, 0.3, 0.95}) {
      b.cfg.threshold = tau;
      CHECK(b.loss(SslAlgorithm::fixmatch).item<double>() == doctest::Approx(b.hard_label_oracle(tau)).epsilon(1e-5));
    }
  }
  SUBCASE("pseudo-label matches the same oracle") {
    b.cfg.threshold = 0.2;
    CHECK(b.loss(SslAlgorithm::pseudolabel).item<double>() == doctest::Approx(b.hard_label_oracle(0.2)).epsilon(1e-5));
  }
  SUBCASE("vat divergence is a finite non-negative KL") {
    const double v = b.loss(SslAlgorithm::vat).item<double>();
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0);
  }
}

TEST_CASE("training records one epoch per epoch and is reproducible") {
  const auto raw = fixtures::small_toy(1, 40, 10);
  const auto splits = make_ssl_splits(raw, 20, 2);
  SSLConfig c;
  c.algorithm = SslAlgorithm::fixmatch;
  c.model = fixtures::tiny_classifier();
  c.epochs = 2;
  c.steps_per_epoch = 3;
  c.seed = 4;
  int probe_calls = 0;
  const EpochProbe probe = [&](const ClassifierModel& snapshot, EpochRecord& rec) {
    CHECK_FALSE(snapshot.is_training());
    rec.asr = 1.0;
    ++probe_calls;
  };
  const auto a = train_ssl(splits, c, {probe});
  const auto b = train_ssl(splits, c);
  CHECK(probe_calls == 2);
  REQUIRE(a.history.epochs.size() == 2);
  CHECK(a.history.epochs[1].asr.value() == 1.0);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(a.history.epochs[e].ca == b.history.epochs[e].ca);
    CHECK(a.history.epochs[e].labeled_loss == b.history.epochs[e].labeled_loss);
    CHECK(a.history.epochs[e].ca >= 0.0);
    CHECK(a.history.epochs[e].ca <= 100.0);
  }
  CHECK(clean_accuracy(a.model, splits.validation) == clean_accuracy(b.model, splits.validation));
}

TEST_CASE("every algorithm trains a step without error") {
  const auto raw = fixtures::small_toy(2, 12, 4);
  const auto splits = make_ssl_splits(raw, 8, 1);
  for (auto a : {SslAlgorithm::supervised, SslAlgorithm::pseudolabel, SslAlgorithm::pimodel, SslAlgorithm::meanteacher,
                 SslAlgorithm::vat, SslAlgorithm::ict, SslAlgorithm::fixmatch}) {
    SSLConfig c;
    c.algorithm = a;
    c.model = fixtures::tiny_classifier();
    c.epochs = 1;
    c.steps_per_epoch = 2;
    CAPTURE(to_string(a));
    CHECK(train_ssl(splits, c).history.epochs.size() == 1);
  }
}

TEST_CASE("divergence reports the epoch") {
  const auto raw = fixtures::small_toy(3, 12, 4);
  const auto splits = make_ssl_splits(raw, 8, 1);
  SSLConfig c;
  c.algorithm = SslAlgorithm::supervised;
  c.model = fixtures::tiny_classifier();
  c.epochs = 3;
  c.steps_per_epoch = 4;
  c.lr = 1e12;
  try {
    train_ssl(splits, c);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.epoch() >= 0);
    CHECK(e.epoch() < 3);
  }
}

TEST_CASE("epoch csv has the documented columns") {
  fixtures::TempDir tmp("csv");
  TrainHistory h;
  h.epochs.push_back({0, 1.5, 0.5, 40.0, 10.0, std::nullopt, 0.25});
  write_epochs_csv(h, tmp.path() / "e.csv");
  std::ifstream in(tmp.path() / "e.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "epoch,labeled_loss,unlabeled_loss,ca,asr,D,C");
  CHECK(row.rfind("0,1.5,0.5,40,10,,0.25", 0) == 0);
}

TEST_CASE("semi-supervised training beats the supervised baseline on toy shapes") {
  // Oracle: the same network trained on the labeled split alone.
  ToyShapesOptions o;
  o.train_per_class = 400;
  o.test_per_class = 100;
  o.seed = 1;
  const auto raw = make_toy_shapes(o);
  const auto splits = make_ssl_splits(raw, 100, 7);
  SSLConfig c;
  c.model = fixtures::tiny_classifier(4, {32, 32, 3}, 16);
  c.epochs = 8;
  c.seed = 3;
  c.algorithm = SslAlgorithm::supervised;
  DatasetSplits labeled_only = splits;
  labeled_only.unlabeled.clear();
  const auto sl = train_ssl(labeled_only, c);
  c.algorithm = SslAlgorithm::fixmatch;
  const auto ssl = train_ssl(splits, c);
  const double sl_ca = clean_accuracy(sl.model, splits.validation);
  const double ssl_ca = clean_accuracy(ssl.model, splits.validation);
  MESSAGE("SL CA " << sl_ca << ", FixMatch CA " << ssl_ca);
  CHECK(ssl_ca > sl_ca);
}
