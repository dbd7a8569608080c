#include <fstream>
#include <map>
#include <regex>
#include <set>

#include "fixtures.hpp"
#include "oracles.hpp"

// Last, so its CHECK macros win over the ones in the torch headers.
#include <doctest.h>

using namespace sslpoison;

TEST_CASE("target gradient matches finite differences of the pool loss") {
  auto b = oracles::tiny_bundle();
  const auto pool = to_tensor(b.target_pool).to(torch::kFloat64);
  const auto labels = torch::full({pool.size(0)}, b.target_class, torch::kInt64);
  auto params = b.matched_parameters();
  auto loss = [&] { return torch::cross_entropy_loss(b.surrogate.logits(pool), labels).item<double>(); };
  const double h = 1e-6;
  std::int64_t offset = 0;
  int checked = 0;
  for (auto& p : params) {
    torch::NoGradGuard guard;
    auto flat = p.view(-1);
    if (checked < 5) {
      const double orig = flat[0].item<double>();
      flat[0] = orig + h;
      const double up = loss();
      flat[0] = orig - h;
      const double down = loss();
      flat[0] = orig;
      CHECK(b.target_gradient[offset].item<double>() == doctest::Approx((up - down) / (2 * h)).epsilon(1e-5).scale(1e-3));
      ++checked;
    }
    offset += flat.numel();
  }
  CHECK(checked == 5);
  CHECK(offset == b.target_gradient.numel());
}

TEST_CASE("gradient-matching loss vanishes on the target pool itself") {
  const auto b = oracles::tiny_bundle();
  const auto pool = to_tensor(b.target_pool).to(torch::kFloat64);
  CHECK(std::abs(grad_match_loss(b, pool).item<double>()) <= 1e-10);
  CHECK(grad_match_step(b, pool, HvpMode::finite_difference).value <= 1e-10);
}

TEST_CASE("crafting derivative: exact second order within 1e-3 of central differences") {
  const auto check = oracles::lbt_generator_derivative(HvpMode::exact);
  MESSAGE("relative error " << check.relative_error << " over " << check.coordinates << " coordinates");
  CHECK(check.surrogate_parameters <= 1000);
  CHECK(check.relative_error <= 1e-3);
}

TEST_CASE("crafting derivative: finite-difference Hessian-vector fallback within 1e-2") {
  const auto check = oracles::lbt_generator_derivative(HvpMode::finite_difference);
  MESSAGE("relative error " << check.relative_error);
  CHECK(check.relative_error <= 1e-2);
}

TEST_CASE("input gradients of both modes agree") {
  const auto b = oracles::tiny_bundle();
  const auto x = oracles::mid_range_batch(3, 4);
  const auto exact = grad_match_step(b, x, HvpMode::exact);
  const auto fd = grad_match_step(b, x, HvpMode::finite_difference);
  CHECK(exact.value == doctest::Approx(fd.value).epsilon(1e-12));
  const double rel = (exact.input_gradient - fd.input_gradient).norm().item<double>() /
                     exact.input_gradient.norm().item<double>();
  CHECK(rel <= 1e-2);
}

TEST_CASE("lambda_ins doubles on schedule") {
  CraftConfig c;
  c.epochs = 150;
  CHECK(c.lambda_period() == 50);
  CHECK(c.lambda_at(0) == 0.05);
  CHECK(c.lambda_at(49) == 0.05);
  CHECK(c.lambda_at(50) == doctest::Approx(0.1));
  CHECK(c.lambda_at(149) == doctest::Approx(0.2));
  c.epochs = 10;
  CHECK(c.lambda_period() == 3);
  CHECK(c.lambda_at(9) == doctest::Approx(0.4));
  c.lambda_ins = 0.0;
  CHECK_THROWS_AS(c.validate(), AttackError);
}

TEST_CASE("surrogate accuracy guard and pool ordering") {
  const auto data = fixtures::small_toy(2, 30, 10);
  SurrogateConfig sc;
  sc.model = fixtures::tiny_classifier();
  sc.epochs = 1;
  sc.min_accuracy = 101.0;
  CHECK_THROWS_AS(train_surrogate(data, sc), AttackError);
  sc.min_accuracy = 0.0;
  auto bundle = train_surrogate(data, sc);
  select_target_pool(bundle, data.train, 2, 50);
  CHECK(bundle.target_pool.size() == 30);
  CHECK(bundle.warnings.size() == 1);
  for (std::size_t i = 1; i < bundle.pool_confidence.size(); ++i) {
    CHECK(bundle.pool_confidence[i] <= bundle.pool_confidence[i - 1]);
  }
  for (const auto& ex : bundle.target_pool) CHECK(*ex.label == 2);
}

TEST_CASE("crafted poisons stay within the integer budget and keep their class") {
  const auto data = fixtures::small_toy(3, 30, 10);
  SurrogateConfig sc;
  sc.model = fixtures::tiny_classifier();
  sc.epochs = 1;
  sc.min_accuracy = 0.0;
  auto bundle = train_surrogate(data, sc);
  select_target_pool(bundle, data.train, 1, 8);
  CraftConfig cc;
  cc.generator.width = 4;
  cc.generator.epsilon = 7.5;
  cc.epochs = 2;
  cc.steps_per_epoch = 2;
  cc.batch_size = 8;
  std::vector<CraftEpoch> seen;
  const auto crafted = craft_generator(bundle, data.train, cc, [&](const CraftEpoch& e) { seen.push_back(e); });
  CHECK(seen.size() == 2);
  CHECK(crafted.history.size() == 2);
  for (const auto& p : bundle.surrogate.parameters()) CHECK_FALSE(p.grad().defined());

  const auto victim = fixtures::small_toy(4, 40, 5);
  const auto splits = make_ssl_splits(victim, 8, 1);
  const auto plan = select_poison_set(splits, 1, 20, PoisonMode::consistent, 2);
  const auto poisoned = poison_unlabeled(crafted.generator, plan, splits);
  std::map<std::string, const ImageExample*> clean;
  for (const auto& ex : splits.unlabeled) clean[ex.id] = &ex;
  int count = 0;
  for (const auto& ex : poisoned.unlabeled) {
    const auto& orig = *clean.at(ex.id);
    int worst = 0;
    for (std::size_t i = 0; i < ex.pixels.size(); ++i) worst = std::max(worst, std::abs(int(ex.pixels[i]) - int(orig.pixels[i])));
    if (ex.origin == Origin::poisoned) {
      ++count;
      CHECK(worst <= 7);
      CHECK(*ex.label == 1);
    } else {
      CHECK(worst == 0);
    }
  }
  CHECK(count == 20);
  CHECK(poisoned.labeled.size() == splits.labeled.size());
}

TEST_CASE("label fraction moves round(f * n) poisons into the labeled split") {
  const auto victim = fixtures::small_toy(5, 40, 5);
  const auto splits = make_ssl_splits(victim, 8, 1);
  auto plan = select_poison_set(splits, 0, 15, PoisonMode::consistent, 2);
  plan.label_fraction = 0.4;
  GeneratorSpec gs;
  gs.width = 4;
  const GeneratorModel g(gs, 1);
  const auto out = poison_unlabeled(g, plan, splits);
  CHECK(out.labeled.size() == splits.labeled.size() + 6);
  CHECK(out.unlabeled.size() == splits.unlabeled.size() - 6);
  int labeled_poisons = 0;
  for (const auto& ex : out.labeled) labeled_poisons += ex.origin == Origin::poisoned ? 1 : 0;
  CHECK(labeled_poisons == 6);
}

TEST_CASE("patch baselines paste the patch and clb needs a surrogate") {
  const auto victim = fixtures::small_toy(6, 20, 5);
  const auto splits = make_ssl_splits(victim, 8, 1);
  const auto plan = select_poison_set(splits, 2, 5, PoisonMode::consistent, 2);
  const auto patch = PatchSpec::standard();
  const auto out = baseline_patch_poison(plan, splits, patch, PatchVariant::badnets);
  int poisons = 0;
  for (const auto& ex : out.unlabeled) {
    if (ex.origin != Origin::poisoned) continue;
    ++poisons;
    CHECK(apply_patch(ex, patch).pixels == ex.pixels);
  }
  CHECK(poisons == 5);
  CHECK_THROWS_AS(baseline_patch_poison(plan, splits, patch, PatchVariant::clb), AttackError);
}

TEST_CASE("attack sources cannot see the victim side") {
  // Walk the include graph from the attack module; none of the victim-side
  // headers may be reachable.
  const std::filesystem::path root = SSLPOISON_SOURCE_DIR;
  const std::set<std::string> forbidden{"ssl_trainers.hpp", "metrics.hpp", "harness.hpp", "defenses.hpp"};
  const std::regex include_re(R"re(#include\s+"sslpoison/([a-z_]+\.hpp)")re");
  std::vector<std::filesystem::path> frontier{root / "include/sslpoison/attack.hpp"};
  for (const auto& entry : std::filesystem::directory_iterator(root / "src/attack")) frontier.push_back(entry.path());
  std::set<std::string> seen;
  while (!frontier.empty()) {
    const auto file = frontier.back();
    frontier.pop_back();
    std::ifstream in(file);
    REQUIRE(in.good());
    std::string line;
    while (std::getline(in, line)) {
      std::smatch m;
      if (!std::regex_search(line, m, include_re)) continue;
      const std::string header = m[1];
      CAPTURE(file.string());
      CHECK(forbidden.count(header) == 0);
      if (seen.insert(header).second) frontier.push_back(root / "include/sslpoison" / header);
    }
  }
  CHECK(seen.count("model_zoo.hpp") == 1);
}
