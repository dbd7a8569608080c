#include "fixtures.hpp"

// Last, so its CHECK macros win over the ones in the torch headers.
#include <doctest.h>

using namespace sslpoison;
using fixtures::TempDir;

namespace {

torch::Tensor random_pixels(std::int64_t n, int h = 32, int w = 32, std::uint64_t seed = 0) {
  torch::manual_seed(seed);
  return torch::randint(0, 256, {n, 3, h, w}).to(torch::kFloat32);
}

}  // namespace

TEST_CASE("generator patterns stay inside the budget") {
  for (auto arch : {GeneratorArch::simple_conv, GeneratorArch::unet}) {
    for (double eps : {0.0, 7.0, 27.0}) {
      GeneratorSpec spec;
      spec.arch = arch;
      spec.epsilon = eps;
      spec.width = 8;
      GeneratorModel g(spec, 3);
      // Scale up the last layer so tanh saturates; the bound must still hold.
      {
        torch::NoGradGuard guard;
        for (auto& p : g.parameters()) p.mul_(50.0);
      }
      const auto pattern = generate_pattern(g, random_pixels(4));
      CHECK(pattern.abs().max().item<double>() <= eps + 1e-9);
    }
  }
}

TEST_CASE("quantisation never leaves the integer budget") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto clean = fixtures::random_image("c", 6, 6, 3, rng());
    const double eps = static_cast<double>(rng() % 30) + 0.5;
    const auto x = to_tensor(std::vector<ImageExample>{clean})[0];
    const auto noise = (torch::rand_like(x) * 2.0 - 1.0) * eps;
    const auto poisoned = (x + noise).clamp(0, 255);
    const auto q = quantize_within_budget(poisoned, clean.pixels, eps);
    int worst = 0;
    for (std::size_t i = 0; i < q.size(); ++i) worst = std::max(worst, std::abs(int(q[i]) - int(clean.pixels[i])));
    CHECK(worst <= static_cast<int>(std::floor(eps)));
  }
}

TEST_CASE("tensor conversion round-trips 8-bit pixels") {
  const auto ex = fixtures::random_image("a", 5, 4, 3, 1, 2);
  const auto t = to_tensor(std::vector<ImageExample>{ex});
  CHECK((t.sizes() == torch::IntArrayRef{1, 3, 5, 4}));
  CHECK(t[0][1][2][3].item<float>() == static_cast<float>(ex.at(2, 3, 1)));
  CHECK(to_pixels(t[0]) == ex.pixels);
  CHECK(labels_tensor(std::vector<ImageExample>{ex})[0].item<std::int64_t>() == 2);
}

TEST_CASE("patch pasting writes exactly the block region") {
  const auto ex = fixtures::random_image("a", 32, 32, 3, 2);
  const auto patch = PatchSpec::standard(3, 20, 20, 8);
  const auto out = apply_patch(ex, patch);
  int changed_outside = 0;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      for (int c = 0; c < 3; ++c) {
        const bool inside = y >= 20 && y < 28 && x >= 20 && x < 28;
        if (inside) {
          CHECK((out.at(y, x, c) == 0 || out.at(y, x, c) == 255));
        } else if (out.at(y, x, c) != ex.at(y, x, c)) {
          ++changed_outside;
        }
      }
    }
  }
  CHECK(changed_outside == 0);
  const auto t = apply_patch(to_tensor(std::vector<ImageExample>{ex}), patch);
  CHECK(to_pixels(t[0]) == out.pixels);
  CHECK_THROWS_AS(apply_patch(ex, PatchSpec::standard(3, 28, 28, 8)), ModelError);
}

TEST_CASE("classifier outputs are distributions for every architecture") {
  for (auto arch : {ClassifierArch::small_cnn, ClassifierArch::cnn13, ClassifierArch::wrn28_2, ClassifierArch::lenet}) {
    auto spec = fixtures::tiny_classifier(5);
    spec.arch = arch;
    ClassifierModel m(spec, 1);
    const auto p = predict_probabilities(m, random_pixels(2));
    CHECK((p.sizes() == torch::IntArrayRef{2, 5}));
    CHECK(torch::allclose(p.sum(1), torch::ones({2}, p.options()), 1e-5, 1e-5));
    CHECK(m.hidden(random_pixels(2)).size(0) == 2);
  }
}

TEST_CASE("checkpoints restore identical predictions") {
  TempDir tmp("ckpt");
  ClassifierModel m(fixtures::tiny_classifier(), 7);
  save_classifier(m, tmp.path() / "m.pt");
  const auto back = load_classifier(tmp.path() / "m.pt");
  const auto x = random_pixels(3);
  CHECK(torch::equal(predict_probabilities(m, x), predict_probabilities(back, x)));

  GeneratorSpec gs;
  gs.width = 4;
  GeneratorModel g(gs, 2);
  save_generator(g, tmp.path() / "g.pt");
  const auto gb = load_generator(tmp.path() / "g.pt");
  CHECK(torch::equal(generate_pattern(g, x), generate_pattern(gb, x)));
  CHECK(gb.epsilon() == g.epsilon());
}

TEST_CASE("channel mask of ones is the identity and zeros silence channels") {
  ClassifierModel m(fixtures::tiny_classifier(), 3);
  const auto x = random_pixels(4);
  const auto before = predict_probabilities(m, x);
  m.set_channel_mask(torch::ones({m.last_block_channels()}));
  CHECK(torch::equal(before, predict_probabilities(m, x)));
  // With every channel silenced the output no longer depends on the input.
  m.set_channel_mask(torch::zeros({m.last_block_channels()}));
  const auto p = predict_probabilities(m, x);
  CHECK(torch::allclose(p, p[0].expand_as(p)));
  CHECK_FALSE(torch::allclose(before, before[0].expand_as(before)));
}

TEST_CASE("flat loss gradient matches central differences") {
  auto spec = fixtures::tiny_classifier(3, {8, 8, 3}, 2);
  ClassifierModel m(spec, 5);
  m.to(torch::kFloat64);
  m.train(false);
  const auto x = random_pixels(4, 8, 8).to(torch::kFloat64);
  const auto y = torch::tensor({0, 1, 2, 1}, torch::kInt64);
  auto params = m.parameters();
  const auto g = flat_loss_gradient(m, x, y, params);
  auto loss = [&] { return torch::cross_entropy_loss(m.logits(x), y).item<double>(); };
  const double h = 1e-6;
  std::int64_t offset = 0;
  for (auto& p : params) {
    torch::NoGradGuard guard;
    auto flat = p.view(-1);
    for (std::int64_t i : {std::int64_t{0}, flat.numel() - 1}) {
      const double orig = flat[i].item<double>();
      flat[i] = orig + h;
      const double up = loss();
      flat[i] = orig - h;
      const double down = loss();
      flat[i] = orig;
      const double fd = (up - down) / (2 * h);
      CHECK(g[offset + i].item<double>() == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
    }
    offset += flat.numel();
  }
}

TEST_CASE("augmentation is seeded and stays on the pixel range") {
  const auto x = random_pixels(6);
  for (auto kind : {AugmentKind::none, AugmentKind::weak, AugmentKind::strong}) {
    std::mt19937_64 a(9), b(9);
    const auto ya = augment(x, kind, a);
    const auto yb = augment(x, kind, b);
    CHECK(torch::equal(ya, yb));
    CHECK(ya.min().item<double>() >= 0.0);
    CHECK(ya.max().item<double>() <= 255.0);
    CHECK(ya.sizes() == x.sizes());
  }
  std::mt19937_64 r(1);
  CHECK(torch::equal(augment(x, AugmentKind::none, r), x));
}
