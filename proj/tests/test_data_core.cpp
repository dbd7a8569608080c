#include <fstream>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "sslpoison/image_io.hpp"

// Last, so its CHECK macros win over the ones in the torch headers.
#include <doctest.h>

using namespace sslpoison;
using fixtures::TempDir;

TEST_CASE("ssl splits partition the train set with class-balanced labels") {
  const auto raw = fixtures::small_toy(1, 30, 5);
  const auto splits = make_ssl_splits(raw, 10, 3);
  CHECK(splits.labeled.size() + splits.unlabeled.size() == raw.train.size());
  CHECK(splits.validation.size() == raw.test.size());

  std::set<std::string> ids;
  for (const auto* part : {&splits.labeled, &splits.unlabeled}) {
    for (const auto& ex : *part) CHECK(ids.insert(ex.id).second);
  }
  // floor(10 / 4) = 2 per class, remainder 2 to classes 0 and 1.
  std::map<int, int> per_class;
  for (const auto& ex : splits.labeled) ++per_class[*ex.label];
  CHECK(per_class[0] == 3);
  CHECK(per_class[1] == 3);
  CHECK(per_class[2] == 2);
  CHECK(per_class[3] == 2);
  CHECK_NOTHROW(validate_splits(splits));
}

TEST_CASE("splits are a pure function of the seed") {
  const auto raw = fixtures::small_toy(1, 20, 5);
  const auto a = make_ssl_splits(raw, 8, 5);
  const auto b = make_ssl_splits(raw, 8, 5);
  const auto c = make_ssl_splits(raw, 8, 6);
  CHECK(checksum(a.labeled) == checksum(b.labeled));
  CHECK(checksum(a.labeled) != checksum(c.labeled));
}

TEST_CASE("consistent plans only contain target-class ids") {
  const auto raw = fixtures::small_toy(2, 40, 5);
  const auto splits = make_ssl_splits(raw, 8, 1);
  std::map<std::string, int> oracle;
  for (const auto& ex : splits.unlabeled) oracle[ex.id] = *ex.label;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto plan = select_poison_set(splits, 2, 20, PoisonMode::consistent, seed);
    CHECK(plan.selected_ids.size() == 20);
    for (const auto& id : plan.selected_ids) CHECK(oracle.at(id) == 2);
    CHECK_NOTHROW(validate_plan(plan, splits));
  }
}

TEST_CASE("inconsistent plans sample classes in proportion to U") {
  // Pooled over seeds, the class histogram of inconsistent picks must pass a
  // chi-square goodness-of-fit test against the class shares of U.
  const auto raw = fixtures::small_toy(3, 100, 5);
  const auto splits = make_ssl_splits(raw, 20, 1);
  std::map<std::string, int> oracle;
  std::map<int, double> share;
  for (const auto& ex : splits.unlabeled) {
    oracle[ex.id] = *ex.label;
    share[*ex.label] += 1.0 / static_cast<double>(splits.unlabeled.size());
  }
  std::map<int, double> observed;
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    for (const auto& id : select_poison_set(splits, 0, 50, PoisonMode::inconsistent, seed).selected_ids) {
      observed[oracle.at(id)] += 1.0;
      total += 1.0;
    }
  }
  double chi2 = 0.0;
  for (const auto& [cls, p] : share) {
    const double expected = p * total;
    chi2 += (observed[cls] - expected) * (observed[cls] - expected) / expected;
  }
  // 3 degrees of freedom, p = 0.001.
  CHECK(chi2 < 16.27);
  CHECK(observed.size() == 4);
}

TEST_CASE("plan errors name the shortfall") {
  const auto raw = fixtures::small_toy(1, 10, 2);
  const auto splits = make_ssl_splits(raw, 4, 1);
  try {
    select_poison_set(splits, 1, 1000, PoisonMode::consistent, 0);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("shortfall") != std::string::npos);
  }
  CHECK_THROWS_AS(select_poison_set(splits, 9, 1, PoisonMode::consistent, 0), DataError);
}

TEST_CASE("poison export round-trips losslessly through PNG") {
  TempDir tmp("export");
  const auto raw = fixtures::small_toy(4, 10, 2);
  auto splits = make_ssl_splits(raw, 4, 1);
  const auto plan = select_poison_set(splits, 1, 5, PoisonMode::consistent, 3);
  auto poisons = gather_planned(plan, splits.unlabeled);
  for (auto& p : poisons) {
    p.origin = Origin::poisoned;
    p.pixels[0] = 0;
    p.pixels[1] = 255;
  }
  const auto summary = export_poisoned_set(poisons, plan, tmp.path());
  CHECK(std::filesystem::exists(summary.manifest));
  std::ifstream manifest(summary.manifest);
  std::string header;
  std::getline(manifest, header);
  CHECK(header == "id,origin,mode,target_class,source_label");

  const auto imported = import_poisoned_set(tmp.path());
  REQUIRE(imported.examples.size() == poisons.size());
  CHECK(imported.target_class == 1);
  CHECK(imported.mode == PoisonMode::consistent);
  CHECK(checksum(imported.examples) == summary.checksum);
  for (std::size_t i = 0; i < poisons.size(); ++i) CHECK(imported.examples[i].pixels == poisons[i].pixels);
}

TEST_CASE("png writer and reader agree bit for bit") {
  TempDir tmp("png");
  const auto img = fixtures::random_image("r", 7, 5, 3, 9);
  write_png(tmp.path() / "r.png", img.shape, img.pixels);
  ImageShape shape;
  const auto back = read_png(tmp.path() / "r.png", shape);
  CHECK(shape == img.shape);
  CHECK(back == img.pixels);
}

TEST_CASE("toy shapes are deterministic, balanced and seed dependent") {
  const auto a = fixtures::small_toy(5, 12, 3);
  const auto b = fixtures::small_toy(5, 12, 3);
  const auto c = fixtures::small_toy(6, 12, 3);
  CHECK(checksum(a.train) == checksum(b.train));
  CHECK(checksum(a.train) != checksum(c.train));
  CHECK(a.train.size() == 48);
  CHECK(a.test.size() == 12);
  std::map<int, int> counts;
  for (const auto& ex : a.train) ++counts[*ex.label];
  for (const auto& [k, n] : counts) CHECK(n == 12);
}

TEST_CASE("class substitution relabels donor images into the slot") {
  const auto base = fixtures::small_toy(7, 10, 2);
  const auto donor = fixtures::small_toy(8, 10, 2);
  const auto sub = substitute_class(base, 3, donor, 1);
  CHECK(sub.num_classes == base.num_classes);
  int replaced = 0;
  for (const auto& ex : sub.train) {
    if (ex.source_label) {
      CHECK(*ex.source_label == 1);
      CHECK(*ex.label == 3);
      ++replaced;
    } else {
      CHECK(*ex.label != 3);
    }
  }
  CHECK(replaced == 10);
  CHECK_THROWS_AS(substitute_class(base, 4, donor, 1), DataError);
}

TEST_CASE("image-folder datasets load with sorted class indices") {
  TempDir tmp("folder");
  RawDataset ds = fixtures::small_toy(9, 3, 2);
  save_image_folder(ds, tmp.path());
  const auto back = load_dataset("mine", tmp.path());
  CHECK(back.num_classes == ds.num_classes);
  CHECK(back.train.size() == ds.train.size());
  CHECK(back.test.size() == ds.test.size());
  CHECK_THROWS_AS(load_dataset("cifar10", tmp.path() / "missing"), DataError);
}
