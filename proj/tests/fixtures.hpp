// Small deterministic inputs shared by the unit tests.
#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "sslpoison/data_core.hpp"
#include "sslpoison/model_zoo.hpp"
#include "sslpoison/synthetic.hpp"

namespace fixtures {

using namespace sslpoison;

inline ImageExample random_image(const std::string& id, int h, int w, int c, std::uint64_t seed,
                                 std::optional<int> label = std::nullopt) {
  std::mt19937_64 rng(seed);
  ImageExample ex;
  ex.id = id;
  ex.shape = {h, w, c};
  ex.pixels.resize(static_cast<std::size_t>(h) * w * c);
  for (auto& p : ex.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  ex.label = label;
  return ex;
}

/// A few hundred 32x32 toy images: fast enough for training smoke tests.
inline RawDataset small_toy(std::uint64_t seed = 1, int per_class = 60, int test_per_class = 20) {
  ToyShapesOptions o;
  o.train_per_class = per_class;
  o.test_per_class = test_per_class;
  o.seed = seed;
  return make_toy_shapes(o);
}

inline ClassifierSpec tiny_classifier(int classes = 4, ImageShape input = {32, 32, 3}, int width = 4) {
  ClassifierSpec s;
  s.num_classes = classes;
  s.input = input;
  s.width = width;
  return s;
}

/// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("sslpoison-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixtures
