#include <random>

#include "sslpoison/model_zoo.hpp"

namespace sslpoison {

torch::Tensor to_tensor(std::span<const ImageExample> examples) {
  if (examples.empty()) return torch::empty({0, 0, 0, 0});
  const ImageShape shape = examples.front().shape;
  auto out = torch::empty({static_cast<std::int64_t>(examples.size()), shape.height, shape.width, shape.channels},
                          torch::kUInt8);
  auto* dst = out.data_ptr<std::uint8_t>();
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (!(examples[i].shape == shape)) throw DataError("mixed image shapes in batch: " + examples[i].id);
    std::copy(examples[i].pixels.begin(), examples[i].pixels.end(), dst + i * shape.size());
  }
  return out.permute({0, 3, 1, 2}).to(torch::kFloat32).contiguous();
}

torch::Tensor labels_tensor(std::span<const ImageExample> examples) {
  std::vector<std::int64_t> labels;
  labels.reserve(examples.size());
  for (const auto& ex : examples) {
    if (!ex.label) throw DataError("example has no label: " + ex.id);
    labels.push_back(*ex.label);
  }
  return torch::tensor(labels, torch::kInt64);
}

std::vector<std::uint8_t> to_pixels(const torch::Tensor& image) {
  auto hwc = image.detach().round().clamp(0, 255).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  const auto* p = hwc.data_ptr<std::uint8_t>();
  return {p, p + hwc.numel()};
}

PatchSpec PatchSpec::standard(int channels, int top, int left, int size) {
  PatchSpec spec{top, left, size, {}};
  std::mt19937_64 rng(0x5eed);
  spec.block.resize(static_cast<std::size_t>(size) * size * channels);
  for (auto& v : spec.block) v = (rng() & 1U) != 0U ? 255 : 0;
  return spec;
}

namespace {

void check_fits(const PatchSpec& patch, int height, int width, int channels) {
  if (patch.size < 0 || patch.top < 0 || patch.left < 0 || patch.top + patch.size > height ||
      patch.left + patch.size > width) {
    throw ModelError("patch at (" + std::to_string(patch.top) + ", " + std::to_string(patch.left) + ") of size " +
                     std::to_string(patch.size) + " does not fit a " + std::to_string(height) + "x" +
                     std::to_string(width) + " image");
  }
  if (!patch.block.empty() &&
      patch.block.size() != static_cast<std::size_t>(patch.size) * patch.size * channels) {
    throw ModelError("patch block size does not match patch geometry");
  }
}

std::uint8_t block_value(const PatchSpec& patch, int y, int x, int c, int channels) {
  if (patch.block.empty()) return ((y + x) % 2 == 0) ? 255 : 0;
  return patch.block[(static_cast<std::size_t>(y) * patch.size + x) * channels + c];
}

}  // namespace

ImageExample apply_patch(const ImageExample& example, const PatchSpec& patch) {
  check_fits(patch, example.shape.height, example.shape.width, example.shape.channels);
  ImageExample out = example;
  for (int y = 0; y < patch.size; ++y) {
    for (int x = 0; x < patch.size; ++x) {
      for (int c = 0; c < example.shape.channels; ++c) {
        out.at(patch.top + y, patch.left + x, c) = block_value(patch, y, x, c, example.shape.channels);
      }
    }
  }
  return out;
}

torch::Tensor apply_patch(const torch::Tensor& pixels, const PatchSpec& patch) {
  const int channels = static_cast<int>(pixels.size(1));
  check_fits(patch, static_cast<int>(pixels.size(2)), static_cast<int>(pixels.size(3)), channels);
  auto out = pixels.clone();
  if (patch.size == 0) return out;
  auto block = torch::empty({channels, patch.size, patch.size}, pixels.options());
  for (int y = 0; y < patch.size; ++y) {
    for (int x = 0; x < patch.size; ++x) {
      for (int c = 0; c < channels; ++c) block[c][y][x] = block_value(patch, y, x, c, channels);
    }
  }
  out.slice(2, patch.top, patch.top + patch.size).slice(3, patch.left, patch.left + patch.size).copy_(
      block.unsqueeze(0).expand({pixels.size(0), channels, patch.size, patch.size}));
  return out;
}

torch::Tensor apply_pattern_source(const PatternSource& source, const torch::Tensor& pixels) {
  torch::NoGradGuard guard;
  return std::visit(
      [&](const auto& s) -> torch::Tensor {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, IdentityPattern>) {
          return pixels;
        } else if constexpr (std::is_same_v<T, PatchSpec>) {
          return apply_patch(pixels, s);
        } else {
          // Round like exported poisons so evaluation sees 8-bit images.
          auto out = apply_pattern(pixels, generate_pattern(*s, pixels)).round();
          const double radius = std::floor(s->epsilon());
          return torch::max(torch::min(out, pixels + radius), pixels - radius).clamp(0, 255);
        }
      },
      source);
}

}  // namespace sslpoison
