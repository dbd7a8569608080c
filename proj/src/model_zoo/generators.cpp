#include <cmath>
#include <mutex>

#include "sslpoison/model_zoo.hpp"

namespace nn = torch::nn;

namespace sslpoison {

namespace {

std::mutex& init_mutex() {
  static std::mutex m;
  return m;
}

/// One strided convolution down, one transposed convolution back up.
class SimpleConvGenerator : public GeneratorNet {
 public:
  SimpleConvGenerator(int channels, int hidden)
      : down_(register_module("down", nn::Conv2d(nn::Conv2dOptions(channels, hidden, 3).stride(2).padding(1)))),
        up_(register_module("up", nn::ConvTranspose2d(
                                      nn::ConvTranspose2dOptions(hidden, channels, 4).stride(2).padding(1)))) {}

  torch::Tensor raw(const torch::Tensor& x) override { return up_(torch::relu(down_(x))); }

 private:
  nn::Conv2d down_;
  nn::ConvTranspose2d up_;
};

/// Two-level encoder-decoder with skip connections.
class UNetGenerator : public GeneratorNet {
 public:
  UNetGenerator(int channels, int c) {
    auto conv = [](int in, int out, int k, int stride, int pad) {
      return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(pad));
    };
    auto up = [](int in, int out) {
      return nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1));
    };
    e1_ = register_module("e1", conv(channels, c, 3, 1, 1));
    e2_ = register_module("e2", conv(c, 2 * c, 4, 2, 1));
    e3_ = register_module("e3", conv(2 * c, 4 * c, 4, 2, 1));
    mid_ = register_module("mid", conv(4 * c, 4 * c, 3, 1, 1));
    u2_ = register_module("u2", up(4 * c, 2 * c));
    d2_ = register_module("d2", conv(4 * c, 2 * c, 3, 1, 1));
    u1_ = register_module("u1", up(2 * c, c));
    d1_ = register_module("d1", conv(2 * c, c, 3, 1, 1));
    out_ = register_module("out", conv(c, channels, 1, 1, 0));
  }

  torch::Tensor raw(const torch::Tensor& x) override {
    auto s1 = torch::relu(e1_(x));
    auto s2 = torch::relu(e2_(s1));
    auto h = torch::relu(mid_(torch::relu(e3_(s2))));
    h = torch::relu(u2_(h));
    h = torch::relu(d2_(torch::cat({h, s2}, 1)));
    h = torch::relu(u1_(h));
    h = torch::relu(d1_(torch::cat({h, s1}, 1)));
    return out_(h);
  }

 private:
  nn::Conv2d e1_{nullptr}, e2_{nullptr}, e3_{nullptr}, mid_{nullptr}, d2_{nullptr}, d1_{nullptr}, out_{nullptr};
  nn::ConvTranspose2d u2_{nullptr}, u1_{nullptr};
};

}  // namespace

std::string to_string(GeneratorArch arch) {
  return arch == GeneratorArch::simple_conv ? "simple-conv" : "unet";
}

GeneratorArch generator_arch_from_string(const std::string& s) {
  if (s == "simple-conv" || s == "simnet") return GeneratorArch::simple_conv;
  if (s == "unet" || s == "encoder-decoder") return GeneratorArch::unet;
  throw ModelError("unknown generator architecture: " + s);
}

GeneratorModel::GeneratorModel(GeneratorSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
  if (!(spec_.epsilon >= 0.0)) throw ModelError("generator budget must be >= 0");
  if (spec_.input.height % 4 != 0 || spec_.input.width % 4 != 0) {
    throw ModelError("generator input sides must be multiples of 4");
  }
  if (spec_.width <= 0) spec_.width = spec_.arch == GeneratorArch::simple_conv ? 64 : 16;
  std::lock_guard lock(init_mutex());
  torch::manual_seed(seed_);
  if (spec_.arch == GeneratorArch::simple_conv) {
    net_ = std::make_shared<SimpleConvGenerator>(spec_.input.channels, spec_.width);
  } else {
    net_ = std::make_shared<UNetGenerator>(spec_.input.channels, spec_.width);
  }
}

torch::Tensor GeneratorModel::pattern(const torch::Tensor& pixels) const {
  if (pixels.dim() != 4 || pixels.size(1) != spec_.input.channels || pixels.size(2) != spec_.input.height ||
      pixels.size(3) != spec_.input.width) {
    throw ModelError("generator input shape mismatch");
  }
  return spec_.epsilon * torch::tanh(net_->raw(pixels / 127.5 - 1.0));
}

std::int64_t GeneratorModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : net_->parameters()) n += p.numel();
  return n;
}

void GeneratorModel::to(torch::Dtype dtype) { net_->to(dtype); }

GeneratorModel GeneratorModel::clone() const {
  GeneratorModel copy(spec_, seed_);
  copy.to(net_->parameters().front().scalar_type());
  torch::NoGradGuard guard;
  auto dst = copy.net_->named_parameters(true);
  for (const auto& item : net_->named_parameters(true)) dst[item.key()].copy_(item.value());
  return copy;
}

torch::Tensor generate_pattern(const GeneratorModel& generator, const torch::Tensor& pixels) {
  torch::NoGradGuard guard;
  generator.train(false);
  return generator.pattern(pixels);
}

torch::Tensor apply_pattern(const torch::Tensor& pixels, const torch::Tensor& pattern) {
  return torch::clamp(pixels + pattern, 0.0, 255.0);
}

std::vector<std::uint8_t> quantize_within_budget(const torch::Tensor& poisoned, std::span<const std::uint8_t> clean,
                                                 double epsilon) {
  auto hwc = poisoned.detach().to(torch::kFloat64).permute({1, 2, 0}).contiguous();
  if (static_cast<std::size_t>(hwc.numel()) != clean.size()) throw ModelError("quantize: size mismatch");
  const double* src = hwc.data_ptr<double>();
  const double radius = std::floor(epsilon);
  std::vector<std::uint8_t> out(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double lo = std::max(0.0, clean[i] - radius);
    const double hi = std::min(255.0, clean[i] + radius);
    out[i] = static_cast<std::uint8_t>(std::clamp(std::nearbyint(src[i]), lo, hi));
  }
  return out;
}

}  // namespace sslpoison
