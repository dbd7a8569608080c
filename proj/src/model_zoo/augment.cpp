#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "sslpoison/model_zoo.hpp"
#include "sslpoison/random.hpp"

namespace sslpoison {

namespace {

constexpr float kFill = 128.0F;

/// One C x H x W float image.
struct Plane {
  int c, h, w;
  float* data;

  float& at(int ch, int y, int x) { return data[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
};

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

void crop_flip(Plane img, std::mt19937_64& rng, const AugmentOptions& opt, std::vector<float>& scratch) {
  const int pad = opt.crop_padding;
  const int dy = static_cast<int>(rnd::below(rng, 2 * pad + 1)) - pad;
  const int dx = static_cast<int>(rnd::below(rng, 2 * pad + 1)) - pad;
  const bool flip = opt.horizontal_flip && rnd::uniform01(rng) < 0.5;
  scratch.assign(img.data, img.data + img.size());
  Plane src{img.c, img.h, img.w, scratch.data()};
  for (int ch = 0; ch < img.c; ++ch) {
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        const int sx = flip ? img.w - 1 - x : x;
        img.at(ch, y, x) = src.at(ch, reflect(y + dy, img.h), reflect(sx + dx, img.w));
      }
    }
  }
}

/// Inverse-mapped affine warp with nearest sampling and grey fill.
void affine(Plane img, std::array<double, 6> m, std::vector<float>& scratch) {
  scratch.assign(img.data, img.data + img.size());
  Plane src{img.c, img.h, img.w, scratch.data()};
  const double cx = (img.w - 1) / 2.0, cy = (img.h - 1) / 2.0;
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      const double u = x - cx, v = y - cy;
      const int sx = static_cast<int>(std::lround(m[0] * u + m[1] * v + m[2] + cx));
      const int sy = static_cast<int>(std::lround(m[3] * u + m[4] * v + m[5] + cy));
      const bool in = sx >= 0 && sx < img.w && sy >= 0 && sy < img.h;
      for (int ch = 0; ch < img.c; ++ch) img.at(ch, y, x) = in ? src.at(ch, sy, sx) : kFill;
    }
  }
}

void blend_with(Plane img, const std::vector<float>& other, float factor) {
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = other[i] + factor * (img.data[i] - other[i]);
}

std::vector<float> grayscale(Plane img) {
  std::vector<float> g(img.size());
  const std::size_t hw = static_cast<std::size_t>(img.h) * img.w;
  for (std::size_t p = 0; p < hw; ++p) {
    float v = img.data[p];
    if (img.c == 3) v = 0.299F * img.data[p] + 0.587F * img.data[hw + p] + 0.114F * img.data[2 * hw + p];
    for (int ch = 0; ch < img.c; ++ch) g[ch * hw + p] = v;
  }
  return g;
}

void clamp_round(Plane img) {
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = std::clamp(std::nearbyint(img.data[i]), 0.0F, 255.0F);
}

void strong_op(Plane img, int op, double m, std::mt19937_64& rng, std::vector<float>& scratch) {
  const double sign = rnd::uniform01(rng) < 0.5 ? -1.0 : 1.0;
  const std::size_t hw = static_cast<std::size_t>(img.h) * img.w;
  switch (op) {
    case 0: break;  // identity
    case 1: {       // autocontrast
      for (int ch = 0; ch < img.c; ++ch) {
        float lo = 255.0F, hi = 0.0F;
        for (std::size_t p = 0; p < hw; ++p) {
          lo = std::min(lo, img.data[ch * hw + p]);
          hi = std::max(hi, img.data[ch * hw + p]);
        }
        if (hi - lo < 1.0F) continue;
        for (std::size_t p = 0; p < hw; ++p) img.data[ch * hw + p] = (img.data[ch * hw + p] - lo) * 255.0F / (hi - lo);
      }
      break;
    }
    case 2: {  // brightness
      const std::vector<float> black(img.size(), 0.0F);
      blend_with(img, black, static_cast<float>(1.0 + sign * 0.9 * m));
      break;
    }
    case 3:  // colour saturation
      blend_with(img, grayscale(img), static_cast<float>(1.0 + sign * 0.9 * m));
      break;
    case 4: {  // contrast
      const auto g = grayscale(img);
      double mean = 0.0;
      for (std::size_t p = 0; p < hw; ++p) mean += g[p];
      blend_with(img, std::vector<float>(img.size(), static_cast<float>(mean / hw)), static_cast<float>(1.0 + sign * 0.9 * m));
      break;
    }
    case 5: {  // equalize
      clamp_round(img);
      for (int ch = 0; ch < img.c; ++ch) {
        std::array<int, 256> hist{};
        for (std::size_t p = 0; p < hw; ++p) ++hist[static_cast<int>(img.data[ch * hw + p])];
        std::array<float, 256> lut{};
        int cum = 0;
        const int first = *std::find_if(hist.begin(), hist.end(), [](int v) { return v > 0; });
        for (int v = 0; v < 256; ++v) {
          cum += hist[v];
          lut[v] = hw > static_cast<std::size_t>(first)
                       ? 255.0F * static_cast<float>(cum - first) / static_cast<float>(hw - first)
                       : static_cast<float>(v);
        }
        for (std::size_t p = 0; p < hw; ++p) img.data[ch * hw + p] = lut[static_cast<int>(img.data[ch * hw + p])];
      }
      break;
    }
    case 6: {  // posterize
      clamp_round(img);
      const int bits = 8 - static_cast<int>(std::lround(4.0 * m));
      const int mask = ~((1 << (8 - bits)) - 1) & 0xff;
      for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = static_cast<float>(static_cast<int>(img.data[i]) & mask);
      break;
    }
    case 7: {  // rotate
      const double a = sign * 30.0 * m * std::numbers::pi / 180.0;
      affine(img, {std::cos(a), std::sin(a), 0.0, -std::sin(a), std::cos(a), 0.0}, scratch);
      break;
    }
    case 8: {  // sharpness: blend with a 3x3 smoothed copy
      std::vector<float> smooth(img.data, img.data + img.size());
      Plane s{img.c, img.h, img.w, smooth.data()};
      for (int ch = 0; ch < img.c; ++ch) {
        for (int y = 1; y + 1 < img.h; ++y) {
          for (int x = 1; x + 1 < img.w; ++x) {
            float acc = 0.0F;
            for (int ky = -1; ky <= 1; ++ky) {
              for (int kx = -1; kx <= 1; ++kx) acc += img.at(ch, y + ky, x + kx) * (ky == 0 && kx == 0 ? 5.0F : 1.0F);
            }
            s.at(ch, y, x) = acc / 13.0F;
          }
        }
      }
      blend_with(img, smooth, static_cast<float>(1.0 + sign * 0.9 * m));
      break;
    }
    case 9: affine(img, {1.0, sign * 0.3 * m, 0.0, 0.0, 1.0, 0.0}, scratch); break;   // shear x
    case 10: affine(img, {1.0, 0.0, 0.0, sign * 0.3 * m, 1.0, 0.0}, scratch); break;  // shear y
    case 11: {  // solarize
      const float threshold = static_cast<float>(256.0 - 256.0 * m);
      for (std::size_t i = 0; i < img.size(); ++i) {
        if (img.data[i] >= threshold) img.data[i] = 255.0F - img.data[i];
      }
      break;
    }
    case 12: affine(img, {1.0, 0.0, sign * 0.3 * m * img.w, 0.0, 1.0, 0.0}, scratch); break;  // translate x
    default: affine(img, {1.0, 0.0, 0.0, 0.0, 1.0, sign * 0.3 * m * img.h}, scratch); break;  // translate y
  }
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = std::clamp(img.data[i], 0.0F, 255.0F);
}

void cutout(Plane img, std::mt19937_64& rng, double max_fraction) {
  const int side = static_cast<int>(rnd::uniform(rng, 0.0, max_fraction) * img.w);
  const int cy = static_cast<int>(rnd::below(rng, img.h));
  const int cx = static_cast<int>(rnd::below(rng, img.w));
  for (int y = std::max(0, cy - side / 2); y < std::min(img.h, cy + (side + 1) / 2); ++y) {
    for (int x = std::max(0, cx - side / 2); x < std::min(img.w, cx + (side + 1) / 2); ++x) {
      for (int ch = 0; ch < img.c; ++ch) img.at(ch, y, x) = kFill;
    }
  }
}

constexpr int kStrongOps = 14;

}  // namespace

AugmentKind augment_kind_from_string(const std::string& s) {
  if (s == "none") return AugmentKind::none;
  if (s == "weak") return AugmentKind::weak;
  if (s == "strong") return AugmentKind::strong;
  throw ModelError("unknown augmentation kind: " + s);
}

torch::Tensor augment(const torch::Tensor& pixels, AugmentKind kind, std::mt19937_64& rng,
                      const AugmentOptions& options) {
  if (kind == AugmentKind::none) return pixels;
  auto out = pixels.detach().to(torch::kFloat32).contiguous().clone();
  const int n = static_cast<int>(out.size(0));
  const int c = static_cast<int>(out.size(1)), h = static_cast<int>(out.size(2)), w = static_cast<int>(out.size(3));
  float* base = out.data_ptr<float>();
  std::vector<float> scratch;
  for (int i = 0; i < n; ++i) {
    Plane img{c, h, w, base + static_cast<std::size_t>(i) * c * h * w};
    crop_flip(img, rng, options, scratch);
    if (kind == AugmentKind::strong) {
      for (int k = 0; k < options.strong_ops; ++k) {
        const int op = static_cast<int>(rnd::below(rng, kStrongOps));
        strong_op(img, op, rnd::uniform(rng, 0.05, 1.0), rng, scratch);
      }
      cutout(img, rng, options.cutout_fraction);
    }
  }
  return out.to(pixels.scalar_type());
}

}  // namespace sslpoison
