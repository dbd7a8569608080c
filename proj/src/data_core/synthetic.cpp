#include "sslpoison/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "sslpoison/random.hpp"

namespace sslpoison {

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Membership of local coordinates (u, v), unit scale, for each silhouette.
bool inside(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::max(au, av) <= 0.82;
    case 2: return v >= -0.55 && v <= 1.0 - std::sqrt(3.0) * au;
    case 3: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    default: return au <= 1.0 && av <= 0.32;
  }
}

struct Rgb {
  double r, g, b;
};

double distance(const Rgb& a, const Rgb& b) {
  return std::sqrt((a.r - b.r) * (a.r - b.r) + (a.g - b.g) * (a.g - b.g) + (a.b - b.b) * (a.b - b.b));
}

Rgb from_hsv(double h, double s, double v) {
  const double c = v * s, hp = h / 60.0, x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0)), m = v - c;
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  return {255.0 * (r + m), 255.0 * (g + m), 255.0 * (b + m)};
}

ImageExample render(int label, std::uint64_t image_seed, const ToyShapesOptions& opt) {
  std::mt19937_64 rng(image_seed);
  auto unit = [&](std::mt19937_64& r) { return rnd::uniform01(r); };
  auto uniform = [&](double lo, double hi) { return rnd::uniform(rng, lo, hi); };
  auto color = [&]() { return Rgb{uniform(0, 255), uniform(0, 255), uniform(0, 255)}; };

  const int n = opt.image_size;
  const double scale = n / 32.0;

  // Background: two colours blended by a pair of low-frequency waves.
  const Rgb bg0 = color(), bg1 = color();
  const double f1x = uniform(-0.25, 0.25), f1y = uniform(-0.25, 0.25), p1 = uniform(0, 2 * kPi);
  const double f2x = uniform(-0.5, 0.5), f2y = uniform(-0.5, 0.5), p2 = uniform(0, 2 * kPi);
  const double wave_mix = uniform(0.0, 0.5);

  // Foreground hue is centred on a class-specific value, so colour is a
  // weak cue alongside the silhouette.
  auto class_color = [&]() {
    const double hue = std::fmod(label * 360.0 / 6.0 + uniform(-opt.hue_jitter, opt.hue_jitter) + 720.0, 360.0);
    return from_hsv(hue, uniform(0.5, 1.0), uniform(0.45, 1.0));
  };
  Rgb fg = class_color();
  for (int tries = 0; tries < 16 && distance(fg, bg0) < 90.0; ++tries) fg = class_color();
  const double shade = uniform(-0.25, 0.25);

  const double size = uniform(8.0, 12.0) * scale;
  const double cx = uniform(10.0, 22.0) * scale, cy = uniform(10.0, 22.0) * scale;
  const double angle = uniform(-1.0, 1.0) * opt.max_rotation * kPi / 180.0;
  const double ca = std::cos(angle), sa = std::sin(angle);

  const bool has_blob = unit(rng) < opt.distractor_rate;
  const Rgb blob = color();
  const double bx = uniform(2.0, 30.0) * scale, by = uniform(2.0, 30.0) * scale;
  const double br = uniform(1.5, 3.5) * scale;

  auto noise = [&](std::mt19937_64& r) { return opt.pixel_noise * rnd::normal(r); };

  ImageExample ex;
  ex.shape = {n, n, 3};
  ex.label = label;
  ex.pixels.resize(ex.shape.size());
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double t = 0.5 + 0.5 * ((1.0 - wave_mix) * std::sin(f1x * x + f1y * y + p1) +
                                    wave_mix * std::sin(f2x * x + f2y * y + p2));
      Rgb px{bg0.r + (bg1.r - bg0.r) * t, bg0.g + (bg1.g - bg0.g) * t, bg0.b + (bg1.b - bg0.b) * t};

      // 3x3 supersampled coverage of the rotated silhouette.
      int hits = 0;
      double v_sum = 0.0;
      for (int sy = 0; sy < 3; ++sy) {
        for (int sx = 0; sx < 3; ++sx) {
          const double dx = (x + (sx + 0.5) / 3.0 - cx) / size;
          const double dy = (y + (sy + 0.5) / 3.0 - cy) / size;
          const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
          if (inside(label, u, v)) {
            ++hits;
            v_sum += v;
          }
        }
      }
      if (hits > 0) {
        const double alpha = hits / 9.0;
        const double light = 1.0 + shade * (v_sum / hits);
        px.r += alpha * (fg.r * light - px.r);
        px.g += alpha * (fg.g * light - px.g);
        px.b += alpha * (fg.b * light - px.b);
      }
      if (has_blob) {
        const double d = std::hypot(x + 0.5 - bx, y + 0.5 - by);
        if (d <= br) px = blob;
      }
      const double vals[3] = {px.r, px.g, px.b};
      for (int c = 0; c < 3; ++c) {
        ex.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(vals[c] + noise(rng)), 0L, 255L));
      }
    }
  }
  return ex;
}

std::string padded(int i) {
  std::string s = std::to_string(i);
  return std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

}  // namespace

RawDataset make_toy_shapes(const ToyShapesOptions& options) {
  if (options.num_classes < 1 || options.num_classes > 6) {
    throw DataError("toy-shapes supports 1..6 classes");
  }
  RawDataset d;
  d.name = "toy-shapes";
  d.num_classes = options.num_classes;
  d.shape = {options.image_size, options.image_size, 3};
  auto fill = [&](std::vector<ImageExample>& out, int per_class, std::uint64_t stream,
                  const std::string& prefix) {
    const int total = per_class * options.num_classes;
    out.reserve(total);
    for (int i = 0; i < total; ++i) {
      // Interleave classes so any prefix of the list stays balanced.
      const int label = i % options.num_classes;
      auto ex = render(label, mix(mix(options.seed) ^ mix(stream * 0x100000000ULL + i)), options);
      ex.id = prefix + padded(i);
      out.push_back(std::move(ex));
    }
  };
  fill(d.train, options.train_per_class, 1, "train-");
  fill(d.test, options.test_per_class, 2, "test-");
  return d;
}

}  // namespace sslpoison
