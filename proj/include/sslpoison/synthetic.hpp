// Procedurally generated shape-classification images ("toy-shapes").
//
// Each class is one silhouette (disk, square, triangle, cross, ring, bar)
// drawn with a class-centred hue, random scale, rotation and position over a
// smooth random-texture background, plus a small distractor blob and pixel
// noise.
#pragma once

#include <cstdint>

#include "sslpoison/data_core.hpp"

namespace sslpoison {

struct ToyShapesOptions {
  int num_classes = 4;  ///< 1..6
  int train_per_class = 1000;
  int test_per_class = 250;
  int image_size = 32;
  double pixel_noise = 8.0;  ///< gaussian sigma, pixel units
  double hue_jitter = 40.0;  ///< degrees around the class hue; 180 is uninformative
  double max_rotation = 20.0;  ///< degrees, symmetric
  double distractor_rate = 0.5;
  std::uint64_t seed = 0;
};

RawDataset make_toy_shapes(const ToyShapesOptions& options);

}  // namespace sslpoison
