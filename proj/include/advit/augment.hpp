#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "advit/tensor.hpp"

namespace advit {

enum class EraseFill { Zeros, Normal };

// Augmentation policy: basic transforms always run; the four heavy
// augmentations are individually switchable so every on/off combination of
// the ablation grid is expressible.
struct AugPolicy {
  bool mixup = false;
  double mixup_alpha = 1.0;  // Beta(alpha, alpha) for the mixing weight
  bool cutmix = false;
  double cutmix_alpha = 1.0;

  bool randaugment = false;
  int ra_ops = 2;            // transforms applied per image
  double ra_magnitude = 9.0;  // on the conventional 0-30 scale

  bool random_erasing = false;
  double erase_prob = 0.25;
  double erase_area_lo = 0.02, erase_area_hi = 1.0 / 3.0;
  double erase_aspect_lo = 0.3, erase_aspect_hi = 10.0 / 3.0;
  EraseFill erase_fill = EraseFill::Zeros;
  double erase_mean = 0.5, erase_std = 0.25;  // Normal fill moments

  double flip_prob = 0.5;
  double crop_scale_lo = 0.08, crop_scale_hi = 1.0;
  double crop_ratio_lo = 0.75, crop_ratio_hi = 4.0 / 3.0;
  double jitter = 0.4;  // +/- multiplicative color jitter strength

  void validate() const;  // throws Error on bad ranges
};

// Everything heavy on (the strong recipe) / everything heavy off (the light
// recipe); basic augmentations are shared.
AugPolicy canonical_policy();
AugPolicy light_policy();

// A batch of images (B, H, W, C) in [0,1] with per-image label probability
// vectors (B, num_classes); mixing ops produce soft labels.
struct LabeledBatch {
  Tensor images;
  Tensor labels;

  int batch_size() const { return images.rank() ? images.extent(0) : 0; }
  void validate() const;  // shapes, pixel range, label simplex within 1e-9
};

// Convex combination of the batch with a seeded permutation of itself:
// lambda * X + (1 - lambda) * X[perm], same for labels. A batch of fewer
// than two images is returned unchanged (with a warning on stderr).
LabeledBatch mixup(const LabeledBatch& batch, double lambda,
                   std::mt19937_64& rng);

struct CutmixBox {
  int y0 = 0, x0 = 0, h = 0, w = 0;  // always inside the image
  int area() const { return h * w; }
};
// Box of size floor(H*sqrt(1-lambda)) x floor(W*sqrt(1-lambda)), placed
// uniformly among the positions where it fits entirely inside the image.
CutmixBox sample_cutmix_box(int image_h, int image_w, double lambda,
                            std::mt19937_64& rng);

// Pixels inside the sampled box come from the image itself, the rest from a
// seeded partner permutation; labels are re-weighted by the realized box
// area fraction: a * y + (1 - a) * y[perm] with a = box pixels / (H * W).
LabeledBatch cutmix(const LabeledBatch& batch, double lambda,
                    std::mt19937_64& rng);

// Occludes one random rectangle (area fraction and aspect drawn from the
// policy ranges) with zeros or clamped normal noise, with probability
// policy.erase_prob; otherwise returns the image unchanged.
Tensor random_erasing(const Tensor& image, const AugPolicy& policy,
                      std::mt19937_64& rng);

// Number of distinct transforms rand_augment chooses from.
int rand_augment_transform_count();
// Applies policy.ra_ops uniformly-chosen transforms (rotate, translate x/y,
// shear x/y, brightness, contrast, sharpness, posterize, solarize) at
// strength policy.ra_magnitude / 30. `chosen`, when given, records the
// picked transform indices.
Tensor rand_augment(const Tensor& image, const AugPolicy& policy,
                    std::mt19937_64& rng, std::vector<int>* chosen = nullptr);

// Horizontal flip, random resized crop (scale/ratio from the policy, 10
// placement tries, center fallback), then multiplicative color jitter.
Tensor basic_augment(const Tensor& image, const AugPolicy& policy,
                     std::mt19937_64& rng);

// Full pipeline over a batch: basic always, then RandAugment and random
// erasing per image, then MixUp/CutMix per batch (a coin picks one when both
// are enabled). Deterministic given (policy, seed); per-image randomness
// comes from seeds derived per index, so image order does not leak between
// images.
LabeledBatch augment_batch(const LabeledBatch& batch, const AugPolicy& policy,
                           std::uint64_t seed);

using AugPipeline =
    std::function<LabeledBatch(const LabeledBatch&, std::uint64_t seed)>;
AugPipeline compose_policy(const AugPolicy& policy);

}  // namespace advit
