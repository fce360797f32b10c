#include "advit/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "advit/rng.hpp"

namespace advit {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_range(double lo, double hi, const char* what) {
  if (!(lo > 0.0) || !(hi > 0.0) || lo > hi)
    throw Error(std::string("augment policy: ") + what +
                " must be a nonempty positive interval");
}

int image_h(const Tensor& img) { return img.extent(0); }
int image_w(const Tensor& img) { return img.extent(1); }
int image_c(const Tensor& img) { return img.extent(2); }

void require_image(const Tensor& img, const char* who) {
  if (img.rank() != 3)
    throw Error(std::string(who) + ": expected an (H, W, C) image, got " +
                shape_str(img.shape));
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void clamp_all(Tensor& img) {
  for (double& v : img.data) v = clamp01(v);
}

// Beta(alpha, alpha) via two gamma draws.
double beta_sample(double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng);
  const double b = gamma(rng);
  const double s = a + b;
  return s > 0.0 ? a / s : 0.5;
}

std::vector<int> pairing_permutation(int n, std::mt19937_64& rng) {
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

Tensor slice_image(const Tensor& images, int index) {
  const int h = images.extent(1), w = images.extent(2), c = images.extent(3);
  Tensor out(Shape{h, w, c});
  const size_t stride = static_cast<size_t>(h) * w * c;
  std::copy_n(images.data.begin() + index * stride, stride, out.data.begin());
  return out;
}

void store_image(Tensor& images, int index, const Tensor& img) {
  const size_t stride = img.data.size();
  std::copy_n(img.data.begin(), stride,
              images.data.begin() + index * stride);
}

// Bilinear lookup at fractional source coordinates; samples falling outside
// the image use `fill`.
double sample_bilinear(const Tensor& img, double sy, double sx, int c,
                       double fill) {
  const int h = image_h(img), w = image_w(img);
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const double fy = sy - y0, fx = sx - x0;
  auto at = [&](int y, int x) {
    if (y < 0 || y >= h || x < 0 || x >= w) return fill;
    return img(y, x, c);
  };
  return at(y0, x0) * (1.0 - fy) * (1.0 - fx) +
         at(y0, x0 + 1) * (1.0 - fy) * fx +
         at(y0 + 1, x0) * fy * (1.0 - fx) +
         at(y0 + 1, x0 + 1) * fy * fx;
}

// Inverse-mapped affine warp: source = A * (dest - center) + center + shift.
Tensor warp_affine(const Tensor& img, double a, double b, double c, double d,
                   double shift_x, double shift_y, double fill) {
  const int h = image_h(img), w = image_w(img), ch = image_c(img);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  Tensor out(img.shape);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = a * dx + b * dy + cx + shift_x;
      const double sy = c * dx + d * dy + cy + shift_y;
      for (int k = 0; k < ch; ++k)
        out(y, x, k) = clamp01(sample_bilinear(img, sy, sx, k, fill));
    }
  }
  return out;
}

constexpr double kGeometricFill = 0.5;

Tensor ra_rotate(const Tensor& img, double level, double sign) {
  const double theta = sign * level * (30.0 * kPi / 180.0);
  if (theta == 0.0) return img;
  const double co = std::cos(theta), si = std::sin(theta);
  return warp_affine(img, co, -si, si, co, 0.0, 0.0, kGeometricFill);
}

Tensor ra_translate(const Tensor& img, double level, double sign, bool on_x) {
  const double frac = sign * level * 0.45;
  if (frac == 0.0) return img;
  const double sx = on_x ? frac * image_w(img) : 0.0;
  const double sy = on_x ? 0.0 : frac * image_h(img);
  return warp_affine(img, 1.0, 0.0, 0.0, 1.0, sx, sy, kGeometricFill);
}

Tensor ra_shear(const Tensor& img, double level, double sign, bool on_x) {
  const double s = sign * level * 0.3;
  if (s == 0.0) return img;
  if (on_x) return warp_affine(img, 1.0, s, 0.0, 1.0, 0.0, 0.0, kGeometricFill);
  return warp_affine(img, 1.0, 0.0, s, 1.0, 0.0, 0.0, kGeometricFill);
}

Tensor ra_brightness(const Tensor& img, double factor) {
  Tensor out = img;
  for (double& v : out.data) v = clamp01(v * factor);
  return out;
}

double image_mean(const Tensor& img) {
  double m = 0.0;
  for (double v : img.data) m += v;
  return img.data.empty() ? 0.0 : m / img.data.size();
}

Tensor ra_contrast(const Tensor& img, double factor) {
  const double m = image_mean(img);
  Tensor out = img;
  for (double& v : out.data) v = clamp01(m + factor * (v - m));
  return out;
}

// 3x3 smoothing with a weighted center; borders are left as-is, matching the
// usual "kernel only where it fits" convention.
Tensor smooth3x3(const Tensor& img) {
  const int h = image_h(img), w = image_w(img), c = image_c(img);
  Tensor out = img;
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x)
      for (int k = 0; k < c; ++k) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            s += img(y + dy, x + dx, k) * ((dy == 0 && dx == 0) ? 5.0 : 1.0);
        out(y, x, k) = s / 13.0;
      }
  return out;
}

Tensor ra_sharpness(const Tensor& img, double factor) {
  Tensor blur = smooth3x3(img);
  Tensor out = img;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] =
        clamp01(blur.data[i] + factor * (img.data[i] - blur.data[i]));
  return out;
}

Tensor ra_posterize(const Tensor& img, double level) {
  const int bits = 8 - static_cast<int>(std::lround(4.0 * level));
  if (bits >= 8) return img;  // keeping all bits is exactly a no-op
  const int mask = 0xFF << (8 - bits);
  Tensor out = img;
  for (double& v : out.data) {
    int u = static_cast<int>(std::lround(clamp01(v) * 255.0));
    v = (u & mask) / 255.0;
  }
  return out;
}

Tensor ra_solarize(const Tensor& img, double level) {
  const double threshold = 1.0 - level;
  Tensor out = img;
  for (double& v : out.data)
    if (v > threshold) v = 1.0 - v;
  return out;
}

double jitter_factor(double strength, std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(1.0 - strength,
                                                1.0 + strength)(rng);
}

Tensor color_saturation(const Tensor& img, double factor) {
  const int h = image_h(img), w = image_w(img), c = image_c(img);
  Tensor out = img;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gray = 0.0;
      for (int k = 0; k < c; ++k) gray += img(y, x, k);
      gray /= c;
      for (int k = 0; k < c; ++k)
        out(y, x, k) = clamp01(gray + factor * (img(y, x, k) - gray));
    }
  return out;
}

Tensor hflip(const Tensor& img) {
  const int h = image_h(img), w = image_w(img), c = image_c(img);
  Tensor out(img.shape);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) out(y, x, k) = img(y, w - 1 - x, k);
  return out;
}

// Bilinear resample of a crop window back to the full image size. Sample
// coordinates are clamped to the window so edges repeat rather than bleed.
Tensor resize_crop(const Tensor& img, int y0, int x0, int ch, int cw) {
  const int h = image_h(img), w = image_w(img), c = image_c(img);
  Tensor out(img.shape);
  const double sy = static_cast<double>(ch) / h;
  const double sx = static_cast<double>(cw) / w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double src_y = y0 + (y + 0.5) * sy - 0.5;
      double src_x = x0 + (x + 0.5) * sx - 0.5;
      src_y = std::clamp(src_y, static_cast<double>(y0),
                         static_cast<double>(y0 + ch - 1));
      src_x = std::clamp(src_x, static_cast<double>(x0),
                         static_cast<double>(x0 + cw - 1));
      for (int k = 0; k < c; ++k)
        out(y, x, k) = clamp01(sample_bilinear(img, src_y, src_x, k, 0.0));
    }
  return out;
}

Tensor random_resized_crop(const Tensor& img, const AugPolicy& policy,
                           std::mt19937_64& rng) {
  const int h = image_h(img), w = image_w(img);
  std::uniform_real_distribution<double> scale_dist(policy.crop_scale_lo,
                                                    policy.crop_scale_hi);
  std::uniform_real_distribution<double> logratio_dist(
      std::log(policy.crop_ratio_lo), std::log(policy.crop_ratio_hi));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = scale_dist(rng) * h * w;
    const double ratio = std::exp(logratio_dist(rng));
    const int cw = static_cast<int>(std::lround(std::sqrt(area * ratio)));
    const int ch = static_cast<int>(std::lround(std::sqrt(area / ratio)));
    if (cw < 1 || ch < 1 || cw > w || ch > h) continue;
    const int x0 = std::uniform_int_distribution<int>(0, w - cw)(rng);
    const int y0 = std::uniform_int_distribution<int>(0, h - ch)(rng);
    return resize_crop(img, y0, x0, ch, cw);
  }
  const int side = std::min(h, w);
  return resize_crop(img, (h - side) / 2, (w - side) / 2, side, side);
}

}  // namespace

void AugPolicy::validate() const {
  if (mixup && !(mixup_alpha > 0.0))
    throw Error("augment policy: mixup_alpha must be positive");
  if (cutmix && !(cutmix_alpha > 0.0))
    throw Error("augment policy: cutmix_alpha must be positive");
  if (ra_ops < 0) throw Error("augment policy: ra_ops must be >= 0");
  if (ra_magnitude < 0.0 || ra_magnitude > 30.0)
    throw Error("augment policy: ra_magnitude must be in [0, 30]");
  if (erase_prob < 0.0 || erase_prob > 1.0)
    throw Error("augment policy: erase_prob must be in [0, 1]");
  if (!(erase_area_lo > 0.0) || !(erase_area_hi < 1.0) ||
      erase_area_lo > erase_area_hi)
    throw Error("augment policy: erase area range must lie inside (0, 1)");
  check_range(erase_aspect_lo, erase_aspect_hi, "erase aspect range");
  if (!(erase_std >= 0.0))
    throw Error("augment policy: erase_std must be >= 0");
  if (flip_prob < 0.0 || flip_prob > 1.0)
    throw Error("augment policy: flip_prob must be in [0, 1]");
  check_range(crop_scale_lo, crop_scale_hi, "crop scale range");
  check_range(crop_ratio_lo, crop_ratio_hi, "crop ratio range");
  if (jitter < 0.0 || jitter >= 1.0)
    throw Error("augment policy: jitter strength must be in [0, 1)");
}

AugPolicy canonical_policy() {
  AugPolicy p;
  p.mixup = p.cutmix = p.randaugment = p.random_erasing = true;
  return p;
}

AugPolicy light_policy() { return AugPolicy{}; }

void LabeledBatch::validate() const {
  if (images.rank() != 4)
    throw Error("batch: images must be (B, H, W, C), got " +
                shape_str(images.shape));
  if (labels.rank() != 2)
    throw Error("batch: labels must be (B, classes), got " +
                shape_str(labels.shape));
  if (images.extent(0) != labels.extent(0))
    throw Error("batch: image and label counts differ");
  for (double v : images.data)
    if (!(v >= 0.0 && v <= 1.0))
      throw Error("batch: image values must lie in [0, 1]");
  const int b = labels.extent(0), k = labels.extent(1);
  for (int i = 0; i < b; ++i) {
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      if (labels(i, j) < 0.0)
        throw Error("batch: label vectors must be nonnegative");
      sum += labels(i, j);
    }
    if (std::fabs(sum - 1.0) > 1e-9)
      throw Error("batch: label vectors must sum to 1");
  }
}

LabeledBatch mixup(const LabeledBatch& batch, double lambda,
                   std::mt19937_64& rng) {
  if (lambda < 0.0 || lambda > 1.0)
    throw Error("mixup: lambda must be in [0, 1]");
  if (batch.batch_size() < 2) {
    std::fprintf(stderr, "mixup: batch of size %d left unchanged\n",
                 batch.batch_size());
    return batch;
  }
  const std::vector<int> perm = pairing_permutation(batch.batch_size(), rng);
  LabeledBatch out = batch;
  const size_t stride = batch.images.data.size() / batch.batch_size();
  for (int i = 0; i < batch.batch_size(); ++i) {
    const double* x1 = batch.images.data.data() + i * stride;
    const double* x2 = batch.images.data.data() + perm[i] * stride;
    double* dst = out.images.data.data() + i * stride;
    for (size_t p = 0; p < stride; ++p) {
      const double mixed = lambda * x1[p] + (1.0 - lambda) * x2[p];
      // Guard rounding so every pixel stays between its two sources.
      dst[p] = std::clamp(mixed, std::min(x1[p], x2[p]),
                          std::max(x1[p], x2[p]));
    }
  }
  const int k = batch.labels.extent(1);
  for (int i = 0; i < batch.batch_size(); ++i)
    for (int j = 0; j < k; ++j)
      out.labels(i, j) = lambda * batch.labels(i, j) +
                         (1.0 - lambda) * batch.labels(perm[i], j);
  return out;
}

CutmixBox sample_cutmix_box(int image_h, int image_w, double lambda,
                            std::mt19937_64& rng) {
  if (lambda < 0.0 || lambda > 1.0)
    throw Error("cutmix: lambda must be in [0, 1]");
  const double side = std::sqrt(1.0 - lambda);
  CutmixBox box;
  box.h = static_cast<int>(std::floor(image_h * side));
  box.w = static_cast<int>(std::floor(image_w * side));
  if (box.h > 0 && box.w > 0) {
    box.y0 = std::uniform_int_distribution<int>(0, image_h - box.h)(rng);
    box.x0 = std::uniform_int_distribution<int>(0, image_w - box.w)(rng);
  }
  return box;
}

LabeledBatch cutmix(const LabeledBatch& batch, double lambda,
                    std::mt19937_64& rng) {
  const int b = batch.batch_size();
  if (b < 1) return batch;
  const int h = batch.images.extent(1), w = batch.images.extent(2),
            c = batch.images.extent(3);
  const std::vector<int> perm = pairing_permutation(b, rng);
  const CutmixBox box = sample_cutmix_box(h, w, lambda, rng);
  const double a = static_cast<double>(box.area()) / (h * w);

  // Box pixels keep the image's own content; everything else comes from the
  // partner. Labels use the realized area weight so they stay on the simplex.
  LabeledBatch out = batch;
  for (int i = 0; i < b; ++i) {
    for (int y = 0; y < h; ++y) {
      const bool in_y = y >= box.y0 && y < box.y0 + box.h;
      for (int x = 0; x < w; ++x) {
        const bool inside = in_y && x >= box.x0 && x < box.x0 + box.w;
        const int src = inside ? i : perm[i];
        for (int k = 0; k < c; ++k)
          out.images(i, y, x, k) = batch.images(src, y, x, k);
      }
    }
    for (int j = 0; j < batch.labels.extent(1); ++j)
      out.labels(i, j) = a * batch.labels(i, j) +
                         (1.0 - a) * batch.labels(perm[i], j);
  }
  return out;
}

Tensor random_erasing(const Tensor& image, const AugPolicy& policy,
                      std::mt19937_64& rng) {
  require_image(image, "random_erasing");
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) >=
      policy.erase_prob)
    return image;
  const int h = image_h(image), w = image_w(image), c = image_c(image);
  std::uniform_real_distribution<double> area_dist(policy.erase_area_lo,
                                                   policy.erase_area_hi);
  std::uniform_real_distribution<double> logaspect_dist(
      std::log(policy.erase_aspect_lo), std::log(policy.erase_aspect_hi));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = area_dist(rng) * h * w;
    const double aspect = std::exp(logaspect_dist(rng));
    const int eh = static_cast<int>(std::lround(std::sqrt(area * aspect)));
    const int ew = static_cast<int>(std::lround(std::sqrt(area / aspect)));
    if (eh < 1 || ew < 1 || eh > h || ew > w) continue;
    const int y0 = std::uniform_int_distribution<int>(0, h - eh)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, w - ew)(rng);
    Tensor out = image;
    std::normal_distribution<double> noise(policy.erase_mean,
                                           policy.erase_std);
    for (int y = y0; y < y0 + eh; ++y)
      for (int x = x0; x < x0 + ew; ++x)
        for (int k = 0; k < c; ++k)
          out(y, x, k) = policy.erase_fill == EraseFill::Zeros
                             ? 0.0
                             : clamp01(noise(rng));
    return out;
  }
  return image;
}

int rand_augment_transform_count() { return 10; }

Tensor rand_augment(const Tensor& image, const AugPolicy& policy,
                    std::mt19937_64& rng, std::vector<int>* chosen) {
  require_image(image, "rand_augment");
  const double level = policy.ra_magnitude / 30.0;
  Tensor out = image;
  std::uniform_int_distribution<int> pick(0,
                                          rand_augment_transform_count() - 1);
  std::uniform_int_distribution<int> coin(0, 1);
  for (int slot = 0; slot < policy.ra_ops; ++slot) {
    const int op = pick(rng);
    if (chosen) chosen->push_back(op);
    const double sign = coin(rng) ? 1.0 : -1.0;
    switch (op) {
      case 0: out = ra_rotate(out, level, sign); break;
      case 1: out = ra_translate(out, level, sign, true); break;
      case 2: out = ra_translate(out, level, sign, false); break;
      case 3: out = ra_shear(out, level, sign, true); break;
      case 4: out = ra_shear(out, level, sign, false); break;
      case 5: out = ra_brightness(out, 1.0 + sign * 0.9 * level); break;
      case 6: out = ra_contrast(out, 1.0 + sign * 0.9 * level); break;
      case 7: out = ra_sharpness(out, 1.0 + sign * 0.9 * level); break;
      case 8: out = ra_posterize(out, level); break;
      case 9: out = ra_solarize(out, level); break;
      default: throw Error("rand_augment: bad transform index");
    }
  }
  return out;
}

Tensor basic_augment(const Tensor& image, const AugPolicy& policy,
                     std::mt19937_64& rng) {
  require_image(image, "basic_augment");
  Tensor out = image;
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < policy.flip_prob)
    out = hflip(out);
  out = random_resized_crop(out, policy, rng);
  if (policy.jitter > 0.0) {
    out = ra_brightness(out, jitter_factor(policy.jitter, rng));
    out = ra_contrast(out, jitter_factor(policy.jitter, rng));
    out = color_saturation(out, jitter_factor(policy.jitter, rng));
  }
  clamp_all(out);
  return out;
}

LabeledBatch augment_batch(const LabeledBatch& batch, const AugPolicy& policy,
                           std::uint64_t seed) {
  policy.validate();
  batch.validate();
  LabeledBatch out = batch;
  for (int i = 0; i < batch.batch_size(); ++i) {
    auto rng = make_rng(derive_seed(seed, 0xA06, static_cast<size_t>(i)));
    Tensor img = slice_image(out.images, i);
    img = basic_augment(img, policy, rng);
    if (policy.randaugment) img = rand_augment(img, policy, rng);
    if (policy.random_erasing) img = random_erasing(img, policy, rng);
    store_image(out.images, i, img);
  }
  auto batch_rng = make_rng(derive_seed(seed, 0xBA7C4));
  bool do_mixup = policy.mixup, do_cutmix = policy.cutmix;
  if (do_mixup && do_cutmix) {
    if (std::uniform_int_distribution<int>(0, 1)(batch_rng))
      do_mixup = false;
    else
      do_cutmix = false;
  }
  if (do_mixup)
    out = mixup(out, beta_sample(policy.mixup_alpha, batch_rng), batch_rng);
  else if (do_cutmix)
    out = cutmix(out, beta_sample(policy.cutmix_alpha, batch_rng), batch_rng);
  return out;
}

AugPipeline compose_policy(const AugPolicy& policy) {
  policy.validate();
  return [policy](const LabeledBatch& batch, std::uint64_t seed) {
    return augment_batch(batch, policy, seed);
  };
}

}  // namespace advit
