#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vqseg/errors.hpp"
#include "vqseg/image_io.hpp"
#include "vqseg/losses.hpp"
#include "vqseg/palette.hpp"
#include "vqseg/rng.hpp"
#include "vqseg/tensor.hpp"

namespace vqseg {

/// One image/labelmap pair. The image is CHW in [0, 1] before normalization.
template <typename T>
struct SegSample {
  int h = 0, w = 0;
  std::vector<T> image;         // (3, h, w)
  std::vector<int32_t> labels;  // (h, w)
  std::string id;

  T& px(int c, int y, int x) {
    return image[size_t((int64_t(c) * h + y) * w + x)];
  }
  T px(int c, int y, int x) const {
    return image[size_t((int64_t(c) * h + y) * w + x)];
  }
  int32_t& lab(int y, int x) { return labels[size_t(int64_t(y) * w + x)]; }
  int32_t lab(int y, int x) const {
    return labels[size_t(int64_t(y) * w + x)];
  }
};

struct Normalization {
  std::array<double, 3> mean = {0, 0, 0};
  std::array<double, 3> stddev = {1, 1, 1};
};

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

/// Loads root/<split>/{images,labels}/<id>.png pairs in lexicographic id
/// order. Labels must be single-channel 8-bit index maps of the same size as
/// their image; 255 passes through as the ignore label. Images are scaled to
/// [0,1] and normalized per channel.
template <typename T>
std::vector<SegSample<T>> load_dataset(const std::string& root,
                                       const std::string& split,
                                       const Normalization& norm = {}) {
  namespace fs = std::filesystem;
  const fs::path img_dir = fs::path(root) / split / "images";
  const fs::path lab_dir = fs::path(root) / split / "labels";
  if (!fs::is_directory(img_dir) || !fs::is_directory(lab_dir))
    throw DataError("dataset split " + (fs::path(root) / split).string() +
                    " must contain images/ and labels/ directories");

  auto list_ids = [](const fs::path& dir) {
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png")
        ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  const auto img_ids = list_ids(img_dir);
  const auto lab_ids = list_ids(lab_dir);
  if (img_ids != lab_ids) {
    for (const auto& id : img_ids)
      if (!std::binary_search(lab_ids.begin(), lab_ids.end(), id))
        throw DataError("dataset: missing label for image '" + id + "'");
    for (const auto& id : lab_ids)
      if (!std::binary_search(img_ids.begin(), img_ids.end(), id))
        throw DataError("dataset: missing image for label '" + id + "'");
  }

  std::vector<SegSample<T>> samples;
  samples.reserve(img_ids.size());
  for (const auto& id : img_ids) {
    Image8 img = read_png((img_dir / (id + ".png")).string());
    Image8 lab = read_png((lab_dir / (id + ".png")).string());
    if (img.channels != 3)
      throw DataError("dataset: image '" + id + "' is not RGB");
    if (lab.channels != 1)
      throw DataError("dataset: label map '" + id +
                      "' is not single-channel");
    if (img.h != lab.h || img.w != lab.w)
      throw DataError("dataset: size mismatch for '" + id + "': image " +
                      std::to_string(img.w) + "x" + std::to_string(img.h) +
                      " vs labels " + std::to_string(lab.w) + "x" +
                      std::to_string(lab.h));
    SegSample<T> s;
    s.h = img.h;
    s.w = img.w;
    s.id = id;
    s.image.resize(size_t(3) * img.h * img.w);
    s.labels.resize(size_t(img.h) * img.w);
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        for (int c = 0; c < 3; ++c)
          s.px(c, y, x) = T((double(img.at(y, x, c)) / 255.0 -
                             norm.mean[size_t(c)]) /
                            norm.stddev[size_t(c)]);
        s.lab(y, x) = lab.at(y, x, 0);
      }
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double scale_min = 0.5, scale_max = 2.0;
  int crop_h = 64, crop_w = 64;
  double hflip_prob = 0.5;
};

inline void validate(const AugmentConfig& cfg) {
  if (!(cfg.scale_min > 0) || cfg.scale_min > cfg.scale_max)
    throw ConfigError("augment: need 0 < scale_min <= scale_max");
  if (cfg.crop_h < 1 || cfg.crop_w < 1)
    throw ConfigError("augment: crop dims must be >= 1");
  if (cfg.hflip_prob < 0 || cfg.hflip_prob > 1)
    throw ConfigError("augment: hflip_prob must be in [0, 1]");
}

namespace detail {

template <typename T>
SegSample<T> resize_sample(const SegSample<T>& s, int nh, int nw) {
  SegSample<T> r;
  r.h = nh;
  r.w = nw;
  r.id = s.id;
  r.image.resize(size_t(3) * nh * nw);
  r.labels.resize(size_t(nh) * nw);
  const double fy = double(s.h) / nh, fx = double(s.w) / nw;
  for (int y = 0; y < nh; ++y) {
    // Bilinear sampling for the image, nearest for labels.
    const double sy = (y + 0.5) * fy - 0.5;
    const int y0 = std::clamp(int(std::floor(sy)), 0, s.h - 1);
    const int y1 = std::min(y0 + 1, s.h - 1);
    const double wy = std::clamp(sy - y0, 0.0, 1.0);
    const int ly = std::min(s.h - 1, int((y + 0.5) * fy));
    for (int x = 0; x < nw; ++x) {
      const double sx = (x + 0.5) * fx - 0.5;
      const int x0 = std::clamp(int(std::floor(sx)), 0, s.w - 1);
      const int x1 = std::min(x0 + 1, s.w - 1);
      const double wx = std::clamp(sx - x0, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - wx) * s.px(c, y0, x0) + wx * s.px(c, y0, x1);
        const double bot = (1 - wx) * s.px(c, y1, x0) + wx * s.px(c, y1, x1);
        r.px(c, y, x) = T((1 - wy) * top + wy * bot);
      }
      r.lab(y, x) = s.lab(ly, std::min(s.w - 1, int((x + 0.5) * fx)));
    }
  }
  return r;
}

}  // namespace detail

/// Random resize (bilinear image / nearest labels), pad to the crop size with
/// zero pixels and the ignore label, uniform crop, and horizontal flip.
template <typename T>
SegSample<T> augment(const SegSample<T>& s, const AugmentConfig& cfg,
                     Rng& rng) {
  validate(cfg);
  const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const int nh = std::max(1, int(std::lround(s.h * scale)));
  const int nw = std::max(1, int(std::lround(s.w * scale)));
  SegSample<T> r = detail::resize_sample(s, nh, nw);

  if (r.h < cfg.crop_h || r.w < cfg.crop_w) {
    SegSample<T> padded;
    padded.h = std::max(r.h, cfg.crop_h);
    padded.w = std::max(r.w, cfg.crop_w);
    padded.id = r.id;
    padded.image.assign(size_t(3) * padded.h * padded.w, T(0));
    padded.labels.assign(size_t(padded.h) * padded.w, kIgnoreIndex);
    for (int y = 0; y < r.h; ++y)
      for (int x = 0; x < r.w; ++x) {
        for (int c = 0; c < 3; ++c) padded.px(c, y, x) = r.px(c, y, x);
        padded.lab(y, x) = r.lab(y, x);
      }
    r = std::move(padded);
  }

  const int oy = int(rng.below(uint64_t(r.h - cfg.crop_h + 1)));
  const int ox = int(rng.below(uint64_t(r.w - cfg.crop_w + 1)));
  SegSample<T> out;
  out.h = cfg.crop_h;
  out.w = cfg.crop_w;
  out.id = s.id;
  out.image.resize(size_t(3) * out.h * out.w);
  out.labels.resize(size_t(out.h) * out.w);
  const bool flip = rng.uniform() < cfg.hflip_prob;
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      const int sx = flip ? ox + out.w - 1 - x : ox + x;
      for (int c = 0; c < 3; ++c) out.px(c, y, x) = r.px(c, oy + y, sx);
      out.lab(y, x) = r.lab(oy + y, sx);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic road scenes
// ---------------------------------------------------------------------------

/// Layered geometric road scene with exact labels: sky and road bands are
/// always present; buildings, vehicles, trees, poles and lane markings appear
/// when the class budget allows; classes beyond the named eight become
/// free-floating rectangles. Pixels take the palette color of their class,
/// modulated by appearance variation that scales with `noise` (per-instance
/// shading, simple textures, a scene-wide illumination ramp and tint), plus
/// Gaussian pixel noise, clamped to [0, 1]. noise = 0 yields exact palette
/// colors.
template <typename T>
SegSample<T> synth_scene(Rng& rng, int num_classes, int size,
                         double noise = 0.02) {
  if (num_classes < 2)
    throw ConfigError("synth_scene: need at least 2 classes");
  if (size < 8) throw ConfigError("synth_scene: size must be >= 8");
  const Palette pal = default_palette(num_classes);

  SegSample<T> s;
  s.h = s.w = size;
  s.image.resize(size_t(3) * size * size);
  s.labels.assign(size_t(size) * size, num_classes > 2 ? 2 : 1);

  // Brightness multipliers per pixel; amp = 0 (i.e. noise = 0) turns every
  // appearance effect off. Shades are drawn from rng even then so the label
  // geometry never depends on the noise setting.
  std::vector<double> shade(size_t(size) * size, 1.0);
  const double amp = std::min(0.35, 6.0 * noise);
  auto sh = [&](int y, int x) -> double& {
    return shade[size_t(y) * size + x];
  };
  auto draw_shade = [&]() { return 1.0 + amp * rng.uniform(-1.0, 1.0); };

  const int horizon =
      std::clamp(int(std::lround(size * rng.uniform(0.30, 0.45))), 1,
                 size - 2);
  const int road_top =
      std::clamp(int(std::lround(size * rng.uniform(0.55, 0.75))),
                 horizon + 1, size - 1);
  const double stripe_phase = rng.uniform(0.0, 6.283185307179586);
  const double stripe_freq = 2.0 + rng.uniform(0.0, 4.0);
  for (int y = 0; y < horizon; ++y)
    for (int x = 0; x < size; ++x) {
      s.lab(y, x) = 1;  // sky, brighter toward the top
      sh(y, x) = 1.0 + 0.6 * amp * (0.5 - double(y) / horizon);
    }
  for (int y = horizon; y < road_top; ++y)
    for (int x = 0; x < size; ++x)  // terrain with low-frequency striping
      sh(y, x) = 1.0 + 0.4 * amp *
                           std::sin(stripe_phase +
                                    stripe_freq * 6.283185307179586 * x / size);
  for (int y = road_top; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      s.lab(y, x) = 0;  // road, darker toward the horizon
      sh(y, x) = 1.0 + 0.8 * amp *
                           (double(y - road_top) / (size - road_top) - 0.5);
    }

  auto rect = [&](int y0, int x0, int h, int w, int cls, double f) {
    for (int y = std::max(0, y0); y < std::min(size, y0 + h); ++y)
      for (int x = std::max(0, x0); x < std::min(size, x0 + w); ++x) {
        s.lab(y, x) = cls;
        sh(y, x) = f;
      }
  };

  if (num_classes > 3) {  // buildings rising from the horizon
    const int nb = 1 + int(rng.below(3));
    for (int i = 0; i < nb; ++i) {
      const int w = size / 8 + int(rng.below(uint64_t(size / 6)));
      const int h = size / 6 + int(rng.below(uint64_t(size / 4)));
      const int x0 = int(rng.below(uint64_t(size - w)));
      const double f = draw_shade();
      rect(horizon - h, x0, h, w, 3, f);
      const int floor_step = std::max(2, size / 16);
      for (int y = horizon - h + floor_step; y < horizon; y += floor_step)
        if (y >= 0)  // darker floor lines across the facade
          for (int x = std::max(0, x0); x < std::min(size, x0 + w); ++x)
            if (s.lab(y, x) == 3) sh(y, x) = f * (1.0 - 0.8 * amp);
    }
  }
  if (num_classes > 5) {  // tree crowns as ellipses near the horizon
    const int nt = 1 + int(rng.below(3));
    for (int i = 0; i < nt; ++i) {
      const int ry = size / 12 + int(rng.below(uint64_t(size / 12)));
      const int rx = size / 12 + int(rng.below(uint64_t(size / 12)));
      const int cy = horizon - int(rng.below(uint64_t(ry + 1)));
      const int cx = int(rng.below(uint64_t(size)));
      const double f = draw_shade();
      for (int y = std::max(0, cy - ry); y <= std::min(size - 1, cy + ry);
           ++y)
        for (int x = std::max(0, cx - rx); x <= std::min(size - 1, cx + rx);
             ++x) {
          const double dy = double(y - cy) / ry, dx = double(x - cx) / rx;
          const double r2 = dy * dy + dx * dx;
          if (r2 <= 1.0) {
            s.lab(y, x) = 5;
            sh(y, x) = f * (1.0 - 0.6 * amp * r2);  // darker toward the rim
          }
        }
    }
  }
  if (num_classes > 6) {  // poles standing on the road edge
    const int np = 1 + int(rng.below(2));
    for (int i = 0; i < np; ++i) {
      const int h = size / 4 + int(rng.below(uint64_t(size / 4)));
      rect(road_top - h, int(rng.below(uint64_t(size - 2))), h,
           std::max(1, size / 32), 6, draw_shade());
    }
  }
  if (num_classes > 4) {  // vehicles on the road
    const int nv = 1 + int(rng.below(2));
    for (int i = 0; i < nv; ++i) {
      const int w = size / 8 + int(rng.below(uint64_t(size / 8)));
      const int h = std::max(2, w / 2);
      const int y0 = road_top + int(rng.below(uint64_t(
                                    std::max(1, size - road_top - h))));
      const int x0 = int(rng.below(uint64_t(size - w)));
      const double f = draw_shade();
      rect(y0, x0, h, w, 4, f);
      // darker undercarriage band and a brighter cabin window
      rect(y0 + h - std::max(1, h / 3), x0, std::max(1, h / 3), w, 4,
           f * (1.0 - 0.9 * amp));
      rect(y0, x0 + w / 4, std::max(1, h / 3), w / 2, 4, f * (1.0 + 0.6 * amp));
    }
  }
  if (num_classes > 7) {  // dashed center lane marking
    const int cx = size / 2 - std::max(1, size / 64);
    for (int y = road_top + 1; y < size - 1; y += std::max(2, size / 16))
      rect(y, cx, std::max(1, size / 32), std::max(2, size / 32), 7,
           draw_shade());
  }
  for (int cls = 8; cls < num_classes; ++cls) {  // extra classes
    const int w = size / 10 + int(rng.below(uint64_t(size / 10)));
    const int h = size / 10 + int(rng.below(uint64_t(size / 10)));
    rect(int(rng.below(uint64_t(size - h))),
         int(rng.below(uint64_t(size - w))), h, w, cls, draw_shade());
  }

  // Scene-wide vertical illumination ramp and RGB tint.
  const double ramp = amp * rng.uniform(-0.4, 0.4);
  double tint[3];
  for (double& t : tint) t = 1.0 + 0.25 * amp * rng.uniform(-1.0, 1.0);

  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const auto& col = pal.colors[size_t(s.lab(y, x))];
      const double f =
          sh(y, x) * (1.0 + ramp * (double(y) / size - 0.5));
      for (int c = 0; c < 3; ++c) {
        const double v = double(col[size_t(c)]) / 255.0 * f * tint[c] +
                         (noise > 0 ? noise * rng.normal() : 0.0);
        s.px(c, y, x) = T(std::clamp(v, 0.0, 1.0));
      }
    }
  return s;
}

/// Materializes a synthetic split on disk in the documented dataset layout.
template <typename T>
void write_synth_split(const std::string& root, const std::string& split,
                       int count, int num_classes, int size, double noise,
                       uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / split / "images");
  fs::create_directories(fs::path(root) / split / "labels");
  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::mix(seed, uint64_t(i)));
    SegSample<T> s = synth_scene<T>(rng, num_classes, size, noise);
    char name[32];
    std::snprintf(name, sizeof name, "scene%05d", i);
    Image8 img{size, size, 3, {}};
    img.data.resize(size_t(size) * size * 3);
    Image8 lab{size, size, 1, {}};
    lab.data.resize(size_t(size) * size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        for (int c = 0; c < 3; ++c)
          img.at(y, x, c) =
              uint8_t(std::clamp(std::lround(double(s.px(c, y, x)) * 255.0),
                                 0l, 255l));
        lab.at(y, x, 0) = uint8_t(s.lab(y, x));
      }
    write_png((fs::path(root) / split / "images" / (std::string(name) + ".png"))
                  .string(),
              img);
    write_png((fs::path(root) / split / "labels" / (std::string(name) + ".png"))
                  .string(),
              lab);
  }
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> to_batch(const std::vector<SegSample<T>>& samples,
                      std::vector<int32_t>* labels_out = nullptr) {
  if (samples.empty()) throw ConfigError("to_batch: empty batch");
  const int h = samples[0].h, w = samples[0].w;
  auto x = Tensor4<T>::make({int(samples.size()), 3, h, w}, false);
  if (labels_out) labels_out->clear();
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.h != h || s.w != w)
      throw ConfigError("to_batch: mixed sample sizes in one batch");
    std::copy(s.image.begin(), s.image.end(),
              x->v.begin() + int64_t(i) * 3 * h * w);
    if (labels_out)
      labels_out->insert(labels_out->end(), s.labels.begin(),
                         s.labels.end());
  }
  return x;
}

// ---------------------------------------------------------------------------
// Sliding-window inference
// ---------------------------------------------------------------------------

/// Tiles a (1, 3, H, W) image into window x window crops, runs
/// forward_logits on each, and averages overlapping logits with per-pixel
/// coverage counts. Images smaller than the window are edge-padded first.
/// forward_logits: (1, 3, window, window) -> (1, C, window, window).
template <typename T, typename F>
TensorPtr<T> sliding_window_infer(F&& forward_logits, const TensorPtr<T>& image,
                                  int window, int stride, int num_classes) {
  const Shape4 s = image->shape;
  if (s.n != 1 || s.c != 3)
    throw ConfigError("sliding_window_infer: expected a (1,3,H,W) image, got " +
                      s.str());
  if (stride < 1)
    throw ConfigError("sliding_window_infer: stride must be >= 1");
  if (window < 1)
    throw ConfigError("sliding_window_infer: window must be >= 1");
  if (stride > window)
    throw ConfigError("sliding_window_infer: stride " +
                      std::to_string(stride) + " exceeds window " +
                      std::to_string(window));

  const int Hp = std::max(s.h, window), Wp = std::max(s.w, window);
  TensorPtr<T> padded = image;
  if (Hp != s.h || Wp != s.w) {
    padded = Tensor4<T>::make({1, 3, Hp, Wp}, false);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < Hp; ++y)
        for (int x = 0; x < Wp; ++x)
          padded->at(0, c, y, x) =
              image->at(0, c, std::min(y, s.h - 1), std::min(x, s.w - 1));
  }

  auto positions = [&](int full) {
    std::vector<int> pos;
    for (int p = 0;; p += stride) {
      pos.push_back(std::min(p, full - window));
      if (p >= full - window) break;
    }
    return pos;
  };
  const auto ys = positions(Hp), xs = positions(Wp);

  std::vector<double> acc(size_t(num_classes) * Hp * Wp, 0.0);
  std::vector<int32_t> cover(size_t(Hp) * Wp, 0);
  auto crop = Tensor4<T>::make({1, 3, window, window}, false);
  for (int oy : ys)
    for (int ox : xs) {
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < window; ++y)
          for (int x = 0; x < window; ++x)
            crop->at(0, c, y, x) = padded->at(0, c, oy + y, ox + x);
      TensorPtr<T> logits = forward_logits(crop);
      if (logits->shape.n != 1 || logits->shape.c != num_classes ||
          logits->shape.h != window || logits->shape.w != window)
        throw ConfigError("sliding_window_infer: model returned " +
                          logits->shape.str() + ", expected (1," +
                          std::to_string(num_classes) + "," +
                          std::to_string(window) + "," +
                          std::to_string(window) + ")");
      for (int c = 0; c < num_classes; ++c)
        for (int y = 0; y < window; ++y)
          for (int x = 0; x < window; ++x)
            acc[size_t((int64_t(c) * Hp + oy + y) * Wp + ox + x)] +=
                double(logits->at(0, c, y, x));
      for (int y = 0; y < window; ++y)
        for (int x = 0; x < window; ++x)
          ++cover[size_t(int64_t(oy + y) * Wp + ox + x)];
    }

  auto out = Tensor4<T>::make({1, num_classes, s.h, s.w}, false);
  for (int c = 0; c < num_classes; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const int32_t cov = cover[size_t(int64_t(y) * Wp + x)];
        internal_check(cov >= 1, "sliding window left a pixel uncovered");
        out->at(0, c, y, x) =
            T(acc[size_t((int64_t(c) * Hp + y) * Wp + x)] / cov);
      }
  return out;
}

}  // namespace vqseg
