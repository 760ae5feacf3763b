#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <json.hpp>

#include <numbers>

#include "mars/tensor.hpp"
#include "mars/training.hpp"

namespace mars {

inline const std::array<std::string, 5> kClassNames{"echinus", "starfish", "holothurian",
                                                    "scallop", "waterweeds"};

inline int class_id_of(const std::string& name) {
  for (int i = 0; i < static_cast<int>(kClassNames.size()); ++i)
    if (kClassNames[i] == name) return i;
  return -1;
}

inline const std::array<std::string, 7> kDomainNames{
    "original",   "green cast",         "blue cast",   "haze",
    "gaussian blur", "contrast reduction", "sensor noise"};

// ---------------------------------------------------------------------------
// Images: interleaved 8-bit RGB, row-major. PPM (P6) is the on-disk format.

struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // size = 3 * width * height

  Image() = default;
  Image(int w, int h, std::array<std::uint8_t, 3> fill = {0, 0, 0}) : width(w), height(h) {
    pixels.resize(static_cast<size_t>(3) * w * h);
    for (size_t i = 0; i < pixels.size(); i += 3) {
      pixels[i] = fill[0];
      pixels[i + 1] = fill[1];
      pixels[i + 2] = fill[2];
    }
  }

  bool empty() const { return width <= 0 || height <= 0; }
  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
};

namespace detail {

inline void skip_ppm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_ppm_int(std::istream& in, const std::string& path, const char* what) {
  skip_ppm_space(in);
  int v = 0;
  if (!(in >> v)) throw IoError("read_ppm: " + path + ": malformed " + std::string(what));
  return v;
}

}  // namespace detail

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_ppm: cannot open " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw IoError("read_ppm: " + path + ": not a binary PPM (P6) file");
  const int w = detail::read_ppm_int(in, path, "width");
  const int h = detail::read_ppm_int(in, path, "height");
  const int maxval = detail::read_ppm_int(in, path, "maxval");
  if (w <= 0 || h <= 0) throw IoError("read_ppm: " + path + ": nonpositive dimensions");
  if (maxval != 255) throw IoError("read_ppm: " + path + ": only maxval 255 is supported");
  in.get();  // single whitespace byte before the raster
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw IoError("read_ppm: " + path + ": truncated pixel data");
  return img;
}

inline void write_ppm(const Image& img, const std::string& path) {
  if (img.empty()) throw DataError("write_ppm: empty image for " + path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_ppm: cannot open " + path + " for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write_ppm: failed writing " + path);
}

/// [3,H,W] tensor scaled to [0,1].
inline Tensor to_tensor(const Image& img) {
  if (img.empty()) throw DataError("to_tensor: empty image");
  Tensor t({3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) t(c, y, x) = img.at(x, y, c) / 255.0;
  return t;
}

// ---------------------------------------------------------------------------
// Annotations and manifests.

struct AnnotatedObject {
  std::string class_name;
  real x_min = 0, y_min = 0, x_max = 0, y_max = 0;  // original-image pixels
};

struct AnnotatedImage {
  std::string image_path;               // on-disk source; may be empty when the
  std::shared_ptr<const Image> pixels;  // pixels are carried in memory instead
  std::string name;                     // stable id used in messages and filenames
  int width = 0, height = 0;
  std::vector<AnnotatedObject> objects;
  int domain_id = 0;
};

struct DatasetManifest {
  std::string split;
  std::vector<AnnotatedImage> images;
  std::vector<std::string> classes{kClassNames.begin(), kClassNames.end()};
  std::vector<std::string> domains{kDomainNames.begin(), kDomainNames.end()};
};

inline Image load_image(const AnnotatedImage& rec) {
  if (rec.pixels) return *rec.pixels;
  if (rec.image_path.empty())
    throw DataError("load_image: record " + rec.name + " has neither pixels nor a path");
  return read_ppm(rec.image_path);
}

// ---------------------------------------------------------------------------
// Letterbox: aspect-preserving resize onto a gray square canvas.

struct LetterboxTransform {
  real scale = 1, pad_x = 0, pad_y = 0;

  real fwd_x(real x) const { return x * scale + pad_x; }
  real fwd_y(real y) const { return y * scale + pad_y; }
  real inv_x(real x) const { return (x - pad_x) / scale; }
  real inv_y(real y) const { return (y - pad_y) / scale; }
};

namespace detail {

inline Image resize_bilinear(const Image& src, int nw, int nh) {
  Image dst(nw, nh);
  const real sx_ratio = static_cast<real>(src.width) / nw;
  const real sy_ratio = static_cast<real>(src.height) / nh;
  for (int y = 0; y < nh; ++y) {
    const real sy = (y + 0.5) * sy_ratio - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, src.height - 1);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const real fy = std::clamp(sy - y0, real(0), real(1));
    for (int x = 0; x < nw; ++x) {
      const real sx = (x + 0.5) * sx_ratio - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, src.width - 1);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const real fx = std::clamp(sx - x0, real(0), real(1));
      for (int c = 0; c < 3; ++c) {
        const real top = src.at(x0, y0, c) * (1 - fx) + src.at(x1, y0, c) * fx;
        const real bot = src.at(x0, y1, c) * (1 - fx) + src.at(x1, y1, c) * fx;
        dst.at(x, y, c) = static_cast<std::uint8_t>(std::lround(top * (1 - fy) + bot * fy));
      }
    }
  }
  return dst;
}

}  // namespace detail

inline std::pair<Image, LetterboxTransform> letterbox(const Image& img, int target) {
  if (img.empty()) throw DataError("letterbox: empty image");
  if (target < 1) throw ConfigError("letterbox: target must be positive");
  LetterboxTransform tf;
  tf.scale = static_cast<real>(target) / std::max(img.width, img.height);
  const int nw = std::max(1, static_cast<int>(std::lround(img.width * tf.scale)));
  const int nh = std::max(1, static_cast<int>(std::lround(img.height * tf.scale)));
  tf.pad_x = (target - img.width * tf.scale) / 2;
  tf.pad_y = (target - img.height * tf.scale) / 2;

  Image out(target, target, {128, 128, 128});
  const Image resized =
      (nw == img.width && nh == img.height) ? img : detail::resize_bilinear(img, nw, nh);
  const int ox = static_cast<int>(std::lround(tf.pad_x));
  const int oy = static_cast<int>(std::lround(tf.pad_y));
  for (int y = 0; y < nh; ++y)
    for (int x = 0; x < nw; ++x)
      for (int c = 0; c < 3; ++c) out.at(ox + x, oy + y, c) = resized.at(x, y, c);
  return {std::move(out), tf};
}

// ---------------------------------------------------------------------------
// Domain augmentations: photometric underwater degradations. Domain 0 is the
// identity; 1-6 are green cast, blue cast, haze, gaussian blur, contrast
// reduction, and sensor noise. Deterministic under (seed, domain_id, strength).

namespace detail {

inline std::uint8_t clamp_byte(real v) {
  return static_cast<std::uint8_t>(std::clamp<real>(std::lround(v), 0, 255));
}

inline Image color_cast(const Image& img, std::array<real, 3> factor) {
  Image out = img;
  for (size_t i = 0; i < out.pixels.size(); i += 3)
    for (int c = 0; c < 3; ++c)
      out.pixels[i + c] = clamp_byte(img.pixels[i + c] * factor[c]);
  return out;
}

inline Image haze(const Image& img, real strength) {
  const real a = 0.45 * strength;
  Image out = img;
  for (auto& p : out.pixels) p = clamp_byte(p * (1 - a) + 230.0 * a);
  return out;
}

inline Image gaussian_blur(const Image& img, real strength) {
  const real sigma = std::max(0.3, 1.6 * strength);
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<real> k(static_cast<size_t>(2 * radius + 1));
  real norm = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<size_t>(i + radius)] = std::exp(-(i * i) / (2 * sigma * sigma));
    norm += k[static_cast<size_t>(i + radius)];
  }
  for (auto& v : k) v /= norm;

  const int W = img.width, H = img.height;
  std::vector<real> tmp(static_cast<size_t>(3) * W * H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        real acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<size_t>(i + radius)] *
                 img.at(std::clamp(x + i, 0, W - 1), y, c);
        tmp[(static_cast<size_t>(y) * W + x) * 3 + c] = acc;
      }
  Image out(W, H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        real acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<size_t>(i + radius)] *
                 tmp[(static_cast<size_t>(std::clamp(y + i, 0, H - 1)) * W + x) * 3 + c];
        out.at(x, y, c) = clamp_byte(acc);
      }
  return out;
}

inline Image contrast_reduction(const Image& img, real strength) {
  real mean = 0;
  for (auto p : img.pixels) mean += p;
  mean /= static_cast<real>(img.pixels.size());
  const real f = 1 - 0.6 * strength;
  Image out = img;
  for (auto& p : out.pixels) p = clamp_byte(mean + (p - mean) * f);
  return out;
}

inline Image sensor_noise(const Image& img, real strength, std::uint64_t seed) {
  auto rng = seeded_rng(seed, "aug.sensor-noise");
  std::normal_distribution<real> noise(0.0, 28.0 * strength + 1e-9);
  Image out = img;
  for (auto& p : out.pixels) p = clamp_byte(p + noise(rng));
  return out;
}

}  // namespace detail

inline Image apply_domain_augmentation(const Image& img, int domain_id, real strength,
                                       std::uint64_t seed) {
  if (domain_id < 0 || domain_id >= static_cast<int>(kDomainNames.size()))
    throw ConfigError("apply_domain_augmentation: unknown domain id " +
                      std::to_string(domain_id));
  if (!(strength >= 0) || !(strength <= 1))
    throw ConfigError("apply_domain_augmentation: strength must lie in [0,1]");
  if (img.empty()) throw DataError("apply_domain_augmentation: empty image");
  const real s = strength;
  switch (domain_id) {
    case 0: return img;
    case 1: return detail::color_cast(img, {1 - 0.55 * s, 1 + 0.05 * s, 1 - 0.30 * s});
    case 2: return detail::color_cast(img, {1 - 0.55 * s, 1 - 0.20 * s, 1 + 0.05 * s});
    case 3: return detail::haze(img, s);
    case 4: return detail::gaussian_blur(img, s);
    case 5: return detail::contrast_reduction(img, s);
    default: return detail::sensor_noise(img, s, seed);
  }
}

/// Union of the original records (domain 0) and one degraded copy per image
/// per domain 1-6. Photometric only: boxes are carried over unchanged.
inline DatasetManifest build_augmented_dataset(const DatasetManifest& manifest,
                                               const std::vector<real>& strengths,
                                               std::uint64_t seed) {
  if (strengths.size() != kDomainNames.size() - 1)
    throw ConfigError("build_augmented_dataset: expected " +
                      std::to_string(kDomainNames.size() - 1) + " strengths, got " +
                      std::to_string(strengths.size()));
  DatasetManifest out;
  out.split = manifest.split;
  out.classes = manifest.classes;
  out.domains = {kDomainNames.begin(), kDomainNames.end()};
  out.images.reserve(manifest.images.size() * kDomainNames.size());
  for (const auto& rec : manifest.images) {
    out.images.push_back(rec);  // domain 0: the untouched original record
    out.images.back().domain_id = 0;
    const Image src = load_image(rec);
    for (int d = 1; d < static_cast<int>(kDomainNames.size()); ++d) {
      AnnotatedImage aug = rec;
      aug.image_path.clear();
      aug.name = rec.name + "_d" + std::to_string(d);
      aug.domain_id = d;
      aug.pixels = std::make_shared<Image>(apply_domain_augmentation(
          src, d, strengths[static_cast<size_t>(d - 1)],
          seed ^ fnv1a64(aug.name)));
      out.images.push_back(std::move(aug));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset: simple shapes on a water-toned background, one shape
// family per class, with exact boxes taken from the painted pixel extents.

namespace detail {

struct PaintExtent {
  int min_x = std::numeric_limits<int>::max(), min_y = std::numeric_limits<int>::max();
  int max_x = -1, max_y = -1;
  bool any() const { return max_x >= 0; }
};

inline void paint(Image& img, PaintExtent& ext, int x, int y,
                  std::array<std::uint8_t, 3> rgb) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int c = 0; c < 3; ++c) img.at(x, y, c) = rgb[c];
  ext.min_x = std::min(ext.min_x, x);
  ext.min_y = std::min(ext.min_y, y);
  ext.max_x = std::max(ext.max_x, x);
  ext.max_y = std::max(ext.max_y, y);
}

// Even-odd point-in-polygon on a closed vertex loop.
inline bool inside_polygon(const std::vector<std::array<real, 2>>& poly, real px, real py) {
  bool in = false;
  for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const bool crosses = (poly[i][1] > py) != (poly[j][1] > py);
    if (crosses) {
      const real x_at =
          poly[j][0] + (py - poly[j][1]) / (poly[i][1] - poly[j][1]) * (poly[i][0] - poly[j][0]);
      if (px < x_at) in = !in;
    }
  }
  return in;
}

}  // namespace detail

inline DatasetManifest generate_synthetic_dataset(int n, int image_size, std::uint64_t seed) {
  if (n < 1) throw ConfigError("generate_synthetic_dataset: n must be >= 1");
  if (image_size < 32) throw ConfigError("generate_synthetic_dataset: image_size must be >= 32");

  DatasetManifest out;
  out.split = "synthetic";

  for (int idx = 0; idx < n; ++idx) {
    auto rng = seeded_rng(seed, "synth.image" + std::to_string(idx));
    auto uniform = [&](real lo, real hi) {
      return std::uniform_real_distribution<real>(lo, hi)(rng);
    };
    const int S = image_size;

    // Water-toned background with a vertical falloff and mild banding.
    const int base_r = 18 + static_cast<int>(rng() % 25);
    const int base_g = 80 + static_cast<int>(rng() % 45);
    const int base_b = 105 + static_cast<int>(rng() % 50);
    Image img(S, S);
    for (int y = 0; y < S; ++y) {
      const real dark = 1.0 - 0.35 * y / S;
      for (int x = 0; x < S; ++x) {
        const int wob = static_cast<int>((x * 31 + y * 17 + idx * 7) % 9) - 4;
        img.at(x, y, 0) = detail::clamp_byte(base_r * dark + wob);
        img.at(x, y, 1) = detail::clamp_byte(base_g * dark + wob);
        img.at(x, y, 2) = detail::clamp_byte(base_b * dark + wob);
      }
    }

    AnnotatedImage rec;
    rec.name = "synth_" + std::to_string(idx);
    rec.width = S;
    rec.height = S;
    rec.domain_id = 0;

    const int shapes = 1 + static_cast<int>(rng() % 4);
    std::vector<std::array<real, 4>> accepted;
    for (int k = 0; k < shapes; ++k) {
      const int cls = k == 0 ? idx % 5 : static_cast<int>(rng() % 5);
      bool placed = false;
      for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
        const real r = uniform(S / 14.0, S / 6.5);
        const real cx = uniform(r + 2, S - r - 2);
        const real cy = uniform(r + 2, S - r - 2);
        const std::array<real, 4> bound{cx - r - 2, cy - r - 2, cx + r + 2, cy + r + 2};
        bool clash = false;
        for (const auto& b : accepted)
          if (box_iou(bound[0], bound[1], bound[2], bound[3], b[0], b[1], b[2], b[3]) >= 0.3)
            clash = true;
        if (clash) continue;

        detail::PaintExtent ext;
        const auto jitter = [&](int v) {
          return static_cast<std::uint8_t>(
              std::clamp<int>(v + static_cast<int>(rng() % 21) - 10, 0, 255));
        };
        switch (cls) {
          case 0: {  // echinus: dark spiny disk
            const std::array<std::uint8_t, 3> col{jitter(58), jitter(22), jitter(42)};
            for (int y = static_cast<int>(cy - r); y <= static_cast<int>(cy + r) + 1; ++y)
              for (int x = static_cast<int>(cx - r); x <= static_cast<int>(cx + r) + 1; ++x)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
                  detail::paint(img, ext, x, y, col);
            break;
          }
          case 1: {  // starfish: five-point star polygon
            const std::array<std::uint8_t, 3> col{jitter(228), jitter(142), jitter(58)};
            const real rot = uniform(0, 2 * std::numbers::pi_v<real>);
            std::vector<std::array<real, 2>> poly;
            for (int v = 0; v < 10; ++v) {
              const real rad = v % 2 == 0 ? r : 0.45 * r;
              const real th = rot + v * std::numbers::pi_v<real> / 5;
              poly.push_back({cx + rad * std::cos(th), cy + rad * std::sin(th)});
            }
            for (int y = static_cast<int>(cy - r); y <= static_cast<int>(cy + r) + 1; ++y)
              for (int x = static_cast<int>(cx - r); x <= static_cast<int>(cx + r) + 1; ++x)
                if (detail::inside_polygon(poly, x, y)) detail::paint(img, ext, x, y, col);
            break;
          }
          case 2: {  // holothurian: capsule along a random direction
            const std::array<std::uint8_t, 3> col{jitter(92), jitter(98), jitter(52)};
            const real th = uniform(0, std::numbers::pi_v<real>);
            const real half = 0.72 * r, rad = std::max<real>(2.0, 0.27 * r);
            const real ax = cx - half * std::cos(th), ay = cy - half * std::sin(th);
            const real bx = cx + half * std::cos(th), by = cy + half * std::sin(th);
            for (int y = static_cast<int>(cy - r) - 1; y <= static_cast<int>(cy + r) + 1; ++y)
              for (int x = static_cast<int>(cx - r) - 1; x <= static_cast<int>(cx + r) + 1;
                   ++x) {
                const real vx = bx - ax, vy = by - ay;
                const real t =
                    std::clamp(((x - ax) * vx + (y - ay) * vy) / (vx * vx + vy * vy),
                               real(0), real(1));
                const real dx = x - (ax + t * vx), dy = y - (ay + t * vy);
                if (dx * dx + dy * dy <= rad * rad) detail::paint(img, ext, x, y, col);
              }
            break;
          }
          case 3: {  // scallop: upward fan (half disk with a flat base)
            const std::array<std::uint8_t, 3> col{jitter(224), jitter(204), jitter(178)};
            for (int y = static_cast<int>(cy - r); y <= static_cast<int>(cy) + 1; ++y)
              for (int x = static_cast<int>(cx - r); x <= static_cast<int>(cx + r) + 1; ++x)
                if (y <= cy && (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
                  detail::paint(img, ext, x, y, col);
            break;
          }
          default: {  // waterweeds: a cluster of wavy strands
            const std::array<std::uint8_t, 3> col{jitter(44), jitter(138), jitter(72)};
            const int strands = 3 + static_cast<int>(rng() % 3);
            const real amp = std::max<real>(1.5, 0.30 * r);
            const real phase0 = uniform(0, 2 * std::numbers::pi_v<real>);
            for (int w = 0; w < strands; ++w) {
              const real x0 = cx - r + 2 + (2 * (r - 2)) * w / std::max(1, strands - 1);
              for (int y = static_cast<int>(cy - r); y <= static_cast<int>(cy + r); ++y) {
                const int x =
                    static_cast<int>(std::lround(x0 + amp * std::sin(0.35 * y + phase0 + w)));
                detail::paint(img, ext, x, y, col);
                detail::paint(img, ext, x + 1, y, col);
              }
            }
            break;
          }
        }

        if (!ext.any()) continue;
        AnnotatedObject obj;
        obj.class_name = kClassNames[static_cast<size_t>(cls)];
        obj.x_min = ext.min_x;
        obj.y_min = ext.min_y;
        obj.x_max = ext.max_x + 1;  // painted pixel (x,y) covers [x, x+1)
        obj.y_max = ext.max_y + 1;
        rec.objects.push_back(obj);
        accepted.push_back({obj.x_min, obj.y_min, obj.x_max, obj.y_max});
        placed = true;
      }
    }

    rec.pixels = std::make_shared<Image>(std::move(img));
    out.images.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// VOC-style ingestion: per-image XML annotation files next to the images.

inline DatasetManifest parse_voc_annotations(const std::string& root_dir,
                                             int* dropped_boxes = nullptr) {
  namespace fs = std::filesystem;
  namespace pt = boost::property_tree;
  if (!fs::is_directory(root_dir))
    throw IoError("parse_voc_annotations: " + root_dir + " is not a directory");

  std::vector<fs::path> xmls;
  for (const auto& entry : fs::directory_iterator(root_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".xml")
      xmls.push_back(entry.path());
  std::sort(xmls.begin(), xmls.end());

  DatasetManifest out;
  out.split = fs::path(root_dir).filename().string();
  int dropped = 0;

  for (const auto& xml : xmls) {
    pt::ptree tree;
    try {
      pt::read_xml(xml.string(), tree);
    } catch (const pt::xml_parser_error& e) {
      throw DataError("parse_voc_annotations: " + e.filename() + ":" +
                      std::to_string(e.line()) + ": " + e.message());
    }

    AnnotatedImage rec;
    rec.name = xml.stem().string();
    try {
      const auto& ann = tree.get_child("annotation");
      rec.width = ann.get<int>("size.width");
      rec.height = ann.get<int>("size.height");
      const std::string filename = ann.get<std::string>("filename", rec.name + ".ppm");
      rec.image_path = (fs::path(root_dir) / filename).string();
      if (rec.width <= 0 || rec.height <= 0)
        throw DataError("parse_voc_annotations: " + xml.string() + ": bad image size");
      if (!fs::exists(rec.image_path))
        throw IoError("parse_voc_annotations: missing image " + rec.image_path +
                      " for annotation " + xml.string());

      std::vector<std::string> unknown;
      for (const auto& [key, node] : ann) {
        if (key != "object") continue;
        AnnotatedObject obj;
        obj.class_name = node.get<std::string>("name");
        if (class_id_of(obj.class_name) < 0) {
          unknown.push_back(obj.class_name);
          continue;
        }
        obj.x_min = std::clamp<real>(node.get<real>("bndbox.xmin"), 0, rec.width);
        obj.y_min = std::clamp<real>(node.get<real>("bndbox.ymin"), 0, rec.height);
        obj.x_max = std::clamp<real>(node.get<real>("bndbox.xmax"), 0, rec.width);
        obj.y_max = std::clamp<real>(node.get<real>("bndbox.ymax"), 0, rec.height);
        if (!(obj.x_min < obj.x_max) || !(obj.y_min < obj.y_max)) {
          ++dropped;
          continue;
        }
        rec.objects.push_back(std::move(obj));
      }
      if (!unknown.empty()) {
        std::string list;
        for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
        throw DataError("parse_voc_annotations: " + xml.string() +
                        ": unknown class names: " + list);
      }
    } catch (const pt::ptree_error& e) {
      throw DataError("parse_voc_annotations: " + xml.string() + ": " + e.what());
    }
    out.images.push_back(std::move(rec));
  }

  if (dropped_boxes) *dropped_boxes = dropped;
  return out;
}

// ---------------------------------------------------------------------------
// JSON manifest format, schema version 1:
//   {"version":1, "split":..., "classes":[...], "domains":[...],
//    "records":[{"image":..., "name":..., "width":..., "height":...,
//                "domain":..., "objects":[{"class":..., "box":[x0,y0,x1,y1]}]}]}

inline void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["split"] = manifest.split;
  j["classes"] = manifest.classes;
  j["domains"] = manifest.domains;
  auto& records = j["records"] = nlohmann::ordered_json::array();
  for (const auto& rec : manifest.images) {
    if (rec.image_path.empty())
      throw DataError("save_manifest: record " + rec.name +
                      " has no image path; write its pixels to disk first");
    nlohmann::ordered_json r;
    r["image"] = rec.image_path;
    r["name"] = rec.name;
    r["width"] = rec.width;
    r["height"] = rec.height;
    r["domain"] = rec.domain_id;
    auto& objs = r["objects"] = nlohmann::ordered_json::array();
    for (const auto& o : rec.objects)
      objs.push_back({{"class", o.class_name},
                      {"box", {o.x_min, o.y_min, o.x_max, o.y_max}}});
    records.push_back(std::move(r));
  }
  std::ofstream out(path);
  if (!out) throw IoError("save_manifest: cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("save_manifest: failed writing " + path);
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_manifest: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load_manifest: " + path + ": " + e.what());
  }
  try {
    if (j.at("version").get<int>() != 1)
      throw DataError("load_manifest: " + path + ": unsupported version");
    DatasetManifest m;
    m.split = j.at("split").get<std::string>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.domains = j.at("domains").get<std::vector<std::string>>();
    if (m.classes.size() != kClassNames.size())
      throw DataError("load_manifest: " + path + ": expected " +
                      std::to_string(kClassNames.size()) + " classes");
    const auto base = std::filesystem::path(path).parent_path();
    for (const auto& r : j.at("records")) {
      AnnotatedImage rec;
      const auto img = std::filesystem::path(r.at("image").get<std::string>());
      rec.image_path = img.is_absolute() ? img.string() : (base / img).string();
      rec.name = r.value("name", img.stem().string());
      rec.width = r.at("width").get<int>();
      rec.height = r.at("height").get<int>();
      rec.domain_id = r.at("domain").get<int>();
      if (rec.domain_id < 0 || rec.domain_id >= static_cast<int>(m.domains.size()))
        throw DataError("load_manifest: " + path + ": domain id out of range for " +
                        rec.name);
      for (const auto& o : r.at("objects")) {
        AnnotatedObject obj;
        obj.class_name = o.at("class").get<std::string>();
        if (class_id_of(obj.class_name) < 0)
          throw DataError("load_manifest: " + path + ": unknown class " + obj.class_name);
        const auto& box = o.at("box");
        obj.x_min = box.at(0).get<real>();
        obj.y_min = box.at(1).get<real>();
        obj.x_max = box.at(2).get<real>();
        obj.y_max = box.at(3).get<real>();
        if (!(obj.x_min < obj.x_max) || !(obj.y_min < obj.y_max))
          throw DataError("load_manifest: " + path + ": invalid box in " + rec.name);
        rec.objects.push_back(std::move(obj));
      }
      m.images.push_back(std::move(rec));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load_manifest: " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Bridge into the trainer: letterbox the image and its boxes to the network
// input size. Box coordinates in the result are input-space pixels.

inline TrainExample to_train_example(const AnnotatedImage& rec, int input_size) {
  const Image src = load_image(rec);
  auto [boxed, tf] = letterbox(src, input_size);
  TrainExample ex;
  ex.image = to_tensor(boxed);
  ex.name = rec.name;
  ex.domain_id = rec.domain_id;
  for (const auto& o : rec.objects) {
    GroundTruthBox b;
    b.x_min = tf.fwd_x(o.x_min);
    b.y_min = tf.fwd_y(o.y_min);
    b.x_max = tf.fwd_x(o.x_max);
    b.y_max = tf.fwd_y(o.y_max);
    b.class_id = class_id_of(o.class_name);
    if (b.class_id < 0)
      throw DataError("to_train_example: unknown class " + o.class_name + " in " + rec.name);
    ex.boxes.push_back(b);
  }
  return ex;
}

}  // namespace mars
