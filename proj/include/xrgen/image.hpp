#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "xrgen/error.hpp"
#include "xrgen/rng.hpp"
#include "xrgen/tensor.hpp"

namespace xrgen {

enum class ViewTag { AP, L, S, unknown };
enum class SideTag { L, R, unknown };

inline std::string to_string(ViewTag v) {
  switch (v) {
    case ViewTag::AP: return "AP";
    case ViewTag::L: return "L";
    case ViewTag::S: return "S";
    default: return "unknown";
  }
}

inline std::string to_string(SideTag s) {
  switch (s) {
    case SideTag::L: return "L";
    case SideTag::R: return "R";
    default: return "unknown";
  }
}

inline ViewTag parse_view_tag(const std::string& s) {
  if (s == "AP") return ViewTag::AP;
  if (s == "L") return ViewTag::L;
  if (s == "S") return ViewTag::S;
  return ViewTag::unknown;
}

inline SideTag parse_side_tag(const std::string& s) {
  if (s == "L") return SideTag::L;
  if (s == "R") return SideTag::R;
  return SideTag::unknown;
}

inline constexpr std::size_t kMinImageSide = 32;

/// Grayscale view with pixels in [0,1], row-major. Tags are metadata only.
struct ViewImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
  ViewTag view = ViewTag::unknown;
  SideTag side = SideTag::unknown;
  bool weight_bearing = false;

  ViewImage() = default;
  ViewImage(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }

  ViewImage with_pixels_of(std::size_t h, std::size_t w) const {
    ViewImage out(h, w);
    out.view = view;
    out.side = side;
    out.weight_bearing = weight_bearing;
    return out;
  }

  /// [1,H,W] tensor for the feature extractors.
  Tensor to_tensor() const { return Tensor::from({1, height, width}, pixels); }

  bool operator==(const ViewImage&) const = default;
};

/// Throws DataError when the image violates the size or range invariants.
inline void validate_image(const ViewImage& img, const std::string& what) {
  if (img.height < kMinImageSide || img.width < kMinImageSide) {
    throw DataError(what + ": image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                    " is smaller than " + std::to_string(kMinImageSide) + " px");
  }
  if (img.pixels.size() != img.height * img.width) throw DataError(what + ": pixel buffer size mismatch");
  for (double p : img.pixels) {
    if (!(p >= 0.0 && p <= 1.0)) throw DataError(what + ": pixel value outside [0,1]");
  }
}

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit)
// ---------------------------------------------------------------------------

inline ViewImage read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open image '" + path + "'");
  auto next_token = [&]() {
    std::string tok;
    char c;
    while (f.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(f, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok += c;
    }
    return tok;
  };
  if (next_token() != "P5") throw FormatError("'" + path + "' is not a binary PGM (P5)");
  std::size_t w = 0, h = 0, maxv = 0;
  try {
    w = std::stoul(next_token());
    h = std::stoul(next_token());
    maxv = std::stoul(next_token());
  } catch (const std::exception&) {
    throw FormatError("'" + path + "': malformed PGM header");
  }
  if (maxv == 0 || maxv > 255) throw FormatError("'" + path + "': only 8-bit PGM is supported");
  if (w == 0 || h == 0) throw FormatError("'" + path + "': zero image dimension");
  std::vector<unsigned char> raw(w * h);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(f.gcount()) != raw.size()) throw FormatError("'" + path + "': truncated pixel data");
  ViewImage img(h, w);
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / static_cast<double>(maxv);
  return img;
}

inline std::uint8_t quantize(double p) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0));
}

inline void write_pgm(const std::string& path, const ViewImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write image '" + path + "'");
  f << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = quantize(img.pixels[i]);
  f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw DataError("failed writing image '" + path + "'");
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// Bilinear resample to h x w using pixel-center alignment (identity when the
/// size is unchanged). Edge samples clamp.
inline ViewImage resample_bilinear(const ViewImage& img, std::size_t h, std::size_t w) {
  ViewImage out = img.with_pixels_of(h, w);
  if (h == img.height && w == img.width) {
    out.pixels = img.pixels;
    return out;
  }
  const double sy = static_cast<double>(img.height) / static_cast<double>(h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(w);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = img.at(y0, x0) * (1.0 - tx) + img.at(y0, x1) * tx;
      const double bot = img.at(y1, x0) * (1.0 - tx) + img.at(y1, x1) * tx;
      out.at(y, x) = std::clamp(top * (1.0 - ty) + bot * ty, 0.0, 1.0);
    }
  }
  return out;
}

/// Scales the longer side to `target` preserving aspect ratio, then centers
/// the result on a zero-filled target x target canvas.
inline ViewImage resize_pad(const ViewImage& img, std::size_t target = 224) {
  if (target < kMinImageSide) {
    throw UsageError("resize_pad: target " + std::to_string(target) + " below minimum " +
                     std::to_string(kMinImageSide));
  }
  if (img.height == 0 || img.width == 0 || img.pixels.size() != img.height * img.width) {
    throw DataError("resize_pad: degenerate image " + std::to_string(img.height) + "x" +
                    std::to_string(img.width));
  }
  const std::size_t longer = std::max(img.height, img.width);
  const double scale = static_cast<double>(target) / static_cast<double>(longer);
  const std::size_t h = img.height == longer
                            ? target
                            : std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(img.height * scale)), 1, target);
  const std::size_t w = img.width == longer
                            ? target
                            : std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(img.width * scale)), 1, target);
  ViewImage scaled = resample_bilinear(img, h, w);
  if (h == target && w == target) return scaled;
  ViewImage out = img.with_pixels_of(target, target);
  const std::size_t oy = (target - h) / 2;
  const std::size_t ox = (target - w) / 2;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.at(oy + y, ox + x) = scaled.at(y, x);
  return out;
}

/// Mirror along the vertical axis (left-right flip).
inline ViewImage flip_horizontal(const ViewImage& img) {
  ViewImage out = img.with_pixels_of(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(y, x) = img.at(y, img.width - 1 - x);
  return out;
}

inline ViewImage crop(const ViewImage& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0 || y0 + h > img.height || x0 + w > img.width) {
    throw DataError("crop: window " + std::to_string(h) + "x" + std::to_string(w) + " at (" +
                    std::to_string(y0) + "," + std::to_string(x0) + ") outside image " +
                    std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  ViewImage out = img.with_pixels_of(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.at(y, x) = img.at(y0 + y, x0 + x);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

inline constexpr std::size_t kAugmentFactor = 8;

/// Crop margin for a given network input size: 32 px at 224, scaled
/// proportionally for smaller inputs.
inline std::size_t crop_margin_for(std::size_t input_size) {
  return std::max<std::size_t>(1, (input_size * 32 + 112) / 224);
}

struct CropVariant {
  std::size_t offset_y = 0;
  std::size_t offset_x = 0;
  bool flipped = false;
};

/// Variant `index` in [0, 8): crop (index / 2) of four seeded random crops,
/// flipped when index is odd. Offsets are drawn uniformly in [0, margin].
inline CropVariant crop_variant(Rng& rng, std::size_t margin, std::size_t index) {
  CropVariant v;
  v.offset_y = static_cast<std::size_t>(rng.below(margin + 1));
  v.offset_x = static_cast<std::size_t>(rng.below(margin + 1));
  v.flipped = index % 2 == 1;
  return v;
}

inline ViewImage apply_crop_variant(const ViewImage& img, const CropVariant& v, std::size_t crop_size) {
  if (img.height < crop_size || img.width < crop_size) {
    throw DataError("augment: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                    " smaller than crop size " + std::to_string(crop_size));
  }
  if (v.offset_y + crop_size > img.height || v.offset_x + crop_size > img.width) {
    throw DataError("augment: crop offset outside image");
  }
  ViewImage out = crop(img, v.offset_y, v.offset_x, crop_size, crop_size);
  return v.flipped ? flip_horizontal(out) : out;
}

}  // namespace xrgen
