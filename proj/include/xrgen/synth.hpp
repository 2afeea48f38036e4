#pragma once

// Procedural knee-exam generator. Each exam has a set of pathologies; each
// pathology is drawn only in one view type, and the report is assembled from
// sentence templates of the pathologies present.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "xrgen/bbox.hpp"
#include "xrgen/error.hpp"
#include "xrgen/features.hpp"
#include "xrgen/image.hpp"
#include "xrgen/manifest.hpp"
#include "xrgen/rng.hpp"

namespace xrgen {

enum class Marker {
  narrow_gap,  // joint gap shrinks
  dots,        // bright marginal dots
  blob,        // soft-tissue density above the joint
};

struct PathologySpec {
  std::string name;
  double frequency = 0.0;
  ViewTag visible_in = ViewTag::AP;
  Marker marker = Marker::dots;
  std::string sentence;
};

struct ViewLayout {
  std::vector<ViewTag> views;
  bool both_sides = false;
  double weight = 1.0;
};

struct SynthSpec {
  std::size_t exams = 200;
  std::size_t height = 96;
  std::size_t width = 80;
  double noise = 0.02;
  double noise_phrase_prob = 0.3;
  std::string normal_report = "Joint spaces and articular surfaces appear preserved. No bony abnormality is seen.";
  std::vector<PathologySpec> pathologies{
      {"narrowing", 0.4, ViewTag::AP, Marker::narrow_gap, "There is joint space narrowing of the medial compartment."},
      {"osteophytes", 0.4, ViewTag::L, Marker::dots, "Marginal osteophytes are seen at the joint margins."},
      {"effusion", 0.3, ViewTag::L, Marker::blob, "There is a small suprapatellar effusion."},
  };
  std::vector<ViewLayout> layouts{
      {{ViewTag::AP, ViewTag::L}, false, 0.5},
      {{ViewTag::AP, ViewTag::L}, true, 0.3},
      {{ViewTag::AP, ViewTag::L, ViewTag::S}, false, 0.2},
  };
};

struct SynthExam {
  ExamManifestEntry entry;
  std::vector<ViewImage> images;
  std::vector<BBox> boxes;              // ground-truth joint box per image
  std::vector<bool> pathologies;        // parallel to SynthSpec::pathologies
};

namespace detail {

inline void fill_rect(ViewImage& img, double y0, double y1, double x0, double x1, double v) {
  const auto ys = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(y0)));
  const auto ye = static_cast<std::ptrdiff_t>(std::min(static_cast<double>(img.height), std::ceil(y1)));
  const auto xs = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(x0)));
  const auto xe = static_cast<std::ptrdiff_t>(std::min(static_cast<double>(img.width), std::ceil(x1)));
  for (std::ptrdiff_t y = ys; y < ye; ++y)
    for (std::ptrdiff_t x = xs; x < xe; ++x) img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = v;
}

inline void fill_ellipse(ViewImage& img, double cy, double cx, double ry, double rx, double v) {
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
      const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
      if (dy * dy + dx * dx <= 1.0) img.at(y, x) = v;
    }
}

}  // namespace detail

/// Renders one view. Pathology markers appear only when the view type matches
/// the pathology's visible view.
inline ViewImage render_view(const SynthSpec& spec, ViewTag view, SideTag side, const std::vector<bool>& present,
                             Rng& rng, BBox& box) {
  const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);
  ViewImage img(spec.height, spec.width, 0.08);
  img.view = view;
  img.side = side;
  const double cx = W / 2 + rng.uniform(-0.05, 0.05) * W;
  const double jy = H / 2 + rng.uniform(-0.06, 0.06) * H;
  const double bw = W * rng.uniform(0.30, 0.36);
  const double bone = rng.uniform(0.68, 0.78);
  auto has = [&](Marker m) {
    for (std::size_t k = 0; k < spec.pathologies.size(); ++k) {
      if (present[k] && spec.pathologies[k].marker == m && spec.pathologies[k].visible_in == view) return true;
    }
    return false;
  };

  if (view == ViewTag::S) {
    detail::fill_ellipse(img, jy + 0.12 * H, cx - 0.18 * W, 0.14 * H, 0.16 * W, bone);
    detail::fill_ellipse(img, jy + 0.12 * H, cx + 0.18 * W, 0.14 * H, 0.16 * W, bone);
    detail::fill_ellipse(img, jy - 0.12 * H, cx, 0.08 * H, 0.20 * W, bone + 0.1);
    box = {std::clamp((cx - 0.36 * W) / W, 0.0, 0.5), std::clamp((jy - 0.22 * H) / H, 0.0, 0.5), 0.0, 0.0};
    box.width = std::min(0.72, 1.0 - box.x_min);
    box.height = std::min(0.48, 1.0 - box.y_min);
  } else {
    const double gap = (view == ViewTag::AP && has(Marker::narrow_gap)) ? 0.035 * H : 0.13 * H;
    const double flare = view == ViewTag::AP ? 0.14 * W : 0.10 * W;
    // femur shaft + condyles
    detail::fill_rect(img, 0, jy - gap / 2, cx - bw / 2, cx + bw / 2, bone);
    detail::fill_rect(img, jy - gap / 2 - 0.14 * H, jy - gap / 2, cx - bw / 2 - flare / 2, cx + bw / 2 + flare / 2, bone);
    // tibia plateau + shaft
    detail::fill_rect(img, jy + gap / 2, H, cx - bw / 2, cx + bw / 2, bone - 0.04);
    detail::fill_rect(img, jy + gap / 2, jy + gap / 2 + 0.12 * H, cx - bw / 2 - flare / 2, cx + bw / 2 + flare / 2, bone - 0.04);
    if (view == ViewTag::L) {
      detail::fill_ellipse(img, jy - 0.10 * H, cx - bw / 2 - flare / 2 - 0.06 * W, 0.09 * H, 0.05 * W, bone);
    }
    if (has(Marker::dots)) {
      const double r = 0.035 * std::min(H, W) + 1.0;
      for (double sy : {-1.0, 1.0}) {
        for (double sx : {-1.0, 1.0}) {
          const double y = jy + sy * (gap / 2 + 0.02 * H);
          const double x = cx + sx * (bw / 2 + flare / 2 + r);
          detail::fill_ellipse(img, y + rng.uniform(-1, 1), x + rng.uniform(-1, 1), r, r, 0.95);
        }
      }
    }
    if (has(Marker::blob)) {
      detail::fill_ellipse(img, jy - 0.26 * H, cx + bw / 2 + 0.10 * W, 0.14 * H, 0.08 * W, 0.42);
    }
    const double bx0 = std::clamp((cx - bw / 2 - flare / 2 - 0.08 * W) / W, 0.0, 1.0);
    const double by0 = std::clamp((jy - 0.18 * H) / H, 0.0, 1.0);
    box = {bx0, by0, std::min(1.0 - bx0, (bw + flare + 0.16 * W) / W), std::min(1.0 - by0, 0.36)};
  }
  for (double& p : img.pixels) p = std::clamp(p + spec.noise * rng.normal(), 0.0, 1.0);
  // stored as 8-bit on disk; keep the in-memory copy identical
  for (double& p : img.pixels) p = quantize(p) / 255.0;
  if (side == SideTag::R) {
    img = flip_horizontal(img);
    box.x_min = std::max(0.0, 1.0 - box.x_min - box.width);
  }
  return img;
}

inline std::string synth_report(const SynthSpec& spec, const std::vector<bool>& present, Rng& rng) {
  std::string body;
  for (std::size_t k = 0; k < spec.pathologies.size(); ++k) {
    if (!present[k]) continue;
    body += (body.empty() ? "" : " ") + spec.pathologies[k].sentence;
  }
  if (body.empty()) body = spec.normal_report;
  std::string out;
  if (rng.bernoulli(spec.noise_phrase_prob)) out += "Clinical details: knee pain. ";
  out += body;
  if (rng.bernoulli(spec.noise_phrase_prob)) out += " Compare with previous films.";
  return out;
}

/// Deterministic in (spec, seed). Each pathology is present in exactly
/// round(frequency * exams) exams.
inline std::vector<SynthExam> synthesize(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.exams == 0) throw UsageError("synth: exam count must be positive");
  if (spec.height < kMinImageSide || spec.width < kMinImageSide) throw UsageError("synth: image too small");
  if (spec.layouts.empty()) throw UsageError("synth: no view layouts");
  Rng rng(seed);
  const std::size_t n = spec.exams;
  std::vector<std::vector<bool>> present(n, std::vector<bool>(spec.pathologies.size(), false));
  for (std::size_t k = 0; k < spec.pathologies.size(); ++k) {
    const auto count = static_cast<std::size_t>(std::lround(std::clamp(spec.pathologies[k].frequency, 0.0, 1.0) * n));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t i = 0; i < count; ++i) present[order[i]][k] = true;
  }
  double wsum = 0.0;
  for (const auto& l : spec.layouts) wsum += l.weight;

  std::vector<SynthExam> out;
  for (std::size_t e = 0; e < n; ++e) {
    SynthExam ex;
    ex.pathologies = present[e];
    char id[32];
    std::snprintf(id, sizeof id, "exam%04zu", e);
    ex.entry.exam_id = id;
    double u = rng.uniform() * wsum;
    const ViewLayout* layout = &spec.layouts.back();
    for (const auto& l : spec.layouts) {
      if (u < l.weight) {
        layout = &l;
        break;
      }
      u -= l.weight;
    }
    std::vector<SideTag> sides;
    if (layout->both_sides) {
      sides = {SideTag::L, SideTag::R};
    } else {
      sides = {rng.bernoulli(0.5) ? SideTag::L : SideTag::R};
    }
    const bool wb = rng.bernoulli(0.5);
    for (SideTag side : sides) {
      for (ViewTag v : layout->views) {
        BBox box;
        ViewImage img = render_view(spec, v, side, present[e], rng, box);
        img.weight_bearing = wb;
        ImageRef ref;
        ref.path = "images/" + ex.entry.exam_id + "_" + std::to_string(ex.images.size()) + ".pgm";
        ref.view = v;
        ref.side = side;
        ref.weight_bearing = wb;
        ex.entry.images.push_back(ref);
        ex.images.push_back(std::move(img));
        ex.boxes.push_back(box);
      }
    }
    ex.entry.report = synth_report(spec, present[e], rng);
    out.push_back(std::move(ex));
  }
  return out;
}

/// Writes manifest.jsonl, images/*.pgm, labels.tsv and bboxes.tsv under `dir`.
inline void write_synth(const std::string& dir, const SynthSpec& spec, const std::vector<SynthExam>& exams) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw DataError("cannot create dataset directory '" + dir + "': " + ec.message());
  std::vector<ExamManifestEntry> entries;
  std::ofstream labels(fs::path(dir) / "labels.tsv", std::ios::binary);
  std::ofstream boxes(fs::path(dir) / "bboxes.tsv", std::ios::binary);
  if (!labels || !boxes) throw DataError("cannot write into dataset directory '" + dir + "'");
  labels << "exam_id";
  for (const auto& p : spec.pathologies) labels << '\t' << p.name;
  labels << '\n';
  for (const auto& ex : exams) {
    labels << ex.entry.exam_id;
    for (bool b : ex.pathologies) labels << '\t' << (b ? 1 : 0);
    labels << '\n';
    for (std::size_t v = 0; v < ex.images.size(); ++v) {
      write_pgm((fs::path(dir) / ex.entry.images[v].path).string(), ex.images[v]);
      const BBox& b = ex.boxes[v];
      boxes << ex.entry.images[v].path << '\t' << format_double(b.x_min) << '\t' << format_double(b.y_min) << '\t'
            << format_double(b.width) << '\t' << format_double(b.height) << '\n';
    }
    entries.push_back(ex.entry);
  }
  save_manifest((fs::path(dir) / "manifest.jsonl").string(), entries);
}

/// Ground-truth box file: `image_path<TAB>x_min<TAB>y_min<TAB>width<TAB>height`.
inline std::map<std::string, BBox> load_bbox_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open bbox file '" + path + "'");
  std::map<std::string, BBox> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto t = line.find('\t', start);
      cols.push_back(line.substr(start, t - start));
      if (t == std::string::npos) break;
      start = t + 1;
    }
    if (cols.size() != 5) throw FormatError(path + ":" + std::to_string(lineno) + ": expected 5 columns");
    BBox b;
    try {
      b = {std::stod(cols[1]), std::stod(cols[2]), std::stod(cols[3]), std::stod(cols[4])};
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": bad number");
    }
    if (!b.valid()) throw DataError(path + ":" + std::to_string(lineno) + ": invalid box for '" + cols[0] + "'");
    out[cols[0]] = b;
  }
  return out;
}

}  // namespace xrgen
