#pragma once

// Exam manifest: one JSON object per line,
//   {"exam_id": "...", "images": [{"path": "...", "view": "AP|L|S|unknown",
//     "side": "L|R|unknown", "weight_bearing": bool}, ...],
//    "report": "...", "split": "train|val|test|unassigned"}
// Image paths are relative to the manifest's directory.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "xrgen/error.hpp"
#include "xrgen/image.hpp"
#include "xrgen/rng.hpp"

namespace xrgen {

enum class Split { train, val, test, unassigned };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "unassigned";
  }
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  throw DataError("unknown split '" + s + "'");
}

struct ImageRef {
  std::string path;
  ViewTag view = ViewTag::unknown;
  SideTag side = SideTag::unknown;
  bool weight_bearing = false;

  bool operator==(const ImageRef&) const = default;
};

struct ExamManifestEntry {
  std::string exam_id;
  std::vector<ImageRef> images;
  std::string report;
  Split split = Split::unassigned;

  bool operator==(const ExamManifestEntry&) const = default;
};

inline nlohmann::json to_json(const ExamManifestEntry& e) {
  nlohmann::json imgs = nlohmann::json::array();
  for (const auto& im : e.images) {
    imgs.push_back({{"path", im.path},
                    {"view", to_string(im.view)},
                    {"side", to_string(im.side)},
                    {"weight_bearing", im.weight_bearing}});
  }
  return {{"exam_id", e.exam_id}, {"images", imgs}, {"report", e.report}, {"split", to_string(e.split)}};
}

inline std::string serialize_manifest(const std::vector<ExamManifestEntry>& entries) {
  std::string s;
  for (const auto& e : entries) s += to_json(e).dump() + '\n';
  return s;
}

inline void save_manifest(const std::string& path, const std::vector<ExamManifestEntry>& entries) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write manifest '" + path + "'");
  f << serialize_manifest(entries);
}

/// Parses and validates a manifest. With `check_paths`, every image path
/// must resolve relative to the manifest directory.
inline std::vector<ExamManifestEntry> load_manifest(const std::string& path, bool check_paths = true) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open manifest '" + path + "'");
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<ExamManifestEntry> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    ExamManifestEntry e;
    try {
      const auto j = nlohmann::json::parse(line);
      e.exam_id = j.at("exam_id").get<std::string>();
      e.report = j.at("report").get<std::string>();
      e.split = parse_split(j.value("split", std::string("unassigned")));
      for (const auto& im : j.at("images")) {
        ImageRef r;
        r.path = im.at("path").get<std::string>();
        r.view = parse_view_tag(im.value("view", std::string("unknown")));
        r.side = parse_side_tag(im.value("side", std::string("unknown")));
        r.weight_bearing = im.value("weight_bearing", false);
        e.images.push_back(std::move(r));
      }
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(where + ": malformed manifest entry: " + ex.what());
    }
    if (e.exam_id.empty()) throw DataError(where + ": empty exam_id");
    if (!ids.insert(e.exam_id).second) throw DataError(where + ": duplicate exam_id '" + e.exam_id + "'");
    if (e.images.empty()) throw DataError("exam '" + e.exam_id + "' has no images");
    if (check_paths) {
      for (const auto& im : e.images) {
        if (!std::filesystem::exists(base / im.path)) {
          throw DataError("exam '" + e.exam_id + "': image '" + im.path + "' not found");
        }
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// Seeded exam-level split. Counts are round(ratio * n) for train and val;
/// test takes the remainder.
inline std::vector<ExamManifestEntry> split_dataset(std::vector<ExamManifestEntry> entries,
                                                    std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    throw UsageError("split_dataset: ratios must be non-negative and sum to 1");
  }
  if (entries.size() < 3) {
    throw DataError("split_dataset: " + std::to_string(entries.size()) + " exams cannot fill 3 splits");
  }
  const std::size_t n = entries.size();
  const std::size_t n_train = static_cast<std::size_t>(std::lround(ratios[0] * static_cast<double>(n)));
  const std::size_t n_val = std::min(n - n_train, static_cast<std::size_t>(std::lround(ratios[1] * static_cast<double>(n))));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  for (std::size_t k = 0; k < n; ++k) {
    entries[order[k]].split = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
  }
  return entries;
}

}  // namespace xrgen
