#pragma once

// Binary checkpoint:
//   "XRGEN1"
//   u32 header length, header JSON {format_version, config, vocab, rules_version}
//   u32 tensor count
//   per tensor: u16 name length, name, u8 dtype (0=f32, 1=f64), u8 rank,
//               u32 dims[rank], little-endian values
// All integers are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xrgen/caption.hpp"
#include "xrgen/config.hpp"
#include "xrgen/error.hpp"
#include "xrgen/params.hpp"
#include "xrgen/text.hpp"

namespace xrgen {

inline constexpr char kCheckpointMagic[] = "XRGEN1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointFormatError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CheckpointTruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CheckpointShapeError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  RunConfig config;
  Vocab vocab;
  std::string rules_version;
  ModelParams params;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void bytes(const std::string& s) { buf_ += s; }
  const std::string& str() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string what) : d_(data), what_(std::move(what)) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == d_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (d_.size() - pos_ < n) {
      throw CheckpointTruncatedError(what_ + ": truncated at byte " + std::to_string(pos_) + " (need " +
                                     std::to_string(n) + " more)");
    }
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(d_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& d_;
  std::string what_;
  std::size_t pos_ = 0;
};

/// Names and shapes every caption model built from `cfg` must contain.
inline std::vector<std::pair<std::string, Shape>> expected_shapes(const RunConfig& cfg, std::size_t vocab_size) {
  Rng rng(0);
  ModelParams ref = init_caption_params(cfg.model_config(vocab_size), rng);
  std::vector<std::pair<std::string, Shape>> out;
  for (const auto& [name, t] : ref) out.emplace_back(name, t.shape());
  return out;
}

inline void check_shapes(const ModelParams& params, const RunConfig& cfg, std::size_t vocab_size,
                         const std::string& what) {
  for (const auto& [name, shape] : expected_shapes(cfg, vocab_size)) {
    if (!params.contains(name)) throw CheckpointShapeError(what + ": missing tensor '" + name + "'");
    const Shape& got = params.at(name).shape();
    if (got != shape) {
      throw CheckpointShapeError(what + ": tensor '" + name + "' has shape " + shape_str(got) + ", expected " +
                                 shape_str(shape));
    }
  }
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck, DType dtype = DType::f64) {
  detail::ByteWriter w;
  w.bytes(std::string(kCheckpointMagic, 6));
  const nlohmann::json header{{"format_version", ck.format_version},
                              {"config", to_json(ck.config)},
                              {"vocab", ck.vocab.serialize()},
                              {"rules_version", ck.rules_version}};
  const std::string hs = header.dump();
  w.u32(static_cast<std::uint32_t>(hs.size()));
  w.bytes(hs);
  w.u32(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params) {
    if (name.size() > 0xffff) throw UsageError("checkpoint: tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(dtype));
    if (t.rank() > 0xff) throw UsageError("checkpoint: tensor rank too large");
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) {
      if (dtype == DType::f64) {
        w.u64(std::bit_cast<std::uint64_t>(v));
      } else {
        w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  return w.str();
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  if (bytes.size() < 6 || bytes.compare(0, 6, kCheckpointMagic) != 0) {
    throw CheckpointFormatError(what + ": bad magic (not an XRGEN1 checkpoint)");
  }
  r.bytes(6);
  Checkpoint ck;
  const std::uint32_t hlen = r.u32();
  const std::string hs = r.bytes(hlen);
  try {
    const auto h = nlohmann::json::parse(hs);
    ck.format_version = h.at("format_version").get<std::uint32_t>();
    if (ck.format_version != kCheckpointVersion) {
      throw CheckpointFormatError(what + ": unsupported format version " + std::to_string(ck.format_version));
    }
    ck.config = config_from_json(h.at("config"));
    ck.vocab = Vocab::parse(h.at("vocab").get<std::string>());
    ck.rules_version = h.value("rules_version", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(what + ": malformed header: " + e.what());
  } catch (const UsageError& e) {
    throw CheckpointFormatError(what + ": bad config in header: " + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u16());
    const std::uint8_t dt = r.u8();
    if (dt > 1) throw CheckpointFormatError(what + ": tensor '" + name + "' has unknown dtype " + std::to_string(dt));
    const std::uint8_t rank = r.u8();
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const std::uint32_t d = r.u32();
      if (d == 0) throw CheckpointShapeError(what + ": tensor '" + name + "' has a zero dimension");
      shape.push_back(d);
    }
    if (shape.empty()) throw CheckpointShapeError(what + ": tensor '" + name + "' has rank 0");
    Tensor t = Tensor::zeros(shape, true);
    for (double& v : t.mutable_data()) {
      v = dt == 1 ? std::bit_cast<double>(r.u64()) : static_cast<double>(std::bit_cast<float>(r.u32()));
    }
    if (ck.params.contains(name)) throw CheckpointFormatError(what + ": duplicate tensor '" + name + "'");
    ck.params.add(name, std::move(t));
  }
  if (!r.at_end()) throw CheckpointFormatError(what + ": trailing bytes after tensor table");
  detail::check_shapes(ck.params, ck.config, ck.vocab.size(), what);
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck, DType dtype = DType::f64) {
  const std::string bytes = serialize_checkpoint(ck, dtype);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed for checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path);
}

/// Rejects a checkpoint whose tensors do not fit the model described by `run`.
inline void check_compatible(const Checkpoint& ck, const RunConfig& run) {
  detail::check_shapes(ck.params, run, ck.vocab.size(), "checkpoint incompatible with run config");
}

}  // namespace xrgen
