// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format (all integers little-endian):
//
//   "XSTR" | u32 version | u32 meta_len | meta (UTF-8 key=value lines)
//   then per tensor, in name order:
//   u32 name_len | name | u32 rank | u64 dims[rank] | f32 payload
//
// The digest is SHA-256 over the tensor table bytes only, so metadata changes
// never alter a checkpoint's identity.

#pragma once

#include <unistd.h>

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "xstr/digest.hpp"
#include "xstr/errors.hpp"
#include "xstr/params.hpp"

namespace xstr {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Phase { MultilingualPretrain, RpPretrain, Finetune, Baseline };

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::MultilingualPretrain: return "multilingual-pretrain";
    case Phase::RpPretrain: return "rp-pretrain";
    case Phase::Finetune: return "finetune";
    case Phase::Baseline: return "baseline";
  }
  return "?";
}

inline Phase parse_phase(const std::string& s) {
  for (auto p : {Phase::MultilingualPretrain, Phase::RpPretrain, Phase::Finetune, Phase::Baseline})
    if (to_string(p) == s) return p;
  fail(ErrorCode::BadCheckpoint, "unknown phase '" + s + "'");
}

/// Shortest decimal that round-trips the double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

namespace detail {

/// Metadata values are single lines: newline and backslash are escaped.
inline std::string escape_value(const std::string& v) {
  std::string out;
  for (char c : v) {
    if (c == '\\') out += "\\\\";
    else if (c == '\n') out += "\\n";
    else out += c;
  }
  return out;
}

inline std::string unescape_value(const std::string& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == '\\' && i + 1 < v.size()) {
      out += v[i + 1] == 'n' ? '\n' : v[i + 1];
      ++i;
    } else {
      out += v[i];
    }
  }
  return out;
}

}  // namespace detail

struct CheckpointMeta {
  Phase phase = Phase::Baseline;
  std::vector<std::string> parents;  // parameter digests
  std::string model_config;          // digest of the model config
  std::string charset;               // digest of the charset
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double val_accuracy = 0.0;
  std::map<std::string, std::string> extra;  // e.g. the full model config text

  std::string to_text() const {
    std::ostringstream os;
    os << "phase=" << to_string(phase) << '\n' << "parents=";
    for (std::size_t i = 0; i < parents.size(); ++i) os << (i ? "," : "") << parents[i];
    os << '\n'
       << "model_config=" << model_config << '\n'
       << "charset=" << charset << '\n'
       << "seed=" << seed << '\n'
       << "epoch=" << epoch << '\n'
       << "val_accuracy=" << format_double(val_accuracy) << '\n';
    for (const auto& [k, v] : extra) os << k << '=' << detail::escape_value(v) << '\n';
    return os.str();
  }

  static CheckpointMeta from_text(const std::string& text) {
    CheckpointMeta m;
    std::istringstream is(text);
    std::string line;
    std::map<std::string, std::string> kv;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, ErrorCode::BadCheckpoint, "malformed metadata line: " + line);
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto take = [&](const char* key) {
      auto it = kv.find(key);
      require(it != kv.end(), ErrorCode::BadCheckpoint, std::string("metadata lacks ") + key);
      std::string v = it->second;
      kv.erase(it);
      return v;
    };
    m.phase = parse_phase(take("phase"));
    std::istringstream parents(take("parents"));
    for (std::string p; std::getline(parents, p, ',');)
      if (!p.empty()) m.parents.push_back(p);
    m.model_config = take("model_config");
    m.charset = take("charset");
    try {
      m.seed = std::stoull(take("seed"));
      m.epoch = std::stoull(take("epoch"));
      m.val_accuracy = std::stod(take("val_accuracy"));
    } catch (const std::logic_error&) {
      fail(ErrorCode::BadCheckpoint, "non-numeric seed/epoch/val_accuracy");
    }
    for (auto& [k, v] : kv) m.extra[k] = detail::unescape_value(v);
    return m;
  }

  bool operator==(const CheckpointMeta&) const = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  bool done() const { return pos_ == b_.size(); }
  std::size_t pos() const { return pos_; }
  std::string bytes(std::size_t n) {
    require(n <= b_.size() - pos_, ErrorCode::BadCheckpoint, "truncated checkpoint");
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <class U>
  U scalar() {
    U v;
    const std::string s = bytes(sizeof(U));
    std::memcpy(&v, s.data(), sizeof(U));
    return v;
  }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serialized tensor table of a parameter set (the digest input).
inline std::string tensor_table(const ParamSet& params) {
  std::string out;
  for (const auto& [name, e] : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) detail::put_u64(out, d);
    out.append(reinterpret_cast<const char*>(e.value.data()), e.value.numel() * sizeof(float));
  }
  return out;
}

inline std::string params_digest(const ParamSet& params) { return sha256_hex(tensor_table(params)); }

struct Checkpoint {
  ParamSet params;
  CheckpointMeta meta;

  std::string digest() const { return params_digest(params); }

  std::string serialize() const {
    std::string out = "XSTR";
    detail::put_u32(out, kCheckpointVersion);
    const std::string meta_text = meta.to_text();
    detail::put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
    out += meta_text;
    out += tensor_table(params);
    return out;
  }

  static Checkpoint deserialize(const std::string& bytes) {
    detail::Reader r(bytes);
    require(r.bytes(4) == "XSTR", ErrorCode::BadCheckpoint, "bad magic");
    const auto version = r.scalar<std::uint32_t>();
    require(version == kCheckpointVersion, ErrorCode::BadCheckpoint, "unsupported version " + std::to_string(version));
    Checkpoint c;
    c.meta = CheckpointMeta::from_text(r.bytes(r.scalar<std::uint32_t>()));
    while (!r.done()) {
      const std::string name = r.bytes(r.scalar<std::uint32_t>());
      const auto rank = r.scalar<std::uint32_t>();
      require(rank >= 1 && rank <= 8, ErrorCode::BadCheckpoint, "bad rank for " + name);
      Shape shape(rank);
      for (auto& d : shape) d = static_cast<std::size_t>(r.scalar<std::uint64_t>());
      const std::size_t n = shape_numel(shape);
      require(n > 0 && n <= (bytes.size() - r.pos()) / sizeof(float), ErrorCode::BadCheckpoint,
              "bad payload size for " + name);
      AlignedVector<float> data(n);
      const std::string payload = r.bytes(n * sizeof(float));
      std::memcpy(data.data(), payload.data(), payload.size());
      try {
        c.params.add(name, Tensor(std::move(shape), std::move(data)));
      } catch (const Error& e) {
        fail(ErrorCode::BadCheckpoint, e.what());
      }
    }
    return c;
  }
};

/// Writes `bytes` to `path` via a temporary sibling file and rename.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::MissingFile, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(static_cast<bool>(out), ErrorCode::MissingFile, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { atomic_write(path, c.serialize()); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::MissingFile, "missing checkpoint " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return Checkpoint::deserialize(os.str());
}

}  // namespace xstr
