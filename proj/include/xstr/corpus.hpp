// SPDX-License-Identifier: Apache-2.0
//
// Synthetic two-script corpora and corpus directories on disk.
//
// A charset is a list of 7x7 binary glyphs. Text lines are rendered by pasting
// glyphs left to right on a dark canvas (ink = 1) and then applying a seeded
// rotation, sinusoidal vertical curve, Gaussian blur and additive noise.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <png.h>

#include "xstr/digest.hpp"
#include "xstr/errors.hpp"
#include "xstr/rng.hpp"
#include "xstr/symbols.hpp"
#include "xstr/tensor.hpp"

namespace xstr {

inline constexpr std::size_t kGlyphSide = 7;
inline constexpr std::size_t kMaxLabelLength = 32;

using Glyph = std::array<std::uint8_t, kGlyphSide * kGlyphSide>;

inline std::size_t glyph_ink(const Glyph& g) {
  return static_cast<std::size_t>(std::count(g.begin(), g.end(), std::uint8_t{1}));
}

/// 4-connectivity of the set cells.
inline bool glyph_connected(const Glyph& g) {
  const std::size_t total = glyph_ink(g);
  if (total == 0) return false;
  std::array<bool, kGlyphSide * kGlyphSide> seen{};
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i]) {
      stack.push_back(i);
      seen[i] = true;
      break;
    }
  std::size_t reached = 0;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    ++reached;
    const std::size_t r = i / kGlyphSide, c = i % kGlyphSide;
    const std::size_t nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
    for (const auto& n : nbrs) {
      if (n[0] >= kGlyphSide || n[1] >= kGlyphSide) continue;  // unsigned wrap covers -1
      const std::size_t j = n[0] * kGlyphSide + n[1];
      if (g[j] && !seen[j]) {
        seen[j] = true;
        stack.push_back(j);
      }
    }
  }
  return reached == total;
}

struct Charset {
  std::string language_id;
  std::vector<Glyph> glyphs;      // one per symbol; may be empty for ingested charsets
  std::vector<std::string> text;  // UTF-8 spelling of each symbol

  std::size_t symbol_count() const { return text.size(); }
  std::size_t vocab_size() const { return symbol_count() + Specials::kCount; }
  Specials specials() const { return Specials::for_vocab(vocab_size()); }
  bool has_glyphs() const { return !glyphs.empty(); }

  void validate() const {
    require(!language_id.empty(), ErrorCode::BadSpec, "charset needs a language id");
    require(symbol_count() > 0, ErrorCode::BadSpec, "charset has no symbols");
    require(!has_glyphs() || glyphs.size() == text.size(), ErrorCode::BadSpec, "glyph count mismatch");
    std::map<std::string, std::size_t> spellings;
    for (std::size_t i = 0; i < text.size(); ++i)
      require(spellings.emplace(text[i], i).second, ErrorCode::BadSpec, "duplicate symbol text '" + text[i] + "'");
    for (std::size_t i = 0; i < glyphs.size(); ++i) {
      require(glyph_ink(glyphs[i]) >= 4, ErrorCode::BadSpec, "glyph " + std::to_string(i) + " has fewer than 4 cells");
      for (std::size_t j = 0; j < i; ++j)
        require(glyphs[i] != glyphs[j], ErrorCode::BadSpec,
                "glyphs " + std::to_string(j) + " and " + std::to_string(i) + " are identical");
    }
  }

  std::optional<SymbolId> lookup(std::string_view s) const {
    for (std::size_t i = 0; i < text.size(); ++i)
      if (text[i] == s) return static_cast<SymbolId>(i);
    return std::nullopt;
  }

  /// SHA-256 over the language id, symbol spellings and glyph bits.
  std::string digest() const {
    Sha256 h;
    h.update(language_id);
    h.update(std::string_view("\n", 1));
    for (std::size_t i = 0; i < text.size(); ++i) {
      h.update(text[i]);
      h.update(std::string_view("\t", 1));
      if (has_glyphs())
        for (auto b : glyphs[i]) h.update(std::string_view(b ? "1" : "0", 1));
      h.update(std::string_view("\n", 1));
    }
    return h.hex();
  }
};

/// 36 fixed Latin-like glyphs: A-Z then 0-9 (5x7 strokes centered in 7x7).
inline Charset latin_charset(std::string language_id = "latin") {
  static constexpr const char* kRows[36][7] = {
      {"01110", "10001", "10001", "11111", "10001", "10001", "10001"},  // A
      {"11110", "10001", "10001", "11110", "10001", "10001", "11110"},
      {"01110", "10001", "10000", "10000", "10000", "10001", "01110"},
      {"11110", "10001", "10001", "10001", "10001", "10001", "11110"},
      {"11111", "10000", "10000", "11110", "10000", "10000", "11111"},
      {"11111", "10000", "10000", "11110", "10000", "10000", "10000"},
      {"01110", "10001", "10000", "10111", "10001", "10001", "01111"},
      {"10001", "10001", "10001", "11111", "10001", "10001", "10001"},
      {"01110", "00100", "00100", "00100", "00100", "00100", "01110"},
      {"00111", "00010", "00010", "00010", "00010", "10010", "01100"},
      {"10001", "10010", "10100", "11000", "10100", "10010", "10001"},
      {"10000", "10000", "10000", "10000", "10000", "10000", "11111"},
      {"10001", "11011", "10101", "10101", "10001", "10001", "10001"},
      {"10001", "10001", "11001", "10101", "10011", "10001", "10001"},
      {"01110", "10001", "10001", "10001", "10001", "10001", "01110"},
      {"11110", "10001", "10001", "11110", "10000", "10000", "10000"},
      {"01110", "10001", "10001", "10001", "10101", "10010", "01101"},
      {"11110", "10001", "10001", "11110", "10100", "10010", "10001"},
      {"01111", "10000", "10000", "01110", "00001", "00001", "11110"},
      {"11111", "00100", "00100", "00100", "00100", "00100", "00100"},
      {"10001", "10001", "10001", "10001", "10001", "10001", "01110"},
      {"10001", "10001", "10001", "10001", "10001", "01010", "00100"},
      {"10001", "10001", "10001", "10101", "10101", "10101", "01010"},
      {"10001", "10001", "01010", "00100", "01010", "10001", "10001"},
      {"10001", "10001", "10001", "01010", "00100", "00100", "00100"},
      {"11111", "00001", "00010", "00100", "01000", "10000", "11111"},  // Z
      {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},  // 0
      {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
      {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
      {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
      {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
      {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
      {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
      {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
      {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
      {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},  // 9
  };
  static constexpr const char* kNames = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  Charset cs;
  cs.language_id = std::move(language_id);
  for (std::size_t s = 0; s < 36; ++s) {
    Glyph g{};
    for (std::size_t r = 0; r < kGlyphSide; ++r)
      for (std::size_t c = 0; c < 5; ++c) g[r * kGlyphSide + c + 1] = kRows[s][r][c] == '1';
    cs.glyphs.push_back(g);
    cs.text.emplace_back(1, kNames[s]);
  }
  return cs;
}

namespace detail {

inline std::string utf8(std::uint32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

/// Splits UTF-8 text into code-point strings; nullopt on malformed input.
inline std::optional<std::vector<std::string>> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto b = static_cast<unsigned char>(s[i]);
    const std::size_t n = b < 0x80 ? 1 : (b >> 5) == 0x6 ? 2 : (b >> 4) == 0xE ? 3 : (b >> 3) == 0x1E ? 4 : 0;
    if (n == 0 || i + n > s.size()) return std::nullopt;
    for (std::size_t k = 1; k < n; ++k)
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return std::nullopt;
    out.emplace_back(s.substr(i, n));
    i += n;
  }
  return out;
}

}  // namespace detail

/// `count` procedural glyphs grown as seeded random connected blobs of 10-20
/// cells over the full 7x7 cell. Glyphs equal to any entry of `avoid` are
/// redrawn. Symbols are spelled with private-use code points U+E000 + i.
inline Charset procedural_charset(std::size_t count, std::uint64_t seed, std::string language_id = "synthetic",
                                  const std::vector<Glyph>& avoid = {}) {
  require(count > 0, ErrorCode::BadSpec, "procedural charset needs at least one symbol");
  Charset cs;
  cs.language_id = std::move(language_id);
  Rng rng(derive_seed(seed, "procedural-glyphs"));
  while (cs.glyphs.size() < count) {
    Glyph g{};
    const std::size_t target = static_cast<std::size_t>(rng.between(10, 20));
    g[rng.below(g.size())] = 1;
    while (glyph_ink(g) < target) {
      // Grow from a random set cell into a random 4-neighbour.
      std::vector<std::size_t> set;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (g[i]) set.push_back(i);
      const std::size_t from = set[rng.below(set.size())];
      const std::size_t r = from / kGlyphSide, c = from % kGlyphSide;
      const std::size_t dir = rng.below(4);
      const std::size_t nr = dir == 0 ? r - 1 : dir == 1 ? r + 1 : r;
      const std::size_t nc = dir == 2 ? c - 1 : dir == 3 ? c + 1 : c;
      if (nr < kGlyphSide && nc < kGlyphSide) g[nr * kGlyphSide + nc] = 1;
    }
    if (!glyph_connected(g)) continue;
    if (std::find(cs.glyphs.begin(), cs.glyphs.end(), g) != cs.glyphs.end()) continue;
    if (std::find(avoid.begin(), avoid.end(), g) != avoid.end()) continue;
    cs.text.push_back(detail::utf8(0xE000 + static_cast<std::uint32_t>(cs.glyphs.size())));
    cs.glyphs.push_back(g);
  }
  return cs;
}

struct DistortionSpec {
  double rotate_deg_max = 15.0;
  double curve_amp_px = 3.0;
  double blur_sigma_max = 1.0;
  double noise_std = 0.05;
  bool enabled = true;

  bool operator==(const DistortionSpec&) const = default;
};

struct CorpusSpec {
  Charset charset;
  std::size_t n_samples = 0;
  std::size_t image_h = 32;
  std::size_t image_w = 96;
  std::size_t len_min = 1;
  std::size_t len_max = 10;
  DistortionSpec distortion;
  double split_ratio = 0.9;
  std::uint64_t seed = 0;
};

struct Sample {
  Tensor image;  // (1, H, W) in [0, 1]
  Label label;
  std::string language_id;
};

struct CorpusSplit {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Paste geometry for a canvas: glyph cells are `cell_w` x `cell_h` pixels,
/// consecutive glyphs start `pitch` pixels apart, text starts at (x0, y0).
struct GlyphLayout {
  std::size_t cell_w, cell_h, pitch, x0, y0;

  static GlyphLayout for_canvas(std::size_t h, std::size_t w, std::size_t len_max) {
    GlyphLayout l{};
    l.cell_h = std::max<std::size_t>(1, h / 2 / kGlyphSide);
    l.cell_w = std::max<std::size_t>(1, w / (len_max * (kGlyphSide + 2) + 6));
    l.pitch = (kGlyphSide + 2) * l.cell_w;
    l.x0 = w > len_max * l.pitch ? (w - len_max * l.pitch) / 2 : 0;
    l.y0 = h > kGlyphSide * l.cell_h ? (h - kGlyphSide * l.cell_h) / 2 : 0;
    return l;
  }
};

inline void validate_spec(const CorpusSpec& spec) {
  auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::BadSpec, what); };
  spec.charset.validate();
  check(spec.charset.has_glyphs(), "charset has no glyphs to render");
  check(spec.n_samples >= 10, "n_samples must be at least 10, got " + std::to_string(spec.n_samples));
  check(spec.split_ratio > 0.0 && spec.split_ratio < 1.0, "split_ratio must lie in (0, 1)");
  check(spec.len_min >= 1 && spec.len_min <= spec.len_max && spec.len_max <= kMaxLabelLength,
        "len_range must lie within [1, " + std::to_string(kMaxLabelLength) + "]");
  check(spec.image_h >= kGlyphSide && spec.image_w >= 4, "image too small");
  const auto l = GlyphLayout::for_canvas(spec.image_h, spec.image_w, spec.len_max);
  check(l.x0 + spec.len_max * l.pitch <= spec.image_w, "len_max glyphs do not fit the image width");
  const auto& d = spec.distortion;
  check(d.rotate_deg_max >= 0 && d.curve_amp_px >= 0 && d.blur_sigma_max >= 0 && d.noise_std >= 0,
        "distortion magnitudes must be non-negative");
}

namespace detail {

inline double bilinear(const std::vector<float>& img, std::size_t h, std::size_t w, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  auto px = [&](double yy, double xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<double>(h) || xx >= static_cast<double>(w)) return 0.0;
    return img[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
  };
  return (1 - ay) * ((1 - ax) * px(fy, fx) + ax * px(fy, fx + 1)) + ay * ((1 - ax) * px(fy + 1, fx) + ax * px(fy + 1, fx + 1));
}

inline void gaussian_blur(std::vector<float>& img, std::size_t h, std::size_t w, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double z = 0;
  for (int i = -radius; i <= radius; ++i) z += (k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v /= z;
  std::vector<float> tmp(img.size());
  const auto H = static_cast<int>(h), W = static_cast<int>(w);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        if (x + i >= 0 && x + i < W) acc += k[i + radius] * img[y * W + x + i];
      tmp[y * W + x] = static_cast<float>(acc);
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        if (y + i >= 0 && y + i < H) acc += k[i + radius] * tmp[(y + i) * W + x];
      img[y * W + x] = static_cast<float>(acc);
    }
}

}  // namespace detail

/// Renders `text` for `spec` with distortion parameters drawn from `sample_seed`.
inline Tensor render_string(const Label& text, const Charset& charset, const CorpusSpec& spec,
                            std::uint64_t sample_seed) {
  require(!text.empty(), ErrorCode::EmptyText, "cannot render an empty string");
  require(text.size() <= spec.len_max, ErrorCode::BadSpec,
          "text of length " + std::to_string(text.size()) + " exceeds len_max " + std::to_string(spec.len_max));
  for (SymbolId id : text)
    require(id < charset.symbol_count(), ErrorCode::UnknownSymbol,
            "symbol id " + std::to_string(id) + " is not a non-special symbol of '" + charset.language_id + "'");
  require(charset.glyphs.size() == charset.symbol_count(), ErrorCode::BadSpec, "charset has no glyphs to render");

  const std::size_t H = spec.image_h, W = spec.image_w;
  const auto lay = GlyphLayout::for_canvas(H, W, spec.len_max);
  std::vector<float> img(H * W, 0.0f);
  for (std::size_t k = 0; k < text.size(); ++k) {
    const Glyph& g = charset.glyphs[text[k]];
    for (std::size_t r = 0; r < kGlyphSide; ++r)
      for (std::size_t c = 0; c < kGlyphSide; ++c) {
        if (!g[r * kGlyphSide + c]) continue;
        for (std::size_t dy = 0; dy < lay.cell_h; ++dy)
          for (std::size_t dx = 0; dx < lay.cell_w; ++dx) {
            const std::size_t y = lay.y0 + r * lay.cell_h + dy;
            const std::size_t x = lay.x0 + k * lay.pitch + c * lay.cell_w + dx;
            if (y < H && x < W) img[y * W + x] = 1.0f;
          }
      }
  }

  const DistortionSpec& d = spec.distortion;
  if (d.enabled) {
    Rng rng(sample_seed);
    const double pi = 3.14159265358979323846;
    double angle = rng.uniform(-d.rotate_deg_max, d.rotate_deg_max) * pi / 180.0;
    const double amp = rng.uniform(-d.curve_amp_px, d.curve_amp_px);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double sigma = rng.uniform(0.0, d.blur_sigma_max);

    if (angle != 0.0 || amp != 0.0) {
      const double cx = static_cast<double>(lay.x0) + static_cast<double>(text.size() * lay.pitch) / 2.0;
      const double cy = static_cast<double>(H) / 2.0;
      // Shrink the angle until the rotated text box plus curve stays on the canvas.
      const double half_w = static_cast<double>(text.size() * lay.pitch) / 2.0;
      const double half_h = static_cast<double>(kGlyphSide * lay.cell_h) / 2.0;
      for (int i = 0; i < 64; ++i) {
        const double extent = half_w * std::abs(std::sin(angle)) + half_h * std::cos(angle) + std::abs(amp);
        if (extent <= cy) break;
        angle *= 0.9;
      }
      const double ca = std::cos(angle), sa = std::sin(angle);
      std::vector<float> out(H * W);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double xf = static_cast<double>(x);
          const double yf = static_cast<double>(y) - amp * std::sin(2.0 * pi * xf / static_cast<double>(W) + phase);
          const double dx = xf - cx, dy = yf - cy;
          out[y * W + x] = static_cast<float>(detail::bilinear(img, H, W, cx + ca * dx + sa * dy, cy - sa * dx + ca * dy));
        }
      img.swap(out);
    }
    if (sigma > 0.0) detail::gaussian_blur(img, H, W, sigma);
    if (d.noise_std > 0.0)
      for (auto& v : img) v += static_cast<float>(d.noise_std * rng.normal());
    for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
  }
  return Tensor({1, H, W}, std::move(img));
}

/// Number of training samples for `n` samples at `ratio`.
inline std::size_t train_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratio));
}

/// Sample i draws its label from derive_seed(seed, i) and its distortion from
/// a child of that seed, so the corpus does not depend on generation order.
inline CorpusSplit generate_corpus(const CorpusSpec& spec) {
  validate_spec(spec);
  const std::size_t n_train = train_count(spec.n_samples, spec.split_ratio);
  require(n_train > 0 && n_train < spec.n_samples, ErrorCode::BadSpec, "split leaves an empty side");
  CorpusSplit out;
  out.train.reserve(n_train);
  out.test.reserve(spec.n_samples - n_train);
  const std::size_t nsym = spec.charset.symbol_count();
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const std::uint64_t s = derive_seed(spec.seed, static_cast<std::uint64_t>(i));
    Rng rng(s);
    Label label(static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(spec.len_min),
                                                     static_cast<std::int64_t>(spec.len_max))));
    for (auto& c : label) c = static_cast<SymbolId>(rng.below(nsym));
    Sample sample{render_string(label, spec.charset, spec, derive_seed(s, "render")), std::move(label),
                  spec.charset.language_id};
    (i < n_train ? out.train : out.test).push_back(std::move(sample));
  }
  return out;
}

struct MultilingualSet {
  Charset charset;  // union: rp symbols first, then rr
  std::vector<Sample> samples;
};

/// Union vocabulary of two charsets: rp symbols keep their ids, rr symbols are
/// offset by |rp|. Fails with VocabClash when the two scripts share a language
/// id, a symbol spelling or a glyph bitmap.
inline Charset union_charset(const Charset& rp, const Charset& rr) {
  require(rp.language_id != rr.language_id, ErrorCode::VocabClash,
          "both charsets are tagged '" + rp.language_id + "'");
  for (const auto& t : rr.text)
    require(!rp.lookup(t), ErrorCode::VocabClash, "symbol '" + t + "' exists in both charsets");
  for (const auto& g : rr.glyphs)
    require(std::find(rp.glyphs.begin(), rp.glyphs.end(), g) == rp.glyphs.end(), ErrorCode::VocabClash,
            "a glyph bitmap exists in both charsets");
  Charset u;
  u.language_id = rp.language_id + "+" + rr.language_id;
  u.text = rp.text;
  u.text.insert(u.text.end(), rr.text.begin(), rr.text.end());
  if (rp.has_glyphs() && rr.has_glyphs()) {
    u.glyphs = rp.glyphs;
    u.glyphs.insert(u.glyphs.end(), rr.glyphs.begin(), rr.glyphs.end());
  }
  return u;
}

/// rp followed by rr, re-indexed into the union vocabulary.
inline MultilingualSet make_multilingual(const Charset& rp_charset, const std::vector<Sample>& rp,
                                         const Charset& rr_charset, const std::vector<Sample>& rr) {
  MultilingualSet out{union_charset(rp_charset, rr_charset), {}};
  out.samples.reserve(rp.size() + rr.size());
  const auto offset = static_cast<SymbolId>(rp_charset.symbol_count());
  auto append = [&](const std::vector<Sample>& src, const Charset& cs, SymbolId shift) {
    for (const auto& s : src) {
      require(s.language_id == cs.language_id, ErrorCode::VocabClash,
              "sample tagged '" + s.language_id + "' in a '" + cs.language_id + "' set");
      Sample t = s;
      for (auto& c : t.label) {
        require(c < cs.symbol_count(), ErrorCode::UnknownSymbol, "label id outside its charset");
        c += shift;
      }
      out.samples.push_back(std::move(t));
    }
  };
  append(rp, rp_charset, 0);
  append(rr, rr_charset, offset);
  return out;
}

// ---------------------------------------------------------------------------
// Images on disk

namespace detail {

struct Gray {
  std::size_t h = 0, w = 0;
  std::vector<float> px;  // [0, 1]
};

inline std::optional<Gray> read_pnm(const std::string& bytes) {
  std::istringstream is(bytes);
  std::string magic;
  is >> magic;
  if (magic != "P2" && magic != "P5" && magic != "P3" && magic != "P6") return std::nullopt;
  auto next_int = [&is]() -> std::optional<long> {
    while (is >> std::ws && is.peek() == '#') {
      std::string skip;
      std::getline(is, skip);
    }
    long v;
    if (!(is >> v)) return std::nullopt;
    return v;
  };
  const auto w = next_int(), h = next_int(), maxval = next_int();
  if (!w || !h || !maxval || *w <= 0 || *h <= 0 || *maxval <= 0 || *maxval > 65535) return std::nullopt;
  const bool color = magic == "P3" || magic == "P6";
  const bool binary = magic == "P5" || magic == "P6";
  const std::size_t channels = color ? 3 : 1;
  const std::size_t n = static_cast<std::size_t>(*w) * static_cast<std::size_t>(*h);
  Gray g{static_cast<std::size_t>(*h), static_cast<std::size_t>(*w), std::vector<float>(n)};
  std::vector<double> raw(n * channels);
  if (binary) {
    is.get();  // single whitespace after maxval
    const std::size_t bytes_per = *maxval > 255 ? 2 : 1;
    std::string data(n * channels * bytes_per, '\0');
    if (!is.read(data.data(), static_cast<std::streamsize>(data.size()))) return std::nullopt;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const auto* b = reinterpret_cast<const unsigned char*>(data.data()) + i * bytes_per;
      raw[i] = bytes_per == 2 ? (b[0] << 8 | b[1]) : b[0];
    }
  } else {
    for (auto& v : raw) {
      const auto x = next_int();
      if (!x) return std::nullopt;
      v = static_cast<double>(*x);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double v = raw[i * channels];
    if (color) v = 0.299 * raw[i * 3] + 0.587 * raw[i * 3 + 1] + 0.114 * raw[i * 3 + 2];
    g.px[i] = static_cast<float>(std::clamp(v / static_cast<double>(*maxval), 0.0, 1.0));
  }
  return g;
}

inline std::optional<Gray> read_png(const std::string& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) return std::nullopt;
  image.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    return std::nullopt;
  }
  Gray g{image.height, image.width, std::vector<float>(buf.size())};
  for (std::size_t i = 0; i < buf.size(); ++i) g.px[i] = static_cast<float>(buf[i]) / 255.0f;
  return g;
}

inline std::optional<std::string> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace detail

/// Writes a (1,H,W) tensor as binary PGM, maxval 255, value round(255 v).
inline void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  require(image.rank() == 3 && image.dim(0) == 1, ErrorCode::ShapeMismatch, "write_pgm needs (1,H,W)");
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::MissingFile, "cannot write " + path.string());
  out << "P5\n" << image.dim(2) << ' ' << image.dim(1) << "\n255\n";
  std::string px(image.numel(), '\0');
  for (std::size_t i = 0; i < image.numel(); ++i)
    px[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f)));
  out.write(px.data(), static_cast<std::streamsize>(px.size()));
}

/// Grayscale image in [0, 1] from PGM/PPM or PNG; nullopt when undecodable.
inline std::optional<Tensor> read_image(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  if (!bytes) return std::nullopt;
  std::optional<detail::Gray> g;
  if (bytes->size() >= 8 && bytes->compare(0, 4, "\x89PNG") == 0)
    g = detail::read_png(*bytes);
  else
    g = detail::read_pnm(*bytes);
  if (!g) return std::nullopt;
  return Tensor({1, g->h, g->w}, std::move(g->px));
}

/// Scales to the target height keeping aspect (or to the target width when the
/// scaled line would be too wide) by area averaging, then pads right and below
/// with `background`.
inline Tensor fit_image(const Tensor& src, std::size_t H, std::size_t W, float background = 0.0f) {
  const std::size_t sh = src.dim(1), sw = src.dim(2);
  double scale = static_cast<double>(H) / static_cast<double>(sh);
  if (static_cast<double>(sw) * scale > static_cast<double>(W)) scale = static_cast<double>(W) / static_cast<double>(sw);
  const auto th = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(static_cast<double>(sh) * scale)), 1, H);
  const auto tw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(static_cast<double>(sw) * scale)), 1, W);
  Tensor out({1, H, W}, background);
  const double ry = static_cast<double>(sh) / static_cast<double>(th);
  const double rx = static_cast<double>(sw) / static_cast<double>(tw);
  for (std::size_t y = 0; y < th; ++y)
    for (std::size_t x = 0; x < tw; ++x) {
      // Box filter over the source footprint [y*ry, (y+1)*ry) x [x*rx, (x+1)*rx).
      const double y0 = static_cast<double>(y) * ry, y1 = y0 + ry;
      const double x0 = static_cast<double>(x) * rx, x1 = x0 + rx;
      double acc = 0, area = 0;
      for (auto sy = static_cast<std::size_t>(y0); static_cast<double>(sy) < y1 && sy < sh; ++sy) {
        const double wy = std::min(y1, static_cast<double>(sy + 1)) - std::max(y0, static_cast<double>(sy));
        for (auto sx = static_cast<std::size_t>(x0); static_cast<double>(sx) < x1 && sx < sw; ++sx) {
          const double wx = std::min(x1, static_cast<double>(sx + 1)) - std::max(x0, static_cast<double>(sx));
          acc += wy * wx * src[sy * sw + sx];
          area += wy * wx;
        }
      }
      out[y * W + x] = static_cast<float>(acc / area);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus directories: images/{index}.pgm, labels.tsv, charset.txt (+ glyphs.txt)

/// Writes samples (and the charset they index) to `dir`, replacing any
/// previous corpus files there.
inline void save_corpus_dir(const std::filesystem::path& dir, const Charset& charset, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream labels(dir / "labels.tsv", std::ios::binary);
  require(static_cast<bool>(labels), ErrorCode::MissingFile, "cannot write " + (dir / "labels.tsv").string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    write_pgm(dir / "images" / (std::to_string(i) + ".pgm"), samples[i].image);
    labels << i << '\t';
    for (std::size_t k = 0; k < samples[i].label.size(); ++k) labels << (k ? " " : "") << samples[i].label[k];
    labels << '\t' << samples[i].language_id << '\n';
  }
  std::ofstream cs(dir / "charset.txt", std::ios::binary);
  for (std::size_t i = 0; i < charset.symbol_count(); ++i) cs << i << '\n';
  cs << "#SOS\n#EOS\n#PAD\n";
  std::ofstream gl(dir / "glyphs.txt", std::ios::binary);
  gl << charset.language_id << '\n';
  for (std::size_t i = 0; i < charset.symbol_count(); ++i) {
    gl << charset.text[i] << '\t';
    if (charset.has_glyphs())
      for (auto b : charset.glyphs[i]) gl << (b ? '1' : '0');
    gl << '\n';
  }
}

struct CorpusDir {
  Charset charset;
  std::vector<Sample> samples;
};

/// Reads a directory written by save_corpus_dir. Without glyphs.txt the
/// charset is named by the samples' language id and symbols are spelled by
/// their decimal ids.
inline CorpusDir load_corpus_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  for (const char* f : {"labels.tsv", "charset.txt"})
    require(fs::exists(dir / f), ErrorCode::MissingFile, "missing " + (dir / f).string());
  CorpusDir out;

  std::ifstream cs(dir / "charset.txt");
  std::string line;
  std::size_t count = 0;
  std::vector<std::string> tail;
  while (std::getline(cs, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      tail.push_back(line);
      continue;
    }
    require(tail.empty() && line == std::to_string(count), ErrorCode::BadSpec,
            "charset.txt must list ids 0..n-1 before the specials");
    ++count;
  }
  require(tail == std::vector<std::string>{"#SOS", "#EOS", "#PAD"}, ErrorCode::BadSpec,
          "charset.txt must end with #SOS #EOS #PAD");

  if (fs::exists(dir / "glyphs.txt")) {
    std::ifstream gl(dir / "glyphs.txt");
    std::getline(gl, out.charset.language_id);
    bool all_glyphs = true;
    std::vector<Glyph> glyphs;
    while (std::getline(gl, line)) {
      const auto tab = line.find('\t');
      require(tab != std::string::npos, ErrorCode::BadSpec, "malformed glyphs.txt line");
      out.charset.text.push_back(line.substr(0, tab));
      const std::string bits = line.substr(tab + 1);
      Glyph g{};
      if (bits.size() == g.size()) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = bits[i] == '1';
        glyphs.push_back(g);
      } else {
        all_glyphs = false;
      }
    }
    if (all_glyphs) out.charset.glyphs = std::move(glyphs);
    require(out.charset.text.size() == count, ErrorCode::BadSpec, "glyphs.txt and charset.txt disagree");
  } else {
    for (std::size_t i = 0; i < count; ++i) out.charset.text.push_back(std::to_string(i));
  }

  std::ifstream labels(dir / "labels.tsv");
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string index, ids, lang;
    require(std::getline(row, index, '\t') && std::getline(row, ids, '\t') && std::getline(row, lang),
            ErrorCode::BadSpec, "malformed labels.tsv line: " + line);
    Sample s;
    std::istringstream idstream(ids);
    for (unsigned long id; idstream >> id;) {
      require(id < count, ErrorCode::UnknownSymbol, "label id " + std::to_string(id) + " outside charset");
      s.label.push_back(static_cast<SymbolId>(id));
    }
    require(!s.label.empty(), ErrorCode::EmptyText, "empty label for image " + index);
    s.language_id = lang;
    const auto path = dir / "images" / (index + ".pgm");
    require(fs::exists(path), ErrorCode::MissingFile, "missing " + path.string());
    auto img = read_image(path);
    require(img.has_value(), ErrorCode::UndecodableImage, "cannot decode " + path.string());
    s.image = std::move(*img);
    out.samples.push_back(std::move(s));
  }
  if (out.charset.language_id.empty()) out.charset.language_id = out.samples.empty() ? "unknown" : out.samples[0].language_id;
  return out;
}

struct ExternalCorpus {
  std::vector<Sample> samples;
  std::size_t excluded_out_of_charset = 0;
  std::size_t skipped_undecodable = 0;
};

/// Ingests cropped text images listed in `labels_file` (`filename<TAB>UTF-8
/// text` per line, paths relative to `dir_path`). Each image is fitted to
/// H x W; labels with symbols outside `charset` are dropped and counted, and
/// unreadable images are skipped and counted.
inline ExternalCorpus load_external_corpus(const std::filesystem::path& dir_path, const std::filesystem::path& labels_file,
                                           const Charset& charset, std::size_t H = 32, std::size_t W = 96,
                                           bool invert = false) {
  namespace fs = std::filesystem;
  require(fs::is_directory(dir_path), ErrorCode::MissingFile, "missing directory " + dir_path.string());
  require(fs::exists(labels_file), ErrorCode::MissingFile, "missing labels file " + labels_file.string());
  ExternalCorpus out;
  std::ifstream in(labels_file, std::ios::binary);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      ++out.skipped_undecodable;
      continue;
    }
    const auto chars = detail::utf8_chars(std::string_view(line).substr(tab + 1));
    Label label;
    bool ok = chars.has_value() && !chars->empty() && chars->size() <= kMaxLabelLength;
    if (ok)
      for (const auto& ch : *chars) {
        const auto id = charset.lookup(ch);
        if (!id) {
          ok = false;
          break;
        }
        label.push_back(*id);
      }
    if (!ok) {
      ++out.excluded_out_of_charset;
      continue;
    }
    auto img = read_image(dir_path / line.substr(0, tab));
    if (!img) {
      ++out.skipped_undecodable;
      continue;
    }
    if (invert)
      for (auto& v : img->values()) v = 1.0f - v;
    out.samples.push_back(Sample{fit_image(*img, H, W), std::move(label), charset.language_id});
  }
  return out;
}

}  // namespace xstr
