// SPDX-License-Identifier: Apache-2.0
//
// Transformer encoder-decoder for cropped text-line images.
//
// The encoder is a small CNN whose output is flattened to a width-major vector
// sequence. The `wang` variant feeds that sequence straight to the decoder;
// the `sheng` variant adds sinusoidal positions and runs K Transformer encoder
// blocks first. The decoder is an autoregressive stack of L post-norm blocks
// (causal self-attention, source-target attention, feed-forward) followed by a
// linear projection and softmax over the vocabulary.
//
// Every function is a template over the scalar type so the same code can be
// differentiated in double precision by the gradient oracle.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "xstr/autograd.hpp"
#include "xstr/digest.hpp"
#include "xstr/errors.hpp"
#include "xstr/params.hpp"
#include "xstr/symbols.hpp"

namespace xstr {

enum class Variant { Sheng, Wang };
enum class CnnPresetKind { VggLite, ResNetLite, Tiny };

inline std::string to_string(Variant v) { return v == Variant::Sheng ? "sheng" : "wang"; }

inline std::string to_string(CnnPresetKind k) {
  switch (k) {
    case CnnPresetKind::VggLite: return "vgg-lite";
    case CnnPresetKind::ResNetLite: return "resnet-lite";
    case CnnPresetKind::Tiny: return "tiny";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "sheng") return Variant::Sheng;
  if (s == "wang") return Variant::Wang;
  fail(ErrorCode::ConfigError, "unknown model variant '" + s + "'");
}

inline CnnPresetKind parse_cnn_preset(const std::string& s) {
  if (s == "vgg-lite") return CnnPresetKind::VggLite;
  if (s == "resnet-lite") return CnnPresetKind::ResNetLite;
  if (s == "tiny") return CnnPresetKind::Tiny;
  fail(ErrorCode::ConfigError, "unknown cnn preset '" + s + "'");
}

struct ModelConfig {
  Variant variant = Variant::Wang;
  std::size_t enc_blocks = 1;  // K; unused by the wang variant
  std::size_t dec_blocks = 1;  // L
  std::size_t d_model = 128;
  std::size_t d_ffn = 128;
  std::size_t heads = 4;
  CnnPresetKind cnn_preset = CnnPresetKind::ResNetLite;
  std::vector<std::size_t> cnn_channels = {16, 32, 48};
  std::size_t vocab_size = 0;  // including the three specials
  std::size_t max_len = 32;
  std::size_t image_h = 32;
  std::size_t image_w = 96;

  Specials specials() const { return Specials::for_vocab(vocab_size); }
  std::size_t symbol_count() const { return vocab_size - Specials::kCount; }
  bool is_symbol(SymbolId id) const { return id < symbol_count(); }

  void validate() const {
    auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::ConfigError, what); };
    check(heads > 0 && d_model % heads == 0, "d_model must be divisible by heads");
    check(d_model % 2 == 0, "d_model must be even");
    check(d_ffn > 0, "d_ffn must be positive");
    check(dec_blocks >= 1, "at least one decoder block");
    check(variant == Variant::Wang || enc_blocks >= 1, "sheng variant needs K >= 1");
    check(vocab_size > Specials::kCount, "vocab_size must include at least one symbol plus 3 specials");
    check(max_len >= 1, "max_len must be positive");
    const std::size_t stages = cnn_preset == CnnPresetKind::Tiny ? 1 : 3;
    check(cnn_channels.size() == stages, "cnn_channels needs " + std::to_string(stages) + " entries");
    const std::size_t div = std::size_t{1} << stages;
    check(image_h % div == 0 && image_w % div == 0 && image_h >= div && image_w >= div,
          "image size must be divisible by " + std::to_string(div));
  }

  /// Canonical `model.key = value` text; also the digest input.
  std::string to_text() const {
    std::ostringstream os;
    os << "model.variant = " << to_string(variant) << '\n'
       << "model.enc_blocks = " << enc_blocks << '\n'
       << "model.dec_blocks = " << dec_blocks << '\n'
       << "model.d_model = " << d_model << '\n'
       << "model.d_ffn = " << d_ffn << '\n'
       << "model.heads = " << heads << '\n'
       << "model.cnn_preset = " << to_string(cnn_preset) << '\n'
       << "model.cnn_channels = ";
    for (std::size_t i = 0; i < cnn_channels.size(); ++i) os << (i ? "," : "") << cnn_channels[i];
    os << '\n'
       << "model.vocab_size = " << vocab_size << '\n'
       << "model.max_len = " << max_len << '\n'
       << "model.image_h = " << image_h << '\n'
       << "model.image_w = " << image_w << '\n';
    return os.str();
  }

  std::string digest() const { return sha256_hex(to_text()); }

  bool operator==(const ModelConfig&) const = default;
};

namespace detail {

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &pos);
  } catch (const std::logic_error&) {
    pos = 0;
  }
  require(pos == v.size() && !v.empty() && v[0] != '-', ErrorCode::ConfigError,
          key + " expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(n);
}

}  // namespace detail

/// Applies one `model.<key> = value` setting (key given without the section).
/// Returns false for keys that are not model settings.
inline bool set_model_key(ModelConfig& cfg, const std::string& key, const std::string& value) {
  const std::string full = "model." + key;
  if (key == "variant") cfg.variant = parse_variant(value);
  else if (key == "enc_blocks") cfg.enc_blocks = detail::parse_count(full, value);
  else if (key == "dec_blocks") cfg.dec_blocks = detail::parse_count(full, value);
  else if (key == "d_model") cfg.d_model = detail::parse_count(full, value);
  else if (key == "d_ffn") cfg.d_ffn = detail::parse_count(full, value);
  else if (key == "heads") cfg.heads = detail::parse_count(full, value);
  else if (key == "cnn_preset") cfg.cnn_preset = parse_cnn_preset(value);
  else if (key == "vocab_size") cfg.vocab_size = detail::parse_count(full, value);
  else if (key == "max_len") cfg.max_len = detail::parse_count(full, value);
  else if (key == "image_h") cfg.image_h = detail::parse_count(full, value);
  else if (key == "image_w") cfg.image_w = detail::parse_count(full, value);
  else if (key == "cnn_channels") {
    cfg.cnn_channels.clear();
    std::istringstream is(value);
    for (std::string part; std::getline(is, part, ',');) cfg.cnn_channels.push_back(detail::parse_count(full, part));
  } else {
    return false;
  }
  return true;
}

/// Inverse of ModelConfig::to_text.
inline ModelConfig model_config_from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos && line.starts_with("model."), ErrorCode::ConfigError, "bad model line: " + line);
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(' '));
      s.erase(s.find_last_not_of(' ') + 1);
      return s;
    };
    const std::string key = trim(line.substr(6, eq - 6));
    require(set_model_key(cfg, key, trim(line.substr(eq + 1))), ErrorCode::ConfigError, "unknown model key " + key);
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// CNN presets

struct CnnLayer {
  enum class Kind { Conv, Pool } kind = Kind::Conv;
  std::size_t in_ch = 0, out_ch = 0;
  std::size_t kh = 3, kw = 3;
  std::size_t pad_h = 1, pad_w = 1;
  bool relu = true;
  bool residual = false;  // y = relu(conv(x) + x); needs in_ch == out_ch
  std::size_t pool = 2;
};

struct CnnPreset {
  std::vector<CnnLayer> layers;

  /// Shape after every layer, starting from (1, h, w).
  std::vector<Shape> propagate(std::size_t h, std::size_t w) const {
    std::vector<Shape> shapes;
    Shape s{1, h, w};
    for (const auto& l : layers) {
      if (l.kind == CnnLayer::Kind::Pool) {
        s = {s[0], (s[1] - l.pool) / l.pool + 1, (s[2] - l.pool) / l.pool + 1};
      } else {
        s = {l.out_ch, s[1] + 2 * l.pad_h - l.kh + 1, s[2] + 2 * l.pad_w - l.kw + 1};
      }
      shapes.push_back(s);
    }
    return shapes;
  }
};

/// Layer list for a config. Full presets: seven 3x3 convs, grouped 1/1/2/2
/// around three 2x pools (channels c0, c0 | c1, c1 | c2, c2), then a linear
/// conv whose kernel spans the remaining height and projects to d_model
/// channels. resnet-lite adds identity skips around the second conv of each
/// same-width pair. `tiny` is one conv + pool + projection.
inline CnnPreset make_cnn_preset(const ModelConfig& cfg) {
  cfg.validate();
  CnnPreset p;
  auto conv = [](std::size_t in, std::size_t out, bool residual = false) {
    CnnLayer l;
    l.in_ch = in;
    l.out_ch = out;
    l.residual = residual;
    return l;
  };
  auto pool = [] {
    CnnLayer l;
    l.kind = CnnLayer::Kind::Pool;
    return l;
  };
  const auto& c = cfg.cnn_channels;
  std::size_t h = cfg.image_h;
  if (cfg.cnn_preset == CnnPresetKind::Tiny) {
    p.layers = {conv(1, c[0]), pool()};
    h /= 2;
  } else {
    const bool res = cfg.cnn_preset == CnnPresetKind::ResNetLite;
    p.layers = {conv(1, c[0]),    pool(), conv(c[0], c[0], res), pool(), conv(c[0], c[1]),
                conv(c[1], c[1], res), pool(), conv(c[1], c[2]), conv(c[2], c[2], res)};
    h /= 8;
  }
  CnnLayer head = conv(c.back(), cfg.d_model);
  head.kh = h;
  head.pad_h = 0;
  head.kw = 5;
  head.pad_w = 2;
  head.relu = false;
  p.layers.push_back(head);
  return p;
}

// ---------------------------------------------------------------------------
// Parameters

namespace detail {

template <class T>
void add_linear(BasicParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed) {
  ps.add_uniform(name + ".w", {in, out}, in, seed);
  ps.add(name + ".b", BasicTensor<T>({out}, T(0)));
}

template <class T>
void add_norm(BasicParamSet<T>& ps, const std::string& name, std::size_t d) {
  ps.add(name + ".g", BasicTensor<T>({d}, T(1)));
  ps.add(name + ".b", BasicTensor<T>({d}, T(0)));
}

template <class T>
void add_attention(BasicParamSet<T>& ps, const std::string& name, std::size_t d, std::uint64_t seed) {
  for (const char* proj : {"q", "k", "v", "o"}) add_linear(ps, name + "." + proj, d, d, seed);
}

template <class T>
void add_ffn(BasicParamSet<T>& ps, const std::string& name, std::size_t d, std::size_t d_ffn, std::uint64_t seed) {
  add_linear(ps, name + ".1", d, d_ffn, seed);
  add_linear(ps, name + ".2", d_ffn, d, seed);
}

}  // namespace detail

/// Fresh `enc.*` parameters for the config.
template <class T = float>
BasicParamSet<T> init_encoder_params(const ModelConfig& cfg, std::uint64_t seed) {
  BasicParamSet<T> ps;
  const CnnPreset preset = make_cnn_preset(cfg);
  std::size_t conv_index = 0;
  for (const auto& l : preset.layers) {
    if (l.kind != CnnLayer::Kind::Conv) continue;
    const std::string name = "enc.cnn." + std::to_string(conv_index++);
    // He-uniform for rectified layers, unit variance for the linear head.
    const double gain = l.relu ? std::sqrt(6.0) : std::sqrt(3.0);
    ps.add_uniform(name + ".w", {l.out_ch, l.in_ch, l.kh, l.kw}, l.in_ch * l.kh * l.kw, seed, gain);
    ps.add(name + ".b", BasicTensor<T>({l.out_ch}, T(0)));
  }
  if (cfg.variant == Variant::Sheng) {
    for (std::size_t k = 0; k < cfg.enc_blocks; ++k) {
      const std::string name = "enc.tblock." + std::to_string(k);
      detail::add_attention(ps, name + ".attn", cfg.d_model, seed);
      detail::add_norm(ps, name + ".ln1", cfg.d_model);
      detail::add_ffn(ps, name + ".ffn", cfg.d_model, cfg.d_ffn, seed);
      detail::add_norm(ps, name + ".ln2", cfg.d_model);
    }
  }
  return ps;
}

/// Fresh `dec.*` parameters for the config.
template <class T = float>
BasicParamSet<T> init_decoder_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  BasicParamSet<T> ps;
  ps.add_uniform("dec.embed", {cfg.vocab_size, cfg.d_model}, cfg.vocab_size, seed);
  for (std::size_t l = 0; l < cfg.dec_blocks; ++l) {
    const std::string name = "dec.block." + std::to_string(l);
    detail::add_attention(ps, name + ".self", cfg.d_model, seed);
    detail::add_norm(ps, name + ".ln1", cfg.d_model);
    detail::add_attention(ps, name + ".src", cfg.d_model, seed);
    detail::add_norm(ps, name + ".ln2", cfg.d_model);
    detail::add_ffn(ps, name + ".ffn", cfg.d_model, cfg.d_ffn, seed);
    detail::add_norm(ps, name + ".ln3", cfg.d_model);
  }
  detail::add_linear(ps, "dec.out", cfg.d_model, cfg.vocab_size, seed);
  return ps;
}

/// Merge of disjoint parameter sets (e.g. an encoder and a decoder).
template <class T>
BasicParamSet<T> merge_params(const BasicParamSet<T>& a, const BasicParamSet<T>& b) {
  BasicParamSet<T> out = a.subset("");
  for (const auto& [name, e] : b) out.add(name, e.value);
  return out;
}

template <class T = float>
BasicParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  return merge_params(init_encoder_params<T>(cfg, seed), init_decoder_params<T>(cfg, seed));
}

// ---------------------------------------------------------------------------
// Encoder

template <class T>
BasicVar<T> linear(BasicTape<T>& tape, const BasicParamSet<T>& ps, const std::string& name, BasicVar<T> x) {
  return add_bias(matmul(x, tape.param(ps, name + ".w")), tape.param(ps, name + ".b"));
}

template <class T>
BasicVar<T> cnn_extract(BasicTape<T>& tape, const BasicParamSet<T>& ps, const BasicTensor<T>& image,
                        const ModelConfig& cfg) {
  require(image.shape() == Shape{1, cfg.image_h, cfg.image_w}, ErrorCode::ShapeMismatch,
          "image " + shape_str(image.shape()) + " does not match config " +
              shape_str({1, cfg.image_h, cfg.image_w}));
  const CnnPreset preset = make_cnn_preset(cfg);
  BasicVar<T> x = tape.constant(image);
  std::size_t conv_index = 0;
  for (const auto& l : preset.layers) {
    if (l.kind == CnnLayer::Kind::Pool) {
      x = max_pool2d(x, l.pool, l.pool);
      continue;
    }
    const std::string name = "enc.cnn." + std::to_string(conv_index++);
    Conv2dOptions opt;
    opt.pad_h = l.pad_h;
    opt.pad_w = l.pad_w;
    opt.relu = l.relu && !l.residual;
    BasicVar<T> y = conv2d(x, tape.param(ps, name + ".w"), tape.param(ps, name + ".b"), opt);
    if (l.residual) y = relu(add(y, x));
    x = y;
  }
  return x;
}

/// (C,h,w) -> (w, h*C); row j lists column j height-major, channels inner.
template <class T>
BasicVar<T> reshape_features(BasicVar<T> p) {
  const BasicTensor<T>& P = p.value();
  require(P.rank() == 3, ErrorCode::ShapeMismatch, "reshape_features needs (C,h,w)");
  const std::size_t C = P.dim(0), h = P.dim(1), w = P.dim(2);
  BasicTensor<T> Q({w, h * C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) Q[x * h * C + y * C + c] = P[(c * h + y) * w + x];
  return p.tape->push(std::move(Q), [p, C, h, w](BasicTape<T>& t, const BasicTensor<T>& g) {
    BasicTensor<T>& gp = t.grad(p);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) gp[(c * h + y) * w + x] += g[x * h * C + y * C + c];
  });
}

/// Sinusoidal table: even dims sin(pos / 10000^(2i/d)), odd dims cos(...).
template <class T = float>
BasicTensor<T> positional_encoding(std::size_t rows, std::size_t d) {
  require(d % 2 == 0, ErrorCode::OddDim, "positional encoding needs an even width, got " + std::to_string(d));
  BasicTensor<T> pe({rows, d});
  for (std::size_t pos = 0; pos < rows; ++pos)
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
      pe.at(pos, 2 * i) = static_cast<T>(std::sin(angle));
      pe.at(pos, 2 * i + 1) = static_cast<T>(std::cos(angle));
    }
  return pe;
}

template <class T>
BasicVar<T> add_pos_enc(BasicVar<T> x) {
  const BasicTensor<T>& X = x.value();
  require(X.rank() == 2, ErrorCode::ShapeMismatch, "add_pos_enc needs (J,d)");
  return add_constant(x, positional_encoding<T>(X.dim(0), X.dim(1)));
}

/// Scaled dot-product attention with `heads` heads, learned q/k/v/o
/// projections under `name`, optional causal mask (query i sees keys j <= i).
template <class T>
BasicVar<T> multi_head_attention(BasicTape<T>& tape, const BasicParamSet<T>& ps, const std::string& name,
                                 BasicVar<T> q_in, BasicVar<T> k_in, BasicVar<T> v_in, std::size_t heads,
                                 bool causal) {
  const std::size_t d = q_in.value().dim(1);
  require(heads > 0 && d % heads == 0, ErrorCode::ShapeMismatch, "d_model not divisible by heads");
  require(k_in.value().dim(1) == d && v_in.value().dim(1) == d && k_in.value().dim(0) == v_in.value().dim(0),
          ErrorCode::ShapeMismatch, "attention key/value shapes");
  require(!causal || q_in.value().dim(0) == k_in.value().dim(0), ErrorCode::ShapeMismatch,
          "causal attention needs equal query and key lengths");
  const std::size_t dh = d / heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  BasicVar<T> Q = linear(tape, ps, name + ".q", q_in);
  BasicVar<T> K = linear(tape, ps, name + ".k", k_in);
  BasicVar<T> V = linear(tape, ps, name + ".v", v_in);
  std::vector<BasicVar<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    BasicVar<T> qh = slice_cols(Q, h * dh, dh);
    BasicVar<T> kh = slice_cols(K, h * dh, dh);
    BasicVar<T> vh = slice_cols(V, h * dh, dh);
    BasicVar<T> weights = softmax(scale(matmul_nt(qh, kh), inv_sqrt), causal);
    outs.push_back(matmul(weights, vh));
  }
  BasicVar<T> joined = heads == 1 ? outs.front() : concat_cols(outs);
  return linear(tape, ps, name + ".o", joined);
}

template <class T>
BasicVar<T> layer_norm_named(BasicTape<T>& tape, const BasicParamSet<T>& ps, const std::string& name, BasicVar<T> x) {
  return layer_norm(x, tape.param(ps, name + ".g"), tape.param(ps, name + ".b"));
}

template <class T>
BasicVar<T> feed_forward(BasicTape<T>& tape, const BasicParamSet<T>& ps, const std::string& name, BasicVar<T> x) {
  return linear(tape, ps, name + ".2", relu(linear(tape, ps, name + ".1", x)));
}

/// Post-norm encoder block: self-attention, add & norm, FFN, add & norm.
template <class T>
BasicVar<T> transformer_encoder_block(BasicTape<T>& tape, const BasicParamSet<T>& ps, const std::string& name,
                                      BasicVar<T> s, std::size_t heads) {
  BasicVar<T> a = multi_head_attention(tape, ps, name + ".attn", s, s, s, heads, false);
  BasicVar<T> x = layer_norm_named(tape, ps, name + ".ln1", add(s, a));
  return layer_norm_named(tape, ps, name + ".ln2", add(x, feed_forward(tape, ps, name + ".ffn", x)));
}

/// Encoder output V: Q for wang, S^(K) for sheng.
template <class T>
BasicVar<T> encode(BasicTape<T>& tape, const BasicParamSet<T>& ps, const BasicTensor<T>& image,
                   const ModelConfig& cfg) {
  BasicVar<T> q = reshape_features(cnn_extract(tape, ps, image, cfg));
  if (cfg.variant == Variant::Wang) return q;
  BasicVar<T> s = add_pos_enc(q);
  for (std::size_t k = 0; k < cfg.enc_blocks; ++k)
    s = transformer_encoder_block(tape, ps, "enc.tblock." + std::to_string(k), s, cfg.heads);
  return s;
}

// ---------------------------------------------------------------------------
// Decoder

/// Embedding rows for `ids`, shape (|ids|, d).
template <class T>
BasicVar<T> embed_chars(BasicTape<T>& tape, const BasicParamSet<T>& ps, const Label& ids, const ModelConfig& cfg) {
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (SymbolId c : ids) {
    require(c < cfg.vocab_size, ErrorCode::UnknownSymbol,
            "symbol " + std::to_string(c) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    rows.push_back(c);
  }
  return gather_rows(tape.param(ps, "dec.embed"), std::move(rows));
}

/// Single-symbol embedding as a (d) vector.
template <class T>
BasicVar<T> embed_char(BasicTape<T>& tape, const BasicParamSet<T>& ps, SymbolId c, const ModelConfig& cfg) {
  return reshape(embed_chars(tape, ps, Label{c}, cfg), {cfg.d_model});
}

/// Post-norm decoder block over a prefix u (t,d) attending to source v (J,d).
template <class T>
BasicVar<T> transformer_decoder_block(BasicTape<T>& tape, const BasicParamSet<T>& ps, const std::string& name,
                                      BasicVar<T> u, BasicVar<T> v, std::size_t heads) {
  require(u.value().rank() == 2 && u.value().dim(0) >= 1, ErrorCode::ShapeMismatch, "decoder prefix must be (t,d)");
  BasicVar<T> a = multi_head_attention(tape, ps, name + ".self", u, u, u, heads, true);
  BasicVar<T> x = layer_norm_named(tape, ps, name + ".ln1", add(u, a));
  BasicVar<T> b = multi_head_attention(tape, ps, name + ".src", x, v, v, heads, false);
  BasicVar<T> y = layer_norm_named(tape, ps, name + ".ln2", add(x, b));
  return layer_norm_named(tape, ps, name + ".ln3", add(y, feed_forward(tape, ps, name + ".ffn", y)));
}

/// Teacher-forced decoder: row t of the result is P(next symbol | labels_in[0..t], image).
template <class T>
BasicVar<T> decoder_forward(BasicTape<T>& tape, const BasicParamSet<T>& ps, const Label& labels_in, BasicVar<T> v,
                            const ModelConfig& cfg) {
  require(!labels_in.empty() && labels_in.front() == cfg.specials().sos, ErrorCode::ShapeMismatch,
          "decoder input must start with SOS");
  require(v.value().rank() == 2 && v.value().dim(1) == cfg.d_model, ErrorCode::ShapeMismatch,
          "encoder output " + shape_str(v.value().shape()) + " does not match d_model");
  BasicVar<T> u = add_pos_enc(embed_chars(tape, ps, labels_in, cfg));
  for (std::size_t l = 0; l < cfg.dec_blocks; ++l)
    u = transformer_decoder_block(tape, ps, "dec.block." + std::to_string(l), u, v, cfg.heads);
  return softmax(linear(tape, ps, "dec.out", u));
}

struct NllStats {
  std::size_t clamped = 0;
};

/// -sum_t log probs[t, labels_out[t]] over positions not marked in `pad_mask`.
/// Probabilities below 1e-9 are clamped (and counted) rather than producing inf.
template <class T>
BasicVar<T> sequence_nll(BasicVar<T> probs, const Label& labels_out, const std::vector<bool>& pad_mask = {},
                         NllStats* stats = nullptr) {
  const BasicTensor<T>& P = probs.value();
  require(P.rank() == 2 && P.dim(0) == labels_out.size(), ErrorCode::ShapeMismatch,
          "probabilities " + shape_str(P.shape()) + " vs " + std::to_string(labels_out.size()) + " labels");
  require(pad_mask.empty() || pad_mask.size() == labels_out.size(), ErrorCode::ShapeMismatch, "pad mask length");
  const std::size_t V = P.dim(1);
  constexpr double kFloor = 1e-9;
  T loss = T(0);
  std::vector<std::size_t> picked;
  std::vector<bool> live;
  for (std::size_t t = 0; t < labels_out.size(); ++t) {
    if (!pad_mask.empty() && pad_mask[t]) continue;
    require(labels_out[t] < V, ErrorCode::UnknownSymbol, "label outside vocabulary");
    const std::size_t idx = t * V + labels_out[t];
    const bool clamp = static_cast<double>(P[idx]) < kFloor;
    if (clamp && stats) ++stats->clamped;
    loss -= static_cast<T>(std::log(clamp ? kFloor : static_cast<double>(P[idx])));
    picked.push_back(idx);
    live.push_back(!clamp);
  }
  return probs.tape->push(BasicTensor<T>({1}, loss),
                          [probs, picked = std::move(picked), live = std::move(live)](BasicTape<T>& t,
                                                                                       const BasicTensor<T>& g) {
                            const BasicTensor<T>& P = t.value(probs);
                            BasicTensor<T>& gp = t.grad(probs);
                            for (std::size_t i = 0; i < picked.size(); ++i)
                              if (live[i]) gp[picked[i]] -= g[0] / P[picked[i]];
                          });
}

/// Teacher-forcing pair for a label: ([SOS, c1..cT], [c1..cT, EOS]).
inline std::pair<Label, Label> teacher_forcing_pair(const Label& label, const ModelConfig& cfg) {
  const Specials sp = cfg.specials();
  Label in{sp.sos};
  in.insert(in.end(), label.begin(), label.end());
  Label out = label;
  out.push_back(sp.eos);
  return {std::move(in), std::move(out)};
}

/// Whether greedy decoding would return exactly `label`, read off the
/// teacher-forced distribution `probs` over [SOS] + label. Decoder rows do not
/// depend on later positions, so greedy follows the label for as long as every
/// row's argmax agrees with it.
template <class T>
bool teacher_forced_match(const BasicTensor<T>& probs, const Label& label, const ModelConfig& cfg) {
  require(probs.rank() == 2 && probs.dim(0) == label.size() + 1 && probs.dim(1) == cfg.vocab_size,
          ErrorCode::ShapeMismatch, "teacher-forced probabilities do not match the label");
  if (label.size() > cfg.max_len) return false;
  for (std::size_t t = 0; t < label.size(); ++t)
    if (argmax_symbol(probs.data() + t * cfg.vocab_size, cfg) != label[t]) return false;
  return label.size() == cfg.max_len ||
         argmax_symbol(probs.data() + label.size() * cfg.vocab_size, cfg) == cfg.specials().eos;
}

/// Teacher-forced loss of one (image, label) pair.
template <class T>
BasicVar<T> sample_loss(BasicTape<T>& tape, const BasicParamSet<T>& ps, const BasicTensor<T>& image,
                        const Label& label, const ModelConfig& cfg, NllStats* stats = nullptr) {
  const auto [in, out] = teacher_forcing_pair(label, cfg);
  BasicVar<T> v = encode(tape, ps, image, cfg);
  return sequence_nll(decoder_forward(tape, ps, in, v, cfg), out, {}, stats);
}

/// Argmax over the non-special symbols and EOS; ties go to the lowest id.
template <class T>
SymbolId argmax_symbol(const T* row, const ModelConfig& cfg) {
  const SymbolId eos = cfg.specials().eos;
  SymbolId best = 0;
  for (SymbolId c = 1; c < cfg.symbol_count(); ++c)
    if (row[c] > row[best]) best = c;
  if (row[eos] > row[best]) best = eos;
  return best;
}

/// Greedy decode: start from SOS, append the argmax symbol until EOS or
/// max_len symbols. The result carries no specials.
template <class T>
Label greedy_decode(const BasicParamSet<T>& ps, const BasicTensor<T>& image, const ModelConfig& cfg) {
  BasicTape<T> enc_tape(false);
  const BasicTensor<T> v = encode(enc_tape, ps, image, cfg).value();
  const Specials sp = cfg.specials();
  Label prefix{sp.sos};
  Label out;
  while (out.size() < cfg.max_len) {
    BasicTape<T> tape(false);
    BasicVar<T> probs = decoder_forward(tape, ps, prefix, tape.constant(v), cfg);
    const BasicTensor<T>& P = probs.value();
    const SymbolId next = argmax_symbol(P.data() + (P.dim(0) - 1) * P.dim(1), cfg);
    if (next == sp.eos) break;
    out.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

}  // namespace xstr
