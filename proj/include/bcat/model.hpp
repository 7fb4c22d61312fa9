#pragma once

// Decoder-only transformer over patch tokens.
//
//   tokens [B,S,patch_dim] -> embed (+bias) -> + learned position embedding
//   per layer:  x = x + Attn(RMS(x));  x = x + FFN(RMS(x))
//   RMS -> head (+bias) -> [B,S,patch_dim]
//
// Variants:
//   bcat             mask block_causal (or causal); output s predicts input s+N
//   next_token       mask causal; output s predicts input s+1
//   time_then_space  causal attention over frames per patch, then full
//                    attention over patches per frame, then FFN
//   vit_direct       full attention over the T0*N input tokens; output s
//                    predicts token s of the T future frames (T <= T0)
//
// Weights are stored [in, out] so a projection is x @ W.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bcat/dataio.hpp"
#include "bcat/error.hpp"
#include "bcat/rng.hpp"
#include "bcat/tensor.hpp"
#include "bcat/tokenizer.hpp"

namespace bcat {

inline constexpr double kRmsEps = 1e-6;

enum class Activation { kSwiGLU, kGeLU };
enum class MaskKind { kBlockCausal, kCausal, kFull };
enum class Variant { kBcat, kNextToken, kTimeThenSpace, kVitDirect };

inline std::string to_string(Activation a) { return a == Activation::kSwiGLU ? "swiglu" : "gelu"; }
inline std::string to_string(MaskKind m) {
  switch (m) {
    case MaskKind::kBlockCausal: return "block_causal";
    case MaskKind::kCausal: return "causal";
    case MaskKind::kFull: return "full";
  }
  return "?";
}
inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kBcat: return "bcat";
    case Variant::kNextToken: return "next_token";
    case Variant::kTimeThenSpace: return "time_then_space";
    case Variant::kVitDirect: return "vit_direct";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "swiglu") return Activation::kSwiGLU;
  if (s == "gelu") return Activation::kGeLU;
  throw ConfigError("activation: unknown value '" + s + "' (swiglu, gelu)");
}
inline MaskKind parse_mask_kind(const std::string& s) {
  if (s == "block_causal") return MaskKind::kBlockCausal;
  if (s == "causal") return MaskKind::kCausal;
  if (s == "full") return MaskKind::kFull;
  throw ConfigError("mask: unknown value '" + s + "' (block_causal, causal, full)");
}
inline Variant parse_variant(const std::string& s) {
  if (s == "bcat") return Variant::kBcat;
  if (s == "next_token") return Variant::kNextToken;
  if (s == "time_then_space") return Variant::kTimeThenSpace;
  if (s == "vit_direct") return Variant::kVitDirect;
  throw ConfigError("variant: unknown value '" + s + "' (bcat, next_token, time_then_space, vit_direct)");
}

/// (8/3) D rounded to the nearest multiple of 64.
inline std::size_t auto_ffn_hidden(std::size_t dim) {
  const double raw = 8.0 / 3.0 * static_cast<double>(dim) / 64.0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(raw))) * 64;
}

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t patch = 8;
  std::size_t resolution = 32;
  std::size_t channels = 4;
  std::size_t max_frames = 20;  // T_max = T0 + T
  std::size_t input_frames = 10;  // T0; used by vit_direct
  std::size_t ffn_hidden = 0;     // 0: derived from dim and activation
  Activation activation = Activation::kSwiGLU;
  bool qk_norm = true;
  MaskKind mask = MaskKind::kBlockCausal;
  Variant variant = Variant::kBcat;
  double dropout = 0.0;

  void validate() const {
    if (dim == 0 || n_heads == 0 || dim % n_heads != 0)
      throw ConfigError("dim: " + std::to_string(dim) + " not divisible by n_heads " + std::to_string(n_heads));
    if (n_layers == 0) throw ConfigError("n_layers: must be >= 1");
    if (patch == 0 || resolution % patch != 0)
      throw ConfigError("patch_size: " + std::to_string(patch) + " does not divide resolution " +
                        std::to_string(resolution));
    if (channels == 0) throw ConfigError("channels: must be >= 1");
    if (max_frames < 1) throw ConfigError("max_frames: must be >= 1");
    if (dropout != 0.0) throw ConfigError("dropout: only 0 is supported");
    if (variant == Variant::kNextToken && mask != MaskKind::kCausal)
      throw ConfigError("mask: next_token requires causal");
    if (variant == Variant::kBcat && mask == MaskKind::kFull)
      throw ConfigError("mask: full attention leaks future frames under next-frame alignment");
    if (variant == Variant::kVitDirect && (input_frames < 1 || input_frames > max_frames))
      throw ConfigError("input_frames: vit_direct needs 1 <= T0 <= max_frames");
  }

  PatchGrid grid() const { return PatchGrid(patch, resolution, channels); }
  std::size_t tokens_per_frame() const { return (resolution / patch) * (resolution / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t max_tokens() const { return max_frames * tokens_per_frame(); }
  std::size_t head_dim() const { return dim / n_heads; }
  std::size_t hidden() const {
    if (ffn_hidden) return ffn_hidden;
    return activation == Activation::kSwiGLU ? auto_ffn_hidden(dim) : 4 * dim;
  }
  /// Distance between an output position and the input position it predicts.
  std::size_t alignment() const { return variant == Variant::kNextToken ? 1 : tokens_per_frame(); }
  MaskKind effective_mask() const {
    switch (variant) {
      case Variant::kBcat: return mask;
      case Variant::kNextToken: return MaskKind::kCausal;
      case Variant::kVitDirect: return MaskKind::kFull;
      case Variant::kTimeThenSpace: return MaskKind::kBlockCausal;
    }
    return mask;
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"dim", c.dim},
          {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},
          {"patch_size", c.patch},
          {"resolution", c.resolution},
          {"channels", c.channels},
          {"max_frames", c.max_frames},
          {"input_frames", c.input_frames},
          {"ffn_hidden", c.ffn_hidden},
          {"activation", to_string(c.activation)},
          {"qk_norm", c.qk_norm},
          {"mask", to_string(c.mask)},
          {"variant", to_string(c.variant)},
          {"dropout", c.dropout}};
}

/// Strict parse: every key optional, unknown keys rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& where = "model") {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    const std::string field = where + "." + key;
    try {
      if (key == "dim") c.dim = v.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = v.get<std::size_t>();
      else if (key == "n_layers") c.n_layers = v.get<std::size_t>();
      else if (key == "patch_size") c.patch = v.get<std::size_t>();
      else if (key == "resolution") c.resolution = v.get<std::size_t>();
      else if (key == "channels") c.channels = v.get<std::size_t>();
      else if (key == "max_frames") c.max_frames = v.get<std::size_t>();
      else if (key == "input_frames") c.input_frames = v.get<std::size_t>();
      else if (key == "ffn_hidden") c.ffn_hidden = v.get<std::size_t>();
      else if (key == "activation") c.activation = parse_activation(v.get<std::string>());
      else if (key == "qk_norm") c.qk_norm = v.get<bool>();
      else if (key == "mask") c.mask = parse_mask_kind(v.get<std::string>());
      else if (key == "variant") c.variant = parse_variant(v.get<std::string>());
      else if (key == "dropout") c.dropout = v.get<double>();
      else throw ConfigError(field + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field + ": " + e.what());
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      throw ConfigError(msg.rfind(field, 0) == 0 ? msg : field + ": " + msg);
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Masks

inline bool mask_allowed(MaskKind kind, std::size_t n, std::size_t q, std::size_t k) {
  switch (kind) {
    case MaskKind::kBlockCausal: return k / n <= q / n;
    case MaskKind::kCausal: return k <= q;
    case MaskKind::kFull: return true;
  }
  return false;
}

struct AttentionMask {
  MaskKind kind = MaskKind::kBlockCausal;
  std::size_t tokens_per_frame = 1;
  std::size_t length = 0;

  bool allowed(std::size_t q, std::size_t k) const { return mask_allowed(kind, tokens_per_frame, q, k); }

  std::vector<std::uint8_t> dense() const {
    std::vector<std::uint8_t> m(length * length);
    for (std::size_t q = 0; q < length; ++q)
      for (std::size_t k = 0; k < length; ++k) m[q * length + k] = allowed(q, k) ? 1 : 0;
    return m;
  }
};

inline AttentionMask build_mask(MaskKind kind, std::size_t n_frames, std::size_t tokens_per_frame) {
  if (n_frames < 1 || tokens_per_frame < 1) throw ShapeError("build_mask: frames and N must be >= 1");
  return {kind, tokens_per_frame, n_frames * tokens_per_frame};
}

/// Additive mask [q_count, k_count] for queries at absolute positions
/// [q_begin, q_begin + q_count) against keys [0, k_count).
template <typename T>
Tensor<T> additive_mask(MaskKind kind, std::size_t n, std::size_t q_begin, std::size_t q_count, std::size_t k_count) {
  std::vector<T> m(q_count * k_count);
  for (std::size_t q = 0; q < q_count; ++q)
    for (std::size_t k = 0; k < k_count; ++k)
      m[q * k_count + k] = mask_allowed(kind, n, q_begin + q, k) ? T(0) : mask_sentinel<T>();
  return Tensor<T>::from({q_count, k_count}, std::move(m));
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct AttentionParams {
  Tensor<T> norm;            // pre-norm gain [D]
  Tensor<T> wq, wk, wv, wo;  // [D, D]
  Tensor<T> q_gain, k_gain;  // [H, dh] when qk_norm
};

template <typename T>
struct LayerParams {
  AttentionParams<T> attn;     // temporal attention for time_then_space
  AttentionParams<T> spatial;  // time_then_space only
  Tensor<T> ffn_norm;
  Tensor<T> w_gate, w_up, w_down;  // SwiGLU
  Tensor<T> w_in, w_out;           // GeLU
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> embed_w, embed_b;  // [patch_dim, D], [D]
  Tensor<T> pos;               // [T_max * N, D]
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm;      // [D]
  Tensor<T> head_w, head_b;  // [D, patch_dim], [patch_dim]

  /// Visits every parameter in canonical order as fn(name, tensor, decays).
  template <typename Fn>
  void for_each(Fn&& fn) const {
    fn("embed.weight", embed_w, true);
    fn("embed.bias", embed_b, false);
    fn("pos_embed", pos, true);
    auto attention = [&](const std::string& prefix, const AttentionParams<T>& a) {
      fn(prefix + ".norm", a.norm, false);
      fn(prefix + ".wq", a.wq, true);
      fn(prefix + ".wk", a.wk, true);
      fn(prefix + ".wv", a.wv, true);
      fn(prefix + ".wo", a.wo, true);
      if (a.q_gain.defined()) {
        fn(prefix + ".q_norm", a.q_gain, false);
        fn(prefix + ".k_norm", a.k_gain, false);
      }
    };
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l);
      const auto& layer = layers[l];
      attention(p + ".attn", layer.attn);
      if (layer.spatial.wq.defined()) attention(p + ".spatial", layer.spatial);
      fn(p + ".ffn.norm", layer.ffn_norm, false);
      if (layer.w_gate.defined()) {
        fn(p + ".ffn.gate", layer.w_gate, true);
        fn(p + ".ffn.up", layer.w_up, true);
        fn(p + ".ffn.down", layer.w_down, true);
      } else {
        fn(p + ".ffn.in", layer.w_in, true);
        fn(p + ".ffn.out", layer.w_out, true);
      }
    }
    fn("final_norm", final_norm, false);
    fn("head.weight", head_w, true);
    fn("head.bias", head_b, false);
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for_each([&](const std::string&, const Tensor<T>& t, bool) { out.push_back(t); });
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t, bool) { n += t.size(); });
    return n;
  }
};

namespace detail {

template <typename T>
Tensor<T> normal_param(Rng& rng, Shape shape, double std) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(std));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
AttentionParams<T> init_attention(Rng& rng, const ModelConfig& c, double std) {
  AttentionParams<T> a;
  a.norm = Tensor<T>::full({c.dim}, T(1), true);
  a.wq = normal_param<T>(rng, {c.dim, c.dim}, std);
  a.wk = normal_param<T>(rng, {c.dim, c.dim}, std);
  a.wv = normal_param<T>(rng, {c.dim, c.dim}, std);
  a.wo = normal_param<T>(rng, {c.dim, c.dim}, std);
  if (c.qk_norm) {
    a.q_gain = Tensor<T>::full({c.n_heads, c.head_dim()}, T(1), true);
    a.k_gain = Tensor<T>::full({c.n_heads, c.head_dim()}, T(1), true);
  }
  return a;
}

}  // namespace detail

/// Truncated normal (std 0.02, cut at 3 std) for weights and position
/// embeddings, zero biases, unit gains. Deterministic per seed.
template <typename T = float>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  constexpr double kStd = 0.02;
  Rng rng(seed);
  ModelParams<T> p;
  p.config = config;
  const std::size_t d = config.dim, pd = config.patch_dim(), hidden = config.hidden();
  p.embed_w = detail::normal_param<T>(rng, {pd, d}, kStd);
  p.embed_b = Tensor<T>::zeros({d}, true);
  p.pos = detail::normal_param<T>(rng, {config.max_tokens(), d}, kStd);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerParams<T> layer;
    layer.attn = detail::init_attention<T>(rng, config, kStd);
    if (config.variant == Variant::kTimeThenSpace) layer.spatial = detail::init_attention<T>(rng, config, kStd);
    layer.ffn_norm = Tensor<T>::full({d}, T(1), true);
    if (config.activation == Activation::kSwiGLU) {
      layer.w_gate = detail::normal_param<T>(rng, {d, hidden}, kStd);
      layer.w_up = detail::normal_param<T>(rng, {d, hidden}, kStd);
      layer.w_down = detail::normal_param<T>(rng, {hidden, d}, kStd);
    } else {
      layer.w_in = detail::normal_param<T>(rng, {d, hidden}, kStd);
      layer.w_out = detail::normal_param<T>(rng, {hidden, d}, kStd);
    }
    p.layers.push_back(std::move(layer));
  }
  p.final_norm = Tensor<T>::full({d}, T(1), true);
  p.head_w = detail::normal_param<T>(rng, {d, pd}, kStd);
  p.head_b = Tensor<T>::zeros({pd}, true);
  return p;
}

/// Parameter count from shapes alone.
inline std::size_t count_params(const ModelConfig& c) {
  const std::size_t d = c.dim, pd = c.patch_dim(), h = c.hidden();
  const std::size_t attn = d + 4 * d * d + (c.qk_norm ? 2 * d : 0);
  const std::size_t ffn = d + (c.activation == Activation::kSwiGLU ? 3 * d * h : 2 * d * h);
  const std::size_t per_layer = attn * (c.variant == Variant::kTimeThenSpace ? 2 : 1) + ffn;
  return pd * d + d + c.max_tokens() * d + c.n_layers * per_layer + d + d * pd + pd;
}

/// Element-wise copy into another scalar type (fresh leaves).
template <typename U, typename T>
ModelParams<U> cast_params(const ModelParams<T>& src) {
  ModelParams<U> out = init_params<U>(src.config, 0);
  std::vector<Tensor<T>> from = src.tensors();
  std::vector<Tensor<U>> to = out.tensors();
  for (std::size_t i = 0; i < from.size(); ++i) {
    auto dst = to[i].mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<U>(from[i][j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Per-layer keys/values [B,H,S_past,dh] of the cached attention.
template <typename T>
struct KVCache {
  std::vector<Tensor<T>> k, v;
  std::size_t length = 0;  // tokens already processed

  void clear() {
    k.clear();
    v.clear();
    length = 0;
  }
};

namespace detail {

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, const Tensor<T>& gain, const ModelConfig& c) {
  const std::size_t b = x.dim(0), s = x.dim(1);
  Tensor<T> h = reshape(x, {b, s, c.n_heads, c.head_dim()});
  if (gain.defined()) h = rms_norm(h, gain, kRmsEps);
  return permute(h, {0, 2, 1, 3});  // [B,H,S,dh]
}

}  // namespace detail

/// Multi-head attention on x [B,S,D] (already normalized). `mask` is
/// [S, S_past + S] or undefined for full attention. When `cache_k` is given,
/// keys/values are appended to the cached ones.
template <typename T>
Tensor<T> attention(const Tensor<T>& x, const AttentionParams<T>& p, const ModelConfig& c, const Tensor<T>& mask,
                    Tensor<T>* cache_k = nullptr, Tensor<T>* cache_v = nullptr) {
  const std::size_t b = x.dim(0), s = x.dim(1);
  Tensor<T> q = detail::split_heads(matmul(x, p.wq), p.q_gain, c);
  Tensor<T> k = detail::split_heads(matmul(x, p.wk), p.k_gain, c);
  Tensor<T> v = detail::split_heads(matmul(x, p.wv), Tensor<T>(), c);
  if (cache_k) {
    if (cache_k->defined()) {
      if (cache_k->dim(0) != b) throw ShapeError("attention: cache batch mismatch");
      k = concat<T>({*cache_k, k}, 2);
      v = concat<T>({*cache_v, v}, 2);
    }
    *cache_k = k;
    *cache_v = v;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim()));
  Tensor<T> scores = bcat::scale(matmul(q, permute(k, {0, 1, 3, 2})), scale);  // [B,H,S,S_k]
  Tensor<T> probs = softmax(scores, mask);
  Tensor<T> out = permute(matmul(probs, v), {0, 2, 1, 3});  // [B,S,H,dh]
  return matmul(reshape(out, {b, s, c.dim}), p.wo);
}

template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const LayerParams<T>& p, Activation act) {
  if (act == Activation::kSwiGLU) {
    if (!p.w_gate.defined()) throw ConfigError("ffn: parameters are not SwiGLU");
    return matmul(mul(silu(matmul(x, p.w_gate)), matmul(x, p.w_up)), p.w_down);
  }
  if (!p.w_in.defined()) throw ConfigError("ffn: parameters are not GeLU");
  return matmul(gelu(matmul(x, p.w_in)), p.w_out);
}

namespace detail {

template <typename T>
Tensor<T> embed(const ModelParams<T>& p, const Tensor<T>& tokens, std::size_t offset) {
  const auto& c = p.config;
  if (tokens.rank() != 3 || tokens.dim(2) != c.patch_dim())
    throw ShapeError("forward: tokens " + shape_str(tokens.shape()) + ", expected [B,S," +
                     std::to_string(c.patch_dim()) + "]");
  const std::size_t s = tokens.dim(1);
  if (offset + s > c.max_tokens())
    throw ShapeError("forward: sequence length " + std::to_string(offset + s) + " exceeds T_max*N = " +
                     std::to_string(c.max_tokens()));
  Tensor<T> h = add(matmul(tokens, p.embed_w), p.embed_b);
  return add(h, slice(p.pos, 0, offset, offset + s));
}

template <typename T>
Tensor<T> head(const ModelParams<T>& p, const Tensor<T>& h) {
  return add(matmul(rms_norm(h, p.final_norm, kRmsEps), p.head_w), p.head_b);
}

template <typename T>
Tensor<T> ffn_block(const ModelParams<T>& p, const LayerParams<T>& layer, const Tensor<T>& h) {
  return add(h, ffn(rms_norm(h, layer.ffn_norm, kRmsEps), layer, p.config.activation));
}

// Divided space-time layer stack. Cache (if any) holds temporal keys/values
// as [B*N, H, F_past, dh].
template <typename T>
Tensor<T> forward_time_then_space(const ModelParams<T>& p, const Tensor<T>& tokens, KVCache<T>* cache) {
  const auto& c = p.config;
  const std::size_t n = c.tokens_per_frame();
  const std::size_t offset = cache ? cache->length : 0;
  const std::size_t b = tokens.dim(0), s = tokens.dim(1);
  if (s % n != 0 || offset % n != 0)
    throw ShapeError("time_then_space: sequences must hold whole frames (N=" + std::to_string(n) + ")");
  const std::size_t frames = s / n, past = offset / n;
  Tensor<T> h = embed(p, tokens, offset);
  const Tensor<T> time_mask = additive_mask<T>(MaskKind::kCausal, 1, past, frames, past + frames);
  if (cache && cache->k.empty()) {
    cache->k.resize(c.n_layers);
    cache->v.resize(c.n_layers);
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& layer = p.layers[l];
    // Temporal: [B,F,N,D] -> [B*N,F,D]
    Tensor<T> x = rms_norm(h, layer.attn.norm, kRmsEps);
    x = reshape(permute(reshape(x, {b, frames, n, c.dim}), {0, 2, 1, 3}), {b * n, frames, c.dim});
    x = attention(x, layer.attn, c, time_mask, cache ? &cache->k[l] : nullptr, cache ? &cache->v[l] : nullptr);
    x = reshape(permute(reshape(x, {b, n, frames, c.dim}), {0, 2, 1, 3}), {b, s, c.dim});
    h = add(h, x);
    // Spatial: [B*F,N,D], full attention within each frame.
    Tensor<T> y = reshape(rms_norm(h, layer.spatial.norm, kRmsEps), {b * frames, n, c.dim});
    y = reshape(attention(y, layer.spatial, c, Tensor<T>()), {b, s, c.dim});
    h = add(h, y);
    h = ffn_block(p, layer, h);
  }
  if (cache) cache->length += s;
  return head(p, h);
}

}  // namespace detail

/// tokens [B,S,patch_dim] -> predictions [B,S,patch_dim]. With a cache the
/// tokens are the new positions only and continue at cache->length.
template <typename T>
Tensor<T> forward(const ModelParams<T>& p, const Tensor<T>& tokens, KVCache<T>* cache = nullptr) {
  const auto& c = p.config;
  if (c.variant == Variant::kTimeThenSpace) return detail::forward_time_then_space(p, tokens, cache);
  if (cache && c.variant == Variant::kVitDirect) throw ConfigError("variant: vit_direct has no incremental mode");
  const std::size_t offset = cache ? cache->length : 0;
  const std::size_t s = tokens.dim(1);
  Tensor<T> h = detail::embed(p, tokens, offset);
  const MaskKind kind = c.effective_mask();
  const Tensor<T> mask =
      kind == MaskKind::kFull ? Tensor<T>() : additive_mask<T>(kind, c.tokens_per_frame(), offset, s, offset + s);
  if (cache && cache->k.empty()) {
    cache->k.resize(c.n_layers);
    cache->v.resize(c.n_layers);
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& layer = p.layers[l];
    h = add(h, attention(rms_norm(h, layer.attn.norm, kRmsEps), layer.attn, c, mask,
                         cache ? &cache->k[l] : nullptr, cache ? &cache->v[l] : nullptr));
    h = detail::ffn_block(p, layer, h);
  }
  if (cache) cache->length += s;
  return detail::head(p, h);
}

// ---------------------------------------------------------------------------
// Checkpoints: "BCKP", u32 version, u32 length + model config JSON,
// u32 tensor count, then per tensor: u32 name length + name, u32 rank,
// u32 dims..., f32 little-endian data.

inline std::string encode_checkpoint(const ModelParams<float>& p) {
  std::string buf = "BCKP";
  detail::put_u32(buf, 1);
  const std::string cfg = model_config_to_json(p.config).dump();
  detail::put_u32(buf, static_cast<std::uint32_t>(cfg.size()));
  buf += cfg;
  std::uint32_t count = 0;
  p.for_each([&](const std::string&, const Tensor<float>&, bool) { ++count; });
  detail::put_u32(buf, count);
  p.for_each([&](const std::string& name, const Tensor<float>& t, bool) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(d));
    for (float v : t.vec()) detail::put_f32(buf, v);
  });
  return buf;
}

inline ModelParams<float> decode_checkpoint(std::string bytes, const std::string& what = "BCKP") {
  detail::Reader r(std::move(bytes), what);
  if (r.bytes(4) != "BCKP") throw DataError(what + ": bad magic");
  const auto version = r.u32();
  if (version != 1) throw DataError(what + ": unsupported version " + std::to_string(version));
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(r.bytes(r.u32())));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": config: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(what + ": config: " + e.what());
  }
  ModelParams<float> p = init_params<float>(cfg, 0);
  std::vector<std::pair<std::string, Tensor<float>>> slots;
  p.for_each([&](const std::string& name, const Tensor<float>& t, bool) { slots.emplace_back(name, t); });
  const auto count = r.u32();
  if (count != slots.size())
    throw DataError(what + ": " + std::to_string(count) + " tensors, config implies " + std::to_string(slots.size()));
  for (auto& [name, t] : slots) {
    const std::string got = r.bytes(r.u32());
    if (got != name) throw DataError(what + ": expected tensor '" + name + "', found '" + got + "'");
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    if (shape != t.shape())
      throw DataError(what + ": tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                      shape_str(t.shape()));
    for (auto& v : t.mutable_data()) v = r.f32();
  }
  if (!r.at_end()) throw DataError(what + ": trailing bytes");
  return p;
}

inline void save_checkpoint(const ModelParams<float>& p, const fs::path& path) {
  detail::write_file(path, encode_checkpoint(p));
}

inline ModelParams<float> load_checkpoint(const fs::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

}  // namespace bcat
