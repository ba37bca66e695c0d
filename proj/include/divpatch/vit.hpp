#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "divpatch/rng.hpp"
#include "divpatch/tensor.hpp"

namespace divpatch {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

constexpr double kLayerNormEps = 1e-6;

struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 1;
  int dim = 64;
  int depth = 6;
  int heads = 4;
  double mlp_ratio = 4.0;
  int num_classes = 4;
  double drop_path_max = 0.0;

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || channels <= 0 || dim <= 0 || heads <= 0 ||
        num_classes <= 0 || depth < 0)
      throw ConfigError("model config: sizes must be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("model config: image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    if (dim % heads != 0)
      throw ConfigError("model config: dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
    if (drop_path_max < 0.0 || drop_path_max >= 1.0)
      throw ConfigError("model config: drop_path_max must lie in [0, 1)");
    if (mlp_ratio <= 0.0) throw ConfigError("model config: mlp_ratio must be > 0");
  }

  int grid_side() const { return image_size / patch_size; }
  int n_patches() const { return grid_side() * grid_side(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int tokens() const { return n_patches() + 1; }
  int mlp_dim() const { return static_cast<int>(dim * mlp_ratio); }
};

// Row i of the result is the flattened patch at raster position i of the
// patch grid (row-major), values ordered channel-major then pixel row-major.
// Exact inverse of unpatchify.
template <typename S>
std::vector<S> patchify(const std::vector<S>& image, int channels, int height, int width,
                        int patch_size) {
  if (height != width)
    throw ConfigError("patchify: image must be square, got " + std::to_string(height) + "x" +
                      std::to_string(width));
  if (height % patch_size != 0)
    throw ConfigError("patchify: size " + std::to_string(height) + " not divisible by patch " +
                      std::to_string(patch_size));
  if (static_cast<long>(image.size()) != static_cast<long>(channels) * height * width)
    throw ConfigError("patchify: data size does not match channels*height*width");
  int side = height / patch_size;
  int pdim = channels * patch_size * patch_size;
  std::vector<S> out(static_cast<size_t>(side) * side * pdim);
  for (int pr = 0; pr < side; ++pr)
    for (int pc = 0; pc < side; ++pc) {
      S* dst = out.data() + (static_cast<long>(pr) * side + pc) * pdim;
      for (int c = 0; c < channels; ++c)
        for (int y = 0; y < patch_size; ++y)
          for (int x = 0; x < patch_size; ++x)
            *dst++ = image[(static_cast<long>(c) * height + pr * patch_size + y) * width +
                           pc * patch_size + x];
    }
  return out;
}

template <typename S>
std::vector<S> unpatchify(const std::vector<S>& patches, int channels, int image_size,
                          int patch_size) {
  int side = image_size / patch_size;
  int pdim = channels * patch_size * patch_size;
  if (static_cast<long>(patches.size()) != static_cast<long>(side) * side * pdim)
    throw ConfigError("unpatchify: patch data size mismatch");
  std::vector<S> image(static_cast<size_t>(channels) * image_size * image_size);
  for (int pr = 0; pr < side; ++pr)
    for (int pc = 0; pc < side; ++pc) {
      const S* src = patches.data() + (static_cast<long>(pr) * side + pc) * pdim;
      for (int c = 0; c < channels; ++c)
        for (int y = 0; y < patch_size; ++y)
          for (int x = 0; x < patch_size; ++x)
            image[(static_cast<long>(c) * image_size + pr * patch_size + y) * image_size +
                  pc * patch_size + x] = *src++;
    }
  return image;
}

// Per-block stochastic-depth rates, linear from 0 at the first block to
// drop_path_max at the last.
inline std::vector<double> drop_path_rates(const ModelConfig& cfg) {
  std::vector<double> rates(static_cast<size_t>(cfg.depth), 0.0);
  if (cfg.depth > 1)
    for (int l = 0; l < cfg.depth; ++l)
      rates[l] = cfg.drop_path_max * static_cast<double>(l) / (cfg.depth - 1);
  return rates;
}

template <typename S>
struct ViTParamsT {
  ModelConfig config;

  TensorT<S> patch_proj_w, patch_proj_b;
  TensorT<S> class_emb;  // (1, dim)
  TensorT<S> pos_emb;    // (tokens, dim)

  struct Block {
    TensorT<S> ln1_g, ln1_b;
    TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
    TensorT<S> ln2_g, ln2_b;
    TensorT<S> fc1_w, fc1_b, fc2_w, fc2_b;
  };
  std::vector<Block> blocks;

  TensorT<S> final_norm_g, final_norm_b;
  TensorT<S> head_w, head_b;              // class-patch classifier
  TensorT<S> patch_head_w, patch_head_b;  // shared per-patch classifier

  // Canonical parameter order; checkpoints, the optimizer state, and
  // initialization all follow it.
  std::vector<TensorT<S>> all() const {
    std::vector<TensorT<S>> ps{patch_proj_w, patch_proj_b, class_emb, pos_emb};
    for (const auto& b : blocks)
      for (const auto& t : {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                            b.ln2_g, b.ln2_b, b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b})
        ps.push_back(t);
    for (const auto& t :
         {final_norm_g, final_norm_b, head_w, head_b, patch_head_w, patch_head_b})
      ps.push_back(t);
    return ps;
  }

  long param_count() const {
    long n = 0;
    for (const auto& t : all()) n += t.numel();
    return n;
  }
};

using ViTParams = ViTParamsT<float>;

namespace detail {

template <typename S>
TensorT<S> uniform_linear(Rng& rng, int fan_in, int fan_out) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<S> v(static_cast<size_t>(fan_in) * fan_out);
  for (auto& x : v) x = S(rng.uniform(-bound, bound));
  return TensorT<S>::leaf({fan_in, fan_out}, std::move(v), true);
}

template <typename S>
TensorT<S> trunc_normal_emb(Rng& rng, std::vector<int> shape, double std_dev) {
  std::vector<S> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = S(rng.trunc_normal(std_dev));
  return TensorT<S>::leaf(std::move(shape), std::move(v), true);
}

template <typename S>
TensorT<S> const_vec(int d, S value) {
  return TensorT<S>::leaf({d}, std::vector<S>(static_cast<size_t>(d), value), true);
}

}  // namespace detail

// Truncated normal (std 0.02) for embeddings, uniform(+-1/sqrt(fan_in)) for
// linear weights, zeros for biases, ones for norm gains. Draw order matches
// the canonical parameter order.
template <typename S>
ViTParamsT<S> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ViTParamsT<S> p;
  p.config = cfg;
  const int d = cfg.dim, pd = cfg.patch_dim(), md = cfg.mlp_dim(), c = cfg.num_classes;

  p.patch_proj_w = detail::uniform_linear<S>(rng, pd, d);
  p.patch_proj_b = detail::const_vec<S>(d, S(0));
  p.class_emb = detail::trunc_normal_emb<S>(rng, {1, d}, 0.02);
  p.pos_emb = detail::trunc_normal_emb<S>(rng, {cfg.tokens(), d}, 0.02);

  p.blocks.resize(static_cast<size_t>(cfg.depth));
  for (auto& b : p.blocks) {
    b.ln1_g = detail::const_vec<S>(d, S(1));
    b.ln1_b = detail::const_vec<S>(d, S(0));
    b.wq = detail::uniform_linear<S>(rng, d, d);
    b.bq = detail::const_vec<S>(d, S(0));
    b.wk = detail::uniform_linear<S>(rng, d, d);
    b.bk = detail::const_vec<S>(d, S(0));
    b.wv = detail::uniform_linear<S>(rng, d, d);
    b.bv = detail::const_vec<S>(d, S(0));
    b.wo = detail::uniform_linear<S>(rng, d, d);
    b.bo = detail::const_vec<S>(d, S(0));
    b.ln2_g = detail::const_vec<S>(d, S(1));
    b.ln2_b = detail::const_vec<S>(d, S(0));
    b.fc1_w = detail::uniform_linear<S>(rng, d, md);
    b.fc1_b = detail::const_vec<S>(md, S(0));
    b.fc2_w = detail::uniform_linear<S>(rng, md, d);
    b.fc2_b = detail::const_vec<S>(d, S(0));
  }

  p.final_norm_g = detail::const_vec<S>(d, S(1));
  p.final_norm_b = detail::const_vec<S>(d, S(0));
  p.head_w = detail::uniform_linear<S>(rng, d, c);
  p.head_b = detail::const_vec<S>(c, S(0));
  p.patch_head_w = detail::uniform_linear<S>(rng, d, c);
  p.patch_head_b = detail::const_vec<S>(c, S(0));
  return p;
}

// Per-layer token matrices recorded during a forward pass. Entry 0 is the
// post-embedding input to block 1; entry L feeds the final norm and head.
// Each entry stores the whole batch as (batch*tokens, dim); the accessors
// cut out per-example views. Gradients flow through the views back into the
// recorded forward graph.
template <typename S>
struct ActivationStackT {
  int batch = 0;
  int tokens = 0;
  int dim = 0;
  std::vector<TensorT<S>> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }

  void check_layer(int layer, int e) const {
    if (layer < 0 || layer >= num_layers())
      throw ContractError("activation stack: layer " + std::to_string(layer) +
                          " out of range (have " + std::to_string(num_layers()) + ")");
    if (e < 0 || e >= batch)
      throw ContractError("activation stack: example " + std::to_string(e) +
                          " out of range (batch " + std::to_string(batch) + ")");
  }

  // (tokens, dim) for one example, class patch at row 0.
  TensorT<S> example(TapeT<S>& tape, int layer, int e) const {
    check_layer(layer, e);
    return tape.slice(layers[layer], 0, e * tokens, (e + 1) * tokens);
  }

  // (tokens-1, dim): the image patches, class patch dropped.
  TensorT<S> patch_rows(TapeT<S>& tape, int layer, int e) const {
    check_layer(layer, e);
    return tape.slice(layers[layer], 0, e * tokens + 1, (e + 1) * tokens);
  }

  TensorT<S> class_row(TapeT<S>& tape, int layer, int e) const {
    check_layer(layer, e);
    return tape.slice(layers[layer], 0, e * tokens, e * tokens + 1);
  }

  // Raw value copy of one example's token matrix (metrics path, no tape).
  std::vector<S> example_values(int layer, int e) const {
    check_layer(layer, e);
    const auto& v = layers[layer].values();
    auto first = v.begin() + static_cast<long>(e) * tokens * dim;
    return std::vector<S>(first, first + static_cast<long>(tokens) * dim);
  }
};

template <typename S>
struct ForwardResultT {
  TensorT<S> logits;  // (batch, num_classes)
  ActivationStackT<S> stack;
};

namespace detail {

template <typename S>
TensorT<S> linear(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  return tape.add_rowvec(tape.matmul(x, w), b);
}

template <typename S>
TensorT<S> attention_branch(TapeT<S>& tape, const typename ViTParamsT<S>::Block& blk,
                            const TensorT<S>& x, int batch, int tokens, int heads) {
  const int d = x.cols();
  const int hd = d / heads;
  auto ln = tape.layer_norm(x, blk.ln1_g, blk.ln1_b, kLayerNormEps);
  auto q = linear(tape, ln, blk.wq, blk.bq);
  auto k = linear(tape, ln, blk.wk, blk.bk);
  auto v = linear(tape, ln, blk.wv, blk.bv);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<TensorT<S>> per_example;
  per_example.reserve(static_cast<size_t>(batch));
  for (int e = 0; e < batch; ++e) {
    auto qe = tape.slice(q, 0, e * tokens, (e + 1) * tokens);
    auto ke = tape.slice(k, 0, e * tokens, (e + 1) * tokens);
    auto ve = tape.slice(v, 0, e * tokens, (e + 1) * tokens);
    std::vector<TensorT<S>> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto qh = tape.slice(qe, 1, h * hd, (h + 1) * hd);
      auto kh = tape.slice(ke, 1, h * hd, (h + 1) * hd);
      auto vh = tape.slice(ve, 1, h * hd, (h + 1) * hd);
      auto scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_scale);
      auto att = tape.softmax(scores);
      head_outs.push_back(tape.matmul(att, vh));
    }
    per_example.push_back(tape.concat(head_outs, 1));
  }
  auto merged = tape.concat(per_example, 0);
  return linear(tape, merged, blk.wo, blk.bo);
}

template <typename S>
TensorT<S> mlp_branch(TapeT<S>& tape, const typename ViTParamsT<S>::Block& blk,
                      const TensorT<S>& x) {
  auto ln = tape.layer_norm(x, blk.ln2_g, blk.ln2_b, kLayerNormEps);
  auto h = tape.gelu(linear(tape, ln, blk.fc1_w, blk.fc1_b));
  return linear(tape, h, blk.fc2_w, blk.fc2_b);
}

// One Bernoulli per example: kept branches are scaled by 1/(1-rate) at train
// time so evaluation needs no rescaling. A uniform is always consumed, also
// at rate 0, so the stream layout does not depend on the schedule.
template <typename S>
std::vector<S> drop_path_factors(Rng& rng, int batch, int tokens, double rate) {
  std::vector<S> f(static_cast<size_t>(batch) * tokens);
  for (int e = 0; e < batch; ++e) {
    bool dropped = rng.uniform() < rate;
    S w = dropped ? S(0) : S(1.0 / (1.0 - rate));
    for (int t = 0; t < tokens; ++t) f[static_cast<size_t>(e) * tokens + t] = w;
  }
  return f;
}

}  // namespace detail

// Pre-LN transformer over patchified inputs. patches must be rank 3
// (batch, n, patch_dim). In eval mode (train_mode false) no randomness is
// consumed and the output is deterministic.
template <typename S>
ForwardResultT<S> vit_forward(TapeT<S>& tape, const ViTParamsT<S>& params,
                              const TensorT<S>& patches, bool train_mode, Rng& rng) {
  const ModelConfig& cfg = params.config;
  if (patches.rank() != 3)
    throw ShapeError("forward: patches must be (batch, n, patch_dim), got " +
                     shape_str(patches.shape()));
  const int batch = patches.shape()[0];
  const int n = patches.shape()[1];
  const int pdim = patches.shape()[2];
  if (batch == 0) throw ShapeError("forward: empty batch");
  if (n != cfg.n_patches() || pdim != cfg.patch_dim())
    throw ShapeError("forward: patches " + shape_str(patches.shape()) + " do not match config (n=" +
                     std::to_string(cfg.n_patches()) + ", patch_dim=" +
                     std::to_string(cfg.patch_dim()) + ")");
  const int tokens = cfg.tokens();

  auto flat = tape.reshape(patches, {batch * n, pdim});
  auto tok = detail::linear(tape, flat, params.patch_proj_w, params.patch_proj_b);

  std::vector<TensorT<S>> rows;
  rows.reserve(static_cast<size_t>(batch) * 2);
  for (int e = 0; e < batch; ++e) {
    rows.push_back(params.class_emb);
    rows.push_back(tape.slice(tok, 0, e * n, (e + 1) * n));
  }
  auto with_class = tape.concat(rows, 0);  // (batch*tokens, dim)
  std::vector<TensorT<S>> pos_tiles(static_cast<size_t>(batch), params.pos_emb);
  auto x = tape.add(with_class, tape.concat(pos_tiles, 0));

  ForwardResultT<S> result;
  result.stack.batch = batch;
  result.stack.tokens = tokens;
  result.stack.dim = cfg.dim;
  result.stack.layers.reserve(static_cast<size_t>(cfg.depth) + 1);
  result.stack.layers.push_back(x);

  const auto rates = drop_path_rates(cfg);
  for (int l = 0; l < cfg.depth; ++l) {
    const auto& blk = params.blocks[static_cast<size_t>(l)];
    auto attn = detail::attention_branch(tape, blk, x, batch, tokens, cfg.heads);
    if (train_mode)
      attn = tape.scale_rows(attn, detail::drop_path_factors<S>(rng, batch, tokens, rates[l]));
    x = tape.add(x, attn);
    auto mlp = detail::mlp_branch(tape, blk, x);
    if (train_mode)
      mlp = tape.scale_rows(mlp, detail::drop_path_factors<S>(rng, batch, tokens, rates[l]));
    x = tape.add(x, mlp);
    result.stack.layers.push_back(x);
  }

  auto final_ln = tape.layer_norm(x, params.final_norm_g, params.final_norm_b, kLayerNormEps);
  std::vector<TensorT<S>> class_rows;
  class_rows.reserve(static_cast<size_t>(batch));
  for (int e = 0; e < batch; ++e)
    class_rows.push_back(tape.slice(final_ln, 0, e * tokens, e * tokens + 1));
  result.logits = detail::linear(tape, tape.concat(class_rows, 0), params.head_w, params.head_b);
  return result;
}

}  // namespace divpatch
