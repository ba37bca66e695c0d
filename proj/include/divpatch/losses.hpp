#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divpatch/mixing.hpp"
#include "divpatch/tensor.hpp"
#include "divpatch/vit.hpp"

namespace divpatch {

struct LossWeights {
  double alpha_cos = 1.0;
  double alpha_contrastive = 1.0;
  double alpha_mixing = 1.0;
  bool pooled_mixing = false;

  bool any_diversity() const {
    return alpha_cos != 0.0 || alpha_contrastive != 0.0 || alpha_mixing != 0.0;
  }
};

struct LossOptions {
  int mixing_loss_layer = -1;           // -1 selects the last layer
  int contrastive_reference_layer = 1;  // stack entry index for the anchor
  bool loss_taps_final_norm = false;    // feed losses the final-norm output instead of entry L
};

// Per-step scalar summary. total always decomposes as
// ce_class + a1*l_cos + a2*l_contrastive + a3*l_mixing.
struct LossReport {
  double total = 0.0;
  double ce_class = 0.0;
  double l_cos = 0.0;
  double l_contrastive = 0.0;
  double l_mixing = 0.0;
};

// Mean |cos| over ordered patch pairs, differentiable. Equals the
// diversity metric on the same rows; |.| uses subgradient 0 at zero.
template <typename S>
TensorT<S> cosine_loss(TapeT<S>& tape, const TensorT<S>& h_patches) {
  const int n = h_patches.rows();
  if (n < 2) throw ContractError("cosine_loss: need at least 2 patch rows");
  auto unit = tape.row_l2_normalize(h_patches);
  auto gram = tape.abs(tape.matmul(unit, tape.transpose(unit)));
  std::vector<S> off_diag(static_cast<size_t>(n) * n, S(1));
  for (int i = 0; i < n; ++i) off_diag[static_cast<size_t>(i) * n + i] = S(0);
  auto masked = tape.mul(gram, TensorT<S>::leaf({n, n}, std::move(off_diag)));
  return tape.scale(tape.sum_all(masked), 1.0 / (static_cast<double>(n) * (n - 1)));
}

// Per-patch two-way log-softmax between the positive dot <h1_i, hL_i> and
// the pooled negative <h1_i, mean_{j != i} hL_j>, averaged over patches.
// The anchor h1 is gradient-stopped: gradients flow only into hL.
template <typename S>
TensorT<S> contrastive_loss(TapeT<S>& tape, const TensorT<S>& h1_patches,
                            const TensorT<S>& hL_patches) {
  if (h1_patches.shape() != hL_patches.shape())
    throw ShapeError("contrastive_loss: shape mismatch " + shape_str(h1_patches.shape()) + " vs " +
                     shape_str(hL_patches.shape()));
  const int n = hL_patches.rows();
  const int d = hL_patches.cols();
  if (n < 2) throw ContractError("contrastive_loss: need at least 2 patch rows");

  auto anchor = h1_patches.detached();
  auto ones_col = TensorT<S>::leaf({d, 1}, std::vector<S>(static_cast<size_t>(d), S(1)));
  auto ones_row_n = TensorT<S>::leaf({1, n}, std::vector<S>(static_cast<size_t>(n), S(1)));
  auto ones_col_n = TensorT<S>::leaf({n, 1}, std::vector<S>(static_cast<size_t>(n), S(1)));

  auto positive = tape.matmul(tape.mul(anchor, hL_patches), ones_col);  // (n, 1)
  auto column_sum = tape.matmul(ones_row_n, hL_patches);                // (1, d)
  auto tiled = tape.matmul(ones_col_n, column_sum);                     // (n, d)
  auto others_mean =
      tape.scale(tape.add(tiled, tape.scale(hL_patches, -1.0)), 1.0 / (n - 1.0));
  auto negative = tape.matmul(tape.mul(anchor, others_mean), ones_col);  // (n, 1)

  auto scores = tape.log_softmax(tape.concat(positive, negative, 1));  // (n, 2)
  auto log_p_positive = tape.slice(scores, 1, 0, 1);
  return tape.scale(tape.sum_all(log_p_positive), -1.0 / n);
}

// Per-patch cross entropy against each patch's source label through the
// shared linear head. The pooled variant average-pools each provenance
// group first and sums the non-empty groups' cross entropies.
template <typename S>
TensorT<S> mixing_loss(TapeT<S>& tape, const TensorT<S>& h_patches, const TensorT<S>& head_w,
                       const TensorT<S>& head_b, const std::vector<int>& y_patch, int num_classes,
                       bool pooled, const std::vector<uint8_t>& mask, int y0, int y1) {
  const int n = h_patches.rows();
  if (y_patch.empty()) throw ContractError("mixing_loss: empty y_patch");
  if (static_cast<int>(y_patch.size()) != n)
    throw ShapeError("mixing_loss: y_patch length " + std::to_string(y_patch.size()) +
                     " does not match " + std::to_string(n) + " patch rows");
  for (int y : y_patch)
    if (y < 0 || y >= num_classes) throw ContractError("mixing_loss: label out of range");

  if (!pooled) {
    auto logits = tape.add_rowvec(tape.matmul(h_patches, head_w), head_b);  // (n, C)
    auto log_probs = tape.log_softmax(logits);
    std::vector<S> onehot(static_cast<size_t>(n) * num_classes, S(0));
    for (int i = 0; i < n; ++i)
      onehot[static_cast<size_t>(i) * num_classes + y_patch[static_cast<size_t>(i)]] = S(1);
    auto picked = tape.mul(log_probs, TensorT<S>::leaf({n, num_classes}, std::move(onehot)));
    return tape.scale(tape.sum_all(picked), -1.0 / n);
  }

  if (static_cast<int>(mask.size()) != n)
    throw ShapeError("mixing_loss: mask length does not match patch rows");
  TensorT<S> total;
  for (int group = 0; group < 2; ++group) {
    const uint8_t want = group == 0 ? 1 : 0;
    const int label = group == 0 ? y0 : y1;
    int members = 0;
    for (uint8_t m : mask) members += (m == want) ? 1 : 0;
    if (members == 0) continue;
    std::vector<S> pool_w(static_cast<size_t>(n), S(0));
    for (int i = 0; i < n; ++i)
      if (mask[static_cast<size_t>(i)] == want) pool_w[static_cast<size_t>(i)] = S(1.0 / members);
    auto pooled_repr = tape.matmul(TensorT<S>::leaf({1, n}, std::move(pool_w)), h_patches);
    auto logits = tape.add_rowvec(tape.matmul(pooled_repr, head_w), head_b);  // (1, C)
    auto log_probs = tape.log_softmax(logits);
    std::vector<S> onehot(static_cast<size_t>(num_classes), S(0));
    onehot[static_cast<size_t>(label)] = S(1);
    auto term = tape.scale(
        tape.sum_all(tape.mul(log_probs, TensorT<S>::leaf({1, num_classes}, std::move(onehot)))),
        -1.0);
    total = total.defined() ? tape.add(total, term) : term;
  }
  return total;
}

// Soft-label cross entropy -sum(targets * log_softmax(logits)) / batch.
template <typename S>
TensorT<S> soft_cross_entropy(TapeT<S>& tape, const TensorT<S>& logits,
                              const std::vector<S>& targets) {
  if (static_cast<long>(targets.size()) != logits.numel())
    throw ShapeError("soft_cross_entropy: target size mismatch");
  const int batch = logits.rows();
  auto log_probs = tape.log_softmax(logits);
  auto picked = tape.mul(log_probs, TensorT<S>::leaf(logits.shape(), targets));
  return tape.scale(tape.sum_all(picked), -1.0 / batch);
}

template <typename S>
struct CombinedLoss {
  TensorT<S> total;  // scalar on the tape
  LossReport report;
};

// The training objective: class-patch soft-label cross entropy plus the
// weighted diversity terms, averaged over the batch. Components with zero
// weight are not evaluated, so an all-zero weight vector leaves the graph
// identical to plain classification. mixed may be null for unmixed batches,
// in which case every patch inherits the example label.
template <typename S>
CombinedLoss<S> combined_loss(TapeT<S>& tape, const TensorT<S>& logits,
                              const ActivationStackT<S>& stack, const MixedBatch* mixed,
                              const std::vector<int>& labels, const ViTParamsT<S>& params,
                              const LossWeights& weights, const LossOptions& opts = {}) {
  const int batch = stack.batch;
  const int num_classes = params.config.num_classes;
  const int last = stack.num_layers() - 1;
  if (last < 0) throw ContractError("combined_loss: empty activation stack");
  if (logits.rank() != 2 || logits.rows() != batch)
    throw ShapeError("combined_loss: logits shape " + shape_str(logits.shape()) +
                     " does not match batch " + std::to_string(batch));
  if (mixed == nullptr && static_cast<int>(labels.size()) != batch)
    throw ContractError("combined_loss: labels length does not match batch");
  if (mixed != nullptr && static_cast<int>(mixed->rows.size()) != batch)
    throw ContractError("combined_loss: mixed rows do not match batch");

  CombinedLoss<S> out;

  // class-patch term, soft labels
  std::vector<S> targets(static_cast<size_t>(batch) * num_classes, S(0));
  for (int e = 0; e < batch; ++e) {
    if (mixed != nullptr) {
      const auto& y_mix = mixed->rows[static_cast<size_t>(e)].y_mix;
      for (int c = 0; c < num_classes; ++c)
        targets[static_cast<size_t>(e) * num_classes + c] = S(y_mix[static_cast<size_t>(c)]);
    } else {
      targets[static_cast<size_t>(e) * num_classes + labels[static_cast<size_t>(e)]] = S(1);
    }
  }
  auto ce = soft_cross_entropy(tape, logits, targets);
  out.report.ce_class = static_cast<double>(ce.item());
  auto total = ce;

  // Loss source at the last layer: recorded pre-norm entry, or the
  // final-norm output when tapped.
  auto last_layer_source = [&]() -> TensorT<S> {
    if (!opts.loss_taps_final_norm) return stack.layers[static_cast<size_t>(last)];
    return tape.layer_norm(stack.layers[static_cast<size_t>(last)], params.final_norm_g,
                           params.final_norm_b, kLayerNormEps);
  };
  TensorT<S> last_source;
  auto patch_rows_of = [&](const TensorT<S>& layer, int e) {
    return tape.slice(layer, 0, e * stack.tokens + 1, (e + 1) * stack.tokens);
  };

  if (weights.alpha_cos != 0.0) {
    if (!last_source.defined()) last_source = last_layer_source();
    TensorT<S> acc;
    for (int e = 0; e < batch; ++e) {
      auto term = cosine_loss(tape, patch_rows_of(last_source, e));
      acc = acc.defined() ? tape.add(acc, term) : term;
    }
    auto mean = tape.scale(acc, 1.0 / batch);
    out.report.l_cos = static_cast<double>(mean.item());
    total = tape.add(total, tape.scale(mean, weights.alpha_cos));
  }

  if (weights.alpha_contrastive != 0.0) {
    int ref = opts.contrastive_reference_layer;
    if (ref < 0 || ref > last)
      throw ContractError("combined_loss: contrastive_reference_layer " + std::to_string(ref) +
                          " out of range (stack has entries 0.." + std::to_string(last) + ")");
    if (!last_source.defined()) last_source = last_layer_source();
    const auto& ref_layer = stack.layers[static_cast<size_t>(ref)];
    TensorT<S> acc;
    for (int e = 0; e < batch; ++e) {
      auto term = contrastive_loss(tape, patch_rows_of(ref_layer, e), patch_rows_of(last_source, e));
      acc = acc.defined() ? tape.add(acc, term) : term;
    }
    auto mean = tape.scale(acc, 1.0 / batch);
    out.report.l_contrastive = static_cast<double>(mean.item());
    total = tape.add(total, tape.scale(mean, weights.alpha_contrastive));
  }

  if (weights.alpha_mixing != 0.0) {
    int layer = opts.mixing_loss_layer < 0 ? last : opts.mixing_loss_layer;
    if (layer > last)
      throw ContractError("combined_loss: mixing_loss_layer " + std::to_string(layer) +
                          " out of range");
    TensorT<S> source = (layer == last) ? (last_source.defined() ? last_source : last_layer_source())
                                        : stack.layers[static_cast<size_t>(layer)];
    const int n = stack.tokens - 1;
    TensorT<S> acc;
    for (int e = 0; e < batch; ++e) {
      std::vector<int> y_patch;
      std::vector<uint8_t> mask;
      int y0, y1;
      if (mixed != nullptr) {
        const auto& row = mixed->rows[static_cast<size_t>(e)];
        y_patch = row.y_patch;
        mask = row.mask;
        y0 = row.y0;
        y1 = row.y1;
      } else {
        y_patch.assign(static_cast<size_t>(n), labels[static_cast<size_t>(e)]);
        mask.assign(static_cast<size_t>(n), 1);
        y0 = y1 = labels[static_cast<size_t>(e)];
      }
      auto term = mixing_loss(tape, patch_rows_of(source, e), params.patch_head_w,
                              params.patch_head_b, y_patch, num_classes, weights.pooled_mixing,
                              mask, y0, y1);
      acc = acc.defined() ? tape.add(acc, term) : term;
    }
    auto mean = tape.scale(acc, 1.0 / batch);
    out.report.l_mixing = static_cast<double>(mean.item());
    total = tape.add(total, tape.scale(mean, weights.alpha_mixing));
  }

  out.total = total;
  out.report.total = static_cast<double>(total.item());
  return out;
}

}  // namespace divpatch
