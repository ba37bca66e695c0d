#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "divpatch/losses.hpp"
#include "divpatch/mixing.hpp"
#include "divpatch/rng.hpp"
#include "divpatch/tensor.hpp"
#include "divpatch/vit.hpp"

namespace divpatch {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  bool pass = false;
};

namespace gradcheck_detail {

using GTensor = TensorT<double>;
using GTape = TapeT<double>;

inline std::vector<double> random_vec(Rng& rng, long n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 2;  // 2x2 grid -> 4 patches
  cfg.channels = 1;
  cfg.dim = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.num_classes = 3;
  return cfg;
}

// Replaces one named parameter of the toy model by the checked tensor so the
// oracle differentiates through the full forward pass.
struct ToyLossProbe {
  ViTParamsT<double> params;
  GTensor patches;
  MixedBatch mixed;
  LossWeights weights;
  LossOptions opts;

  GTensor loss(GTape& tape, const ViTParamsT<double>& p, const GTensor& px) const {
    Rng rng(0);
    auto fwd = vit_forward(tape, p, px, /*train_mode=*/false, rng);
    auto combined =
        combined_loss(tape, fwd.logits, fwd.stack, &mixed, {}, p, weights, opts);
    return combined.total;
  }
};

inline ToyLossProbe make_probe(const LossWeights& weights, uint64_t seed) {
  ToyLossProbe probe;
  ModelConfig cfg = toy_config();
  probe.params = init_params<double>(cfg, seed);
  probe.weights = weights;

  Rng rng(seed ^ 0xABCD);
  const int n = cfg.n_patches(), pdim = cfg.patch_dim();
  auto x0 = random_vec(rng, n * pdim, 0.0, 1.0);
  auto x1 = random_vec(rng, n * pdim, 0.0, 1.0);
  std::vector<float> x0f(x0.begin(), x0.end()), x1f(x1.begin(), x1.end());
  MixSpec spec;
  Rng mix_rng(seed ^ 0x1111);
  auto pair = mix_pair(x0f, 0, x1f, 2, n, pdim, cfg.num_classes, spec, mix_rng);
  probe.mixed.mode = spec.mode;
  probe.mixed.rows = {pair.row};
  std::vector<double> mixed_patches(pair.patches.begin(), pair.patches.end());
  probe.patches = GTensor::leaf({1, n, pdim}, mixed_patches);
  return probe;
}

template <typename Mutate>
double probe_wrt(const ToyLossProbe& probe, const GTensor& target, Mutate&& install, double eps) {
  auto f = [&](GTape& tape, GTensor x) {
    ViTParamsT<double> p = probe.params;
    GTensor px = probe.patches;
    install(p, px, x);
    return probe.loss(tape, p, px);
  };
  return finite_diff_check<double>(f, target.shape(), target.values(), eps);
}

}  // namespace gradcheck_detail

// Finite-difference verification of every differentiable op and of the
// three diversity losses plus the combined objective through a 2-layer toy
// transformer (dim 16, 4 patches, 3 classes). Runs in f64 so the oracle is
// free of f32 rounding noise. The contrastive stop-gradient is validated
// separately as an exact-zero check, and its through-model probes perturb
// only quantities that leave the anchor layer untouched.
inline std::vector<GradCheckResult> run_gradient_suite() {
  using namespace gradcheck_detail;
  std::vector<GradCheckResult> results;

  auto check = [&](const std::string& name, double err, double tol = 1e-4) {
    GradCheckResult r;
    r.name = name;
    r.max_rel_err = err;
    r.tolerance = tol;
    r.pass = err < tol;
    results.push_back(r);
  };

  // ---- primitive ops, one representative shape each
  {
    Rng rng(21);
    auto weights = random_vec(rng, 12, 0.5, 1.5);
    auto scalarize = [&](GTape& t, const GTensor& y) {
      return t.sum_all(t.mul(y, GTensor::leaf(y.shape(), std::vector<double>(
                                                              weights.begin(),
                                                              weights.begin() + y.numel()))));
    };
    auto bv = random_vec(rng, 12);
    check("op.matmul", finite_diff_check<double>(
                           [&](GTape& t, GTensor x) {
                             return t.sum_all(t.matmul(x, GTensor::leaf({4, 3}, bv)));
                           },
                           {3, 4}, random_vec(rng, 12), 1e-3));
    check("op.layer_norm",
          finite_diff_check<double>(
              [&](GTape& t, GTensor x) {
                auto g = GTensor::leaf({4}, {1.1, 0.9, 1.2, 0.8});
                auto b = GTensor::leaf({4}, {0.1, -0.2, 0.3, 0.0});
                return scalarize(t, t.layer_norm(x, g, b, 1e-6));
              },
              {3, 4},
              [&] {
                auto v = random_vec(rng, 12);
                for (int i = 0; i < 12; ++i) v[static_cast<size_t>(i)] += 1.2 * (i % 4);
                return v;
              }(),
              1e-3));
    check("op.softmax", finite_diff_check<double>(
                            [&](GTape& t, GTensor x) { return scalarize(t, t.softmax(x)); },
                            {3, 4}, random_vec(rng, 12), 1e-3));
    check("op.log_softmax",
          finite_diff_check<double>(
              [&](GTape& t, GTensor x) { return scalarize(t, t.log_softmax(x)); }, {3, 4},
              random_vec(rng, 12), 1e-3));
    check("op.gelu", finite_diff_check<double>(
                         [&](GTape& t, GTensor x) { return scalarize(t, t.gelu(x)); }, {3, 4},
                         random_vec(rng, 12), 1e-3));
    check("op.add_mul_scale",
          finite_diff_check<double>(
              [&](GTape& t, GTensor x) {
                auto o = GTensor::leaf({3, 4}, bv);
                return t.sum_all(t.scale(t.mul(t.add(x, o), x), 0.7));
              },
              {3, 4}, random_vec(rng, 12), 1e-3));
    check("op.mean_axis", finite_diff_check<double>(
                              [&](GTape& t, GTensor x) { return t.sum_all(t.mean_axis(x, 0)); },
                              {3, 4}, random_vec(rng, 12), 1e-3));
    check("op.concat_slice",
          finite_diff_check<double>(
              [&](GTape& t, GTensor x) {
                auto lo = t.slice(x, 0, 0, 1);
                auto hi = t.slice(x, 0, 1, 3);
                return scalarize(t, t.concat(hi, lo, 0));
              },
              {3, 4}, random_vec(rng, 12), 1e-3));
    check("op.row_l2_normalize",
          finite_diff_check<double>(
              [&](GTape& t, GTensor x) { return scalarize(t, t.row_l2_normalize(x)); }, {3, 4},
              [&] {
                auto v = random_vec(rng, 12);
                for (auto& t2 : v) t2 += (t2 >= 0 ? 0.5 : -0.5);
                return v;
              }(),
              1e-3));
    check("op.abs", finite_diff_check<double>(
                        [&](GTape& t, GTensor x) { return scalarize(t, t.abs(x)); }, {3, 4},
                        [&] {
                          auto v = random_vec(rng, 12);
                          for (auto& t2 : v) t2 += (t2 >= 0 ? 0.5 : -0.5);
                          return v;
                        }(),
                        1e-3));
    check("op.transpose_reshape",
          finite_diff_check<double>(
              [&](GTape& t, GTensor x) { return scalarize(t, t.reshape(t.transpose(x), {3, 4})); },
              {3, 4}, random_vec(rng, 12), 1e-3));
  }

  // ---- losses at the matrix level
  {
    Rng rng(22);
    auto away_from_zero = [&](long n) {
      auto v = random_vec(rng, n);
      for (auto& x : v) x += (x >= 0 ? 0.5 : -0.5);
      return v;
    };
    check("loss.cosine(matrix)",
          finite_diff_check<double>(
              [](GTape& t, GTensor x) { return cosine_loss(t, x); }, {4, 6}, away_from_zero(24),
              1e-3));
    auto anchor_vals = random_vec(rng, 24);
    check("loss.contrastive(matrix, anchor frozen)",
          finite_diff_check<double>(
              [&](GTape& t, GTensor x) {
                return contrastive_loss(t, GTensor::leaf({4, 6}, anchor_vals), x);
              },
              {4, 6}, random_vec(rng, 24), 1e-3));
    check("loss.mixing(matrix)",
          finite_diff_check<double>(
              [&](GTape& t, GTensor x) {
                auto w = GTensor::leaf({6, 3}, random_vec(rng, 18));
                auto b = GTensor::leaf({3}, {0.1, -0.1, 0.2});
                return mixing_loss(t, x, w, b, {0, 2, 1, 0}, 3, false, {}, 0, 0);
              },
              {4, 6}, random_vec(rng, 24), 1e-3));
    check("loss.mixing(matrix, pooled)",
          finite_diff_check<double>(
              [&](GTape& t, GTensor x) {
                auto w = GTensor::leaf({6, 3}, random_vec(rng, 18));
                auto b = GTensor::leaf({3}, {0.1, -0.1, 0.2});
                return mixing_loss(t, x, w, b, {0, 2, 2, 0}, 3, true, {1, 0, 0, 1}, 0, 2);
              },
              {4, 6}, random_vec(rng, 24), 1e-3));
  }

  // ---- exact stop-gradient on the contrastive anchor
  {
    Rng rng(23);
    GTape tape;
    auto h1 = GTensor::leaf({4, 6}, random_vec(rng, 24), true);
    auto hL = GTensor::leaf({4, 6}, random_vec(rng, 24), true);
    auto loss = contrastive_loss(tape, h1, hL);
    tape.backward(loss);
    double h1_grad_norm = 0.0;
    if (h1.has_grad())
      for (double g : h1.grad()) h1_grad_norm += std::fabs(g);
    GradCheckResult r;
    r.name = "loss.contrastive stop-gradient on h1 (exact zero)";
    r.max_rel_err = h1_grad_norm;
    r.tolerance = 0.0;
    r.pass = h1_grad_norm == 0.0 && hL.has_grad();
    results.push_back(r);
  }

  // ---- losses through the 2-layer toy transformer
  {
    // cos + mixing probes may perturb the input patches; the contrastive
    // probes perturb second-block / head parameters so the gradient-stopped
    // anchor keeps its values under finite differences.
    LossWeights cos_only{1.0, 0.0, 0.0, false};
    LossWeights con_only{0.0, 1.0, 0.0, false};
    LossWeights mix_only{0.0, 0.0, 1.0, false};
    LossWeights all{1.0, 1.0, 1.0, false};

    auto probe_patches = [&](const char* name, const LossWeights& w, uint64_t seed) {
      auto probe = make_probe(w, seed);
      double err = probe_wrt(
          probe, probe.patches,
          [](ViTParamsT<double>&, GTensor& px, const GTensor& x) { px = x; }, 1e-3);
      check(name, err);
    };
    probe_patches("vit.cosine wrt patches", cos_only, 31);
    probe_patches("vit.mixing wrt patches", mix_only, 32);
    {
      LossWeights cos_mix{1.0, 0.0, 1.0, false};
      probe_patches("vit.cosine+ce+mixing wrt patches", cos_mix, 33);
    }

    auto probe_block2 = [&](const char* name, const LossWeights& w, uint64_t seed) {
      auto probe = make_probe(w, seed);
      double err = probe_wrt(
          probe, probe.params.blocks[1].wq,
          [](ViTParamsT<double>& p, GTensor&, const GTensor& x) { p.blocks[1].wq = x; }, 1e-3);
      check(name, err);
    };
    probe_block2("vit.contrastive wrt block-2 weights", con_only, 34);
    probe_block2("vit.combined wrt block-2 weights", all, 35);

    auto probe_head = [&](const char* name, const LossWeights& w, uint64_t seed) {
      auto probe = make_probe(w, seed);
      double err = probe_wrt(
          probe, probe.params.patch_head_w,
          [](ViTParamsT<double>& p, GTensor&, const GTensor& x) { p.patch_head_w = x; }, 1e-3);
      check(name, err);
    };
    probe_head("vit.combined wrt patch head", all, 36);

    auto probe_class_head = [&](const char* name, const LossWeights& w, uint64_t seed) {
      auto probe = make_probe(w, seed);
      double err = probe_wrt(
          probe, probe.params.head_w,
          [](ViTParamsT<double>& p, GTensor&, const GTensor& x) { p.head_w = x; }, 1e-3);
      check(name, err);
    };
    probe_class_head("vit.combined wrt class head", all, 37);

    // stop-gradient through the full model: d(loss)/d(block-1 params) from
    // the contrastive term alone flows only via hL, never via the anchor;
    // verified against finite differences of the same restricted path is
    // impossible numerically, so assert the zero-grad contract instead at
    // the matrix level (done above) and check the full combined objective
    // differentiates cleanly wrt first-block weights on cos+mixing.
    {
      LossWeights cos_mix{1.0, 0.0, 1.0, false};
      auto probe = make_probe(cos_mix, 38);
      double err = probe_wrt(
          probe, probe.params.blocks[0].fc1_w,
          [](ViTParamsT<double>& p, GTensor&, const GTensor& x) { p.blocks[0].fc1_w = x; }, 1e-3);
      check("vit.cosine+ce+mixing wrt block-1 weights", err);
    }
  }

  return results;
}

inline bool gradient_suite_passed(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return !results.empty();
}

}  // namespace divpatch
