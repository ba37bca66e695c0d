#include "divpatch/mixing.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace divpatch {

double sample_lambda(const MixSpec& spec, Rng& rng) {
  if (spec.alpha <= 0.0) throw ConfigError("mix spec: alpha must be > 0");
  return rng.beta(spec.alpha, spec.alpha);
}

std::vector<uint8_t> sample_mask_random(int n, double lambda, Rng& rng) {
  if (n < 1) throw ConfigError("mask: n must be >= 1");
  std::vector<uint8_t> mask(static_cast<size_t>(n));
  for (auto& m : mask) m = rng.uniform() < lambda ? 1 : 0;
  return mask;
}

std::vector<uint8_t> sample_mask_block(int grid_side, double lambda, Rng& rng) {
  if (grid_side < 1) throw ConfigError("mask: grid_side must be >= 1");
  const int n = grid_side * grid_side;
  std::vector<uint8_t> mask(static_cast<size_t>(n), 1);
  int side = static_cast<int>(std::lround(grid_side * std::sqrt(1.0 - lambda)));
  side = std::min(side, grid_side);
  if (side <= 0) return mask;
  int top = static_cast<int>(rng.randint(static_cast<uint64_t>(grid_side - side + 1)));
  int left = static_cast<int>(rng.randint(static_cast<uint64_t>(grid_side - side + 1)));
  for (int r = top; r < top + side; ++r)
    for (int c = left; c < left + side; ++c) mask[static_cast<size_t>(r) * grid_side + c] = 0;
  return mask;
}

MixedPair apply_mix(const std::vector<float>& x0, int y0, const std::vector<float>& x1, int y1,
                    int n, int patch_dim, int num_classes, double lambda_sampled,
                    std::vector<uint8_t> mask, const MixSpec& spec) {
  const size_t expected = static_cast<size_t>(n) * patch_dim;
  if (x0.size() != expected || x1.size() != expected)
    throw ConfigError("mix: patch count mismatch, expected " + std::to_string(n) + "x" +
                      std::to_string(patch_dim) + " got " + std::to_string(x0.size()) + " and " +
                      std::to_string(x1.size()));
  if (static_cast<int>(mask.size()) != n)
    throw ConfigError("mix: mask length " + std::to_string(mask.size()) + " does not match n=" +
                      std::to_string(n));
  if (y0 < 0 || y0 >= num_classes || y1 < 0 || y1 >= num_classes)
    throw ConfigError("mix: label out of range");

  MixedPair out;
  out.patches.resize(expected);
  out.row.mask = std::move(mask);
  out.row.y0 = y0;
  out.row.y1 = y1;
  out.row.lambda_sampled = lambda_sampled;
  out.row.y_patch.resize(static_cast<size_t>(n));

  int kept = 0;
  for (int i = 0; i < n; ++i) {
    const float* src = out.row.mask[static_cast<size_t>(i)] ? &x0[static_cast<size_t>(i) * patch_dim]
                                                            : &x1[static_cast<size_t>(i) * patch_dim];
    std::memcpy(out.patches.data() + static_cast<size_t>(i) * patch_dim, src,
                static_cast<size_t>(patch_dim) * sizeof(float));
    out.row.y_patch[static_cast<size_t>(i)] = out.row.mask[static_cast<size_t>(i)] ? y0 : y1;
    kept += out.row.mask[static_cast<size_t>(i)] ? 1 : 0;
  }
  out.row.lambda_eff = static_cast<double>(kept) / n;

  double lam = spec.label_lambda == MixSpec::LabelLambda::realized ? out.row.lambda_eff
                                                                   : lambda_sampled;
  out.row.y_mix.assign(static_cast<size_t>(num_classes), 0.0f);
  out.row.y_mix[static_cast<size_t>(y0)] += static_cast<float>(lam);
  out.row.y_mix[static_cast<size_t>(y1)] += static_cast<float>(1.0 - lam);
  return out;
}

MixedPair mix_pair(const std::vector<float>& x0, int y0, const std::vector<float>& x1, int y1,
                   int n, int patch_dim, int num_classes, const MixSpec& spec, Rng& rng) {
  double lambda = sample_lambda(spec, rng);
  std::vector<uint8_t> mask;
  if (spec.mode == MixSpec::Mode::random) {
    mask = sample_mask_random(n, lambda, rng);
  } else {
    int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    if (side * side != n)
      throw ConfigError("mix: block mode needs a square patch grid, got n=" + std::to_string(n));
    mask = sample_mask_block(side, lambda, rng);
  }
  return apply_mix(x0, y0, x1, y1, n, patch_dim, num_classes, lambda, std::move(mask), spec);
}

MixedBatch mix_batch(const Batch& batch, int num_classes, const MixSpec& spec, Rng& rng) {
  const auto& shape = batch.patches.shape();
  if (shape.size() != 3) throw ConfigError("mix_batch: patches must be (batch, n, patch_dim)");
  const int b = shape[0], n = shape[1], pdim = shape[2];
  if (b < 2) throw ConfigError("mix_batch: need at least 2 examples");
  const int half = b / 2;
  const bool even = (b % 2 == 0);

  // Draws, one per pair for even batches.
  std::vector<double> lambdas(static_cast<size_t>(b));
  std::vector<std::vector<uint8_t>> masks(static_cast<size_t>(b));
  auto draw = [&](int slot) {
    lambdas[static_cast<size_t>(slot)] = sample_lambda(spec, rng);
    if (spec.mode == MixSpec::Mode::random) {
      masks[static_cast<size_t>(slot)] =
          sample_mask_random(n, lambdas[static_cast<size_t>(slot)], rng);
    } else {
      int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
      if (side * side != n)
        throw ConfigError("mix_batch: block mode needs a square patch grid");
      masks[static_cast<size_t>(slot)] =
          sample_mask_block(side, lambdas[static_cast<size_t>(slot)], rng);
    }
  };
  if (even) {
    for (int i = 0; i < half; ++i) {
      draw(i);
      lambdas[static_cast<size_t>(i + half)] = lambdas[static_cast<size_t>(i)];
      masks[static_cast<size_t>(i + half)] = masks[static_cast<size_t>(i)];
    }
  } else {
    for (int i = 0; i < b; ++i) draw(i);
  }

  MixedBatch out;
  out.mode = spec.mode;
  out.rows.resize(static_cast<size_t>(b));
  std::vector<float> buf(batch.patches.values().size());
  const float* src = batch.patches.values().data();
  const long ex_stride = static_cast<long>(n) * pdim;
  for (int i = 0; i < b; ++i) {
    int j = (i + half) % b;
    std::vector<float> xi(src + i * ex_stride, src + (i + 1) * ex_stride);
    std::vector<float> xj(src + j * ex_stride, src + (j + 1) * ex_stride);
    auto mixed = apply_mix(xi, batch.labels[static_cast<size_t>(i)], xj,
                           batch.labels[static_cast<size_t>(j)], n, pdim, num_classes,
                           lambdas[static_cast<size_t>(i)], masks[static_cast<size_t>(i)], spec);
    std::copy(mixed.patches.begin(), mixed.patches.end(), buf.begin() + i * ex_stride);
    out.rows[static_cast<size_t>(i)] = std::move(mixed.row);
  }
  out.patches = Tensor::leaf(shape, std::move(buf));
  return out;
}

void write_mix_preview_csv(const MixedBatch& mixed, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open file for writing");
  f << "example,lambda_sampled,lambda_eff,mode,mask\n";
  for (size_t i = 0; i < mixed.rows.size(); ++i) {
    const auto& row = mixed.rows[i];
    f << i << "," << row.lambda_sampled << "," << row.lambda_eff << ","
      << (mixed.mode == MixSpec::Mode::random ? "random" : "block") << ",";
    for (uint8_t m : row.mask) f << (m ? '1' : '0');
    f << "\n";
  }
}

}  // namespace divpatch
