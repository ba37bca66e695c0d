#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divpatch/data.hpp"
#include "divpatch/rng.hpp"
#include "divpatch/tensor.hpp"

namespace divpatch {

struct MixSpec {
  enum class Mode { random, block };
  enum class LabelLambda { realized, sampled };

  Mode mode = Mode::random;
  double alpha = 1.0;  // lambda ~ Beta(alpha, alpha)
  bool exclude_class = true;
  // Mixed labels use the realized patch fraction by default, which keeps
  // y_mix exactly consistent with the per-patch labels.
  LabelLambda label_lambda = LabelLambda::realized;
};

// Bookkeeping for one mixed example. The patch data itself lives in the
// MixedBatch tensor.
struct MixedExample {
  std::vector<uint8_t> mask;  // 1 = patch taken from image 0
  int y0 = 0, y1 = 0;
  std::vector<int> y_patch;   // per-patch source label
  std::vector<float> y_mix;   // soft label, length num_classes, sums to 1
  double lambda_sampled = 0.0;
  double lambda_eff = 0.0;    // popcount(mask) / n
};

struct MixedBatch {
  Tensor patches;  // (batch, n, patch_dim); every patch byte-equal to one source
  std::vector<MixedExample> rows;
  MixSpec::Mode mode = MixSpec::Mode::random;
};

double sample_lambda(const MixSpec& spec, Rng& rng);

// Independent per-patch Bernoulli: entry i is true iff rho_i < lambda.
std::vector<uint8_t> sample_mask_random(int n, double lambda, Rng& rng);

// Contiguous axis-aligned rectangle of false entries (the image-1 region)
// with side length round(grid_side * sqrt(1 - lambda)), clipped to the grid
// and uniformly positioned.
std::vector<uint8_t> sample_mask_block(int grid_side, double lambda, Rng& rng);

struct MixedPair {
  std::vector<float> patches;  // (n, patch_dim)
  MixedExample row;
};

// Deterministic core: applies a given (lambda, mask) to a source pair.
MixedPair apply_mix(const std::vector<float>& x0, int y0, const std::vector<float>& x1, int y1,
                    int n, int patch_dim, int num_classes, double lambda_sampled,
                    std::vector<uint8_t> mask, const MixSpec& spec);

// Samples lambda and a mask, then mixes one pair of patchified examples.
MixedPair mix_pair(const std::vector<float>& x0, int y0, const std::vector<float>& x1, int y1,
                   int n, int patch_dim, int num_classes, const MixSpec& spec, Rng& rng);

// Mixes a whole batch. Example i is mixed with example (i + batch/2) % batch;
// for even batches the two orientations of a pair share one lambda and one
// mask, odd batches fall back to per-example draws.
MixedBatch mix_batch(const Batch& batch, int num_classes, const MixSpec& spec, Rng& rng);

// CSV columns: example, lambda_sampled, lambda_eff, mode, mask as 0/1 string.
void write_mix_preview_csv(const MixedBatch& mixed, const std::string& path);

}  // namespace divpatch
