#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "divpatch/data.hpp"
#include "divpatch/io.hpp"
#include "divpatch/tensor.hpp"
#include "divpatch/vit.hpp"

namespace divpatch {

// Mean over all ordered pairs i != j of |cos(h_i, h_j)|, the collapse
// diagnostic. Accumulates in f64. With has_class_patch the first row is
// skipped. Rows with near-zero norm are rejected rather than skewing the
// average silently.
template <typename S>
double patch_cosine(const S* data, int rows, int dim, bool has_class_patch) {
  const S* h = data + (has_class_patch ? dim : 0);
  const int n = rows - (has_class_patch ? 1 : 0);
  if (n < 2)
    throw ContractError("patch_cosine: need at least 2 patch rows, got " + std::to_string(n));
  std::vector<double> unit(static_cast<size_t>(n) * dim);
  for (int r = 0; r < n; ++r) {
    double ss = 0;
    for (int j = 0; j < dim; ++j) {
      double v = static_cast<double>(h[static_cast<long>(r) * dim + j]);
      ss += v * v;
    }
    double norm = std::sqrt(ss);
    if (norm < 1e-12)
      throw DegenerateRowError("patch_cosine: patch row " + std::to_string(r) +
                               " has near-zero norm");
    for (int j = 0; j < dim; ++j)
      unit[static_cast<size_t>(r) * dim + j] = static_cast<double>(h[static_cast<long>(r) * dim + j]) / norm;
  }
  // Normalized-Gram off-diagonal entries; |cos| is symmetric so unordered
  // pairs, doubled, equal the ordered-pair average. Summing in sorted order
  // makes the result exactly invariant under row permutations.
  std::vector<double> pair_values;
  pair_values.reserve(static_cast<size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < i; ++j) {
      double dot = 0;
      const double* a = unit.data() + static_cast<size_t>(i) * dim;
      const double* b = unit.data() + static_cast<size_t>(j) * dim;
      for (int k = 0; k < dim; ++k) dot += a[k] * b[k];
      pair_values.push_back(std::fabs(dot));
    }
  std::sort(pair_values.begin(), pair_values.end());
  double acc = 0;
  for (double v : pair_values) acc += v;
  double p = 2.0 * acc / (static_cast<double>(n) * (n - 1));
  return std::clamp(p, 0.0, 1.0);
}

template <typename S>
double patch_cosine(const TensorT<S>& h, bool has_class_patch) {
  if (h.rank() != 2) throw ShapeError("patch_cosine: expected a 2-D token matrix");
  return patch_cosine(h.values().data(), h.rows(), h.cols(), has_class_patch);
}

struct DiversityProfileRow {
  int layer = 0;
  double mean_p = 0.0;
  double std_p = 0.0;
  long count = 0;
};

using DiversityProfile = std::vector<DiversityProfileRow>;

// Per-layer P(h) over an un-augmented dataset sample, eval-mode forward.
DiversityProfile profile(const ViTParams& params, const Dataset& data, int max_examples);

void write_profile_csv(const DiversityProfile& prof, const std::string& path);

// Activation dump interchange (PDMP): magic "PDMP", u32 version, u32
// num_layers, then per layer u32 n_tokens, u32 dim, f32 little-endian
// row-major data.
void write_dump(const ActivationStackT<float>& stack, int example, const std::string& path);
ActivationStackT<float> read_dump(const std::string& path);

}  // namespace divpatch
