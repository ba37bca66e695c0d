#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divpatch/rng.hpp"
#include "divpatch/tensor.hpp"
#include "divpatch/vit.hpp"

namespace divpatch {

// Synthetic task: each class is an oriented sinusoidal grating with a
// class-specific frequency, so every individual patch carries the class
// signature. Intra-class variation is a bounded phase jitter plus pixel
// noise. Generation is a pure function of (spec, seed, index).
struct DatasetSpec {
  enum class Source { synthetic, idx };
  Source source = Source::synthetic;

  int image_size = 32;
  int channels = 1;
  int num_classes = 4;

  double texture_freq = 4.3;  // base cycles per image; class k uses texture_freq + 1.5*k
  double noise_std = 0.1;

  std::string images_path;
  std::string labels_path;

  int train_count = 512;
  int eval_count = 128;
};

struct Example {
  std::vector<float> image;  // (channels, H, W) row-major, values in [0, 1]
  int label = 0;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Example> items;
};

Example gen_synthetic(const DatasetSpec& spec, uint64_t seed, long index);

// Items at indices [offset, offset + count).
Dataset synthetic_split(const DatasetSpec& spec, uint64_t seed, long offset, int count);

// Standard IDX image/label pair (big-endian dims). Pixels are normalized to
// [0, 1]; labels are validated against spec.num_classes.
Dataset read_idx(const std::string& images_path, const std::string& labels_path, int num_classes);

struct Batch {
  Tensor patches;           // (batch, n, patch_dim) constant leaf
  std::vector<int> labels;  // class indices
};

// Full shuffle by seeded permutation per epoch; the trailing partial batch
// is dropped.
std::vector<Batch> batches(const Dataset& data, int patch_size, int batch_size, uint64_t seed,
                           int epoch);

}  // namespace divpatch
