#include "divpatch/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "divpatch/io.hpp"

namespace divpatch {

namespace {
constexpr uint64_t kSyntheticStream = 0xDA7Aull;
constexpr uint64_t kBatchStream = 0xBA7C4ull;
constexpr double kPi = 3.14159265358979323846;
constexpr uint32_t kIdxImagesMagic = 0x00000803u;
constexpr uint32_t kIdxLabelsMagic = 0x00000801u;
}  // namespace

Example gen_synthetic(const DatasetSpec& spec, uint64_t seed, long index) {
  if (spec.image_size <= 0 || spec.channels <= 0 || spec.num_classes <= 0)
    throw ConfigError("dataset spec: sizes must be positive");
  const int s = spec.image_size;
  const int label = static_cast<int>(index % spec.num_classes);
  Rng rng = Rng::derive(seed, kSyntheticStream, static_cast<uint64_t>(index));

  // Phase jitter is bounded to a quarter period so raw patches of one class
  // stay linearly separable from other classes.
  const double phase = rng.uniform() * (kPi / 2.0);
  const double theta = kPi * label / spec.num_classes;
  const double freq = spec.texture_freq + 1.5 * label;
  const double cx = std::cos(theta), sy = std::sin(theta);

  Example ex;
  ex.label = label;
  ex.image.resize(static_cast<size_t>(spec.channels) * s * s);
  for (int c = 0; c < spec.channels; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double wave = std::sin(2.0 * kPi * freq * (cx * (x + 0.5) + sy * (y + 0.5)) / s + phase +
                               0.9 * c);
        double v = 0.5 + 0.38 * wave;
        if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
        ex.image[(static_cast<size_t>(c) * s + y) * s + x] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return ex;
}

Dataset synthetic_split(const DatasetSpec& spec, uint64_t seed, long offset, int count) {
  Dataset d;
  d.spec = spec;
  d.items.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) d.items.push_back(gen_synthetic(spec, seed, offset + i));
  return d;
}

Dataset read_idx(const std::string& images_path, const std::string& labels_path, int num_classes) {
  ByteReader imgs(images_path);
  if (imgs.size() == 0) throw ParseError(images_path + ": empty file at byte offset 0");
  uint32_t magic = imgs.u32_be();
  if (magic != kIdxImagesMagic)
    throw ParseError(images_path + ": bad IDX image magic at byte offset 0");
  uint32_t count = imgs.u32_be();
  uint32_t rows = imgs.u32_be();
  uint32_t cols = imgs.u32_be();

  ByteReader labs(labels_path);
  if (labs.size() == 0) throw ParseError(labels_path + ": empty file at byte offset 0");
  uint32_t lmagic = labs.u32_be();
  if (lmagic != kIdxLabelsMagic)
    throw ParseError(labels_path + ": bad IDX label magic at byte offset 0");
  uint32_t lcount = labs.u32_be();
  if (lcount != count)
    throw ParseError(labels_path + ": label count " + std::to_string(lcount) +
                     " does not match image count " + std::to_string(count));

  Dataset d;
  d.spec.source = DatasetSpec::Source::idx;
  d.spec.image_size = static_cast<int>(rows);
  d.spec.channels = 1;
  d.spec.num_classes = num_classes;
  d.spec.images_path = images_path;
  d.spec.labels_path = labels_path;
  if (rows != cols)
    throw ParseError(images_path + ": non-square images " + std::to_string(rows) + "x" +
                     std::to_string(cols));

  d.items.resize(count);
  const size_t pixels = static_cast<size_t>(rows) * cols;
  std::vector<uint8_t> raw(pixels);
  for (uint32_t i = 0; i < count; ++i) {
    imgs.read_bytes(raw.data(), pixels);
    auto& ex = d.items[i];
    ex.image.resize(pixels);
    for (size_t p = 0; p < pixels; ++p) ex.image[p] = static_cast<float>(raw[p]) / 255.0f;
    int label = labs.u8();
    if (label >= num_classes)
      throw ParseError(labels_path + ": label " + std::to_string(label) + " of item " +
                       std::to_string(i) + " exceeds declared num_classes " +
                       std::to_string(num_classes));
    ex.label = label;
  }
  return d;
}

std::vector<Batch> batches(const Dataset& data, int patch_size, int batch_size, uint64_t seed,
                           int epoch) {
  const long total = static_cast<long>(data.items.size());
  if (batch_size <= 0) throw ConfigError("batches: batch_size must be positive");
  if (batch_size > total)
    throw ConfigError("batches: batch_size " + std::to_string(batch_size) +
                      " exceeds dataset size " + std::to_string(total));
  const int s = data.spec.image_size;
  const int c = data.spec.channels;
  if (s % patch_size != 0)
    throw ConfigError("batches: image_size " + std::to_string(s) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  const int side = s / patch_size;
  const int n = side * side;
  const int pdim = c * patch_size * patch_size;

  std::vector<long> order(static_cast<size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, kBatchStream, static_cast<uint64_t>(epoch));
  rng.shuffle(order);

  std::vector<Batch> out;
  const long num_batches = total / batch_size;
  out.reserve(static_cast<size_t>(num_batches));
  for (long b = 0; b < num_batches; ++b) {
    Batch batch;
    batch.labels.resize(static_cast<size_t>(batch_size));
    std::vector<float> buf(static_cast<size_t>(batch_size) * n * pdim);
    for (int i = 0; i < batch_size; ++i) {
      const Example& ex = data.items[static_cast<size_t>(order[b * batch_size + i])];
      auto patches = patchify(ex.image, c, s, s, patch_size);
      std::copy(patches.begin(), patches.end(), buf.begin() + static_cast<long>(i) * n * pdim);
      batch.labels[static_cast<size_t>(i)] = ex.label;
    }
    batch.patches = Tensor::leaf({batch_size, n, pdim}, std::move(buf));
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace divpatch
