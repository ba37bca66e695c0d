#include "divpatch/metrics.hpp"

#include <fstream>

#include "divpatch/io.hpp"

namespace divpatch {

DiversityProfile profile(const ViTParams& params, const Dataset& data, int max_examples) {
  if (data.items.empty()) throw ConfigError("profile: empty dataset sample");
  const ModelConfig& cfg = params.config;
  const int count = std::min<int>(max_examples, static_cast<int>(data.items.size()));
  const int layers = cfg.depth + 1;

  std::vector<double> sum(static_cast<size_t>(layers), 0.0);
  std::vector<double> sumsq(static_cast<size_t>(layers), 0.0);

  Rng unused(0);
  for (int i = 0; i < count; ++i) {
    const Example& ex = data.items[static_cast<size_t>(i)];
    auto pv = patchify(ex.image, cfg.channels, cfg.image_size, cfg.image_size, cfg.patch_size);
    auto patches = Tensor::leaf({1, cfg.n_patches(), cfg.patch_dim()}, std::move(pv));
    Tape tape;
    tape.set_recording(false);
    auto fwd = vit_forward(tape, params, patches, /*train_mode=*/false, unused);
    for (int l = 0; l < layers; ++l) {
      auto vals = fwd.stack.example_values(l, 0);
      double p = patch_cosine(vals.data(), cfg.tokens(), cfg.dim, /*has_class_patch=*/true);
      sum[static_cast<size_t>(l)] += p;
      sumsq[static_cast<size_t>(l)] += p * p;
    }
  }

  DiversityProfile prof;
  prof.reserve(static_cast<size_t>(layers));
  for (int l = 0; l < layers; ++l) {
    DiversityProfileRow row;
    row.layer = l;
    row.count = count;
    row.mean_p = sum[static_cast<size_t>(l)] / count;
    double var = sumsq[static_cast<size_t>(l)] / count - row.mean_p * row.mean_p;
    row.std_p = std::sqrt(std::max(0.0, var));
    prof.push_back(row);
  }
  return prof;
}

void write_profile_csv(const DiversityProfile& prof, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open file for writing");
  f << "layer,mean_p,std_p,count\n";
  for (const auto& row : prof)
    f << row.layer << "," << row.mean_p << "," << row.std_p << "," << row.count << "\n";
}

namespace {
constexpr uint32_t kDumpVersion = 1;
}

void write_dump(const ActivationStackT<float>& stack, int example, const std::string& path) {
  if (example < 0 || example >= stack.batch)
    throw ContractError("write_dump: example " + std::to_string(example) + " out of range");
  ByteWriter w(path);
  w.bytes("PDMP", 4);
  w.u32_le(kDumpVersion);
  w.u32_le(static_cast<uint32_t>(stack.num_layers()));
  for (int l = 0; l < stack.num_layers(); ++l) {
    w.u32_le(static_cast<uint32_t>(stack.tokens));
    w.u32_le(static_cast<uint32_t>(stack.dim));
    auto vals = stack.example_values(l, example);
    for (float v : vals) w.f32_le(v);
  }
  w.close();
}

ActivationStackT<float> read_dump(const std::string& path) {
  ByteReader r(path);
  r.expect_magic("PDMP", "activation dump");
  uint32_t version = r.u32_le();
  if (version != kDumpVersion)
    throw ParseError(path + ": unsupported dump version " + std::to_string(version) +
                     " at byte offset 4");
  uint32_t layers = r.u32_le();
  if (layers == 0) throw ParseError(path + ": dump has zero layers at byte offset 8");

  ActivationStackT<float> stack;
  stack.batch = 1;
  for (uint32_t l = 0; l < layers; ++l) {
    size_t header_at = r.offset();
    int tokens = static_cast<int>(r.u32_le());
    int dim = static_cast<int>(r.u32_le());
    if (l == 0) {
      stack.tokens = tokens;
      stack.dim = dim;
    } else if (tokens != stack.tokens || dim != stack.dim) {
      throw ParseError(path + ": layer " + std::to_string(l) +
                       " shape differs from layer 0 at byte offset " + std::to_string(header_at));
    }
    std::vector<float> vals(static_cast<size_t>(tokens) * dim);
    for (auto& v : vals) v = r.f32_le();
    stack.layers.push_back(Tensor::leaf({tokens, dim}, std::move(vals)));
  }
  if (!r.at_end())
    throw ParseError(path + ": trailing bytes at byte offset " + std::to_string(r.offset()));
  return stack;
}

}  // namespace divpatch
