#include "divpatch/checkpoint.hpp"

#include "divpatch/config.hpp"
#include "divpatch/io.hpp"

namespace divpatch {

namespace {
constexpr uint32_t kCheckpointVersion = 1;
}

void save_checkpoint(const ViTParams& params, const std::string& path) {
  ByteWriter w(path);
  w.bytes("DPCK", 4);
  w.u32_le(kCheckpointVersion);
  std::string cfg = model_config_text(params.config);
  w.bytes(cfg.data(), cfg.size());
  const char nul = 0;
  w.bytes(&nul, 1);
  for (const auto& t : params.all()) {
    w.u32_le(static_cast<uint32_t>(t.rank()));
    for (int d : t.shape()) w.u32_le(static_cast<uint32_t>(d));
    for (float v : t.values()) w.f32_le(v);
  }
  w.close();
}

ViTParams load_checkpoint(const std::string& path) {
  ByteReader r(path);
  r.expect_magic("DPCK", "checkpoint");
  uint32_t version = r.u32_le();
  if (version != kCheckpointVersion)
    throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version) +
                     " at byte offset 4");
  ModelConfig cfg = parse_model_config(parse_kv_text(r.cstring()));
  cfg.validate();

  // Structure with the right shapes; every value is overwritten below.
  ViTParams params = init_params<float>(cfg, 0);
  for (auto& t : params.all()) {
    size_t at = r.offset();
    uint32_t rank = r.u32_le();
    if (static_cast<int>(rank) != t.rank())
      throw ParseError(path + ": tensor rank " + std::to_string(rank) + " does not match " +
                       std::to_string(t.rank()) + " at byte offset " + std::to_string(at));
    std::vector<int> dims(rank);
    for (auto& d : dims) d = static_cast<int>(r.u32_le());
    if (dims != t.shape())
      throw ParseError(path + ": tensor shape " + shape_str(dims) + " does not match " +
                       shape_str(t.shape()) + " at byte offset " + std::to_string(at));
    for (auto& v : t.values()) v = r.f32_le();
  }
  if (!r.at_end())
    throw ParseError(path + ": trailing bytes at byte offset " + std::to_string(r.offset()));
  return params;
}

}  // namespace divpatch
