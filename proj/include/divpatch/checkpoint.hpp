#pragma once

#include <string>

#include "divpatch/io.hpp"
#include "divpatch/vit.hpp"

namespace divpatch {

// Checkpoint format (DPCK): magic "DPCK", u32 version, the model config as a
// NUL-terminated `key = value` text block, then every parameter tensor in
// canonical order (ViTParamsT::all) as u32 rank, u32 dims..., f32
// little-endian data.
void save_checkpoint(const ViTParams& params, const std::string& path);
ViTParams load_checkpoint(const std::string& path);

}  // namespace divpatch
