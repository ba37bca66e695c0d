#pragma once

#include <map>
#include <string>

#include "divpatch/vit.hpp"

namespace divpatch {

// Flat `key = value` text with `#` comments.
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv_text(const std::string& text);
KvMap read_kv_file(const std::string& path);

// Typed lookups; the key falls back to the provided default when absent.
int kv_int(const KvMap& kv, const std::string& key, int fallback);
double kv_double(const KvMap& kv, const std::string& key, double fallback);
bool kv_bool(const KvMap& kv, const std::string& key, bool fallback);
std::string kv_string(const KvMap& kv, const std::string& key, const std::string& fallback);
uint64_t kv_u64(const KvMap& kv, const std::string& key, uint64_t fallback);

std::string model_config_text(const ModelConfig& cfg);
ModelConfig parse_model_config(const KvMap& kv, const ModelConfig& defaults = {});

}  // namespace divpatch
