#include "divpatch/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace divpatch {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvMap parse_kv_text(const std::string& text) {
  KvMap kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected `key = value`, got `" +
                        line + "`");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

KvMap read_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config file not found: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_kv_text(buf.str());
}

int kv_int(const KvMap& kv, const std::string& key, int fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key `" + key + "`: not an integer: `" + it->second + "`");
  }
}

double kv_double(const KvMap& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key `" + key + "`: not a number: `" + it->second + "`");
  }
}

bool kv_bool(const KvMap& kv, const std::string& key, bool fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key `" + key + "`: not a boolean: `" + v + "`");
}

std::string kv_string(const KvMap& kv, const std::string& key, const std::string& fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

uint64_t kv_u64(const KvMap& kv, const std::string& key, uint64_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    unsigned long long v = std::stoull(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("");
    return static_cast<uint64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("config key `" + key + "`: not an unsigned integer: `" + it->second + "`");
  }
}

std::string model_config_text(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "image_size = " << cfg.image_size << "\n";
  os << "patch_size = " << cfg.patch_size << "\n";
  os << "channels = " << cfg.channels << "\n";
  os << "dim = " << cfg.dim << "\n";
  os << "depth = " << cfg.depth << "\n";
  os << "heads = " << cfg.heads << "\n";
  os << "mlp_ratio = " << cfg.mlp_ratio << "\n";
  os << "num_classes = " << cfg.num_classes << "\n";
  os << "drop_path_max = " << cfg.drop_path_max << "\n";
  return os.str();
}

ModelConfig parse_model_config(const KvMap& kv, const ModelConfig& defaults) {
  ModelConfig cfg = defaults;
  cfg.image_size = kv_int(kv, "image_size", cfg.image_size);
  cfg.patch_size = kv_int(kv, "patch_size", cfg.patch_size);
  cfg.channels = kv_int(kv, "channels", cfg.channels);
  cfg.dim = kv_int(kv, "dim", cfg.dim);
  cfg.depth = kv_int(kv, "depth", cfg.depth);
  cfg.heads = kv_int(kv, "heads", cfg.heads);
  cfg.mlp_ratio = kv_double(kv, "mlp_ratio", cfg.mlp_ratio);
  cfg.num_classes = kv_int(kv, "num_classes", cfg.num_classes);
  cfg.drop_path_max = kv_double(kv, "drop_path_max", cfg.drop_path_max);
  return cfg;
}

}  // namespace divpatch
