#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "divpatch/metrics.hpp"
#include "divpatch/rng.hpp"

using divpatch::ActivationStackT;
using divpatch::ConfigError;
using divpatch::ContractError;
using divpatch::DegenerateRowError;
using divpatch::ModelConfig;
using divpatch::ParseError;
using divpatch::patch_cosine;
using divpatch::Rng;
using divpatch::Tensor;

namespace {

// Independent oracle: plain ordered-pair loop with per-pair norms.
double brute_force_p(const std::vector<double>& data, int rows, int dim, bool has_class) {
  const double* h = data.data() + (has_class ? dim : 0);
  int n = rows - (has_class ? 1 : 0);
  double acc = 0;
  long pairs = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      double dot = 0, ni = 0, nj = 0;
      for (int k = 0; k < dim; ++k) {
        dot += h[i * dim + k] * h[j * dim + k];
        ni += h[i * dim + k] * h[i * dim + k];
        nj += h[j * dim + k] * h[j * dim + k];
      }
      acc += std::fabs(dot) / (std::sqrt(ni) * std::sqrt(nj));
      ++pairs;
    }
  return acc / static_cast<double>(pairs);
}

std::string temp_path(const char* name) {
  return std::string("divpatch_test_") + name;
}

}  // namespace

TEST_CASE("patch_cosine hand-checked values") {
  // all rows identical
  std::vector<double> same = {1, 2, 3, 1, 2, 3, 1, 2, 3};
  CHECK(patch_cosine(same.data(), 3, 3, false) == doctest::Approx(1.0).epsilon(1e-9));

  // orthogonal basis rows
  std::vector<double> basis = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  CHECK(patch_cosine(basis.data(), 3, 3, false) == doctest::Approx(0.0).epsilon(1e-12));

  // {(1,0),(1,1)} -> |cos| = 1/sqrt(2)
  std::vector<double> pair = {1, 0, 1, 1};
  double p = patch_cosine(pair.data(), 2, 2, false);
  CHECK(p == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK(p == doctest::Approx(brute_force_p(pair, 2, 2, false)).epsilon(1e-9));
}

TEST_CASE("patch_cosine equals the brute-force pair loop on random inputs") {
  Rng rng(123);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 2 + static_cast<int>(rng.randint(63));   // <= 64 rows
    int dim = 1 + static_cast<int>(rng.randint(32)); // <= 32 dims
    std::vector<double> h(static_cast<size_t>(n) * dim);
    for (auto& v : h) v = rng.uniform(-2, 2);
    // reject unlucky near-zero rows
    bool ok = true;
    for (int r = 0; r < n && ok; ++r) {
      double ss = 0;
      for (int k = 0; k < dim; ++k) ss += h[r * dim + k] * h[r * dim + k];
      ok = std::sqrt(ss) > 1e-6;
    }
    if (!ok) continue;
    double fast = patch_cosine(h.data(), n, dim, false);
    double slow = brute_force_p(h, n, dim, false);
    CHECK(std::fabs(fast - slow) < 1e-6);
    CHECK(fast >= 0.0);
    CHECK(fast <= 1.0);
  }
}

TEST_CASE("patch_cosine invariances") {
  Rng rng(321);
  int n = 12, dim = 8;
  std::vector<double> h(static_cast<size_t>(n) * dim);
  for (auto& v : h) v = rng.uniform(0.2, 2.0);
  double base = patch_cosine(h.data(), n, dim, false);

  SUBCASE("permutation of rows, exact") {
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    Rng prng(7);
    prng.shuffle(perm);
    std::vector<double> hp(h.size());
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < dim; ++k) hp[i * dim + k] = h[perm[i] * dim + k];
    CHECK(patch_cosine(hp.data(), n, dim, false) == base);
  }

  SUBCASE("positive per-row scaling") {
    std::vector<double> hs(h);
    Rng srng(8);
    for (int i = 0; i < n; ++i) {
      double s = srng.uniform(0.1, 10.0);
      for (int k = 0; k < dim; ++k) hs[i * dim + k] *= s;
    }
    CHECK(std::fabs(patch_cosine(hs.data(), n, dim, false) - base) < 1e-6);
  }

  SUBCASE("row negation") {
    std::vector<double> hn(h);
    for (int k = 0; k < dim; ++k) hn[3 * dim + k] = -hn[3 * dim + k];
    CHECK(std::fabs(patch_cosine(hn.data(), n, dim, false) - base) < 1e-9);
  }

  SUBCASE("class patch exclusion") {
    std::vector<double> with_class(static_cast<size_t>(n + 1) * dim);
    Rng crng(9);
    for (int k = 0; k < dim; ++k) with_class[k] = crng.uniform(-50, 50);
    std::copy(h.begin(), h.end(), with_class.begin() + dim);
    CHECK(patch_cosine(with_class.data(), n + 1, dim, true) == base);
  }
}

TEST_CASE("patch_cosine error cases") {
  std::vector<double> z = {1, 1, 0, 0};
  CHECK_THROWS_AS(patch_cosine(z.data(), 2, 2, false), DegenerateRowError);
  std::vector<double> one = {1, 1};
  CHECK_THROWS_AS(patch_cosine(one.data(), 1, 2, false), ContractError);
  // a single patch row after dropping the class patch is also degenerate
  CHECK_THROWS_AS(patch_cosine(z.data(), 2, 2, true), ContractError);
}

TEST_CASE("pdmp round trip is bit-identical") {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.dim = 8;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.num_classes = 3;
  auto params = divpatch::init_params<float>(cfg, 5);
  Rng data_rng(6);
  std::vector<float> pv(static_cast<size_t>(2) * cfg.n_patches() * cfg.patch_dim());
  for (auto& v : pv) v = static_cast<float>(data_rng.uniform(0, 1));
  auto patches = Tensor::leaf({2, cfg.n_patches(), cfg.patch_dim()}, pv);
  divpatch::Tape tape;
  tape.set_recording(false);
  Rng fwd_rng(0);
  auto fwd = divpatch::vit_forward(tape, params, patches, false, fwd_rng);

  auto path = temp_path("roundtrip.pdmp");
  divpatch::write_dump(fwd.stack, 1, path);
  auto loaded = divpatch::read_dump(path);

  CHECK(loaded.num_layers() == cfg.depth + 1);
  CHECK(loaded.tokens == cfg.tokens());
  CHECK(loaded.dim == cfg.dim);
  for (int l = 0; l <= cfg.depth; ++l) {
    auto orig = fwd.stack.example_values(l, 1);
    auto back = loaded.example_values(l, 0);
    REQUIRE(orig.size() == back.size());
    CHECK(std::memcmp(orig.data(), back.data(), orig.size() * sizeof(float)) == 0);
  }
  std::remove(path.c_str());
}

TEST_CASE("pdmp truncation reports a byte offset") {
  auto path = temp_path("trunc.pdmp");
  {
    std::ofstream f(path, std::ios::binary);
    const char magic[4] = {'P', 'D', 'M', 'P'};
    f.write(magic, 4);
    uint32_t version = 1, layers = 1, tokens = 4, dim = 4;
    f.write(reinterpret_cast<char*>(&version), 4);
    f.write(reinterpret_cast<char*>(&layers), 4);
    f.write(reinterpret_cast<char*>(&tokens), 4);
    f.write(reinterpret_cast<char*>(&dim), 4);
    float v = 1.0f;  // only one of the 16 promised floats
    f.write(reinterpret_cast<char*>(&v), 4);
  }
  bool threw = false;
  try {
    divpatch::read_dump(path);
  } catch (const ParseError& e) {
    threw = true;
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
  CHECK(threw);
  std::remove(path.c_str());
}

TEST_CASE("pdmp external fixture parses per the format spec") {
  // Byte-level fixture written without the library writer.
  auto path = temp_path("external.pdmp");
  {
    std::ofstream f(path, std::ios::binary);
    auto u32 = [&](uint32_t v) {
      char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                   static_cast<char>(v >> 24)};
      f.write(b, 4);
    };
    auto f32 = [&](float x) {
      uint32_t u;
      std::memcpy(&u, &x, 4);
      u32(u);
    };
    f.write("PDMP", 4);
    u32(1);  // version
    u32(2);  // layers
    for (int l = 0; l < 2; ++l) {
      u32(3);  // tokens
      u32(2);  // dim
      for (int i = 0; i < 6; ++i) f32(static_cast<float>(l * 10 + i) * 0.5f);
    }
  }
  auto stack = divpatch::read_dump(path);
  CHECK(stack.num_layers() == 2);
  CHECK(stack.tokens == 3);
  CHECK(stack.dim == 2);
  CHECK(stack.layers[0].values()[0] == 0.0f);
  CHECK(stack.layers[0].values()[5] == 2.5f);
  CHECK(stack.layers[1].values()[0] == 5.0f);
  CHECK(stack.layers[1].values()[5] == 7.5f);
  std::remove(path.c_str());
}

TEST_CASE("pdmp bad magic / version") {
  auto path = temp_path("badmagic.pdmp");
  {
    std::ofstream f(path, std::ios::binary);
    f.write("NOPE", 4);
  }
  CHECK_THROWS_AS(divpatch::read_dump(path), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("profile of a depth-0 model reduces to the embedding layer") {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.dim = 8;
  cfg.depth = 0;
  cfg.heads = 2;
  cfg.num_classes = 2;
  auto params = divpatch::init_params<float>(cfg, 11);

  divpatch::DatasetSpec spec;
  spec.image_size = 8;
  spec.num_classes = 2;
  auto data = divpatch::synthetic_split(spec, 99, 0, 3);

  auto prof = divpatch::profile(params, data, 3);
  REQUIRE(prof.size() == 1);
  CHECK(prof[0].layer == 0);
  CHECK(prof[0].count == 3);
  CHECK(prof[0].mean_p >= 0.0);
  CHECK(prof[0].mean_p <= 1.0);

  // cross-check the first example by hand
  auto pv = divpatch::patchify(data.items[0].image, 1, 8, 8, 4);
  auto patches = Tensor::leaf({1, cfg.n_patches(), cfg.patch_dim()}, pv);
  divpatch::Tape tape;
  tape.set_recording(false);
  Rng r(0);
  auto fwd = divpatch::vit_forward(tape, params, patches, false, r);
  auto vals = fwd.stack.example_values(0, 0);
  double direct = patch_cosine(vals.data(), cfg.tokens(), cfg.dim, true);
  double recomputed = 0;
  {
    double sum = 0;
    for (int i = 0; i < 3; ++i) {
      auto pvi = divpatch::patchify(data.items[i].image, 1, 8, 8, 4);
      auto pt = Tensor::leaf({1, cfg.n_patches(), cfg.patch_dim()}, pvi);
      divpatch::Tape t2;
      t2.set_recording(false);
      Rng r2(0);
      auto f2 = divpatch::vit_forward(t2, params, pt, false, r2);
      auto v2 = f2.stack.example_values(0, 0);
      sum += patch_cosine(v2.data(), cfg.tokens(), cfg.dim, true);
    }
    recomputed = sum / 3;
  }
  CHECK(prof[0].mean_p == doctest::Approx(recomputed).epsilon(1e-12));
  CHECK(direct >= 0.0);

  CHECK_THROWS_AS(divpatch::profile(params, divpatch::Dataset{}, 3), ConfigError);
}
