#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "divpatch/mixing.hpp"

using divpatch::apply_mix;
using divpatch::Batch;
using divpatch::ConfigError;
using divpatch::mix_batch;
using divpatch::mix_pair;
using divpatch::MixSpec;
using divpatch::Rng;
using divpatch::sample_lambda;
using divpatch::sample_mask_block;
using divpatch::sample_mask_random;
using divpatch::Tensor;

namespace {

std::vector<float> random_example(Rng& rng, int n, int pdim) {
  std::vector<float> v(static_cast<size_t>(n) * pdim);
  for (auto& x : v) x = static_cast<float>(rng.uniform(0, 1));
  return v;
}

std::vector<uint8_t> all_mask(int n, uint8_t v) {
  return std::vector<uint8_t>(static_cast<size_t>(n), v);
}

}  // namespace

TEST_CASE("beta(1,1) lambda draws are uniform") {
  MixSpec spec;
  Rng rng(100);
  const int draws = 100000;
  std::vector<double> xs(draws);
  double mean = 0;
  for (auto& x : xs) {
    x = sample_lambda(spec, rng);
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
    mean += x;
  }
  mean /= draws;
  CHECK(std::fabs(mean - 0.5) < 0.01);

  // KS statistic against U(0,1)
  std::sort(xs.begin(), xs.end());
  double ks = 0;
  for (int i = 0; i < draws; ++i) {
    double lo = static_cast<double>(i) / draws, hi = static_cast<double>(i + 1) / draws;
    ks = std::max({ks, std::fabs(xs[static_cast<size_t>(i)] - lo),
                   std::fabs(xs[static_cast<size_t>(i)] - hi)});
  }
  CHECK(ks < 0.01);

  // fixed seed reproduces the sequence
  Rng a(7), b(7);
  for (int i = 0; i < 50; ++i) CHECK(sample_lambda(spec, a) == sample_lambda(spec, b));
}

TEST_CASE("random mask edge cases and statistics") {
  Rng rng(3);
  auto ones = sample_mask_random(16, 1.0, rng);
  CHECK(std::count(ones.begin(), ones.end(), 1) == 16);
  auto zeros = sample_mask_random(16, 0.0, rng);
  CHECK(std::count(zeros.begin(), zeros.end(), 1) == 0);

  const int n = 196, draws = 10000;
  double total = 0;
  for (int d = 0; d < draws; ++d) {
    auto m = sample_mask_random(n, 0.3, rng);
    total += static_cast<double>(std::count(m.begin(), m.end(), 1)) / n;
  }
  CHECK(std::fabs(total / draws - 0.3) < 0.01);
}

TEST_CASE("block mask is always a contiguous rectangle") {
  Rng rng(4);
  const int side = 8, n = side * side;

  auto full = sample_mask_block(side, 1.0, rng);
  CHECK(std::count(full.begin(), full.end(), 1) == n);
  auto none = sample_mask_block(side, 0.0, rng);
  CHECK(std::count(none.begin(), none.end(), 1) == 0);

  for (int trial = 0; trial < 1000; ++trial) {
    double lambda = rng.uniform();
    auto m = sample_mask_block(side, lambda, rng);
    // bounding box of false cells must exactly cover them (structural oracle)
    int rmin = side, rmax = -1, cmin = side, cmax = -1, count = 0;
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c)
        if (!m[static_cast<size_t>(r) * side + c]) {
          rmin = std::min(rmin, r);
          rmax = std::max(rmax, r);
          cmin = std::min(cmin, c);
          cmax = std::max(cmax, c);
          ++count;
        }
    if (count == 0) continue;
    int area = (rmax - rmin + 1) * (cmax - cmin + 1);
    CHECK(area == count);
    for (int r = rmin; r <= rmax; ++r)
      for (int c = cmin; c <= cmax; ++c) CHECK(m[static_cast<size_t>(r) * side + c] == 0);
  }
}

TEST_CASE("apply_mix with lambda forced to 1 reproduces image 0") {
  Rng rng(5);
  const int n = 9, pdim = 4, classes = 5;
  auto x0 = random_example(rng, n, pdim);
  auto x1 = random_example(rng, n, pdim);
  MixSpec spec;
  auto mixed = apply_mix(x0, 2, x1, 4, n, pdim, classes, 1.0, all_mask(n, 1), spec);
  CHECK(std::memcmp(mixed.patches.data(), x0.data(), x0.size() * sizeof(float)) == 0);
  CHECK(mixed.row.lambda_eff == 1.0);
  for (int y : mixed.row.y_patch) CHECK(y == 2);
  CHECK(mixed.row.y_mix[2] == 1.0f);
  for (int c = 0; c < classes; ++c)
    if (c != 2) CHECK(mixed.row.y_mix[static_cast<size_t>(c)] == 0.0f);
}

TEST_CASE("identical labels give a one-hot mixed label for any mask") {
  Rng rng(6);
  const int n = 16, pdim = 3, classes = 4;
  auto x0 = random_example(rng, n, pdim);
  auto x1 = random_example(rng, n, pdim);
  MixSpec spec;
  for (int trial = 0; trial < 10; ++trial) {
    double lambda = rng.uniform();
    auto mask = sample_mask_random(n, lambda, rng);
    auto mixed = apply_mix(x0, 1, x1, 1, n, pdim, classes, lambda, mask, spec);
    CHECK(mixed.row.y_mix[1] == doctest::Approx(1.0f));
  }
}

TEST_CASE("every output patch is byte-equal to exactly one source patch") {
  Rng rng(7);
  const int n = 25, pdim = 6, classes = 3;
  auto x0 = random_example(rng, n, pdim);
  auto x1 = random_example(rng, n, pdim);
  MixSpec spec;
  for (int trial = 0; trial < 20; ++trial) {
    auto mixed = mix_pair(x0, 0, x1, 1, n, pdim, classes, spec, rng);
    int kept = 0;
    for (int i = 0; i < n; ++i) {
      const float* got = mixed.patches.data() + static_cast<size_t>(i) * pdim;
      bool from0 = std::memcmp(got, x0.data() + static_cast<size_t>(i) * pdim,
                               pdim * sizeof(float)) == 0;
      bool from1 = std::memcmp(got, x1.data() + static_cast<size_t>(i) * pdim,
                               pdim * sizeof(float)) == 0;
      CHECK(from0 != from1);  // exactly one (sources are random, collisions impossible)
      CHECK(from0 == (mixed.row.mask[static_cast<size_t>(i)] == 1));
      CHECK(mixed.row.y_patch[static_cast<size_t>(i)] == (from0 ? 0 : 1));
      kept += from0 ? 1 : 0;
    }
    CHECK(mixed.row.lambda_eff == doctest::Approx(static_cast<double>(kept) / n));
    // y_mix consistency with realized lambda
    CHECK(mixed.row.y_mix[0] == doctest::Approx(mixed.row.lambda_eff));
    CHECK(mixed.row.y_mix[1] == doctest::Approx(1.0 - mixed.row.lambda_eff));
    double s = 0;
    for (float v : mixed.row.y_mix) s += v;
    CHECK(s == doctest::Approx(1.0));
  }
}

TEST_CASE("mixing is symmetric under swapping sources and negating the mask") {
  Rng rng(8);
  const int n = 12, pdim = 5, classes = 6;
  auto x0 = random_example(rng, n, pdim);
  auto x1 = random_example(rng, n, pdim);
  double lambda = 0.37;
  auto mask = sample_mask_random(n, lambda, rng);
  auto negated = mask;
  for (auto& m : negated) m = m ? 0 : 1;

  MixSpec spec;
  auto a = apply_mix(x0, 2, x1, 5, n, pdim, classes, lambda, mask, spec);
  auto b = apply_mix(x1, 5, x0, 2, n, pdim, classes, 1.0 - lambda, negated, spec);

  CHECK(std::memcmp(a.patches.data(), b.patches.data(), a.patches.size() * sizeof(float)) == 0);
  CHECK(a.row.y_patch == b.row.y_patch);
  CHECK(a.row.y_mix == b.row.y_mix);
  CHECK(a.row.lambda_eff == doctest::Approx(1.0 - b.row.lambda_eff));
}

TEST_CASE("sampled-label mode uses the drawn lambda") {
  Rng rng(9);
  const int n = 8, pdim = 2, classes = 2;
  auto x0 = random_example(rng, n, pdim);
  auto x1 = random_example(rng, n, pdim);
  MixSpec spec;
  spec.label_lambda = MixSpec::LabelLambda::sampled;
  auto mixed = apply_mix(x0, 0, x1, 1, n, pdim, classes, 0.25, sample_mask_random(n, 0.9, rng),
                         spec);
  CHECK(mixed.row.y_mix[0] == doctest::Approx(0.25f));
  CHECK(mixed.row.y_mix[1] == doctest::Approx(0.75f));
}

TEST_CASE("mix errors") {
  Rng rng(10);
  MixSpec spec;
  auto x0 = random_example(rng, 4, 2);
  auto x1 = random_example(rng, 5, 2);  // patch count mismatch
  CHECK_THROWS_AS(mix_pair(x0, 0, x1, 1, 4, 2, 2, spec, rng), ConfigError);
  spec.alpha = 0.0;
  CHECK_THROWS_AS(sample_lambda(spec, rng), ConfigError);
}

TEST_CASE("mix_batch pairs i with (i + batch/2) mod batch and shares pair draws") {
  Rng data_rng(11);
  const int b = 6, n = 9, pdim = 4, classes = 4;
  std::vector<float> buf(static_cast<size_t>(b) * n * pdim);
  for (auto& v : buf) v = static_cast<float>(data_rng.uniform(0, 1));
  Batch batch;
  batch.patches = Tensor::leaf({b, n, pdim}, buf);
  batch.labels = {0, 1, 2, 3, 0, 1};

  MixSpec spec;
  Rng rng(12);
  auto mixed = mix_batch(batch, classes, spec, rng);
  REQUIRE(static_cast<int>(mixed.rows.size()) == b);

  const long stride = static_cast<long>(n) * pdim;
  for (int i = 0; i < b; ++i) {
    int j = (i + b / 2) % b;
    const auto& row = mixed.rows[static_cast<size_t>(i)];
    CHECK(row.y0 == batch.labels[static_cast<size_t>(i)]);
    CHECK(row.y1 == batch.labels[static_cast<size_t>(j)]);
    // provenance: each patch comes from source i (mask 1) or j (mask 0)
    for (int p = 0; p < n; ++p) {
      const float* got = mixed.patches.values().data() + i * stride + p * pdim;
      const float* want = buf.data() + (row.mask[static_cast<size_t>(p)] ? i : j) * stride +
                          static_cast<long>(p) * pdim;
      CHECK(std::memcmp(got, want, pdim * sizeof(float)) == 0);
    }
  }
  // shared draw per pair
  for (int i = 0; i < b / 2; ++i) {
    CHECK(mixed.rows[static_cast<size_t>(i)].mask ==
          mixed.rows[static_cast<size_t>(i + b / 2)].mask);
    CHECK(mixed.rows[static_cast<size_t>(i)].lambda_sampled ==
          mixed.rows[static_cast<size_t>(i + b / 2)].lambda_sampled);
  }

  // deterministic in the rng seed
  Rng rng2(12);
  auto mixed2 = mix_batch(batch, classes, spec, rng2);
  CHECK(mixed.patches.values() == mixed2.patches.values());
}

TEST_CASE("lambda_eff lives on the 1/n grid and tracks lambda at n=196") {
  Rng rng(13);
  const int n = 196, pdim = 1, classes = 2;
  auto x0 = random_example(rng, n, pdim);
  auto x1 = random_example(rng, n, pdim);
  MixSpec spec;
  double sum_sampled = 0, sum_eff = 0;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    auto mixed = mix_pair(x0, 0, x1, 1, n, pdim, classes, spec, rng);
    double scaled = mixed.row.lambda_eff * n;
    CHECK(scaled == doctest::Approx(std::round(scaled)));
    sum_sampled += mixed.row.lambda_sampled;
    sum_eff += mixed.row.lambda_eff;
  }
  CHECK(std::fabs(sum_eff / trials - sum_sampled / trials) < 0.01);
}

TEST_CASE("mix preview csv") {
  Rng data_rng(14);
  const int b = 4, n = 4, pdim = 2;
  std::vector<float> buf(static_cast<size_t>(b) * n * pdim);
  for (auto& v : buf) v = static_cast<float>(data_rng.uniform(0, 1));
  Batch batch;
  batch.patches = Tensor::leaf({b, n, pdim}, buf);
  batch.labels = {0, 1, 0, 1};
  MixSpec spec;
  Rng rng(15);
  auto mixed = mix_batch(batch, 2, spec, rng);
  const std::string path = "divpatch_test_preview.csv";
  divpatch::write_mix_preview_csv(mixed, path);
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  CHECK(header == "example,lambda_sampled,lambda_eff,mode,mask");
  int rows = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == b);
  std::remove(path.c_str());
}
