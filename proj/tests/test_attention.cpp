// Attention kernels against an independent brute-force oracle, mask
// construction laws, cost accounting, and the sparse/convolutional variants.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "chronoformer/attention.hpp"
#include "chronoformer/rng.hpp"
#include "chronoformer/tensor.hpp"

using namespace chronoformer;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) x = rng.uniform(lo, hi);
  return t;
}

// Independent reference: explicit per-query loops, no shared code with the
// library kernels.
Tensor brute_force_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             const AttentionMask& mask) {
  const int s1 = q.dim(0), nq = q.dim(1), n = k.dim(1), s = v.dim(0);
  Tensor out({s, nq});
  for (int i = 0; i < nq; ++i) {
    std::vector<double> logits;
    std::vector<int> cols;
    for (int j = 0; j < n; ++j) {
      if (!mask.allowed(i, j)) continue;
      double dot = 0.0;
      for (int r = 0; r < s1; ++r) dot += q.at(r, i) * k.at(r, j);
      logits.push_back(dot / std::sqrt(static_cast<double>(s1)));
      cols.push_back(j);
    }
    double mx = logits[0];
    for (double l : logits) mx = std::max(mx, l);
    double z = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    for (std::size_t t = 0; t < cols.size(); ++t) {
      const double w = logits[t] / z;
      for (int r = 0; r < s; ++r) out.at(r, i) += w * v.at(r, cols[t]);
    }
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i)
    m = std::max(m, std::fabs(a.values()[i] - b.values()[i]));
  return m;
}

MultiHeadParams random_mha_params(int d, int heads, int s1, int s, Rng& rng) {
  MultiHeadParams p;
  for (int h = 0; h < heads; ++h) {
    p.w_q.push_back(random_tensor({s1, d}, rng));
    p.w_k.push_back(random_tensor({s1, d}, rng));
    p.w_v.push_back(random_tensor({s, d}, rng));
  }
  p.w_o = random_tensor({d, heads * s}, rng);
  return p;
}

}  // namespace

TEST_CASE("single position attention returns the lone value column") {
  Tensor q({2, 1}, {0.3, -0.7});
  Tensor k({2, 1}, {1.0, 2.0});
  Tensor v({3, 1}, {5.0, 6.0, 7.0});
  Tensor z = scaled_dot_product_attention(q, k, v, AttentionMask::full(1));
  CHECK(z.at(0, 0) == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(z.at(1, 0) == doctest::Approx(6.0).epsilon(1e-14));
  CHECK(z.at(2, 0) == doctest::Approx(7.0).epsilon(1e-14));
}

TEST_CASE("a strongly matching key dominates the output") {
  // Query equals key 1 scaled up; softmax saturates toward value column 1.
  Tensor q({2, 1}, {30.0, 0.0});
  Tensor k({2, 3}, {-1.0, 30.0, 0.0, 1.0, 0.0, 1.0});
  Tensor v({2, 3}, {1.0, 9.0, 5.0, 2.0, -3.0, 4.0});
  Tensor z = scaled_dot_product_attention(q, k, v, AttentionMask::full(1, 3));
  CHECK(z.at(0, 0) == doctest::Approx(9.0).epsilon(1e-9));
  CHECK(z.at(1, 0) == doctest::Approx(-3.0).epsilon(1e-9));
}

TEST_CASE("attention matches the brute-force oracle on random instances") {
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + rng.below(8);
    const int s1 = 1 + rng.below(5);
    const int s = 1 + rng.below(5);
    Tensor q = random_tensor({s1, n}, rng);
    Tensor k = random_tensor({s1, n}, rng);
    Tensor v = random_tensor({s, n}, rng);
    AttentionMask mask =
        trial % 2 == 0 ? AttentionMask::full(n) : AttentionMask::causal(n);
    Tensor got = scaled_dot_product_attention(q, k, v, mask);
    Tensor want = brute_force_attention(q, k, v, mask);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("attention weights are convex and reconstruct the output") {
  Rng rng(103);
  const int n = 6;
  Tensor q = random_tensor({3, n}, rng);
  Tensor k = random_tensor({3, n}, rng);
  Tensor v = random_tensor({2, n}, rng);
  AttentionMask mask = build_logsparse_mask(n, {});
  Tensor w;
  Tensor z = scaled_dot_product_attention(q, k, v, mask, nullptr, &w);
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      CHECK(w.at(i, j) >= 0.0);
      if (!mask.allowed(i, j)) CHECK(w.at(i, j) == 0.0);
      sum += w.at(i, j);
    }
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
  }
  Tensor recon({2, n});
  for (int r = 0; r < 2; ++r)
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += w.at(i, j) * v.at(r, j);
      recon.at(r, i) = acc;
    }
  CHECK(max_abs_diff(z, recon) < 1e-12);
}

TEST_CASE("attention validates shapes against the mask") {
  Tensor q({2, 2});
  Tensor k({2, 2});
  Tensor v({2, 2});
  // A query row map lets a score block cover a subset of mask rows.
  AttentionMask mask = AttentionMask::causal(2);
  std::vector<int> sel = {0};
  Tensor qs = gather_cols(q, {0});
  CHECK_NOTHROW(masked_scaled_scores(qs, k, mask, &sel));
  CHECK_THROWS_AS(
      scaled_dot_product_attention(q, k, v, AttentionMask::full(3, 2)),
      DimensionError);
  CHECK_THROWS_AS(
      scaled_dot_product_attention(q, Tensor({3, 2}), v,
                                   AttentionMask::full(2)),
      DimensionError);
}

TEST_CASE("cost accounting: full and causal masks count exactly") {
  Rng rng(107);
  const int n = 5;
  Tensor q = random_tensor({3, n}, rng);
  Tensor k = random_tensor({3, n}, rng);
  Tensor v = random_tensor({3, n}, rng);
  CostCounter full;
  scaled_dot_product_attention(q, k, v, AttentionMask::full(n), &full);
  CHECK(full.dot_products == n * n);
  CHECK(full.weights_stored == n * n);
  CostCounter causal;
  scaled_dot_product_attention(q, k, v, AttentionMask::causal(n), &causal);
  CHECK(causal.dot_products == n * (n + 1) / 2);
  CHECK(causal.weights_stored == n * (n + 1) / 2);
}

TEST_CASE("logsparse mask row 8 and row 0 enumerate the documented sets") {
  AttentionMask m = build_logsparse_mask(9, {});
  std::vector<int> row8;
  for (int k = 0; k < 9; ++k)
    if (m.allowed(8, k)) row8.push_back(k);
  CHECK(row8 == std::vector<int>{0, 4, 6, 7, 8});
  CHECK(m.allowed_in_row(0) == 1);
  CHECK(m.allowed(0, 0));
}

TEST_CASE("logsparse row cardinality follows floor(log2 i) + 2") {
  AttentionMask m = build_logsparse_mask(64, {});
  for (int i = 1; i < 64; ++i) {
    const int want = static_cast<int>(std::floor(std::log2(i))) + 2;
    CHECK(m.allowed_in_row(i) == want);
  }
  // Causal subset: nothing above the diagonal.
  for (int i = 0; i < 64; ++i)
    for (int j = i + 1; j < 64; ++j) CHECK_FALSE(m.allowed(i, j));
}

TEST_CASE("logsparse_local with a window >= length is the causal mask") {
  LogSparseSpec spec;
  spec.kind = MaskKind::logsparse_local;
  spec.local_window = 16;
  AttentionMask m = build_logsparse_mask(12, spec);
  AttentionMask causal = AttentionMask::causal(12);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) CHECK(m.allowed(i, j) == causal.allowed(i, j));
}

TEST_CASE("logsparse_restart recomputes offsets per block") {
  LogSparseSpec spec;
  spec.kind = MaskKind::logsparse_restart;
  spec.restart_range = 4;
  AttentionMask m = build_logsparse_mask(8, spec);
  // Row 5 sits in block [4,8): offsets relative to 4 allow {5, 4}.
  CHECK(m.allowed(5, 5));
  CHECK(m.allowed(5, 4));
  for (int j = 0; j < 4; ++j) CHECK_FALSE(m.allowed(5, j));
  // Row 3 stays inside block [0,4): offsets 1 and 2 reach back, 4 does not.
  CHECK(m.allowed(3, 3));
  CHECK(m.allowed(3, 2));
  CHECK(m.allowed(3, 1));
  CHECK_FALSE(m.allowed(3, 0));
}

TEST_CASE("restricted mask covers the w nearest past positions") {
  AttentionMask m = AttentionMask::restricted(6, 2);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      CHECK(m.allowed(i, j) == (j <= i && i - j <= 2));
}

TEST_CASE("mask CSV has a header of column indices and 0/1 rows") {
  AttentionMask m = AttentionMask::causal(3);
  std::ostringstream os;
  m.write_csv(os);
  CHECK(os.str() == "0,1,2\n1,0,0\n1,1,0\n1,1,1\n");
}

TEST_CASE("multi_head_attention with one identity-folded head equals sdpa") {
  Rng rng(109);
  const int d = 3, n = 4;
  MultiHeadParams p;
  p.w_q.push_back(random_tensor({d, d}, rng));
  p.w_k.push_back(random_tensor({d, d}, rng));
  p.w_v.push_back(random_tensor({d, d}, rng));
  Tensor eye({d, d});
  for (int i = 0; i < d; ++i) eye.at(i, i) = 1.0;
  p.w_o = eye;
  Tensor x = random_tensor({d, n}, rng);
  AttentionMask mask = AttentionMask::full(n);
  Tensor got = multi_head_attention(x, p, mask);
  QKV qkv = project_qkv(x, p, 0);
  Tensor want = scaled_dot_product_attention(qkv.q, qkv.k, qkv.v, mask);
  CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("zeroing one head and selecting the other through w_o isolates it") {
  Rng rng(113);
  const int d = 4, n = 5, s = 2;
  MultiHeadParams p = random_mha_params(d, 2, 3, s, rng);
  // Head 1 contributes nothing; w_o routes head 0 rows straight through.
  for (double& x : p.w_v[1].values()) x = 0.0;
  p.w_o = Tensor({d, 2 * s});
  p.w_o.at(0, 0) = 1.0;
  p.w_o.at(1, 1) = 1.0;
  Tensor x = random_tensor({d, n}, rng);
  AttentionMask mask = AttentionMask::full(n);
  Tensor got = multi_head_attention(x, p, mask);
  QKV h0 = project_qkv(x, p, 0);
  Tensor z0 = scaled_dot_product_attention(h0.q, h0.k, h0.v, mask);
  for (int j = 0; j < n; ++j) {
    CHECK(got.at(0, j) == doctest::Approx(z0.at(0, j)).epsilon(1e-14));
    CHECK(got.at(1, j) == doctest::Approx(z0.at(1, j)).epsilon(1e-14));
    CHECK(got.at(2, j) == 0.0);
    CHECK(got.at(3, j) == 0.0);
  }
}

TEST_CASE("reference shapes: d=6, n=3, r=2, s=4 pipeline against a hand oracle") {
  Rng rng(127);
  const int d = 6, n = 3, r = 2, s1 = 4, s = 4;
  MultiHeadParams p = random_mha_params(d, r, s1, s, rng);
  Tensor x = random_tensor({d, n}, rng);
  AttentionMask mask = AttentionMask::full(n);
  Tensor got = multi_head_attention(x, p, mask);
  REQUIRE(got.shape() == std::vector<int>{d, n});

  // Hand-assembled: per head project, brute-force attention, stack rows,
  // multiply by the output weights.
  Tensor stacked({r * s, n});
  for (int h = 0; h < r; ++h) {
    Tensor q({s1, n}), k({s1, n}), v({s, n});
    for (int i = 0; i < s1; ++i)
      for (int j = 0; j < n; ++j) {
        double aq = 0.0, ak = 0.0;
        for (int c = 0; c < d; ++c) {
          aq += p.w_q[h].at(i, c) * x.at(c, j);
          ak += p.w_k[h].at(i, c) * x.at(c, j);
        }
        q.at(i, j) = aq;
        k.at(i, j) = ak;
      }
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < n; ++j) {
        double av = 0.0;
        for (int c = 0; c < d; ++c) av += p.w_v[h].at(i, c) * x.at(c, j);
        v.at(i, j) = av;
      }
    Tensor z = brute_force_attention(q, k, v, mask);
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < n; ++j) stacked.at(h * s + i, j) = z.at(i, j);
  }
  Tensor want({d, n});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int c = 0; c < r * s; ++c) acc += p.w_o.at(i, c) * stacked.at(c, j);
      want.at(i, j) = acc;
    }
  CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("without positional encoding attention is permutation equivariant") {
  Rng rng(131);
  const int d = 4, n = 6;
  MultiHeadParams p = random_mha_params(d, 2, 3, 2, rng);
  Tensor x = random_tensor({d, n}, rng);
  const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  Tensor xp = gather_cols(x, perm);
  AttentionMask mask = AttentionMask::full(n);
  Tensor base = multi_head_attention(x, p, mask);
  Tensor permuted = multi_head_attention(xp, p, mask);
  for (int r = 0; r < d; ++r)
    for (int j = 0; j < n; ++j)
      CHECK(permuted.at(r, j) ==
            doctest::Approx(base.at(r, perm[j])).epsilon(1e-12));
}

TEST_CASE("probsparse with top_u = n matches canonical attention bit for bit") {
  Rng rng(137);
  for (std::uint64_t seed : {1ull, 7ull, 99ull}) {
    const int n = 6;
    Tensor q = random_tensor({3, n}, rng);
    Tensor k = random_tensor({3, n}, rng);
    Tensor v = random_tensor({2, n}, rng);
    AttentionMask mask = AttentionMask::full(n);
    Tensor want = scaled_dot_product_attention(q, k, v, mask);
    Tensor got = probsparse_attention(q, k, v, mask, n, seed);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("probsparse non-selected queries emit the uniform value average") {
  Rng rng(139);
  const int n = 4;
  Tensor q = random_tensor({3, n}, rng);
  Tensor k = random_tensor({3, n}, rng);
  Tensor v = random_tensor({2, n}, rng);
  Tensor z = probsparse_attention(q, k, v, AttentionMask::full(n), 1, 5);
  Tensor w;
  probsparse_attention(q, k, v, AttentionMask::full(n), 1, 5, 5.0, nullptr, &w);
  double mean0 = 0.0, mean1 = 0.0;
  for (int j = 0; j < n; ++j) {
    mean0 += v.at(0, j) / n;
    mean1 += v.at(1, j) / n;
  }
  int uniform_cols = 0;
  for (int i = 0; i < n; ++i) {
    if (std::fabs(w.at(i, 0) - 0.25) < 1e-15 &&
        std::fabs(w.at(i, 1) - 0.25) < 1e-15) {
      ++uniform_cols;
      CHECK(z.at(0, i) == doctest::Approx(mean0).epsilon(1e-12));
      CHECK(z.at(1, i) == doctest::Approx(mean1).epsilon(1e-12));
    }
  }
  CHECK(uniform_cols == n - 1);
}

TEST_CASE("probsparse counts sampled plus selected dot products only") {
  Rng rng(149);
  const int n = 64;
  Tensor q = random_tensor({4, n}, rng);
  Tensor k = random_tensor({4, n}, rng);
  Tensor v = random_tensor({4, n}, rng);
  const int u = probsparse_auto_u(n);
  CHECK(u == static_cast<int>(std::ceil(5.0 * std::log(64.0))));
  CostCounter c;
  probsparse_attention(q, k, v, AttentionMask::full(n), u, 3, 5.0, &c);
  const long long sampled = static_cast<long long>(n) * probsparse_sample_count(n);
  CHECK(c.dot_products == sampled + static_cast<long long>(u) * n);
  CHECK(c.weights_stored == static_cast<long long>(u) * n);
  CHECK(c.dot_products < static_cast<long long>(n) * n);
}

TEST_CASE("probsparse rejects an out-of-range query budget") {
  Tensor q({2, 3});
  Tensor k({2, 3});
  Tensor v({2, 3});
  CHECK_THROWS_AS(
      probsparse_attention(q, k, v, AttentionMask::full(3), 0, 1),
      ConfigError);
  CHECK_THROWS_AS(
      probsparse_attention(q, k, v, AttentionMask::full(3), 4, 1),
      ConfigError);
}

TEST_CASE("probsparse selection is deterministic per seed") {
  Rng rng(151);
  const int n = 10;
  Tensor q = random_tensor({3, n}, rng);
  Tensor k = random_tensor({3, n}, rng);
  Tensor v = random_tensor({3, n}, rng);
  AttentionMask mask = AttentionMask::causal(n);
  Tensor a = probsparse_attention(q, k, v, mask, 3, 42);
  Tensor b = probsparse_attention(q, k, v, mask, 3, 42);
  for (std::size_t i = 0; i < a.values().size(); ++i)
    CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("conv_self_attention with kernel one is bit-identical to multi-head") {
  Rng rng(157);
  const int d = 6, n = 5;
  MultiHeadParams p = random_mha_params(d, 2, 3, 3, rng);
  Tensor x = random_tensor({d, n}, rng);
  AttentionMask mask = AttentionMask::full(n);
  Tensor a = multi_head_attention(x, p, mask);
  Tensor b = conv_self_attention(x, p, 1, mask);
  for (std::size_t i = 0; i < a.values().size(); ++i)
    CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("conv_self_attention stays causal for kernel three") {
  Rng rng(163);
  const int d = 4, n = 8;
  MultiHeadParams p;
  for (int h = 0; h < 2; ++h) {
    p.w_q.push_back(random_tensor({3, d, 3}, rng));
    p.w_k.push_back(random_tensor({3, d, 3}, rng));
    p.w_v.push_back(random_tensor({3, d}, rng));
  }
  p.w_o = random_tensor({d, 6}, rng);
  AttentionMask mask = AttentionMask::causal(n);
  Tensor x = random_tensor({d, n}, rng);
  Tensor base = conv_self_attention(x, p, 3, mask);
  for (int trial = 0; trial < 20; ++trial) {
    const int t = 1 + rng.below(n - 1);
    Tensor xp = x.clone();
    xp.at(rng.below(d), t) += rng.uniform(0.5, 1.5);
    Tensor pert = conv_self_attention(xp, p, 3, mask);
    for (int r = 0; r < d; ++r)
      for (int j = 0; j < t; ++j) CHECK(pert.at(r, j) == base.at(r, j));
  }
}

TEST_CASE("conv queries attend to matching local shape, not matching value") {
  // One rising edge early, one rising edge late, and a flat stretch whose
  // value equals the edge midpoint. A slope-detecting kernel must weight
  // edge-to-edge higher than edge-to-flat.
  Tensor x({1, 12}, {0.0, 0.5, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.0, 0.5, 1.0, 0.5});
  MultiHeadParams p;
  p.w_q.push_back(Tensor({1, 1, 3}, {-1.0, 0.0, 1.0}));
  p.w_k.push_back(Tensor({1, 1, 3}, {-1.0, 0.0, 1.0}));
  p.w_v.push_back(Tensor({1, 1}, {1.0}));
  p.w_o = Tensor({1, 1}, {1.0});
  AttentionTrace trace;
  conv_self_attention(x, p, 3, AttentionMask::full(12), nullptr, &trace, "t");
  const Tensor& w = trace.items[0].weights;
  // Query at the late edge (t=10, slope up): early edge (t=2) must outweigh
  // the flat position t=6 whose raw value matches.
  CHECK(w.at(10, 2) > w.at(10, 6));
}

TEST_CASE("conv_self_attention validates kernel width against parameters") {
  Rng rng(167);
  MultiHeadParams p = random_mha_params(3, 1, 2, 2, rng);
  Tensor x = random_tensor({3, 4}, rng);
  CHECK_THROWS_AS(conv_self_attention(x, p, 3, AttentionMask::full(4)),
                  DimensionError);
  CHECK_THROWS_AS(conv_self_attention(x, p, 0, AttentionMask::full(4)),
                  ConfigError);
}

TEST_CASE("cross attention consumes separate query and key/value streams") {
  Rng rng(173);
  const int d = 4, m = 3, n = 6;
  MultiHeadParams p = random_mha_params(d, 2, 2, 2, rng);
  Tensor xq = random_tensor({d, m}, rng);
  Tensor xkv = random_tensor({d, n}, rng);
  Tensor z = multi_head_cross_attention(xq, xkv, p, AttentionMask::full(m, n));
  REQUIRE(z.shape() == std::vector<int>{d, m});
  // Against per-head brute force.
  Tensor stacked({4, m});
  for (int h = 0; h < 2; ++h) {
    Tensor q = matmul(p.w_q[h], xq);
    Tensor k = matmul(p.w_k[h], xkv);
    Tensor v = matmul(p.w_v[h], xkv);
    Tensor zb = brute_force_attention(q, k, v, AttentionMask::full(m, n));
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < m; ++j) stacked.at(h * 2 + i, j) = zb.at(i, j);
  }
  Tensor want = matmul(p.w_o, stacked);
  CHECK(max_abs_diff(z, want) < 1e-12);
}

TEST_CASE("gradients flow through attention variants") {
  Rng rng(179);
  const int d = 4, n = 5;
  Tensor x = random_tensor({d, n}, rng);
  MultiHeadParams p = random_mha_params(d, 2, 2, 2, rng);
  Tensor w = random_tensor({d, n}, rng);
  std::vector<Tensor> params = {p.w_q[0], p.w_k[0], p.w_v[0], p.w_o};
  auto f = [&](Tape& tape) {
    MultiHeadParams wp;
    for (int h = 0; h < 2; ++h) {
      wp.w_q.push_back(h == 0 ? tape.watch(p.w_q[0]) : p.w_q[h]);
      wp.w_k.push_back(h == 0 ? tape.watch(p.w_k[0]) : p.w_k[h]);
      wp.w_v.push_back(h == 0 ? tape.watch(p.w_v[0]) : p.w_v[h]);
    }
    wp.w_o = tape.watch(p.w_o);
    Tensor z = multi_head_attention(x, wp, AttentionMask::causal(n));
    return sum_all(mul(z, w));
  };
  CHECK(finite_diff_check(f, params, 1e-5) < 1e-4);

  std::vector<Tensor> ps_params = {x};
  Tensor w2 = random_tensor({2, n}, rng);
  auto g = [&](Tape& tape) {
    Tensor wx = tape.watch(x);
    Tensor q = matmul(p.w_q[0], wx);
    Tensor k = matmul(p.w_k[0], wx);
    Tensor v = matmul(p.w_v[0], wx);
    Tensor z = probsparse_attention(q, k, v, AttentionMask::full(n), 2, 11);
    return sum_all(mul(z, w2));
  };
  CHECK(finite_diff_check(g, ps_params, 1e-5) < 1e-4);
}
