#include "chronoformer/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "chronoformer/rng.hpp"

namespace chronoformer {

namespace {

constexpr double kMaskFill = -1e30;

void require_cols(const Tensor& t, int want, const char* what) {
  if (t.dim(1) != want) {
    throw DimensionError(std::string(what) + " has " +
                         std::to_string(t.dim(1)) + " columns, expected " +
                         std::to_string(want));
  }
}

}  // namespace

MaskKind mask_kind_from_string(const std::string& name) {
  if (name == "full") return MaskKind::full;
  if (name == "causal") return MaskKind::causal;
  if (name == "logsparse") return MaskKind::logsparse;
  if (name == "logsparse_local") return MaskKind::logsparse_local;
  if (name == "logsparse_restart") return MaskKind::logsparse_restart;
  if (name == "restricted") return MaskKind::restricted;
  throw ConfigError("unknown mask kind '" + name + "'");
}

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::full: return "full";
    case MaskKind::causal: return "causal";
    case MaskKind::logsparse: return "logsparse";
    case MaskKind::logsparse_local: return "logsparse_local";
    case MaskKind::logsparse_restart: return "logsparse_restart";
    case MaskKind::restricted: return "restricted";
  }
  return "?";
}

AttentionMask::AttentionMask(int rows, int cols, MaskKind kind)
    : rows_(rows), cols_(cols), kind_(kind) {
  if (rows <= 0 || cols <= 0) {
    throw DimensionError("mask extents must be positive, got " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  grid_.assign(static_cast<std::size_t>(rows) * cols, 0);
}

void AttentionMask::validate() const {
  for (int q = 0; q < rows_; ++q) {
    if (allowed_in_row(q) == 0) {
      throw MaskError("mask row " + std::to_string(q) +
                      " has no allowed columns");
    }
  }
}

int AttentionMask::allowed_in_row(int q) const {
  int c = 0;
  for (int k = 0; k < cols_; ++k) c += allowed(q, k) ? 1 : 0;
  return c;
}

long long AttentionMask::total_allowed() const {
  long long c = 0;
  for (std::uint8_t b : grid_) c += b;
  return c;
}

void AttentionMask::write_csv(std::ostream& os) const {
  for (int k = 0; k < cols_; ++k) {
    if (k) os << ',';
    os << k;
  }
  os << '\n';
  for (int q = 0; q < rows_; ++q) {
    for (int k = 0; k < cols_; ++k) {
      if (k) os << ',';
      os << (allowed(q, k) ? 1 : 0);
    }
    os << '\n';
  }
}

AttentionMask AttentionMask::full(int rows, int cols) {
  AttentionMask m(rows, cols, MaskKind::full);
  std::fill(m.grid_.begin(), m.grid_.end(), std::uint8_t{1});
  return m;
}

AttentionMask AttentionMask::full(int n) { return full(n, n); }

AttentionMask AttentionMask::causal(int n) {
  AttentionMask m(n, n, MaskKind::causal);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k <= q; ++k) m.set(q, k);
  return m;
}

AttentionMask AttentionMask::restricted(int n, int w) {
  if (w < 0) throw ConfigError("restricted mask window must be non-negative");
  AttentionMask m(n, n, MaskKind::restricted);
  for (int q = 0; q < n; ++q)
    for (int k = std::max(0, q - w); k <= q; ++k) m.set(q, k);
  return m;
}

AttentionMask build_logsparse_mask(int length, const LogSparseSpec& spec) {
  if (length <= 0) {
    throw DimensionError("logsparse mask length must be positive");
  }
  if (spec.kind == MaskKind::logsparse_restart && spec.restart_range <= 0) {
    throw ConfigError("logsparse_restart needs a positive range");
  }
  if (spec.kind == MaskKind::logsparse_local && spec.local_window < 0) {
    throw ConfigError("logsparse_local window must be non-negative");
  }
  if (spec.kind != MaskKind::logsparse &&
      spec.kind != MaskKind::logsparse_local &&
      spec.kind != MaskKind::logsparse_restart) {
    throw ConfigError("build_logsparse_mask: kind must be a logsparse variant");
  }
  AttentionMask m(length, length, spec.kind);
  for (int q = 0; q < length; ++q) {
    const int base =
        spec.kind == MaskKind::logsparse_restart
            ? (q / spec.restart_range) * spec.restart_range
            : 0;
    m.set(q, q);
    for (long long step = 1; q - step >= base; step <<= 1) {
      m.set(q, q - static_cast<int>(step));
    }
    if (spec.kind == MaskKind::logsparse_local) {
      for (int k = std::max(0, q - spec.local_window); k <= q; ++k) m.set(q, k);
    }
  }
  m.validate();
  return m;
}

// ---- scores ---------------------------------------------------------------

Tensor masked_scaled_scores(const Tensor& q, const Tensor& k,
                            const AttentionMask& mask,
                            const std::vector<int>* query_rows,
                            CostCounter* counter) {
  if (q.ndim() != 2 || k.ndim() != 2 || q.dim(0) != k.dim(0)) {
    throw DimensionError("attention scores: query " + shape_str(q.shape()) +
                         " and key " + shape_str(k.shape()) +
                         " need matching row counts");
  }
  const int s1 = q.dim(0);
  const int m = q.dim(1);
  const int n = k.dim(1);
  require_cols(k, mask.cols(), "attention key block vs mask");
  if (query_rows == nullptr) {
    if (mask.rows() != m) {
      throw DimensionError("mask has " + std::to_string(mask.rows()) +
                           " rows for " + std::to_string(m) + " queries");
    }
  } else if (static_cast<int>(query_rows->size()) != m) {
    throw DimensionError("query row map length " +
                         std::to_string(query_rows->size()) + " for " +
                         std::to_string(m) + " queries");
  }
  const double sc = 1.0 / std::sqrt(static_cast<double>(s1));
  std::vector<int> rows(static_cast<std::size_t>(m));
  if (query_rows) {
    rows = *query_rows;
  } else {
    std::iota(rows.begin(), rows.end(), 0);
  }
  for (int i = 0; i < m; ++i) {
    if (mask.allowed_in_row(rows[i]) == 0) {
      throw MaskError("mask row " + std::to_string(rows[i]) +
                      " has no allowed columns");
    }
  }

  Tensor out = Tensor::full({m, n}, kMaskFill);
  long long pairs = 0;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      if (!mask.allowed(rows[i], j)) continue;
      double dot = 0.0;
      for (int r = 0; r < s1; ++r) dot += q.at(r, i) * k.at(r, j);
      out.at(i, j) = dot * sc;
      ++pairs;
    }
  }
  if (counter) counter->dot_products += pairs;

  if (Tape* tp = common_tape({&q, &k})) {
    out = tp->attach(std::move(out));
    const int qn = tp->input_node(q), kn = tp->input_node(k);
    const int on = out.node();
    Tensor qs = q, ks = k;
    AttentionMask msk = mask;
    tp->push("masked_scaled_scores",
             [qs, ks, msk, rows, qn, kn, on, s1, m, n, sc](Tape& t) {
      if (!t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      // Touch the buffers up front so an all-zero upstream gradient still
      // marks the inputs as reached (rezero trunks hit this at init).
      std::vector<double>* gq = qn >= 0 ? &t.grad_buf(qn) : nullptr;
      std::vector<double>* gk = kn >= 0 ? &t.grad_buf(kn) : nullptr;
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          if (!msk.allowed(rows[static_cast<std::size_t>(i)], j)) continue;
          const double go = g[static_cast<std::size_t>(i) * n + j] * sc;
          if (go == 0.0) continue;
          if (gq != nullptr) {
            for (int r = 0; r < s1; ++r)
              (*gq)[static_cast<std::size_t>(r) * m + i] += go * ks.at(r, j);
          }
          if (gk != nullptr) {
            for (int r = 0; r < s1; ++r)
              (*gk)[static_cast<std::size_t>(r) * n + j] += go * qs.at(r, i);
          }
        }
      }
    });
  }
  return out;
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                    const Tensor& v, const AttentionMask& mask,
                                    CostCounter* counter, Tensor* weights_out) {
  if (v.ndim() != 2) {
    throw DimensionError("attention values must be 2-D, got " +
                         shape_str(v.shape()));
  }
  require_cols(v, k.dim(1), "attention value block vs keys");
  Tensor scores = masked_scaled_scores(q, k, mask, nullptr, counter);
  Tensor w = softmax_rows(scores);
  if (counter) counter->weights_stored += mask.total_allowed();
  if (weights_out) *weights_out = w.clone();
  return matmul(v, transpose(w));
}

// ---- multi-head -------------------------------------------------------------

void MultiHeadParams::validate() const {
  const int r = heads();
  if (r == 0) throw ConfigError("multi-head attention needs at least one head");
  if (static_cast<int>(w_k.size()) != r || static_cast<int>(w_v.size()) != r) {
    throw ConfigError("multi-head attention: per-head weight lists differ in length");
  }
  const int s1 = w_q[0].dim(0);
  const int s = w_v[0].dim(0);
  for (int h = 0; h < r; ++h) {
    if (w_q[h].dim(0) != s1 || w_k[h].dim(0) != s1 || w_v[h].dim(0) != s) {
      throw DimensionError("multi-head attention: head " + std::to_string(h) +
                           " weight shapes disagree with head 0");
    }
  }
  if (w_o.ndim() != 2 || w_o.dim(1) != r * s) {
    throw DimensionError("multi-head attention: output weights " +
                         shape_str(w_o.shape()) + " must have " +
                         std::to_string(r * s) + " columns");
  }
}

QKV project_qkv(const Tensor& x, const MultiHeadParams& p, int head) {
  if (head < 0 || head >= p.heads()) {
    throw ConfigError("project_qkv: head " + std::to_string(head) +
                      " out of " + std::to_string(p.heads()));
  }
  if (p.w_q[head].ndim() != 2) {
    throw DimensionError(
        "project_qkv: convolutional query/key kernels need the "
        "convolutional attention path");
  }
  return QKV{matmul(p.w_q[head], x), matmul(p.w_k[head], x),
             matmul(p.w_v[head], x)};
}

namespace {

// Shared multi-head plumbing over any per-head q/k/v provider.
template <typename HeadFn>
Tensor multi_head_core(HeadFn&& head_qkv, const MultiHeadParams& p,
                       const AttentionMask& mask, CostCounter* counter,
                       AttentionTrace* trace, const std::string& scope) {
  p.validate();
  std::vector<Tensor> heads;
  heads.reserve(p.heads());
  for (int h = 0; h < p.heads(); ++h) {
    QKV qkv = head_qkv(h);
    Tensor w;
    Tensor z = scaled_dot_product_attention(qkv.q, qkv.k, qkv.v, mask, counter,
                                            trace ? &w : nullptr);
    if (trace) trace->items.push_back({scope, h, std::move(w)});
    heads.push_back(std::move(z));
  }
  return matmul(p.w_o, concat_rows(heads));
}

}  // namespace

Tensor multi_head_attention(const Tensor& x, const MultiHeadParams& p,
                            const AttentionMask& mask, CostCounter* counter,
                            AttentionTrace* trace, const std::string& scope) {
  return multi_head_core([&](int h) { return project_qkv(x, p, h); }, p, mask,
                         counter, trace, scope);
}

Tensor multi_head_cross_attention(const Tensor& x_q, const Tensor& x_kv,
                                  const MultiHeadParams& p,
                                  const AttentionMask& mask,
                                  CostCounter* counter, AttentionTrace* trace,
                                  const std::string& scope) {
  return multi_head_core(
      [&](int h) {
        return QKV{matmul(p.w_q[h], x_q), matmul(p.w_k[h], x_kv),
                   matmul(p.w_v[h], x_kv)};
      },
      p, mask, counter, trace, scope);
}

// ---- sampled sparsity -------------------------------------------------------

int probsparse_auto_u(int n, double c) {
  const int u = static_cast<int>(std::ceil(c * std::log(static_cast<double>(n))));
  return std::min(n, std::max(1, u));
}

int probsparse_sample_count(int n, double c) {
  return probsparse_auto_u(n, c);
}

Tensor probsparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionMask& mask, int top_u,
                            std::uint64_t seed, double sample_c,
                            CostCounter* counter, Tensor* weights_out) {
  if (v.ndim() != 2) {
    throw DimensionError("attention values must be 2-D, got " +
                         shape_str(v.shape()));
  }
  require_cols(v, k.dim(1), "attention value block vs keys");
  const int s1 = q.dim(0);
  const int nq = q.dim(1);
  const int n = k.dim(1);
  if (mask.rows() != nq || mask.cols() != n) {
    throw DimensionError("mask " + std::to_string(mask.rows()) + "x" +
                         std::to_string(mask.cols()) + " does not cover " +
                         std::to_string(nq) + " queries / " +
                         std::to_string(n) + " keys");
  }
  if (top_u < 1 || top_u > nq) {
    throw ConfigError("probsparse: top_u " + std::to_string(top_u) +
                      " outside [1, " + std::to_string(nq) + "]");
  }
  const double sc = 1.0 / std::sqrt(static_cast<double>(s1));
  const int want_samples = probsparse_sample_count(n, sample_c);

  // Sparsity scores from sampled logits; selection is a forward-time choice,
  // so it happens on raw values, outside the tape.
  std::vector<double> score(static_cast<std::size_t>(nq));
  std::vector<std::vector<int>> allowed(static_cast<std::size_t>(nq));
  for (int i = 0; i < nq; ++i) {
    auto& cols = allowed[static_cast<std::size_t>(i)];
    for (int j = 0; j < n; ++j)
      if (mask.allowed(i, j)) cols.push_back(j);
    if (cols.empty()) {
      throw MaskError("mask row " + std::to_string(i) +
                      " has no allowed columns");
    }
    const int m = std::min<int>(want_samples, static_cast<int>(cols.size()));
    std::vector<int> pick = cols;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    for (int t = 0; t < m; ++t) {
      const int r = t + rng.below(static_cast<int>(pick.size()) - t);
      std::swap(pick[static_cast<std::size_t>(t)],
                pick[static_cast<std::size_t>(r)]);
    }
    double mx = -std::numeric_limits<double>::infinity();
    double mean = 0.0;
    for (int t = 0; t < m; ++t) {
      double dot = 0.0;
      for (int r = 0; r < s1; ++r)
        dot += q.at(r, i) * k.at(r, pick[static_cast<std::size_t>(t)]);
      dot *= sc;
      mx = std::max(mx, dot);
      mean += dot;
    }
    mean /= m;
    score[static_cast<std::size_t>(i)] = mx - mean;
    if (counter) counter->dot_products += m;
  }

  std::vector<int> order(static_cast<std::size_t>(nq));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (score[static_cast<std::size_t>(a)] != score[static_cast<std::size_t>(b)])
      return score[static_cast<std::size_t>(a)] >
             score[static_cast<std::size_t>(b)];
    return a < b;  // ties resolve toward the lower query index
  });
  std::vector<int> sel(order.begin(), order.begin() + top_u);
  std::sort(sel.begin(), sel.end());
  std::vector<int> rest(order.begin() + top_u, order.end());
  std::sort(rest.begin(), rest.end());

  // Selected queries attend fully within the mask.
  Tensor qs = gather_cols(q, sel);
  Tensor scores_s = masked_scaled_scores(qs, k, mask, &sel, counter);
  Tensor ws = softmax_rows(scores_s);
  if (counter) {
    for (int i : sel)
      counter->weights_stored +=
          static_cast<long long>(allowed[static_cast<std::size_t>(i)].size());
  }
  Tensor z = scatter_cols(matmul(v, transpose(ws)), sel, nq);

  // Everyone else averages its allowed value columns uniformly, the exact
  // output of a zero query vector. The uniform weights are constants, so
  // gradient reaches v only.
  if (!rest.empty()) {
    Tensor wu({static_cast<int>(rest.size()), n});
    for (std::size_t i = 0; i < rest.size(); ++i) {
      const auto& cols = allowed[static_cast<std::size_t>(rest[i])];
      const double val = 1.0 / static_cast<double>(cols.size());
      for (int j : cols) wu.at(static_cast<int>(i), j) = val;
    }
    Tensor zu = scatter_cols(matmul(v, transpose(wu)), rest, nq);
    z = add(z, zu);
  }

  if (weights_out) {
    Tensor full({nq, n});
    for (int i = 0; i < static_cast<int>(sel.size()); ++i)
      for (int j = 0; j < n; ++j) full.at(sel[i], j) = ws.at(i, j);
    for (int i : rest) {
      const auto& cols = allowed[static_cast<std::size_t>(i)];
      const double val = 1.0 / static_cast<double>(cols.size());
      for (int j : cols) full.at(i, j) = val;
    }
    *weights_out = std::move(full);
  }
  return z;
}

// ---- convolutional queries and keys ----------------------------------------

Tensor conv_self_attention(const Tensor& x, const MultiHeadParams& p,
                           int kernel, const AttentionMask& mask,
                           CostCounter* counter, AttentionTrace* trace,
                           const std::string& scope) {
  if (kernel <= 0) {
    throw ConfigError("conv_self_attention: kernel size must be positive");
  }
  for (int h = 0; h < p.heads(); ++h) {
    const Tensor& wq = p.w_q[h];
    const int have = wq.ndim() == 3 ? wq.dim(2) : 1;
    if (have != kernel) {
      throw DimensionError("conv_self_attention: head " + std::to_string(h) +
                           " query kernels have width " + std::to_string(have) +
                           ", expected " + std::to_string(kernel));
    }
  }
  return multi_head_core(
      [&](int h) {
        return QKV{causal_conv1d(x, p.w_q[h]), causal_conv1d(x, p.w_k[h]),
                   causal_conv1d(x, p.w_v[h])};
      },
      p, mask, counter, trace, scope);
}

}  // namespace chronoformer
