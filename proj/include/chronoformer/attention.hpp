// Attention kernels: canonical scaled dot-product attention, multi-head
// wrappers, the sampled-sparsity variant, convolutional query/key
// generation, and the structured sparsity masks they attend through.
//
// Shape conventions follow the rest of the library: inputs are feature-major
// (d rows, n time columns). Queries and keys have s1 rows, values s rows;
// attention output keeps s rows and one column per query.
#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "chronoformer/tensor.hpp"

namespace chronoformer {

enum class MaskKind {
  full,
  causal,
  logsparse,
  logsparse_local,
  logsparse_restart,
  restricted,
};

MaskKind mask_kind_from_string(const std::string& name);
std::string to_string(MaskKind kind);

struct LogSparseSpec;

// Boolean attend/ignore grid; row = query position, column = key position.
// Every row keeps at least its own position, so softmax rows never starve.
class AttentionMask {
 public:
  static AttentionMask full(int rows, int cols);
  static AttentionMask full(int n);
  static AttentionMask causal(int n);
  // Row i may attend the w nearest past positions and itself.
  static AttentionMask restricted(int n, int w);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  MaskKind kind() const { return kind_; }
  bool allowed(int q, int k) const {
    return grid_[static_cast<std::size_t>(q) * cols_ + k] != 0;
  }
  int allowed_in_row(int q) const;
  long long total_allowed() const;
  // 0/1 grid with a header row of column indices.
  void write_csv(std::ostream& os) const;

 private:
  friend AttentionMask build_logsparse_mask(int length,
                                            const LogSparseSpec& spec);
  AttentionMask(int rows, int cols, MaskKind kind);
  void set(int q, int k) { grid_[static_cast<std::size_t>(q) * cols_ + k] = 1; }
  void validate() const;

  int rows_ = 0;
  int cols_ = 0;
  MaskKind kind_ = MaskKind::full;
  std::vector<std::uint8_t> grid_;
};

struct LogSparseSpec {
  MaskKind kind = MaskKind::logsparse;
  int local_window = 4;   // logsparse_local: dense nearest past positions
  int restart_range = 0;  // logsparse_restart: block length for offset reset
};

// Causal masks where row i attends itself plus positions i - 2^k. The local
// variant adds a dense nearby window; the restart variant recomputes the
// exponential offsets relative to the start of each consecutive block.
AttentionMask build_logsparse_mask(int length, const LogSparseSpec& spec);

// Work and memory instrumentation. dot_products counts query-key dot
// products actually executed; weights_stored accumulates the number of
// attention-weight entries materialized across calls.
struct CostCounter {
  long long dot_products = 0;
  long long weights_stored = 0;
};

// Scaled dot products restricted to mask-allowed pairs; disallowed entries
// hold the additive mask value -1e30 so softmax sends them to exact zero.
// query_rows, when given, maps local score rows onto mask rows (used by the
// sparse variant to score a subset of queries).
Tensor masked_scaled_scores(const Tensor& q, const Tensor& k,
                            const AttentionMask& mask,
                            const std::vector<int>* query_rows = nullptr,
                            CostCounter* counter = nullptr);

// softmax_rows(q^T k / sqrt(s1), masked) combined with the value columns.
// Output column i is the weight-convex combination of allowed value columns.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                    const Tensor& v, const AttentionMask& mask,
                                    CostCounter* counter = nullptr,
                                    Tensor* weights_out = nullptr);

// Per-head projection weights. w_q / w_k are s1-by-d matrices, or
// s1-by-d-by-k causal convolution kernels for the convolutional variant
// (a matrix is exactly the kernel-size-one case). w_v maps to s rows and
// w_o folds the row-concatenated heads back to d rows.
struct MultiHeadParams {
  std::vector<Tensor> w_q, w_k, w_v;
  Tensor w_o;
  int heads() const { return static_cast<int>(w_q.size()); }
  void validate() const;
};

struct QKV {
  Tensor q, k, v;
};

// Linear per-head projections of one input sequence.
QKV project_qkv(const Tensor& x, const MultiHeadParams& p, int head);

// Captured attention-weight matrices, one entry per head, for inspection.
struct AttentionTrace {
  struct Item {
    std::string scope;
    int head = 0;
    Tensor weights;
  };
  std::vector<Item> items;
};

Tensor multi_head_attention(const Tensor& x, const MultiHeadParams& p,
                            const AttentionMask& mask,
                            CostCounter* counter = nullptr,
                            AttentionTrace* trace = nullptr,
                            const std::string& scope = "");

// Cross attention: queries projected from x_q, keys and values from x_kv.
Tensor multi_head_cross_attention(const Tensor& x_q, const Tensor& x_kv,
                                  const MultiHeadParams& p,
                                  const AttentionMask& mask,
                                  CostCounter* counter = nullptr,
                                  AttentionTrace* trace = nullptr,
                                  const std::string& scope = "");

// Default query budget ceil(c ln n), clamped to [1, n].
int probsparse_auto_u(int n, double c = 5.0);
// Keys sampled per query when scoring, ceil(c ln n) clamped to [1, n].
int probsparse_sample_count(int n, double c = 5.0);

// Sparse attention: each query scores a seeded sample of its allowed keys
// (score = max sampled logit - mean sampled logit); the top_u queries by
// score attend fully within the mask, ties resolved toward the lower index.
// Every other query's output is the uniform average of its allowed value
// columns, exactly what a zero query vector would produce. The counter sees
// only sampled plus selected dot products.
Tensor probsparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionMask& mask, int top_u,
                            std::uint64_t seed, double sample_c = 5.0,
                            CostCounter* counter = nullptr,
                            Tensor* weights_out = nullptr);

// Queries and keys produced by causal convolutions of width kernel over x
// before attention; values use kernel size one. With kernel == 1 the data
// path is bit-identical to multi_head_attention.
Tensor conv_self_attention(const Tensor& x, const MultiHeadParams& p,
                           int kernel, const AttentionMask& mask,
                           CostCounter* counter = nullptr,
                           AttentionTrace* trace = nullptr,
                           const std::string& scope = "");

}  // namespace chronoformer
