// Dense 64-bit real tensors with reverse-mode automatic differentiation.
//
// Differentiation is organised around a Tape: a per-forward-pass record of
// primitive operations. Leaf tensors (parameters) are registered on a tape
// with Tape::watch, which returns a handle sharing the same storage. Any
// operation whose inputs carry a tape handle records a backward closure;
// Tape::backward then walks the record once in reverse and accumulates
// gradients into the storage of every watched tensor that requires them.
// Records are cheap and discarded after backward; there is no persistent
// graph and no global state, so distinct tapes are independent.
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "chronoformer/error.hpp"

namespace chronoformer {

class Tape;

namespace detail {
struct Storage {
  std::vector<double> v;   // row-major values
  std::vector<double> g;   // accumulated gradient, empty until populated
  bool requires_grad = false;
};
}  // namespace detail

std::string shape_str(const std::vector<int>& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);

  bool defined() const { return st_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int numel() const;

  std::vector<double>& values();
  const std::vector<double>& values() const;
  double at(int i) const;
  double at(int r, int c) const;
  double at(int a, int b, int c) const;
  double& at(int i);
  double& at(int r, int c);
  double& at(int a, int b, int c);

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  const std::vector<double>& grad() const;
  std::vector<double>& grad_mut();  // in-place edits, e.g. clipping
  void zero_grad();

  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Deep copy of values; the copy is detached and carries no gradient.
  Tensor clone() const;

 private:
  friend class Tape;
  std::vector<int> shape_;
  std::shared_ptr<detail::Storage> st_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers t as a leaf of this record and returns a handle sharing its
  // storage. Watching the same storage twice yields the same node.
  Tensor watch(const Tensor& t);

  // Reverse sweep from a scalar loss recorded on this tape. Visits every
  // entry exactly once, newest first, then writes accumulated gradients
  // into the storage of each watched tensor with requires_grad set.
  void backward(const Tensor& loss);

  std::size_t entry_count() const { return entries_.size(); }

  // --- recording interface used by operation implementations ---
  Tensor attach(Tensor value);                 // register a non-leaf result
  int input_node(const Tensor& t) const;       // -1 when t is a constant
  void push(const char* op, std::function<void(Tape&)> back);
  bool has_grad(int node) const;
  const std::vector<double>& grad_at(int node) const;
  std::vector<double>& grad_buf(int node);     // lazily allocated zeros

 private:
  struct NodeInfo {
    int numel = 0;
    std::shared_ptr<detail::Storage> st;
    bool leaf = false;
  };
  struct Entry {
    const char* op;
    std::function<void(Tape&)> back;
  };
  int add_node(const Tensor& t, bool leaf);

  std::vector<NodeInfo> nodes_;
  std::vector<std::vector<double>> grads_;
  std::vector<Entry> entries_;
  std::unordered_map<detail::Storage*, int> watched_;
};

// The unique tape the inputs are attached to, or nullptr when all inputs are
// constants. Two different tapes in one operation is a contract violation.
Tape* common_tape(std::initializer_list<const Tensor*> inputs);

// ---- primitive operations ----------------------------------------------
// All operations are pure: inputs untouched, fresh output, and a backward
// closure recorded when any input is attached to a tape.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// alpha is a 1-element tensor multiplying every entry of a.
Tensor scalar_mul(const Tensor& alpha, const Tensor& a);
// Adds a length-d column vector to every column of a d-by-n matrix.
Tensor add_col(const Tensor& a, const Tensor& col);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor elem_log(const Tensor& a);
Tensor elem_sin(const Tensor& a);

// Row-wise softmax with per-row max subtraction; rows sum to one and large
// logits cannot overflow. NaN input is a numeric error.
Tensor softmax_rows(const Tensor& a);

enum class Activation { relu, elu };
Activation activation_from_string(const std::string& name);
Tensor activation(const Tensor& a, Activation kind);
Tensor relu(const Tensor& a);
Tensor elu(const Tensor& a);

// Normalizes each column of a d-by-n matrix to zero mean and unit variance
// (denominator sqrt(var + eps)), then scales by gain and shifts by bias,
// both length-d vectors.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps);

// 1-D convolution over the time axis (columns) with left zero padding of
// k - 1, so output position t depends only on inputs t-k+1 .. t. Kernels are
// d_out x d_in x k; a d_out x d_in matrix is accepted as kernel size one.
Tensor causal_conv1d(const Tensor& x, const Tensor& kernels);

// Max pooling over time: window 3, stride 2, padding 1 with -infinity
// padding semantics. Output length is ceil(L / 2).
Tensor maxpool1d_stride2(const Tensor& x);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor gather_cols(const Tensor& a, const std::vector<int>& idx);
// Places column j of a at column idx[j] of a d-by-n output, zero elsewhere.
Tensor scatter_cols(const Tensor& a, const std::vector<int>& idx, int n);
Tensor gather_rows(const Tensor& table, const std::vector<int>& idx);
Tensor reshape(const Tensor& a, std::vector<int> shape);

// ---- gradient oracle ------------------------------------------------------
// f builds a scalar loss on the given tape (watching whatever parameters it
// uses). central_difference_grads perturbs each coordinate of each listed
// parameter by +/- step and returns (f+ - f-) / (2 step). finite_diff_check
// compares those estimates against backward's analytic gradients and returns
// the maximum relative error with denominator max(|analytic|, |numeric|,
// 1e-8). A non-deterministic f is a contract error.
std::vector<std::vector<double>> central_difference_grads(
    const std::function<Tensor(Tape&)>& f, std::vector<Tensor>& params,
    double step);
double finite_diff_check(const std::function<Tensor(Tape&)>& f,
                         std::vector<Tensor>& params, double step = 1e-5);

}  // namespace chronoformer
