#include "chronoformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace chronoformer {

namespace {

long long product(const std::vector<int>& shape) {
  long long n = 1;
  for (int e : shape) n *= e;
  return n;
}

void check_shape(const std::vector<int>& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must not be empty");
  for (int e : shape) {
    if (e <= 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_str(shape));
    }
  }
}

void require_2d(const Tensor& t, const char* what) {
  if (t.ndim() != 2) {
    throw DimensionError(std::string(what) + " must be 2-D, got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " differ");
  }
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  st_ = std::make_shared<detail::Storage>();
  st_->v.assign(static_cast<std::size_t>(product(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)) {
  check_shape(shape_);
  if (static_cast<long long>(values.size()) != product(shape_)) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not fill shape " + shape_str(shape_));
  }
  st_ = std::make_shared<detail::Storage>();
  st_->v = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

int Tensor::numel() const { return static_cast<int>(product(shape_)); }

std::vector<double>& Tensor::values() {
  if (!st_) throw ContractError("use of undefined tensor");
  return st_->v;
}

const std::vector<double>& Tensor::values() const {
  if (!st_) throw ContractError("use of undefined tensor");
  return st_->v;
}

double Tensor::at(int i) const { return st_->v[static_cast<std::size_t>(i)]; }
double Tensor::at(int r, int c) const {
  return st_->v[static_cast<std::size_t>(r) * shape_[1] + c];
}
double Tensor::at(int a, int b, int c) const {
  return st_->v[(static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c];
}
double& Tensor::at(int i) { return st_->v[static_cast<std::size_t>(i)]; }
double& Tensor::at(int r, int c) {
  return st_->v[static_cast<std::size_t>(r) * shape_[1] + c];
}
double& Tensor::at(int a, int b, int c) {
  return st_->v[(static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c];
}

bool Tensor::requires_grad() const { return st_ && st_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!st_) throw ContractError("use of undefined tensor");
  st_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return st_ && !st_->g.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) {
    throw ContractError("tensor has no gradient; run backward first");
  }
  return st_->g;
}

std::vector<double>& Tensor::grad_mut() {
  if (!has_grad()) {
    throw ContractError("tensor has no gradient; run backward first");
  }
  return st_->g;
}

void Tensor::zero_grad() {
  if (st_) st_->g.clear();
}

Tensor Tensor::clone() const {
  if (!st_) return Tensor();
  return Tensor(shape_, st_->v);
}

// ---- Tape -------------------------------------------------------------------

int Tape::add_node(const Tensor& t, bool leaf) {
  NodeInfo info;
  info.numel = t.numel();
  info.st = t.st_;
  info.leaf = leaf;
  nodes_.push_back(std::move(info));
  grads_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::watch(const Tensor& t) {
  if (!t.defined()) throw ContractError("cannot watch an undefined tensor");
  if (t.tape_ != nullptr && t.tape_ != this) {
    throw ContractError("tensor is already attached to another record");
  }
  Tensor handle = t;
  auto it = watched_.find(t.st_.get());
  if (it != watched_.end()) {
    handle.node_ = it->second;
  } else {
    handle.node_ = add_node(t, true);
    watched_.emplace(t.st_.get(), handle.node_);
  }
  handle.tape_ = this;
  return handle;
}

Tensor Tape::attach(Tensor value) {
  value.tape_ = this;
  value.node_ = add_node(value, false);
  return value;
}

int Tape::input_node(const Tensor& t) const {
  if (t.tape_ == nullptr) return -1;
  if (t.tape_ != this) {
    throw ContractError("input tensor belongs to a different record");
  }
  return t.node_;
}

void Tape::push(const char* op, std::function<void(Tape&)> back) {
  entries_.push_back(Entry{op, std::move(back)});
}

bool Tape::has_grad(int node) const {
  return node >= 0 && !grads_[static_cast<std::size_t>(node)].empty();
}

const std::vector<double>& Tape::grad_at(int node) const {
  return grads_[static_cast<std::size_t>(node)];
}

std::vector<double>& Tape::grad_buf(int node) {
  auto& g = grads_[static_cast<std::size_t>(node)];
  if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[node].numel), 0.0);
  return g;
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape_ != this || loss.node_ < 0) {
    throw ContractError("backward: loss is not recorded on this tape");
  }
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  }
  grad_buf(loss.node_)[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->back(*this);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const NodeInfo& n = nodes_[i];
    if (!n.leaf || !n.st->requires_grad) continue;
    const auto& g = grads_[i];
    if (g.empty()) continue;
    if (n.st->g.empty()) n.st->g.assign(g.size(), 0.0);
    for (std::size_t j = 0; j < g.size(); ++j) n.st->g[j] += g[j];
  }
}

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (t->tape() == nullptr) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw ContractError("operation mixes tensors from two records");
    }
    tape = t->tape();
  }
  return tape;
}

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul lhs");
  require_2d(b, "matmul rhs");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (int i = 0; i < m; ++i) {
      const double* arow = av + static_cast<std::size_t>(i) * k;
      double* orow = ov + static_cast<std::size_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        const double c = arow[kk];
        const double* brow = bv + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) orow[j] += c * brow[j];
      }
    }
  }
  if (Tape* tp = common_tape({&a, &b})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), bn = tp->input_node(b);
    const int on = out.node();
    tp->push("matmul", [a, b, an, bn, on, m, k, n](Tape& t) {
      if (!t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      if (an >= 0) {
        std::vector<double>& ga = t.grad_buf(an);
        const double* bv = b.values().data();
        for (int i = 0; i < m; ++i) {
          const double* grow = g.data() + static_cast<std::size_t>(i) * n;
          double* garow = ga.data() + static_cast<std::size_t>(i) * k;
          for (int kk = 0; kk < k; ++kk) {
            const double* brow = bv + static_cast<std::size_t>(kk) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            garow[kk] += acc;
          }
        }
      }
      if (bn >= 0) {
        std::vector<double>& gb = t.grad_buf(bn);
        const double* av = a.values().data();
        for (int i = 0; i < m; ++i) {
          const double* arow = av + static_cast<std::size_t>(i) * k;
          const double* grow = g.data() + static_cast<std::size_t>(i) * n;
          for (int kk = 0; kk < k; ++kk) {
            const double c = arow[kk];
            double* gbrow = gb.data() + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += c * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose input");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  if (Tape* tp = common_tape({&a})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), on = out.node();
    tp->push("transpose", [an, on, m, n](Tape& t) {
      if (an < 0 || !t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      std::vector<double>& ga = t.grad_buf(an);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i)
          ga[static_cast<std::size_t>(i) * n + j] +=
              g[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

namespace {

// Elementwise binary op with per-input gradient weights computed forward.
template <typename Fwd, typename BackA, typename BackB>
Tensor elementwise_binary(const char* name, const Tensor& a, const Tensor& b,
                          Fwd fwd, BackA back_a, BackB back_b) {
  require_same_shape(a, b, name);
  Tensor out(a.shape());
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i)
    out.values()[i] = fwd(a.values()[i], b.values()[i]);
  if (Tape* tp = common_tape({&a, &b})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), bn = tp->input_node(b);
    const int on = out.node();
    tp->push(name, [a, b, an, bn, on, n, back_a, back_b](Tape& t) {
      if (!t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      if (an >= 0) {
        std::vector<double>& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < n; ++i)
          ga[i] += g[i] * back_a(a.values()[i], b.values()[i]);
      }
      if (bn >= 0) {
        std::vector<double>& gb = t.grad_buf(bn);
        for (std::size_t i = 0; i < n; ++i)
          gb[i] += g[i] * back_b(a.values()[i], b.values()[i]);
      }
    });
  }
  return out;
}

template <typename Fwd, typename Back>
Tensor elementwise_unary(const char* name, const Tensor& a, Fwd fwd,
                         Back back) {
  Tensor out(a.shape());
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = fwd(a.values()[i]);
  if (Tape* tp = common_tape({&a})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), on = out.node();
    tp->push(name, [a, an, on, n, back](Tape& t) {
      if (an < 0 || !t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      std::vector<double>& ga = t.grad_buf(an);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * back(a.values()[i]);
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double c) {
  return elementwise_unary(
      "scale", a, [c](double x) { return x * c; },
      [c](double) { return c; });
}

Tensor scalar_mul(const Tensor& alpha, const Tensor& a) {
  if (alpha.numel() != 1) {
    throw DimensionError("scalar_mul: alpha must hold one value, got " +
                         shape_str(alpha.shape()));
  }
  const double av = alpha.at(0);
  Tensor out(a.shape());
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = av * a.values()[i];
  if (Tape* tp = common_tape({&alpha, &a})) {
    out = tp->attach(std::move(out));
    const int aln = tp->input_node(alpha), an = tp->input_node(a);
    const int on = out.node();
    tp->push("scalar_mul", [alpha, a, aln, an, on, n, av](Tape& t) {
      if (!t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      if (aln >= 0) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * a.values()[i];
        t.grad_buf(aln)[0] += acc;
      }
      if (an >= 0) {
        std::vector<double>& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * av;
      }
    });
  }
  return out;
}

Tensor add_col(const Tensor& a, const Tensor& col) {
  require_2d(a, "add_col input");
  if (col.numel() != a.dim(0)) {
    throw DimensionError("add_col: column length " + shape_str(col.shape()) +
                         " does not match rows of " + shape_str(a.shape()));
  }
  const int d = a.dim(0), n = a.dim(1);
  Tensor out({d, n});
  for (int r = 0; r < d; ++r) {
    const double c = col.at(r);
    for (int j = 0; j < n; ++j) out.at(r, j) = a.at(r, j) + c;
  }
  if (Tape* tp = common_tape({&a, &col})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), cn = tp->input_node(col);
    const int on = out.node();
    tp->push("add_col", [an, cn, on, d, n](Tape& t) {
      if (!t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      if (an >= 0) {
        std::vector<double>& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (cn >= 0) {
        std::vector<double>& gc = t.grad_buf(cn);
        for (int r = 0; r < d; ++r) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j)
            acc += g[static_cast<std::size_t>(r) * n + j];
          gc[static_cast<std::size_t>(r)] += acc;
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  Tensor out = Tensor::scalar(acc);
  if (Tape* tp = common_tape({&a})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), on = out.node();
    const std::size_t n = a.values().size();
    tp->push("sum_all", [an, on, n](Tape& t) {
      if (an < 0 || !t.has_grad(on)) return;
      const double g = t.grad_at(on)[0];
      std::vector<double>& ga = t.grad_buf(an);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor elem_log(const Tensor& a) {
  // Inputs are clamped away from zero so finite inputs yield finite logs.
  return elementwise_unary(
      "elem_log", a,
      [](double x) { return std::log(std::max(x, 1e-300)); },
      [](double x) { return 1.0 / std::max(x, 1e-300); });
}

Tensor elem_sin(const Tensor& a) {
  return elementwise_unary(
      "elem_sin", a, [](double x) { return std::sin(x); },
      [](double x) { return std::cos(x); });
}

Tensor softmax_rows(const Tensor& a) {
  require_2d(a, "softmax_rows input");
  const int m = a.dim(0), n = a.dim(1);
  for (double x : a.values()) {
    if (std::isnan(x)) throw NumericError("softmax_rows: NaN in input");
  }
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = a.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(a.at(i, j) - mx);
      out.at(i, j) = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < n; ++j) out.at(i, j) *= inv;
  }
  if (Tape* tp = common_tape({&a})) {
    Tensor w = out.clone();  // saved probabilities for the backward pass
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), on = out.node();
    tp->push("softmax_rows", [w, an, on, m, n](Tape& t) {
      if (an < 0 || !t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      std::vector<double>& ga = t.grad_buf(an);
      for (int i = 0; i < m; ++i) {
        const double* wrow = w.values().data() + static_cast<std::size_t>(i) * n;
        const double* grow = g.data() + static_cast<std::size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += wrow[j] * grow[j];
        double* garow = ga.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) garow[j] += wrow[j] * (grow[j] - dot);
      }
    });
  }
  return out;
}

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "elu") return Activation::elu;
  throw ConfigError("unknown activation kind '" + name + "'");
}

Tensor activation(const Tensor& a, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return elementwise_unary(
          "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
          [](double x) { return x > 0.0 ? 1.0 : 0.0; });
    case Activation::elu:
      return elementwise_unary(
          "elu", a,
          [](double x) { return x > 0.0 ? x : std::expm1(x); },
          [](double x) { return x > 0.0 ? 1.0 : std::exp(x); });
  }
  throw ConfigError("unknown activation kind");
}

Tensor relu(const Tensor& a) { return activation(a, Activation::relu); }
Tensor elu(const Tensor& a) { return activation(a, Activation::elu); }

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require_2d(a, "layer_norm input");
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  const int d = a.dim(0), n = a.dim(1);
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) +
                         " / bias " + shape_str(bias.shape()) +
                         " must have length " + std::to_string(d));
  }
  Tensor out({d, n});
  Tensor norm({d, n});     // saved normalized values
  std::vector<double> inv_std(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    double mu = 0.0;
    for (int r = 0; r < d; ++r) mu += a.at(r, j);
    mu /= d;
    double var = 0.0;
    for (int r = 0; r < d; ++r) {
      const double c = a.at(r, j) - mu;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(j)] = inv;
    for (int r = 0; r < d; ++r) {
      const double y = (a.at(r, j) - mu) * inv;
      norm.at(r, j) = y;
      out.at(r, j) = gain.at(r) * y + bias.at(r);
    }
  }
  if (Tape* tp = common_tape({&a, &gain, &bias})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a);
    const int gn = tp->input_node(gain);
    const int bn = tp->input_node(bias);
    const int on = out.node();
    tp->push("layer_norm",
             [norm, gain, inv_std, an, gn, bn, on, d, n](Tape& t) {
      if (!t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      if (an >= 0) {
        std::vector<double>& ga = t.grad_buf(an);
        for (int j = 0; j < n; ++j) {
          double sum_gd = 0.0, sum_gdy = 0.0;
          for (int r = 0; r < d; ++r) {
            const double gd = g[static_cast<std::size_t>(r) * n + j] * gain.at(r);
            sum_gd += gd;
            sum_gdy += gd * norm.at(r, j);
          }
          const double inv = inv_std[static_cast<std::size_t>(j)];
          for (int r = 0; r < d; ++r) {
            const double gd = g[static_cast<std::size_t>(r) * n + j] * gain.at(r);
            ga[static_cast<std::size_t>(r) * n + j] +=
                inv * (gd - sum_gd / d - norm.at(r, j) * sum_gdy / d);
          }
        }
      }
      if (gn >= 0) {
        std::vector<double>& gg = t.grad_buf(gn);
        for (int r = 0; r < d; ++r) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j)
            acc += g[static_cast<std::size_t>(r) * n + j] * norm.at(r, j);
          gg[static_cast<std::size_t>(r)] += acc;
        }
      }
      if (bn >= 0) {
        std::vector<double>& gb = t.grad_buf(bn);
        for (int r = 0; r < d; ++r) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j)
            acc += g[static_cast<std::size_t>(r) * n + j];
          gb[static_cast<std::size_t>(r)] += acc;
        }
      }
    });
  }
  return out;
}

Tensor causal_conv1d(const Tensor& x, const Tensor& kernels) {
  require_2d(x, "causal_conv1d input");
  Tensor ker = kernels;
  if (ker.ndim() == 2) {
    ker = reshape(kernels, {kernels.dim(0), kernels.dim(1), 1});
  }
  if (ker.ndim() != 3) {
    throw DimensionError("causal_conv1d: kernels must be 3-D, got " +
                         shape_str(kernels.shape()));
  }
  const int d_out = ker.dim(0), d_in = ker.dim(1), k = ker.dim(2);
  if (k <= 0) throw ConfigError("causal_conv1d: kernel size must be positive");
  if (d_in != x.dim(0)) {
    throw DimensionError("causal_conv1d: input channels " +
                         shape_str(x.shape()) + " do not match kernels " +
                         shape_str(ker.shape()));
  }
  const int L = x.dim(1);
  Tensor out({d_out, L});
  for (int o = 0; o < d_out; ++o) {
    for (int t = 0; t < L; ++t) {
      double acc = 0.0;
      for (int i = 0; i < d_in; ++i) {
        for (int tap = 0; tap < k; ++tap) {
          const int src = t - (k - 1) + tap;
          if (src < 0) continue;  // left zero padding
          acc += ker.at(o, i, tap) * x.at(i, src);
        }
      }
      out.at(o, t) = acc;
    }
  }
  if (Tape* tp = common_tape({&x, &ker})) {
    out = tp->attach(std::move(out));
    const int xn = tp->input_node(x), kn = tp->input_node(ker);
    const int on = out.node();
    Tensor xs = x, ks = ker;
    tp->push("causal_conv1d",
             [xs, ks, xn, kn, on, d_out, d_in, k, L](Tape& t) {
      if (!t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      if (xn >= 0) {
        std::vector<double>& gx = t.grad_buf(xn);
        for (int o = 0; o < d_out; ++o) {
          for (int tt = 0; tt < L; ++tt) {
            const double go = g[static_cast<std::size_t>(o) * L + tt];
            for (int i = 0; i < d_in; ++i) {
              for (int tap = 0; tap < k; ++tap) {
                const int src = tt - (k - 1) + tap;
                if (src < 0) continue;
                gx[static_cast<std::size_t>(i) * L + src] +=
                    go * ks.at(o, i, tap);
              }
            }
          }
        }
      }
      if (kn >= 0) {
        std::vector<double>& gk = t.grad_buf(kn);
        for (int o = 0; o < d_out; ++o) {
          for (int tt = 0; tt < L; ++tt) {
            const double go = g[static_cast<std::size_t>(o) * L + tt];
            for (int i = 0; i < d_in; ++i) {
              for (int tap = 0; tap < k; ++tap) {
                const int src = tt - (k - 1) + tap;
                if (src < 0) continue;
                gk[(static_cast<std::size_t>(o) * d_in + i) * k + tap] +=
                    go * xs.at(i, src);
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor maxpool1d_stride2(const Tensor& x) {
  require_2d(x, "maxpool1d_stride2 input");
  const int d = x.dim(0), L = x.dim(1);
  const int out_len = (L + 1) / 2;
  Tensor out({d, out_len});
  // winner[r][j]: input column that supplied the max (first max on ties)
  std::vector<int> winner(static_cast<std::size_t>(d) * out_len);
  for (int r = 0; r < d; ++r) {
    for (int j = 0; j < out_len; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      int best_t = -1;
      for (int tap = -1; tap <= 1; ++tap) {
        const int src = 2 * j + tap;
        if (src < 0 || src >= L) continue;  // -infinity padding never wins
        const double v = x.at(r, src);
        if (v > best) {
          best = v;
          best_t = src;
        }
      }
      out.at(r, j) = best;
      winner[static_cast<std::size_t>(r) * out_len + j] = best_t;
    }
  }
  if (Tape* tp = common_tape({&x})) {
    out = tp->attach(std::move(out));
    const int xn = tp->input_node(x), on = out.node();
    tp->push("maxpool1d_stride2", [winner, xn, on, d, L, out_len](Tape& t) {
      if (xn < 0 || !t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      std::vector<double>& gx = t.grad_buf(xn);
      for (int r = 0; r < d; ++r) {
        for (int j = 0; j < out_len; ++j) {
          const int src = winner[static_cast<std::size_t>(r) * out_len + j];
          gx[static_cast<std::size_t>(r) * L + src] +=
              g[static_cast<std::size_t>(r) * out_len + j];
        }
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const int n = parts[0].dim(1);
  int rows = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows input");
    if (p.dim(1) != n) {
      throw DimensionError("concat_rows: column counts differ, " +
                           shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  Tensor out({rows, n});
  int row0 = 0;
  for (const Tensor& p : parts) {
    for (int r = 0; r < p.dim(0); ++r)
      for (int j = 0; j < n; ++j) out.at(row0 + r, j) = p.at(r, j);
    row0 += p.dim(0);
  }
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  Tape* tp = nullptr;
  for (const Tensor* p : ptrs) {
    Tape* cand = common_tape({p});
    if (cand) {
      if (tp && tp != cand)
        throw ContractError("concat_rows mixes tensors from two records");
      tp = cand;
    }
  }
  if (tp) {
    out = tp->attach(std::move(out));
    std::vector<int> in_nodes, in_rows;
    for (const Tensor& p : parts) {
      in_nodes.push_back(tp->input_node(p));
      in_rows.push_back(p.dim(0));
    }
    const int on = out.node();
    tp->push("concat_rows", [in_nodes, in_rows, on, n](Tape& t) {
      if (!t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      int row0 = 0;
      for (std::size_t p = 0; p < in_nodes.size(); ++p) {
        if (in_nodes[p] >= 0) {
          std::vector<double>& gp = t.grad_buf(in_nodes[p]);
          for (int r = 0; r < in_rows[p]; ++r)
            for (int j = 0; j < n; ++j)
              gp[static_cast<std::size_t>(r) * n + j] +=
                  g[static_cast<std::size_t>(row0 + r) * n + j];
        }
        row0 += in_rows[p];
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const int d = parts[0].dim(0);
  int cols = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols input");
    if (p.dim(0) != d) {
      throw DimensionError("concat_cols: row counts differ, " +
                           shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    cols += p.dim(1);
  }
  Tensor out({d, cols});
  int col0 = 0;
  for (const Tensor& p : parts) {
    for (int r = 0; r < d; ++r)
      for (int j = 0; j < p.dim(1); ++j) out.at(r, col0 + j) = p.at(r, j);
    col0 += p.dim(1);
  }
  Tape* tp = nullptr;
  for (const Tensor& p : parts) {
    Tape* cand = common_tape({&p});
    if (cand) {
      if (tp && tp != cand)
        throw ContractError("concat_cols mixes tensors from two records");
      tp = cand;
    }
  }
  if (tp) {
    out = tp->attach(std::move(out));
    std::vector<int> in_nodes, in_cols;
    for (const Tensor& p : parts) {
      in_nodes.push_back(tp->input_node(p));
      in_cols.push_back(p.dim(1));
    }
    const int on = out.node();
    tp->push("concat_cols", [in_nodes, in_cols, on, d, cols](Tape& t) {
      if (!t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      int col0 = 0;
      for (std::size_t p = 0; p < in_nodes.size(); ++p) {
        if (in_nodes[p] >= 0) {
          std::vector<double>& gp = t.grad_buf(in_nodes[p]);
          for (int r = 0; r < d; ++r)
            for (int j = 0; j < in_cols[p]; ++j)
              gp[static_cast<std::size_t>(r) * in_cols[p] + j] +=
                  g[static_cast<std::size_t>(r) * cols + col0 + j];
        }
        col0 += in_cols[p];
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int start, int len) {
  require_2d(a, "slice_cols input");
  const int d = a.dim(0), n = a.dim(1);
  if (start < 0 || len <= 0 || start + len > n) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " +
                         std::to_string(n) + " columns");
  }
  Tensor out({d, len});
  for (int r = 0; r < d; ++r)
    for (int j = 0; j < len; ++j) out.at(r, j) = a.at(r, start + j);
  if (Tape* tp = common_tape({&a})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), on = out.node();
    tp->push("slice_cols", [an, on, d, n, start, len](Tape& t) {
      if (an < 0 || !t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      std::vector<double>& ga = t.grad_buf(an);
      for (int r = 0; r < d; ++r)
        for (int j = 0; j < len; ++j)
          ga[static_cast<std::size_t>(r) * n + start + j] +=
              g[static_cast<std::size_t>(r) * len + j];
    });
  }
  return out;
}

Tensor gather_cols(const Tensor& a, const std::vector<int>& idx) {
  require_2d(a, "gather_cols input");
  const int d = a.dim(0), n = a.dim(1);
  if (idx.empty()) throw ContractError("gather_cols: empty index list");
  for (int j : idx) {
    if (j < 0 || j >= n) {
      throw DimensionError("gather_cols: index " + std::to_string(j) +
                           " out of " + std::to_string(n) + " columns");
    }
  }
  const int m = static_cast<int>(idx.size());
  Tensor out({d, m});
  for (int r = 0; r < d; ++r)
    for (int j = 0; j < m; ++j) out.at(r, j) = a.at(r, idx[j]);
  if (Tape* tp = common_tape({&a})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), on = out.node();
    tp->push("gather_cols", [idx, an, on, d, n, m](Tape& t) {
      if (an < 0 || !t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      std::vector<double>& ga = t.grad_buf(an);
      for (int r = 0; r < d; ++r)
        for (int j = 0; j < m; ++j)
          ga[static_cast<std::size_t>(r) * n + idx[j]] +=
              g[static_cast<std::size_t>(r) * m + j];
    });
  }
  return out;
}

Tensor scatter_cols(const Tensor& a, const std::vector<int>& idx, int n) {
  require_2d(a, "scatter_cols input");
  const int d = a.dim(0), m = a.dim(1);
  if (static_cast<int>(idx.size()) != m) {
    throw DimensionError("scatter_cols: " + std::to_string(idx.size()) +
                         " indices for " + std::to_string(m) + " columns");
  }
  for (int j : idx) {
    if (j < 0 || j >= n) {
      throw DimensionError("scatter_cols: index " + std::to_string(j) +
                           " out of " + std::to_string(n) + " columns");
    }
  }
  Tensor out({d, n});
  for (int r = 0; r < d; ++r)
    for (int j = 0; j < m; ++j) out.at(r, idx[j]) = a.at(r, j);
  if (Tape* tp = common_tape({&a})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), on = out.node();
    tp->push("scatter_cols", [idx, an, on, d, n, m](Tape& t) {
      if (an < 0 || !t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      std::vector<double>& ga = t.grad_buf(an);
      for (int r = 0; r < d; ++r)
        for (int j = 0; j < m; ++j)
          ga[static_cast<std::size_t>(r) * m + j] +=
              g[static_cast<std::size_t>(r) * n + idx[j]];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
  require_2d(table, "gather_rows table");
  const int rows = table.dim(0), c = table.dim(1);
  if (idx.empty()) throw ContractError("gather_rows: empty index list");
  for (int r : idx) {
    if (r < 0 || r >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(r) +
                           " out of " + std::to_string(rows));
    }
  }
  const int m = static_cast<int>(idx.size());
  Tensor out({m, c});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = table.at(idx[i], j);
  if (Tape* tp = common_tape({&table})) {
    out = tp->attach(std::move(out));
    const int tn = tp->input_node(table), on = out.node();
    tp->push("gather_rows", [idx, tn, on, c, m](Tape& t) {
      if (tn < 0 || !t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      std::vector<double>& gt = t.grad_buf(tn);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j)
          gt[static_cast<std::size_t>(idx[i]) * c + j] +=
              g[static_cast<std::size_t>(i) * c + j];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  check_shape(shape);
  if (product(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) +
                         " cannot become " + shape_str(shape));
  }
  Tensor out(shape, a.values());
  if (Tape* tp = common_tape({&a})) {
    out = tp->attach(std::move(out));
    const int an = tp->input_node(a), on = out.node();
    tp->push("reshape", [an, on](Tape& t) {
      if (an < 0 || !t.has_grad(on)) return;
      const std::vector<double>& g = t.grad_at(on);
      std::vector<double>& ga = t.grad_buf(an);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

// ---- gradient oracle --------------------------------------------------------

namespace {

double eval_scalar(const std::function<Tensor(Tape&)>& f) {
  Tape tape;
  Tensor loss = f(tape);
  if (loss.numel() != 1) {
    throw ContractError("finite differences need a scalar function, got " +
                        shape_str(loss.shape()));
  }
  return loss.at(0);
}

}  // namespace

std::vector<std::vector<double>> central_difference_grads(
    const std::function<Tensor(Tape&)>& f, std::vector<Tensor>& params,
    double step) {
  if (step <= 0.0) throw ContractError("finite difference step must be positive");
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (Tensor& p : params) {
    std::vector<double> g(p.values().size(), 0.0);
    for (std::size_t i = 0; i < p.values().size(); ++i) {
      const double saved = p.values()[i];
      p.values()[i] = saved + step;
      const double fp = eval_scalar(f);
      p.values()[i] = saved - step;
      const double fm = eval_scalar(f);
      p.values()[i] = saved;
      g[i] = (fp - fm) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double finite_diff_check(const std::function<Tensor(Tape&)>& f,
                         std::vector<Tensor>& params, double step) {
  const double v1 = eval_scalar(f);
  const double v2 = eval_scalar(f);
  if (std::memcmp(&v1, &v2, sizeof(double)) != 0) {
    throw ContractError(
        "finite_diff_check: function is not deterministic; fix its seed");
  }
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params) {
    if (!p.has_grad()) {
      throw ContractError(
          "finite_diff_check: a parameter received no gradient; "
          "did f watch it on the tape?");
    }
    analytic.push_back(p.grad());
  }
  const std::vector<std::vector<double>> numeric =
      central_difference_grads(f, params, step);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < analytic[p].size(); ++i) {
      const double a = analytic[p][i];
      const double nmr = numeric[p][i];
      const double denom = std::max({std::fabs(a), std::fabs(nmr), 1e-8});
      worst = std::max(worst, std::fabs(a - nmr) / denom);
    }
  }
  return worst;
}

}  // namespace chronoformer
