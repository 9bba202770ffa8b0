#include "chronoformer/training.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "chronoformer/error.hpp"
#include "chronoformer/rng.hpp"

namespace chronoformer {

Tensor xavier_init(std::vector<int> shape, int fan_in, int fan_out,
                   std::uint64_t seed) {
  if (fan_in < 1 || fan_out < 1) {
    throw ConfigError("xavier fans must be at least 1");
  }
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.values()) v = rng.uniform(-a, a);
  return t;
}

void Schedule::validate() const {
  if (warmup_steps < 1) throw ConfigError("warmup steps must be at least 1");
  if (!(base_rate > 0.0)) throw ConfigError("base learning rate must be positive");
}

double warmup_lr(long long n, const Schedule& sched) {
  sched.validate();
  if (n < 1) throw ContractError("learning-rate steps are 1-based");
  const double nn = static_cast<double>(n);
  const double N = static_cast<double>(sched.warmup_steps);
  return sched.base_rate * std::min(nn / N, std::sqrt(N / nn));
}

double global_grad_norm(const std::vector<NamedParam>& params) {
  double sq = 0.0;
  for (const NamedParam& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::vector<NamedParam>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm <= max_norm) return 1.0;
  const double scale = max_norm / norm;
  for (NamedParam& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double& g : p.tensor.grad_mut()) g *= scale;
  }
  return scale;
}

void OptimState::init(const std::vector<NamedParam>& params) {
  step = 0;
  m.assign(params.size(), {});
  v.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(static_cast<std::size_t>(params[i].tensor.numel()), 0.0);
    v[i].assign(static_cast<std::size_t>(params[i].tensor.numel()), 0.0);
  }
}

void adam_step(std::vector<NamedParam>& params, OptimState& opt, double lr) {
  if (opt.m.size() != params.size()) {
    throw ContractError("optimizer state covers " +
                        std::to_string(opt.m.size()) + " parameters, not " +
                        std::to_string(params.size()));
  }
  for (const NamedParam& p : params) {
    if (!p.tensor.has_grad()) {
      throw ContractError("parameter '" + p.name +
                          "' has no gradient; run backward before stepping");
    }
  }
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double>& vals = params[i].tensor.values();
    const std::vector<double>& g = params[i].tensor.grad();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      opt.m[i][j] = opt.beta1 * opt.m[i][j] + (1.0 - opt.beta1) * g[j];
      opt.v[i][j] = opt.beta2 * opt.v[i][j] + (1.0 - opt.beta2) * g[j] * g[j];
      const double mhat = opt.m[i][j] / bc1;
      const double vhat = opt.v[i][j] / bc2;
      vals[j] -= lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
    params[i].tensor.zero_grad();
  }
}

void TrainConfig::validate() const {
  schedule.validate();
  if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
}

TrainState::TrainState(const ModelConfig& mc, const TrainConfig& tc)
    : model(mc), cfg(tc) {
  cfg.validate();
  for (NamedParam& p : model.params()) p.tensor.set_requires_grad(true);
  opt.init(model.params());
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  Tensor diff = sub(pred, target);
  return mean_all(mul(diff, diff));
}

Tensor nll_loss(const Tensor& probs, int true_class) {
  if (probs.ndim() != 2 || probs.dim(0) != 1) {
    throw DimensionError("class probabilities must be a 1 x C row");
  }
  if (true_class < 0 || true_class >= probs.dim(1)) {
    throw DataError("class label " + std::to_string(true_class) +
                    " outside 0.." + std::to_string(probs.dim(1) - 1));
  }
  Tensor picked = gather_cols(probs, {true_class});
  return scale(sum_all(elem_log(picked)), -1.0);
}

double train_step(TrainState& st, const std::vector<ModelInput>& batch) {
  if (batch.empty()) throw ContractError("train_step needs a non-empty batch");
  const long long n = st.opt.step + 1;
  const double lr = warmup_lr(n, st.cfg.schedule);

  for (NamedParam& p : st.model.params()) p.tensor.zero_grad();
  Tape tape;
  RunOptions opt;
  opt.tape = &tape;
  Tensor total;
  for (const ModelInput& in : batch) {
    Tensor pred = st.model.forward(in, DecodeMode::teacher_forced, opt);
    Tensor loss = st.model.config().head == HeadKind::classification
                      ? nll_loss(pred, static_cast<int>(in.targets.at(0)))
                      : mse_loss(pred, in.targets);
    total = total.defined() ? add(total, loss) : loss;
  }
  Tensor mean = scale(total, 1.0 / static_cast<double>(batch.size()));
  const double loss_value = mean.at(0);
  if (!std::isfinite(loss_value)) {
    throw DivergenceError("training diverged at step " + std::to_string(n) +
                          ": loss is not finite");
  }
  tape.backward(mean);

  const double grad_norm = global_grad_norm(st.model.params());
  const double clip_scale = clip_grad_norm(st.model.params(), st.cfg.clip_norm);
  adam_step(st.model.params(), st.opt, lr);

  st.loss_history.push_back(loss_value);
  st.logs.push_back({n, lr, loss_value, grad_norm, clip_scale});
  return loss_value;
}

Tensor forecast(Model& model, const ModelInput& in, DecodeMode mode) {
  if (model.config().horizon < 1) {
    throw ContractError("forecast horizon must be at least 1");
  }
  if (mode == DecodeMode::teacher_forced) {
    throw ConfigError("forecasting runs one_shot or autoregressive");
  }
  RunOptions opt;
  return model.forward(in, mode, opt);
}

void write_train_log(const std::vector<StepLog>& logs, std::ostream& os) {
  os << "step,lr,loss,grad_norm,clip_scale\n";
  char buf[160];
  for (const StepLog& l : logs) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g\n", l.step,
                  l.lr, l.loss, l.grad_norm, l.clip_scale);
    os << buf;
  }
}

}  // namespace chronoformer
