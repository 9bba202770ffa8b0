// Optimization: Xavier initialization, warm-up learning-rate schedule,
// global-norm gradient clipping, bias-corrected Adam, the train-step loop
// and forecasting entry points.
#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "chronoformer/blocks.hpp"
#include "chronoformer/tensor.hpp"

namespace chronoformer {

// Uniform on [-a, a], a = sqrt(6 / (fan_in + fan_out)), deterministic per
// seed.
Tensor xavier_init(std::vector<int> shape, int fan_in, int fan_out,
                   std::uint64_t seed);

struct Schedule {
  int warmup_steps = 400;  // N; 1 disables the ramp
  double base_rate = 1e-3;
  void validate() const;
};

// eta0 * min(n / N, sqrt(N / n)): linear ramp to eta0 at n = N, then
// inverse-square-root decay. Steps are 1-based.
double warmup_lr(long long n, const Schedule& sched);

// Scales every gradient by max_norm / g when the global L2 norm g exceeds
// max_norm; returns the applied scale (1 when untouched). Parameters
// without gradients are skipped.
double clip_grad_norm(std::vector<NamedParam>& params, double max_norm);

// Global gradient L2 norm across all parameters carrying gradients.
double global_grad_norm(const std::vector<NamedParam>& params);

struct OptimState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long step = 0;
  std::vector<std::vector<double>> m, v;  // moment slots, one per parameter

  void init(const std::vector<NamedParam>& params);
};

// One bias-corrected Adam update over every parameter. All parameters must
// carry gradients; gradients are cleared afterwards.
void adam_step(std::vector<NamedParam>& params, OptimState& opt, double lr);

struct TrainConfig {
  Schedule schedule;
  double clip_norm = 1.0;
  int batch_size = 16;
  std::uint64_t seed = 1;
  void validate() const;
};

// One CSV row per optimization step.
struct StepLog {
  long long step = 0;
  double lr = 0, loss = 0, grad_norm = 0, clip_scale = 1;
};

struct TrainState {
  Model model;
  OptimState opt;
  TrainConfig cfg;
  std::vector<double> loss_history;
  std::vector<StepLog> logs;

  TrainState(const ModelConfig& mc, const TrainConfig& tc);
};

// Mean loss over the batch (squared error for regression, negative log
// likelihood for classification), one backward pass, clip, warm-up rate,
// Adam. A non-finite loss raises a divergence error naming the step.
double train_step(TrainState& st, const std::vector<ModelInput>& batch);

// Squared-error mean over all entries; inputs must share shape.
Tensor mse_loss(const Tensor& pred, const Tensor& target);
// Negative log probability of the true class; probs is 1 x C.
Tensor nll_loss(const Tensor& probs, int true_class);

// H predicted steps, output_width x H. Autoregressive mode feeds each
// prediction back; one_shot emits everything in a single pass.
Tensor forecast(Model& model, const ModelInput& in, DecodeMode mode);

void write_train_log(const std::vector<StepLog>& logs, std::ostream& os);

}  // namespace chronoformer
