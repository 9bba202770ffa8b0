// Initialization, schedule, clipping, Adam, the train-step loop and the
// forecasting modes.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "chronoformer/rng.hpp"
#include "chronoformer/training.hpp"

using namespace chronoformer;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) x = rng.uniform(-1.0, 1.0);
  return t;
}

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.block.d_model = 8;
  mc.block.heads = 2;
  mc.block.d_ff = 16;
  mc.n_encoders = 1;
  mc.n_decoders = 1;
  mc.input_width = 1;
  mc.output_width = 1;
  mc.window = 6;
  mc.horizon = 2;
  mc.seed = 5;
  return mc;
}

ModelInput sine_window(const ModelConfig& mc) {
  ModelInput in;
  in.x = Tensor({1, mc.window});
  for (int j = 0; j < mc.window; ++j)
    in.x.at(0, j) = std::sin(0.4 * j);
  in.start = Tensor({1, 1}, {std::sin(0.4 * (mc.window - 1))});
  in.targets = Tensor({1, mc.horizon});
  for (int h = 0; h < mc.horizon; ++h)
    in.targets.at(0, h) = std::sin(0.4 * (mc.window + h));
  return in;
}

}  // namespace

TEST_CASE("xavier draws stay inside the fan bound") {
  const double a = std::sqrt(6.0 / (20 + 30));
  Tensor t = xavier_init({20, 30}, 20, 30, 9);
  for (double v : t.values()) {
    CHECK(v >= -a);
    CHECK(v <= a);
  }
}

TEST_CASE("xavier sample variance tracks 2 / (fan_in + fan_out)") {
  Tensor t = xavier_init({100000}, 3, 3, 123);
  double mean = 0.0;
  for (double v : t.values()) mean += v;
  mean /= t.numel();
  double var = 0.0;
  for (double v : t.values()) var += (v - mean) * (v - mean);
  var /= t.numel();
  const double want = 2.0 / 6.0;
  CHECK(var == doctest::Approx(want).epsilon(0.05));
}

TEST_CASE("xavier is deterministic per seed and rejects bad fans") {
  Tensor a = xavier_init({4, 5}, 4, 5, 77);
  Tensor b = xavier_init({4, 5}, 4, 5, 77);
  for (std::size_t i = 0; i < a.values().size(); ++i)
    CHECK(a.values()[i] == b.values()[i]);
  Tensor c = xavier_init({4, 5}, 4, 5, 78);
  bool all_same = true;
  for (std::size_t i = 0; i < a.values().size(); ++i)
    if (a.values()[i] != c.values()[i]) all_same = false;
  CHECK_FALSE(all_same);
  CHECK_THROWS_AS(xavier_init({2, 2}, 0, 4, 1), ConfigError);
}

TEST_CASE("warm-up schedule ramps linearly then decays as inverse sqrt") {
  Schedule s{400, 0.01};
  CHECK(warmup_lr(400, s) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(warmup_lr(200, s) == doctest::Approx(0.005).epsilon(1e-15));
  CHECK(warmup_lr(1600, s) == doctest::Approx(0.005).epsilon(1e-15));
  for (long long n = 2; n <= 400; ++n)
    CHECK(warmup_lr(n, s) > warmup_lr(n - 1, s));
  for (long long n = 401; n <= 800; ++n)
    CHECK(warmup_lr(n, s) < warmup_lr(n - 1, s));
  // Continuous at the corner: gap bounded by the ramp slope of eta0 / N.
  CHECK(std::fabs(warmup_lr(399, s) - warmup_lr(401, s)) < 3.0 * 0.01 / 400);
  CHECK_THROWS_AS(warmup_lr(0, s), ContractError);
  CHECK_THROWS_AS(warmup_lr(1, Schedule{0, 0.01}), ConfigError);
}

TEST_CASE("clipping rescales only when the global norm exceeds the cap") {
  Tensor p({2}, {0.0, 0.0});
  p.set_requires_grad(true);
  std::vector<NamedParam> params = {{"p", p}};

  Tape t1;
  Tensor w1 = t1.watch(p);
  t1.backward(sum_all(mul(w1, Tensor({2}, {0.1, 0.2}))));
  CHECK(clip_grad_norm(params, 1.0) == 1.0);
  CHECK(p.grad()[0] == 0.1);
  CHECK(p.grad()[1] == 0.2);

  p.zero_grad();
  Tape t2;
  Tensor w2 = t2.watch(p);
  t2.backward(sum_all(mul(w2, Tensor({2}, {3.0, 4.0}))));
  const double scale = clip_grad_norm(params, 1.0);
  CHECK(scale == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(p.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(p.grad()[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(global_grad_norm(params) <= 1.0 + 1e-12);
}

TEST_CASE("adam leaves parameters alone under zero gradients or zero rate") {
  Tensor p({3}, {1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  std::vector<NamedParam> params = {{"p", p}};
  OptimState opt;
  opt.init(params);

  Tape t;
  t.backward(scale(sum_all(t.watch(p)), 0.0));
  adam_step(params, opt, 0.1);
  CHECK(p.values() == std::vector<double>{1.0, -2.0, 0.5});

  Tape t2;
  t2.backward(sum_all(t2.watch(p)));
  adam_step(params, opt, 0.0);
  CHECK(p.values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam under a constant gradient moves by lr per step") {
  // With m-hat == g and v-hat == g^2 exactly after bias correction, each
  // update is lr * g / (|g| + eps), independent of the gradient scale.
  Tensor p({1}, {0.0});
  p.set_requires_grad(true);
  std::vector<NamedParam> params = {{"p", p}};
  OptimState opt;
  opt.init(params);
  const double lr = 0.01, g = 3.7;
  double prev = 0.0;
  for (int s = 0; s < 25; ++s) {
    Tape t;
    t.backward(scale(sum_all(t.watch(p)), g));
    adam_step(params, opt, lr);
    const double delta = p.values()[0] - prev;
    prev = p.values()[0];
    CHECK(delta == doctest::Approx(-lr * g / (g + 1e-8)).epsilon(1e-12));
  }
}

TEST_CASE("adam demands gradients for every parameter") {
  Tensor p({2});
  p.set_requires_grad(true);
  std::vector<NamedParam> params = {{"p", p}};
  OptimState opt;
  opt.init(params);
  CHECK_THROWS_AS(adam_step(params, opt, 0.1), ContractError);
}

TEST_CASE("training trajectories are reproducible bit for bit") {
  ModelConfig mc = tiny_config();
  TrainConfig tc;
  tc.schedule = {50, 0.005};
  auto run = [&]() {
    TrainState st(mc, tc);
    ModelInput in = sine_window(mc);
    std::vector<double> hist;
    for (int s = 0; s < 30; ++s) hist.push_back(train_step(st, {in}));
    return hist;
  };
  std::vector<double> a = run(), b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("a duplicated window changes nothing about the step") {
  ModelConfig mc = tiny_config();
  TrainConfig tc;
  tc.schedule = {50, 0.005};
  ModelInput in = sine_window(mc);
  TrainState one(mc, tc), two(mc, tc);
  for (int s = 0; s < 5; ++s) {
    const double la = train_step(one, {in});
    const double lb = train_step(two, {in, in});
    CHECK(la == lb);
  }
}

TEST_CASE("single-window overfit: post-LN with warm-up memorizes") {
  ModelConfig mc = tiny_config();
  TrainConfig tc;
  tc.schedule = {50, 0.01};
  TrainState st(mc, tc);
  ModelInput in = sine_window(mc);
  double loss = 1e300;
  for (int s = 0; s < 500 && loss > 1e-3; ++s) loss = train_step(st, {in});
  CHECK(loss < 1e-3);
  CHECK(st.logs.back().lr > 0.0);
  CHECK(st.loss_history.size() == st.logs.size());
}

TEST_CASE("single-window overfit: pre-LN trains without warm-up") {
  ModelConfig mc = tiny_config();
  mc.block.norm_placement = NormPlacement::pre_ln;
  TrainConfig tc;
  tc.schedule = {1, 0.01};  // warm-up disabled
  TrainState st(mc, tc);
  ModelInput in = sine_window(mc);
  double loss = 1e300;
  for (int s = 0; s < 500 && loss > 1e-3; ++s) loss = train_step(st, {in});
  CHECK(loss < 1e-3);
}

TEST_CASE("non-finite loss raises a divergence error naming the step") {
  ModelConfig mc = tiny_config();
  TrainConfig tc;
  TrainState st(mc, tc);
  ModelInput in = sine_window(mc);
  // The last horizon column never feeds back under teacher forcing, so the
  // NaN first appears in the loss itself.
  in.targets.at(0, 1) = std::numeric_limits<double>::quiet_NaN();
  try {
    train_step(st, {in});
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("training log rows carry the schedule and clip columns") {
  std::vector<StepLog> logs = {{1, 0.001, 2.5, 7.0, 0.14},
                               {2, 0.002, 2.0, 0.5, 1.0}};
  std::ostringstream os;
  write_train_log(logs, os);
  const std::string s = os.str();
  CHECK(s.find("step,lr,loss,grad_norm,clip_scale\n") == 0);
  CHECK(s.find("\n1,") != std::string::npos);
  CHECK(s.find("2.5") != std::string::npos);
  CHECK(s.find("0.14") != std::string::npos);
}

TEST_CASE("forecasts are deterministic and sized by the horizon") {
  for (int horizon : {1, 16, 100}) {
    ModelConfig mc = tiny_config();
    mc.horizon = horizon;
    Model model(mc);
    Rng rng(17);
    ModelInput in;
    in.x = random_tensor({1, mc.window}, rng);
    in.start = random_tensor({1, 1}, rng);
    Tensor a = forecast(model, in, DecodeMode::autoregressive);
    REQUIRE(a.shape() == std::vector<int>{1, horizon});
    Tensor b = forecast(model, in, DecodeMode::autoregressive);
    for (std::size_t i = 0; i < a.values().size(); ++i)
      CHECK(a.values()[i] == b.values()[i]);
    Tensor o = forecast(model, in, DecodeMode::one_shot);
    REQUIRE(o.shape() == std::vector<int>{1, horizon});
  }
}

TEST_CASE("one-step horizons make both forecast modes coincide") {
  ModelConfig mc = tiny_config();
  mc.horizon = 1;
  Model model(mc);
  Rng rng(19);
  ModelInput in;
  in.x = random_tensor({1, mc.window}, rng);
  in.start = random_tensor({1, 1}, rng);
  Tensor ar = forecast(model, in, DecodeMode::autoregressive);
  Tensor os = forecast(model, in, DecodeMode::one_shot);
  REQUIRE(ar.shape() == os.shape());
  for (std::size_t i = 0; i < ar.values().size(); ++i)
    CHECK(ar.values()[i] == os.values()[i]);
}

TEST_CASE("forecast rejects teacher forcing and degenerate state") {
  ModelConfig mc = tiny_config();
  Model model(mc);
  Rng rng(23);
  ModelInput in;
  in.x = random_tensor({1, mc.window}, rng);
  in.start = random_tensor({1, 1}, rng);
  CHECK_THROWS_AS(forecast(model, in, DecodeMode::teacher_forced), ConfigError);
}
