#include "chronoformer/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "chronoformer/checkpoint.hpp"
#include "chronoformer/data.hpp"
#include "chronoformer/error.hpp"
#include "chronoformer/rng.hpp"
#include "chronoformer/training.hpp"

namespace chronoformer {

namespace {

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int parse_int(const std::string& key, const std::string& value) {
  char* end = nullptr;
  errno = 0;
  const long v = std::strtol(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0' || errno != 0)
    throw ConfigError(key + " expects an integer, got '" + value + "'");
  return static_cast<int>(v);
}

double parse_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0')
    throw ConfigError(key + " expects a number, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ConfigError(key + " expects 0/1 or true/false, got '" + value + "'");
}

// ---- nearest-name suggestions -------------------------------------------

int levenshtein(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string nearest(const std::string& given,
                    const std::vector<std::string>& candidates) {
  std::string best;
  int best_d = 1 << 30;
  for (const std::string& c : candidates) {
    const int d = levenshtein(given, c);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<std::string> enum_candidates(const std::string& key) {
  if (key == "norm_placement") return {"post_ln", "pre_ln", "rezero"};
  if (key == "attention_variant")
    return {"canonical", "probsparse", "conv", "logsparse"};
  if (key == "head") return {"regression", "classification"};
  if (key == "pe_variant")
    return {"sinusoidal", "global", "relative", "periodic_daily",
            "periodic_weekly"};
  if (key == "logsparse_kind")
    return {"full", "causal", "logsparse", "logsparse_local",
            "logsparse_restart", "restricted"};
  if (key == "kind") return {"sine", "trend_seasonal"};
  if (key == "mode") return {"teacher_forced", "one_shot", "autoregressive"};
  return {};
}

// ---- training settings ----------------------------------------------------

struct TrainSettings {
  int steps = 200;
  int batch = 8;
  int warmup = 100;
  double lr = 1e-3;
  double clip = 1.0;
  int stride = 1;
  int tde_dim = 0;  // 0 disables the delay embedding
  int tde_tau = 1;
  bool difference = false;
  double train_frac = 0.70;
  double val_frac = 0.15;
};

const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys = {
      "steps", "batch",   "warmup",  "lr",         "clip",    "stride",
      "tde_dim", "tde_tau", "difference", "train_frac", "val_frac"};
  return keys;
}

bool apply_train_config_key(TrainSettings& s, const std::string& key,
                            const std::string& value) {
  if (key == "steps") s.steps = parse_int(key, value);
  else if (key == "batch") s.batch = parse_int(key, value);
  else if (key == "warmup") s.warmup = parse_int(key, value);
  else if (key == "lr") s.lr = parse_double(key, value);
  else if (key == "clip") s.clip = parse_double(key, value);
  else if (key == "stride") s.stride = parse_int(key, value);
  else if (key == "tde_dim") s.tde_dim = parse_int(key, value);
  else if (key == "tde_tau") s.tde_tau = parse_int(key, value);
  else if (key == "difference") s.difference = parse_bool(key, value);
  else if (key == "train_frac") s.train_frac = parse_double(key, value);
  else if (key == "val_frac") s.val_frac = parse_double(key, value);
  else return false;
  return true;
}

void apply_key_checked(ModelConfig& mc, TrainSettings& s,
                       const std::string& key, const std::string& value,
                       const std::string& where) {
  try {
    if (apply_model_config_key(mc, key, value)) return;
    if (apply_train_config_key(s, key, value)) return;
  } catch (const ConfigError& e) {
    std::string msg = where + ": " + e.what();
    const std::vector<std::string> cands = enum_candidates(key);
    if (!cands.empty()) msg += "; nearest is '" + nearest(value, cands) + "'";
    throw UsageError(msg);
  }
  std::vector<std::string> all = model_config_keys();
  const std::vector<std::string>& tk = train_config_keys();
  all.insert(all.end(), tk.begin(), tk.end());
  throw UsageError(where + ": unknown key '" + key + "'; nearest is '" +
                   nearest(key, all) + "'");
}

// ---- config files ---------------------------------------------------------

struct ConfigEntry {
  std::string key, value;
  int lineno = 0;
};

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::vector<ConfigEntry> read_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file " + path);
  std::vector<ConfigEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + " line " + std::to_string(lineno) +
                       ": expected 'key = value'");
    ConfigEntry e;
    e.key = trim(t.substr(0, eq));
    e.value = trim(t.substr(eq + 1));
    e.lineno = lineno;
    if (e.key.empty() || e.value.empty())
      throw UsageError(path + " line " + std::to_string(lineno) +
                       ": expected 'key = value'");
    entries.push_back(std::move(e));
  }
  return entries;
}

// Train flags route through the same key = value appliers as config files,
// so precedence is just "skip file keys whose flag was given".
struct KeyedOptions {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void add(CLI::App* cmd, const std::string& key, const std::string& flags,
           const std::string& desc) {
    std::string& slot = values[key];
    options[key] = cmd->add_option(flags, slot, desc);
  }
  bool passed(const std::string& key) const {
    auto it = options.find(key);
    return it != options.end() && it->second->count() > 0;
  }
};

// ---- small shared helpers -------------------------------------------------

TimeSeries series_slice(const TimeSeries& ts, int begin, int len) {
  TimeSeries part;
  part.timestamps.assign(ts.timestamps.begin() + begin,
                         ts.timestamps.begin() + begin + len);
  part.values = Tensor({len, ts.width()});
  for (int t = 0; t < len; ++t)
    for (int a = 0; a < ts.width(); ++a)
      part.values.at(t, a) = ts.values.at(begin + t, a);
  return part;
}

TimeSeries preprocess_series(const TimeSeries& raw, bool difference,
                             int tde_dim, int tde_tau) {
  TimeSeries out = raw;
  if (difference) out = add_difference_features(out);
  if (tde_dim >= 2) out = time_delay_embed(out, tde_dim, tde_tau);
  return out;
}

bool needs_stamps(const ModelConfig& mc) {
  return mc.use_stamps || mc.pe_variant == PEVariant::periodic_daily ||
         mc.pe_variant == PEVariant::periodic_weekly;
}

void write_matrix_csv(const Tensor& m, std::ostream& os) {
  for (int r = 0; r < m.shape()[0]; ++r) {
    for (int c = 0; c < m.shape()[1]; ++c) {
      if (c) os << ',';
      os << g17(m.at(r, c));
    }
    os << '\n';
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path + " for writing");
  return f;
}

// ---- gen -------------------------------------------------------------------

struct GenArgs {
  std::string kind = "sine";
  int period = 64;
  double sigma = 0.0;
  double slope = 0.0;
  int n = 1024;
  std::uint64_t seed = 1;
  long long first_ts = 0;
  long long step_seconds = 1;
  int tail = 0;
  std::string out, tail_out;
};

int run_gen(const GenArgs& a, std::ostream& out) {
  SyntheticSpec spec;
  try {
    spec.kind = synthetic_kind_from_string(a.kind);
  } catch (const ConfigError& e) {
    throw UsageError(std::string(e.what()) + "; nearest is '" +
                     nearest(a.kind, enum_candidates("kind")) + "'");
  }
  spec.period = a.period;
  spec.sigma = a.sigma;
  spec.slope = a.slope;
  spec.first_timestamp = a.first_ts;
  spec.step_seconds = a.step_seconds;

  TimeSeries ts = gen_synthetic(spec, a.n, a.seed);
  if (a.tail > 0) {
    if (a.tail_out.empty())
      throw UsageError("--tail needs --tail-out for the held-out rows");
    if (a.tail >= a.n)
      throw UsageError("--tail must leave at least one row in --out");
    write_series_csv_file(series_slice(ts, 0, a.n - a.tail), a.out);
    write_series_csv_file(series_slice(ts, a.n - a.tail, a.tail), a.tail_out);
    out << "wrote " << a.out << " (" << a.n - a.tail << " rows) and "
        << a.tail_out << " (" << a.tail << " rows)\n";
  } else {
    write_series_csv_file(ts, a.out);
    out << "wrote " << a.out << " (" << a.n << " rows)\n";
  }
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainOutcome {
  double final_loss = 0.0;
  double test_rmse = std::numeric_limits<double>::quiet_NaN();
  double persistence_rmse = std::numeric_limits<double>::quiet_NaN();
  int test_windows = 0;
};

void shuffle_indices(std::vector<int>& order, Rng& rng) {
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
    std::swap(order[i], order[rng.below(i + 1)]);
}

void write_resolved_config(const ModelConfig& mc, const TrainSettings& s,
                           const std::string& path) {
  std::ofstream f = open_out(path);
  write_model_config(mc, f);
  f << "steps = " << s.steps << '\n'
    << "batch = " << s.batch << '\n'
    << "warmup = " << s.warmup << '\n'
    << "lr = " << g17(s.lr) << '\n'
    << "clip = " << g17(s.clip) << '\n'
    << "stride = " << s.stride << '\n'
    << "tde_dim = " << s.tde_dim << '\n'
    << "tde_tau = " << s.tde_tau << '\n'
    << "difference = " << (s.difference ? 1 : 0) << '\n'
    << "train_frac = " << g17(s.train_frac) << '\n'
    << "val_frac = " << g17(s.val_frac) << '\n';
  if (!f) throw DataError("failed writing " + path);
}

TrainOutcome train_once(const TimeSeries& series, ModelConfig mc,
                        const TrainSettings& s, const std::string* out_prefix,
                        std::ostream& out) {
  if (mc.window < 1) throw UsageError("set --window to the observed length");
  if (mc.horizon < 1) throw UsageError("set --horizon to the forecast length");
  if (mc.head == HeadKind::classification)
    throw UsageError("the CSV training pipeline is regression-only");
  mc.input_width = series.width();
  mc.output_width = series.width();

  SeriesSplit sp = chrono_split(series, s.train_frac, s.val_frac);
  WindowedDataset wtrain = make_windows(sp.train, mc.window, mc.horizon,
                                        s.stride);
  NormStats stats = compute_norm_stats(wtrain);
  WindowedDataset ntrain = zscore_normalize(wtrain, stats);
  const bool stamps = needs_stamps(mc);

  TrainConfig tc;
  tc.schedule = Schedule{s.warmup, s.lr};
  tc.clip_norm = s.clip;
  tc.batch_size = s.batch;
  tc.seed = mc.seed;
  TrainState st(mc, tc);

  std::vector<int> order(ntrain.pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng order_rng(mix_seed(mc.seed, 0xb47cull));
  std::size_t cursor = order.size();

  TrainOutcome oc;
  for (int step = 0; step < s.steps; ++step) {
    std::vector<ModelInput> batch;
    batch.reserve(s.batch);
    for (int b = 0; b < s.batch; ++b) {
      if (cursor == order.size()) {
        shuffle_indices(order, order_rng);
        cursor = 0;
      }
      batch.push_back(to_model_input(ntrain.pairs[order[cursor++]], stamps));
    }
    oc.final_loss = train_step(st, batch);
  }

  // Held-out evaluation in the raw units, against the repeat-last baseline.
  try {
    WindowedDataset wtest = make_windows(sp.test, mc.window, mc.horizon, 1);
    WindowedDataset ntest = zscore_normalize(wtest, stats);
    double model_sq = 0.0, base_sq = 0.0;
    long long count = 0;
    for (std::size_t k = 0; k < wtest.pairs.size(); ++k) {
      ModelInput in = to_model_input(ntest.pairs[k], stamps);
      Tensor pred = forecast(st.model, in, DecodeMode::one_shot);
      Tensor rows = denormalize(transpose(pred), stats);
      Tensor base = baseline_forecast(BaselineKind::persistence,
                                      wtest.pairs[k].input, mc.horizon);
      const Tensor& truth = wtest.pairs[k].target;
      for (int i = 0; i < truth.numel(); ++i) {
        const double dm = rows.values()[i] - truth.values()[i];
        const double db = base.values()[i] - truth.values()[i];
        model_sq += dm * dm;
        base_sq += db * db;
        ++count;
      }
    }
    oc.test_windows = static_cast<int>(wtest.pairs.size());
    oc.test_rmse = std::sqrt(model_sq / count);
    oc.persistence_rmse = std::sqrt(base_sq / count);
  } catch (const DataError&) {
    // Test split too short for a single window; skip the evaluation.
  }

  if (out_prefix != nullptr) {
    save_checkpoint_file(st.model, stats, *out_prefix + ".ckpt");
    write_resolved_config(mc, s, *out_prefix + ".config");
    std::ofstream lf = open_out(*out_prefix + "_trainlog.csv");
    write_train_log(st.logs, lf);
    if (!lf) throw DataError("failed writing " + *out_prefix + "_trainlog.csv");
  }

  out << "steps=" << s.steps << " train_windows=" << ntrain.pairs.size()
      << " final_loss=" << g17(oc.final_loss);
  if (oc.test_windows > 0)
    out << " test_windows=" << oc.test_windows << " test_rmse="
        << g17(oc.test_rmse) << " persistence_rmse="
        << g17(oc.persistence_rmse);
  out << '\n';
  return oc;
}

// ---- forecast ---------------------------------------------------------------

struct ForecastArgs {
  std::string ckpt, data, out;
  std::string mode = "one_shot";
  int tde_dim = 0;
  int tde_tau = 1;
  bool difference = false;
};

int run_forecast(const ForecastArgs& a, std::ostream& out) {
  Checkpoint ck = load_checkpoint_file(a.ckpt);
  Model model = restore_model(ck);
  const ModelConfig& cfg = model.config();

  DecodeMode mode;
  try {
    mode = decode_mode_from_string(a.mode);
  } catch (const ConfigError& e) {
    throw UsageError(std::string(e.what()) + "; nearest is '" +
                     nearest(a.mode, enum_candidates("mode")) + "'");
  }

  TimeSeries raw = read_series_csv_file(a.data);
  TimeSeries series = preprocess_series(raw, a.difference, a.tde_dim,
                                        a.tde_tau);
  if (series.width() != cfg.input_width)
    throw DataError("data supplies " + std::to_string(series.width()) +
                    " variables but the checkpoint expects " +
                    std::to_string(cfg.input_width) +
                    "; apply the embedding flags used in training");
  const int n = series.length();
  if (n < cfg.window)
    throw DataError("need " + std::to_string(cfg.window) +
                    " observed rows, got " + std::to_string(n));

  const int base = n - cfg.window;
  Tensor win({cfg.window, series.width()});
  for (int t = 0; t < cfg.window; ++t)
    for (int a2 = 0; a2 < series.width(); ++a2)
      win.at(t, a2) = series.values.at(base + t, a2);
  if (!ck.norm.empty()) win = zscore_apply(win, ck.norm);

  ModelInput in;
  in.x = transpose(win);
  in.start = Tensor({cfg.output_width, 1});
  for (int a2 = 0; a2 < cfg.output_width; ++a2)
    in.start.at(a2, 0) = win.at(cfg.window - 1, a2);
  in.first_pos = base;

  const long long step = n >= 2
      ? series.timestamps[n - 1] - series.timestamps[n - 2] : 1;
  if (needs_stamps(cfg)) {
    in.x_stamps.reserve(cfg.window);
    for (int t = 0; t < cfg.window; ++t)
      in.x_stamps.push_back(
          stamp_from_timestamp(series.timestamps[base + t]));
    in.y_stamps.reserve(cfg.horizon + 1);
    for (int h = 0; h <= cfg.horizon; ++h)
      in.y_stamps.push_back(
          stamp_from_timestamp(series.timestamps[n - 1] + step * h));
  }

  Tensor pred = forecast(model, in, mode);
  Tensor rows = transpose(pred);
  if (!ck.norm.empty()) rows = denormalize(rows, ck.norm);

  TimeSeries result;
  result.values = rows;
  for (int h = 1; h <= cfg.horizon; ++h)
    result.timestamps.push_back(series.timestamps[n - 1] + step * h);
  write_series_csv_file(result, a.out);
  out << "wrote " << a.out << " (" << cfg.horizon << " steps ahead)\n";
  return 0;
}

// ---- eval -------------------------------------------------------------------

int run_eval(const std::string& pred_path, const std::string& truth_path,
             const std::string& out_path, std::ostream& out) {
  TimeSeries pred = read_series_csv_file(pred_path);
  TimeSeries truth = read_series_csv_file(truth_path);
  if (pred.length() != truth.length() || pred.width() != truth.width())
    throw DataError("prediction is " + std::to_string(pred.length()) + "x" +
                    std::to_string(pred.width()) + " but truth is " +
                    std::to_string(truth.length()) + "x" +
                    std::to_string(truth.width()));
  const double r = rmse(pred.values, truth.values);
  const double m = mae(pred.values, truth.values);
  const std::string text = "rmse,mae\n" + g17(r) + "," + g17(m) + "\n";
  if (!out_path.empty()) {
    std::ofstream f = open_out(out_path);
    f << text;
    if (!f) throw DataError("failed writing " + out_path);
  }
  out << text;
  return 0;
}

// ---- mathematical object emitters -------------------------------------------

int run_pe(const std::string& variant, int d, int len, double pe_base,
           long long first_pos, const std::string& out_path,
           std::ostream& out) {
  PESpec spec;
  spec.d = d;
  spec.base = pe_base;
  try {
    spec.variant = pe_variant_from_string(variant);
  } catch (const ConfigError& e) {
    throw UsageError(std::string(e.what()) + "; nearest is '" +
                     nearest(variant, enum_candidates("pe_variant")) + "'");
  }
  if (spec.variant == PEVariant::periodic_daily ||
      spec.variant == PEVariant::periodic_weekly)
    throw UsageError("periodic encodings are learned from data timestamps; "
                     "emit a sinusoidal/global/relative matrix instead");
  const long long base =
      spec.variant == PEVariant::relative ? 0 : first_pos;
  Tensor m = pe_matrix(len, spec, base);
  std::ofstream f = open_out(out_path);
  f << "pos";
  for (int r = 0; r < d; ++r) f << ",e" << r;
  f << '\n';
  for (int j = 0; j < len; ++j) {
    f << j;
    for (int r = 0; r < d; ++r) f << ',' << g17(m.at(r, j));
    f << '\n';
  }
  if (!f) throw DataError("failed writing " + out_path);
  out << "wrote " << out_path << " (" << len << " positions x " << d
      << " dims)\n";
  return 0;
}

int run_mask(const std::string& kind_name, int len, int window, int range,
             const std::string& out_path, std::ostream& out) {
  MaskKind kind;
  try {
    kind = mask_kind_from_string(kind_name);
  } catch (const ConfigError& e) {
    throw UsageError(std::string(e.what()) + "; nearest is '" +
                     nearest(kind_name, enum_candidates("logsparse_kind")) +
                     "'");
  }
  AttentionMask mask = AttentionMask::full(1);
  switch (kind) {
    case MaskKind::full: mask = AttentionMask::full(len); break;
    case MaskKind::causal: mask = AttentionMask::causal(len); break;
    case MaskKind::restricted:
      mask = AttentionMask::restricted(len, window);
      break;
    default: {
      LogSparseSpec spec;
      spec.kind = kind;
      spec.local_window = window;
      spec.restart_range = range;
      mask = build_logsparse_mask(len, spec);
    }
  }
  std::ofstream f = open_out(out_path);
  mask.write_csv(f);
  if (!f) throw DataError("failed writing " + out_path);
  out << "wrote " << out_path << " (" << len << "x" << len << ")\n";
  return 0;
}

int run_attn(const std::string& ckpt_path, const std::string& data_path,
             const std::string& out_prefix, std::ostream& out) {
  Checkpoint ck = load_checkpoint_file(ckpt_path);
  Model model = restore_model(ck);
  const ModelConfig& cfg = model.config();

  TimeSeries series = read_series_csv_file(data_path);
  if (series.width() != cfg.input_width)
    throw DataError("data supplies " + std::to_string(series.width()) +
                    " variables but the checkpoint expects " +
                    std::to_string(cfg.input_width));
  if (series.length() < cfg.window)
    throw DataError("need " + std::to_string(cfg.window) +
                    " observed rows, got " + std::to_string(series.length()));

  const int base = series.length() - cfg.window;
  Tensor win({cfg.window, series.width()});
  for (int t = 0; t < cfg.window; ++t)
    for (int a = 0; a < series.width(); ++a)
      win.at(t, a) = series.values.at(base + t, a);
  if (!ck.norm.empty()) win = zscore_apply(win, ck.norm);

  ModelInput in;
  in.x = transpose(win);
  in.start = Tensor({cfg.output_width, 1});
  for (int a = 0; a < cfg.output_width; ++a)
    in.start.at(a, 0) = win.at(cfg.window - 1, a);
  in.first_pos = base;
  if (needs_stamps(cfg)) {
    const int n = series.length();
    const long long step = n >= 2
        ? series.timestamps[n - 1] - series.timestamps[n - 2] : 1;
    for (int t = 0; t < cfg.window; ++t)
      in.x_stamps.push_back(
          stamp_from_timestamp(series.timestamps[base + t]));
    for (int h = 0; h <= cfg.horizon; ++h)
      in.y_stamps.push_back(
          stamp_from_timestamp(series.timestamps[n - 1] + step * h));
  }

  AttentionTrace trace;
  RunOptions opt;
  opt.trace = &trace;
  model.forward(in, DecodeMode::one_shot, opt);

  for (const AttentionTrace::Item& item : trace.items) {
    std::string scope = item.scope;
    for (char& c : scope)
      if (c == '.') c = '_';
    const std::string path =
        out_prefix + "_" + scope + "_h" + std::to_string(item.head) + ".csv";
    std::ofstream f = open_out(path);
    write_matrix_csv(item.weights, f);
    if (!f) throw DataError("failed writing " + path);
  }
  out << "wrote " << trace.items.size() << " attention matrices under "
      << out_prefix << "_*\n";
  return 0;
}

int run_bench(const std::string& lens_csv, int dim, std::uint64_t seed,
              const std::string& out_path, std::ostream& out) {
  std::vector<int> lens;
  std::stringstream ss(lens_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    lens.push_back(parse_int("--lens", tok));
  }
  if (lens.empty()) throw UsageError("--lens names no lengths");

  std::ostringstream table;
  table << "L,variant,dot_products,weights_stored\n";
  for (int L : lens) {
    if (L < 1) throw UsageError("--lens entries must be positive");
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(L)));
    Tensor q({dim, L}), k({dim, L}), v({dim, L});
    for (double& x : q.values()) x = rng.uniform(-1.0, 1.0);
    for (double& x : k.values()) x = rng.uniform(-1.0, 1.0);
    for (double& x : v.values()) x = rng.uniform(-1.0, 1.0);

    CostCounter canonical;
    scaled_dot_product_attention(q, k, v, AttentionMask::causal(L),
                                 &canonical);
    table << L << ",canonical," << canonical.dot_products << ','
          << canonical.weights_stored << '\n';

    CostCounter prob;
    probsparse_attention(q, k, v, AttentionMask::full(L),
                         probsparse_auto_u(L, 5.0), seed, 5.0, &prob);
    table << L << ",probsparse," << prob.dot_products << ','
          << prob.weights_stored << '\n';

    CostCounter logsp;
    scaled_dot_product_attention(q, k, v,
                                 build_logsparse_mask(L, LogSparseSpec{}),
                                 &logsp);
    table << L << ",logsparse," << logsp.dot_products << ','
          << logsp.weights_stored << '\n';
  }
  if (!out_path.empty()) {
    std::ofstream f = open_out(out_path);
    f << table.str();
    if (!f) throw DataError("failed writing " + out_path);
  }
  out << table.str();
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"from-scratch transformer laboratory for time series"};
  app.require_subcommand(1);

  // gen
  GenArgs ga;
  CLI::App* gen = app.add_subcommand("gen", "write a synthetic series CSV");
  gen->add_option("--kind", ga.kind, "sine or trend_seasonal");
  gen->add_option("--period", ga.period, "samples per cycle");
  gen->add_option("--sigma", ga.sigma, "gaussian noise level");
  gen->add_option("--slope", ga.slope, "linear trend per step");
  gen->add_option("--n", ga.n, "number of rows");
  gen->add_option("--seed", ga.seed, "rng seed");
  gen->add_option("--first-ts", ga.first_ts, "first timestamp");
  gen->add_option("--step-seconds", ga.step_seconds, "timestamp spacing");
  gen->add_option("--tail", ga.tail, "hold out this many final rows");
  gen->add_option("--tail-out", ga.tail_out, "path for the held-out rows");
  gen->add_option("--out", ga.out, "output CSV path")->required();

  // train
  CLI::App* train = app.add_subcommand("train",
                                       "fit a model on a series CSV");
  std::string train_data, train_out, train_cfg;
  bool tde_sweep = false;
  train->add_option("--data", train_data, "input series CSV")->required();
  train->add_option("--out", train_out,
                    "output prefix for .ckpt/.config/_trainlog.csv")
      ->required();
  train->add_option("--config", train_cfg, "key = value configuration file");
  train->add_flag("--tde-sweep", tde_sweep,
                  "train across delay dimensions 2,4,8,16,32");
  KeyedOptions ko;
  ko.add(train, "n_encoders", "--n-encoders", "encoder blocks");
  ko.add(train, "n_decoders", "--n-decoders", "decoder blocks");
  ko.add(train, "d_model", "--d-model", "model width");
  ko.add(train, "heads", "--heads", "attention heads");
  ko.add(train, "head_size", "--head-size", "per-head width (0: d/heads)");
  ko.add(train, "d_ff", "--d-ff", "feed-forward width (0: 4 d)");
  ko.add(train, "norm_placement", "--norm-placement,--norm",
         "post_ln, pre_ln or rezero");
  ko.add(train, "attention_variant", "--attention-variant,--variant",
         "canonical, probsparse, conv or logsparse");
  ko.add(train, "probsparse_u", "--probsparse-u", "active query budget");
  ko.add(train, "probsparse_c", "--probsparse-c", "sampling factor");
  ko.add(train, "conv_kernel", "--conv-kernel", "query/key kernel width");
  ko.add(train, "logsparse_kind", "--logsparse-kind",
         "logsparse, logsparse_local or logsparse_restart");
  ko.add(train, "logsparse_window", "--logsparse-window",
         "dense local window");
  ko.add(train, "logsparse_range", "--logsparse-range", "restart block");
  ko.add(train, "distilling", "--distilling,--distill",
         "halve length between encoder blocks (0/1)");
  ko.add(train, "replica", "--replica", "half-input replica stack (0/1)");
  ko.add(train, "window", "--window", "observed steps per example");
  ko.add(train, "horizon", "--horizon", "forecast steps per example");
  ko.add(train, "input_kernel", "--input-kernel",
         "input embedding kernel, 1 or 3");
  ko.add(train, "pe_base", "--pe-base", "sinusoid base");
  ko.add(train, "pe_variant", "--pe-variant,--pe",
         "sinusoidal, global, relative, periodic_daily, periodic_weekly");
  ko.add(train, "use_stamps", "--use-stamps,--stamps",
         "learned calendar embeddings (0/1)");
  ko.add(train, "seed", "--seed", "parameter init and batching seed");
  ko.add(train, "steps", "--steps", "optimization steps");
  ko.add(train, "batch", "--batch", "windows per step");
  ko.add(train, "warmup", "--warmup", "warm-up steps (1 disables)");
  ko.add(train, "lr", "--lr", "peak learning rate");
  ko.add(train, "clip", "--clip", "gradient norm cap");
  ko.add(train, "stride", "--stride", "window stride");
  ko.add(train, "tde_dim", "--tde-dim", "delay embedding dimension");
  ko.add(train, "tde_tau", "--tde-tau", "delay embedding lag");
  ko.add(train, "difference", "--difference",
         "append first/second differences (0/1)");
  ko.add(train, "train_frac", "--train-frac", "training fraction");
  ko.add(train, "val_frac", "--val-frac", "validation fraction");

  // forecast
  ForecastArgs fa;
  CLI::App* fc = app.add_subcommand("forecast",
                                    "predict past the end of a series CSV");
  fc->add_option("--ckpt", fa.ckpt, "checkpoint path")->required();
  fc->add_option("--data", fa.data, "input series CSV")->required();
  fc->add_option("--out", fa.out, "predictions CSV path")->required();
  fc->add_option("--mode", fa.mode, "one_shot or autoregressive");
  fc->add_option("--tde-dim", fa.tde_dim, "delay dimension used in training");
  fc->add_option("--tde-tau", fa.tde_tau, "delay lag used in training");
  fc->add_flag("--difference", fa.difference,
               "difference features were used in training");

  // eval
  std::string ev_pred, ev_truth, ev_out;
  CLI::App* ev = app.add_subcommand("eval",
                                    "rmse and mae of predictions vs truth");
  ev->add_option("--pred", ev_pred, "predictions CSV")->required();
  ev->add_option("--truth", ev_truth, "ground-truth CSV")->required();
  ev->add_option("--out", ev_out, "metrics CSV path (default stdout only)");

  // pe
  std::string pe_variant = "sinusoidal", pe_out;
  int pe_d = 16, pe_len = 64;
  double pe_base = 1e4;
  long long pe_first = 0;
  CLI::App* pe = app.add_subcommand("pe", "positional encoding matrix CSV");
  pe->add_option("--variant", pe_variant, "sinusoidal, global or relative");
  pe->add_option("--d", pe_d, "encoding dimension");
  pe->add_option("--len", pe_len, "positions");
  pe->add_option("--base", pe_base, "sinusoid base");
  pe->add_option("--first-pos", pe_first, "first absolute position");
  pe->add_option("--out", pe_out, "output CSV path")->required();

  // mask
  std::string mk_kind = "logsparse", mk_out;
  int mk_len = 16, mk_window = 4, mk_range = 0;
  CLI::App* mk = app.add_subcommand("mask", "attention mask CSV");
  mk->add_option("--kind", mk_kind,
                 "full, causal, restricted, logsparse, logsparse_local or "
                 "logsparse_restart");
  mk->add_option("--len", mk_len, "sequence length");
  mk->add_option("--window", mk_window, "restricted/local window");
  mk->add_option("--range", mk_range, "restart block length");
  mk->add_option("--out", mk_out, "output CSV path")->required();

  // attn
  std::string at_ckpt, at_data, at_out;
  CLI::App* at = app.add_subcommand(
      "attn", "attention weight matrices of a checkpointed model");
  at->add_option("--ckpt", at_ckpt, "checkpoint path")->required();
  at->add_option("--data", at_data, "input series CSV")->required();
  at->add_option("--out", at_out, "output path prefix")->required();

  // bench
  std::string bn_lens = "128,256,512,1024", bn_out;
  int bn_d = 8;
  std::uint64_t bn_seed = 1;
  CLI::App* bn = app.add_subcommand(
      "bench", "dot-product and weight counts per attention variant");
  bn->add_option("--lens", bn_lens, "comma-separated sequence lengths");
  bn->add_option("--d", bn_d, "vector dimension");
  bn->add_option("--seed", bn_seed, "rng seed");
  bn->add_option("--out", bn_out, "output CSV path (default stdout only)");

  std::vector<const char*> argv;
  argv.push_back("chronoformer");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());

    if (*gen) return run_gen(ga, out);

    if (*train) {
      ModelConfig mc;
      TrainSettings ts;
      if (!train_cfg.empty())
        for (const ConfigEntry& e : read_config_file(train_cfg)) {
          if (ko.passed(e.key)) continue;  // the flag wins
          apply_key_checked(mc, ts, e.key, e.value,
                            train_cfg + " line " + std::to_string(e.lineno));
        }
      for (const auto& kv : ko.options)
        if (kv.second->count() > 0)
          apply_key_checked(mc, ts, kv.first, ko.values[kv.first],
                            "flag " + kv.second->get_name());

      TimeSeries raw = read_series_csv_file(train_data);
      if (tde_sweep) {
        const std::string path = train_out + "_tde_sweep.csv";
        std::ofstream f = open_out(path);
        f << "tde_dim,final_loss,test_rmse,persistence_rmse\n";
        for (int d : {2, 4, 8, 16, 32}) {
          TimeSeries series =
              preprocess_series(raw, ts.difference, d, ts.tde_tau);
          out << "tde_dim=" << d << ": ";
          TrainOutcome oc = train_once(series, mc, ts, nullptr, out);
          f << d << ',' << g17(oc.final_loss) << ',' << g17(oc.test_rmse)
            << ',' << g17(oc.persistence_rmse) << '\n';
        }
        if (!f) throw DataError("failed writing " + path);
        out << "wrote " << path << '\n';
        return 0;
      }
      TimeSeries series =
          preprocess_series(raw, ts.difference, ts.tde_dim, ts.tde_tau);
      train_once(series, mc, ts, &train_out, out);
      return 0;
    }

    if (*fc) return run_forecast(fa, out);
    if (*ev) return run_eval(ev_pred, ev_truth, ev_out, out);
    if (*pe) return run_pe(pe_variant, pe_d, pe_len, pe_base, pe_first,
                           pe_out, out);
    if (*mk) return run_mask(mk_kind, mk_len, mk_window, mk_range, mk_out,
                             out);
    if (*at) return run_attn(at_ckpt, at_data, at_out, out);
    if (*bn) return run_bench(bn_lens, bn_d, bn_seed, bn_out, out);
    err << "error: no subcommand\n";
    return 1;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : 1;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int run_cli(const std::vector<std::string>& args) {
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace chronoformer
