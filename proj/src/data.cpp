#include "chronoformer/data.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "chronoformer/error.hpp"
#include "chronoformer/rng.hpp"

namespace chronoformer {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

void append_g17(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

int TimeSeries::length() const {
  return values.numel() == 0 ? 0 : values.shape()[0];
}

int TimeSeries::width() const {
  return values.numel() == 0 ? 0 : values.shape()[1];
}

void TimeSeries::validate() const {
  if (values.shape().size() != 2)
    throw DimensionError("time series values must be a matrix, got shape " +
                         shape_str(values.shape()));
  if (static_cast<int>(timestamps.size()) != length())
    throw DimensionError("time series has " +
                         std::to_string(timestamps.size()) +
                         " timestamps for " + std::to_string(length()) +
                         " rows");
  for (std::size_t i = 1; i < timestamps.size(); ++i)
    if (timestamps[i] <= timestamps[i - 1])
      throw DataError("timestamps must increase strictly; row " +
                      std::to_string(i) + " has " +
                      std::to_string(timestamps[i]) + " after " +
                      std::to_string(timestamps[i - 1]));
  for (double v : values.values())
    if (!std::isfinite(v))
      throw DataError("time series contains a non-finite value");
}

SyntheticKind synthetic_kind_from_string(const std::string& name) {
  if (name == "sine") return SyntheticKind::sine;
  if (name == "trend_seasonal") return SyntheticKind::trend_seasonal;
  throw ConfigError("unknown synthetic kind: " + name);
}

std::string to_string(SyntheticKind kind) {
  return kind == SyntheticKind::sine ? "sine" : "trend_seasonal";
}

TimeSeries gen_synthetic(const SyntheticSpec& spec, int n,
                         std::uint64_t seed) {
  if (n < 1) throw ConfigError("synthetic series needs n >= 1");
  if (spec.period < 2) throw ConfigError("synthetic period must be >= 2");
  if (spec.sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
  if (spec.step_seconds < 1)
    throw ConfigError("timestamp step must be >= 1 second");

  Rng rng(seed);
  TimeSeries ts;
  ts.timestamps.resize(n);
  ts.values = Tensor({n, 1});
  for (int t = 0; t < n; ++t) {
    ts.timestamps[t] = spec.first_timestamp + spec.step_seconds * t;
    double x = std::sin(kTwoPi * t / spec.period);
    if (spec.kind == SyntheticKind::trend_seasonal) x += spec.slope * t;
    if (spec.sigma > 0.0) x += rng.normal(0.0, spec.sigma);
    ts.values.at(t, 0) = x;
  }
  return ts;
}

WindowedDataset make_windows(const TimeSeries& ts, int window, int horizon,
                             int stride) {
  ts.validate();
  if (window < 1 || horizon < 1)
    throw ConfigError("windowing needs window >= 1 and horizon >= 1");
  if (stride < 1) throw ConfigError("window stride must be >= 1");
  const int n = ts.length();
  const int v = ts.width();
  if (window + horizon > n)
    throw DataError("series of length " + std::to_string(n) +
                    " cannot supply window " + std::to_string(window) +
                    " plus horizon " + std::to_string(horizon));

  WindowedDataset ds;
  ds.window = window;
  ds.horizon = horizon;
  const int count = (n - window - horizon) / stride + 1;
  ds.pairs.reserve(count);
  for (int k = 0; k < count; ++k) {
    const int base = k * stride;
    WindowPair p;
    p.first_index = base;
    p.input = Tensor({window, v});
    p.target = Tensor({horizon, v});
    p.input_times.resize(window);
    p.target_times.resize(horizon);
    for (int t = 0; t < window; ++t) {
      p.input_times[t] = ts.timestamps[base + t];
      for (int a = 0; a < v; ++a) p.input.at(t, a) = ts.values.at(base + t, a);
    }
    for (int h = 0; h < horizon; ++h) {
      p.target_times[h] = ts.timestamps[base + window + h];
      for (int a = 0; a < v; ++a)
        p.target.at(h, a) = ts.values.at(base + window + h, a);
    }
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

TimeSeries time_delay_embed(const TimeSeries& ts, int dim, int lag) {
  ts.validate();
  if (dim < 1 || lag < 1)
    throw ConfigError("delay embedding needs dim >= 1 and lag >= 1");
  const int n = ts.length();
  const int v = ts.width();
  const int drop = (dim - 1) * lag;
  if (drop >= n)
    throw DataError("series of length " + std::to_string(n) +
                    " is too short for delay dim " + std::to_string(dim) +
                    " at lag " + std::to_string(lag));

  TimeSeries out;
  out.timestamps.assign(ts.timestamps.begin() + drop, ts.timestamps.end());
  out.values = Tensor({n - drop, v * dim});
  for (int t = drop; t < n; ++t)
    for (int a = 0; a < v; ++a)
      for (int j = 0; j < dim; ++j)
        out.values.at(t - drop, a * dim + j) = ts.values.at(t - j * lag, a);
  return out;
}

TimeSeries add_difference_features(const TimeSeries& ts) {
  ts.validate();
  const int n = ts.length();
  const int v = ts.width();
  if (n < 3)
    throw DataError("difference features need at least 3 rows, got " +
                    std::to_string(n));

  TimeSeries out;
  out.timestamps.assign(ts.timestamps.begin() + 2, ts.timestamps.end());
  out.values = Tensor({n - 2, v * 3});
  for (int t = 2; t < n; ++t)
    for (int a = 0; a < v; ++a) {
      const double x0 = ts.values.at(t, a);
      const double x1 = ts.values.at(t - 1, a);
      const double x2 = ts.values.at(t - 2, a);
      out.values.at(t - 2, a * 3 + 0) = x0;
      out.values.at(t - 2, a * 3 + 1) = x0 - x1;
      out.values.at(t - 2, a * 3 + 2) = x0 - 2.0 * x1 + x2;
    }
  return out;
}

NormStats compute_norm_stats(const WindowedDataset& train) {
  if (train.pairs.empty())
    throw DataError("cannot compute normalization from an empty split");
  const int v = train.pairs[0].input.shape()[1];
  NormStats st;
  st.mu.assign(v, 0.0);
  st.sigma.assign(v, 0.0);

  long long count = 0;
  for (const WindowPair& p : train.pairs) {
    for (int t = 0; t < p.input.shape()[0]; ++t)
      for (int a = 0; a < v; ++a) st.mu[a] += p.input.at(t, a);
    for (int h = 0; h < p.target.shape()[0]; ++h)
      for (int a = 0; a < v; ++a) st.mu[a] += p.target.at(h, a);
    count += p.input.shape()[0] + p.target.shape()[0];
  }
  for (int a = 0; a < v; ++a) st.mu[a] /= static_cast<double>(count);

  for (const WindowPair& p : train.pairs) {
    for (int t = 0; t < p.input.shape()[0]; ++t)
      for (int a = 0; a < v; ++a) {
        const double d = p.input.at(t, a) - st.mu[a];
        st.sigma[a] += d * d;
      }
    for (int h = 0; h < p.target.shape()[0]; ++h)
      for (int a = 0; a < v; ++a) {
        const double d = p.target.at(h, a) - st.mu[a];
        st.sigma[a] += d * d;
      }
  }
  for (int a = 0; a < v; ++a) {
    st.sigma[a] = std::sqrt(st.sigma[a] / static_cast<double>(count));
    if (st.sigma[a] <= 0.0)
      throw DataError("variable " + std::to_string(a) +
                      " is constant in the training split; cannot normalize");
  }
  return st;
}

namespace {

void check_stats_width(const Tensor& rows_by_vars, const NormStats& stats) {
  if (rows_by_vars.shape().size() != 2)
    throw DimensionError("normalization expects a matrix, got shape " +
                         shape_str(rows_by_vars.shape()));
  if (rows_by_vars.shape()[1] != static_cast<int>(stats.mu.size()))
    throw DimensionError("normalization statistics cover " +
                         std::to_string(stats.mu.size()) +
                         " variables but the data has " +
                         std::to_string(rows_by_vars.shape()[1]) +
                         " columns");
}

}  // namespace

Tensor zscore_apply(const Tensor& rows_by_vars, const NormStats& stats) {
  check_stats_width(rows_by_vars, stats);
  // clone: tensor copies share storage, and the caller keeps the original
  Tensor out = rows_by_vars.clone();
  for (int t = 0; t < out.shape()[0]; ++t)
    for (int a = 0; a < out.shape()[1]; ++a)
      out.at(t, a) = (out.at(t, a) - stats.mu[a]) / stats.sigma[a];
  return out;
}

Tensor denormalize(const Tensor& rows_by_vars, const NormStats& stats) {
  check_stats_width(rows_by_vars, stats);
  Tensor out = rows_by_vars.clone();
  for (int t = 0; t < out.shape()[0]; ++t)
    for (int a = 0; a < out.shape()[1]; ++a)
      out.at(t, a) = out.at(t, a) * stats.sigma[a] + stats.mu[a];
  return out;
}

WindowedDataset zscore_normalize(const WindowedDataset& ds,
                                 const NormStats& stats) {
  WindowedDataset out;
  out.window = ds.window;
  out.horizon = ds.horizon;
  out.stats = stats;
  out.pairs.reserve(ds.pairs.size());
  for (const WindowPair& p : ds.pairs) {
    WindowPair q = p;
    q.input = zscore_apply(p.input, stats);
    q.target = zscore_apply(p.target, stats);
    out.pairs.push_back(std::move(q));
  }
  return out;
}

namespace {

void check_same_shape(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape())
    throw DimensionError("metric shapes differ: " + shape_str(pred.shape()) +
                         " vs " + shape_str(truth.shape()));
  if (pred.numel() == 0) throw DimensionError("metrics need at least 1 entry");
}

}  // namespace

double rmse(const Tensor& pred, const Tensor& truth) {
  check_same_shape(pred, truth);
  double acc = 0.0;
  for (int i = 0; i < pred.numel(); ++i) {
    const double d = pred.values()[i] - truth.values()[i];
    acc += d * d;
  }
  return std::sqrt(acc / pred.numel());
}

double mae(const Tensor& pred, const Tensor& truth) {
  check_same_shape(pred, truth);
  double acc = 0.0;
  for (int i = 0; i < pred.numel(); ++i)
    acc += std::fabs(pred.values()[i] - truth.values()[i]);
  return acc / pred.numel();
}

BaselineKind baseline_kind_from_string(const std::string& name) {
  if (name == "persistence") return BaselineKind::persistence;
  if (name == "seasonal") return BaselineKind::seasonal;
  throw ConfigError("unknown baseline kind: " + name);
}

std::string to_string(BaselineKind kind) {
  return kind == BaselineKind::persistence ? "persistence" : "seasonal";
}

Tensor baseline_forecast(BaselineKind kind, const Tensor& window_rows,
                         int horizon, int period) {
  if (window_rows.shape().size() != 2)
    throw DimensionError("baseline expects an M x v window, got shape " +
                         shape_str(window_rows.shape()));
  if (horizon < 1) throw ConfigError("baseline horizon must be >= 1");
  const int m = window_rows.shape()[0];
  const int v = window_rows.shape()[1];
  if (m < 1) throw DataError("baseline needs at least one observed row");
  if (kind == BaselineKind::seasonal) {
    if (period < 1) throw ConfigError("seasonal baseline needs period >= 1");
    if (m < period)
      throw DataError("seasonal baseline needs a window of at least " +
                      std::to_string(period) + " rows, got " +
                      std::to_string(m));
  }

  Tensor out({horizon, v});
  for (int h = 0; h < horizon; ++h)
    for (int a = 0; a < v; ++a) {
      if (kind == BaselineKind::persistence) {
        out.at(h, a) = window_rows.at(m - 1, a);
      } else {
        // The value one period before the forecast position, tiled.
        out.at(h, a) = window_rows.at(m - period + h % period, a);
      }
    }
  return out;
}

SeriesSplit chrono_split(const TimeSeries& ts, double train_frac,
                         double val_frac) {
  ts.validate();
  if (!(train_frac > 0.0) || !(val_frac >= 0.0) ||
      !(train_frac + val_frac < 1.0))
    throw ConfigError("split fractions must satisfy 0 < train, 0 <= val, "
                      "train + val < 1");
  const int n = ts.length();
  const int v = ts.width();
  const int n_train = static_cast<int>(n * train_frac);
  const int n_val = static_cast<int>(n * val_frac);
  if (n_train < 1 || n - n_train - n_val < 1)
    throw DataError("series of length " + std::to_string(n) +
                    " is too short to split");

  auto take = [&](int begin, int len) {
    TimeSeries part;
    part.timestamps.assign(ts.timestamps.begin() + begin,
                           ts.timestamps.begin() + begin + len);
    part.values = Tensor({len, v});
    for (int t = 0; t < len; ++t)
      for (int a = 0; a < v; ++a)
        part.values.at(t, a) = ts.values.at(begin + t, a);
    return part;
  };
  SeriesSplit sp;
  sp.train = take(0, n_train);
  sp.val = take(n_train, n_val);
  sp.test = take(n_train + n_val, n - n_train - n_val);
  return sp;
}

TimeSeries read_series_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line))
    throw ParseError("line 1: missing CSV header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("timestamp", 0) != 0)
    throw ParseError("line 1: expected header starting with 'timestamp', got '" +
                     line + "'");
  int v = 0;
  for (char c : line)
    if (c == ',') ++v;
  if (v < 1) throw ParseError("line 1: header names no value columns");

  std::vector<long long> times;
  std::vector<double> flat;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const char* p = line.c_str();
    char* end = nullptr;
    errno = 0;
    const long long ts = std::strtoll(p, &end, 10);
    if (end == p || errno != 0)
      throw ParseError("line " + std::to_string(lineno) +
                       ": expected an integer timestamp");
    p = end;
    for (int a = 0; a < v; ++a) {
      if (*p != ',')
        throw ParseError("line " + std::to_string(lineno) + ": expected " +
                         std::to_string(v) + " values, found " +
                         std::to_string(a));
      ++p;
      const double x = std::strtod(p, &end);
      if (end == p || !std::isfinite(x))
        throw ParseError("line " + std::to_string(lineno) + ": value " +
                         std::to_string(a + 1) + " is not a finite number");
      flat.push_back(x);
      p = end;
    }
    if (*p != '\0')
      throw ParseError("line " + std::to_string(lineno) +
                       ": trailing characters after " + std::to_string(v) +
                       " values");
    times.push_back(ts);
  }
  if (times.empty()) throw ParseError("line 2: no data rows");

  TimeSeries ts;
  ts.timestamps = std::move(times);
  ts.values = Tensor({static_cast<int>(ts.timestamps.size()), v},
                     std::move(flat));
  ts.validate();
  return ts;
}

TimeSeries read_series_csv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  return read_series_csv(f);
}

void write_series_csv(const TimeSeries& ts, std::ostream& os) {
  ts.validate();
  std::string out = "timestamp";
  for (int a = 0; a < ts.width(); ++a) out += ",v" + std::to_string(a + 1);
  out += '\n';
  for (int t = 0; t < ts.length(); ++t) {
    out += std::to_string(ts.timestamps[t]);
    for (int a = 0; a < ts.width(); ++a) {
      out += ',';
      append_g17(out, ts.values.at(t, a));
    }
    out += '\n';
  }
  os << out;
}

void write_series_csv_file(const TimeSeries& ts, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path + " for writing");
  write_series_csv(ts, f);
  if (!f) throw DataError("failed writing " + path);
}

ModelInput to_model_input(const WindowPair& pair, bool with_stamps) {
  const int m = pair.input.shape()[0];
  const int v = pair.input.shape()[1];
  const int h = pair.target.shape()[0];

  ModelInput in;
  in.x = transpose(pair.input);
  in.start = Tensor({v, 1});
  for (int a = 0; a < v; ++a) in.start.at(a, 0) = pair.input.at(m - 1, a);
  in.targets = transpose(pair.target);
  in.first_pos = pair.first_index;
  if (with_stamps) {
    if (static_cast<int>(pair.input_times.size()) != m ||
        static_cast<int>(pair.target_times.size()) != h)
      throw DataError("window is missing timestamps for calendar stamps");
    in.x_stamps.reserve(m);
    for (long long t : pair.input_times)
      in.x_stamps.push_back(stamp_from_timestamp(t));
    in.y_stamps.reserve(h + 1);
    in.y_stamps.push_back(stamp_from_timestamp(pair.input_times.back()));
    for (long long t : pair.target_times)
      in.y_stamps.push_back(stamp_from_timestamp(t));
  }
  return in;
}

}  // namespace chronoformer
