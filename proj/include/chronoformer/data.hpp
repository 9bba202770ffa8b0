// Series generation, CSV ingestion, windowing, time-delay embedding,
// normalization, baselines, and forecast metrics. Everything here is a pure
// transformation; datasets are immutable once built.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "chronoformer/blocks.hpp"
#include "chronoformer/tensor.hpp"

namespace chronoformer {

// Rows are time steps, columns are variables. Timestamps may be epoch
// seconds or plain indices; they only have to increase strictly.
struct TimeSeries {
  std::vector<long long> timestamps;
  Tensor values;  // n x v

  int length() const;
  int width() const;
  void validate() const;  // sizes agree, strictly increasing, all finite
};

enum class SyntheticKind { sine, trend_seasonal };

SyntheticKind synthetic_kind_from_string(const std::string& name);
std::string to_string(SyntheticKind kind);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::sine;
  int period = 64;    // samples per cycle
  double sigma = 0.0; // additive gaussian noise
  double slope = 0.0; // trend_seasonal only
  long long first_timestamp = 0;
  long long step_seconds = 1;  // timestamp spacing
};

// sin(2 pi t / P) (+ slope t) + noise, deterministic per seed.
TimeSeries gen_synthetic(const SyntheticSpec& spec, int n, std::uint64_t seed);

// One supervised example: the target rows immediately follow the input rows
// in the source series.
struct WindowPair {
  Tensor input;   // M x v
  Tensor target;  // H x v
  long long first_index = 0;  // row offset of the input start
  std::vector<long long> input_times, target_times;
};

struct NormStats {
  std::vector<double> mu, sigma;  // per variable
  bool empty() const { return mu.empty(); }
};

struct WindowedDataset {
  std::vector<WindowPair> pairs;
  int window = 0;   // M
  int horizon = 0;  // H
  NormStats stats;  // the normalization applied; empty means raw
};

// Windows at offsets 0, stride, 2 stride, ...; count (n-M-H)/stride + 1.
WindowedDataset make_windows(const TimeSeries& ts, int window, int horizon,
                             int stride = 1);

// Row t becomes (x_t, x_{t-lag}, ..., x_{t-(dim-1) lag}) per variable;
// the undefined warm-up prefix is dropped, so the output is shorter by
// (dim-1) lag rows. Output column a * dim + j holds variable a at lag j.
TimeSeries time_delay_embed(const TimeSeries& ts, int dim, int lag);

// Appends first and second differences: output column a*3 is the variable,
// a*3+1 its first difference, a*3+2 its second; the first two rows go away.
TimeSeries add_difference_features(const TimeSeries& ts);

// Per-variable mean and standard deviation over every input and target
// entry of (what should be) the training split.
NormStats compute_norm_stats(const WindowedDataset& train);

// (x - mu) / sigma with the supplied statistics; the result remembers them.
WindowedDataset zscore_normalize(const WindowedDataset& ds,
                                 const NormStats& stats);

// Same transform for a loose rows-by-variables matrix, and its inverse.
Tensor zscore_apply(const Tensor& rows_by_vars, const NormStats& stats);
Tensor denormalize(const Tensor& rows_by_vars, const NormStats& stats);

// Elementwise over all entries; shapes must match.
double rmse(const Tensor& pred, const Tensor& truth);
double mae(const Tensor& pred, const Tensor& truth);

enum class BaselineKind { persistence, seasonal };

BaselineKind baseline_kind_from_string(const std::string& name);
std::string to_string(BaselineKind kind);

// persistence repeats the last observed row; seasonal copies the row one
// period back (tiling when the horizon exceeds the period).
Tensor baseline_forecast(BaselineKind kind, const Tensor& window_rows,
                         int horizon, int period = 0);

struct SeriesSplit {
  TimeSeries train, val, test;
};

// Chronological split; shuffling across time would leak future information.
SeriesSplit chrono_split(const TimeSeries& ts, double train_frac = 0.70,
                         double val_frac = 0.15);

// CSV: header `timestamp,v1[,v2,...]`, then one integer timestamp and v
// decimal values per line. Write/read round-trips exactly at 17 significant
// digits.
TimeSeries read_series_csv(std::istream& is);
TimeSeries read_series_csv_file(const std::string& path);
void write_series_csv(const TimeSeries& ts, std::ostream& os);
void write_series_csv_file(const TimeSeries& ts, const std::string& path);

// Model-facing view of one window: transposed to width x window, start
// token from the last observed row, targets transposed likewise. Calendar
// stamps are derived from the stored timestamps when requested.
ModelInput to_model_input(const WindowPair& pair, bool with_stamps = false);

}  // namespace chronoformer
