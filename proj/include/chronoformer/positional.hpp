// Position information: sinusoidal encodings, the rotation operator that
// advances an encoding by k steps, window/calendar-aware encoding variants,
// and learned calendar ("stamp") embedding tables.
#pragma once

#include <string>
#include <vector>

#include "chronoformer/tensor.hpp"

namespace chronoformer {

enum class PEVariant {
  sinusoidal,      // position as given
  global,          // absolute index in the whole series
  relative,        // offset within the current window, restarting at 0
  periodic_daily,  // five-minute bucket of the day, 0..287
  periodic_weekly, // day of week, 0 = Sunday
};

PEVariant pe_variant_from_string(const std::string& name);
std::string to_string(PEVariant v);

struct PESpec {
  int d = 0;            // embedding size, must be even
  double base = 1e4;    // wavelength constant, must exceed 1
  PEVariant variant = PEVariant::sinusoidal;
};

// base^{-2i/d}, the angular frequency of sin/cos pair i.
double pe_pair_frequency(int i, const PESpec& spec);

// Entry 2i = sin(pos * f_i), entry 2i+1 = cos(pos * f_i). All entries stay
// in [-1, 1] and the map needs no length registration.
Tensor sinusoidal_pe(long long pos, const PESpec& spec);

// Columns first_pos .. first_pos + n - 1 of the sinusoidal map, d rows.
Tensor pe_matrix(int n, const PESpec& spec, long long first_pos = 0);

// Applies the per-pair rotation [[cos(f_i k), sin(f_i k)],
// [-sin(f_i k), cos(f_i k)]]; for p = sinusoidal_pe(pos) the result equals
// sinusoidal_pe(pos + k). k = 0 is the exact identity.
Tensor rotation_advance(const Tensor& p, long long k, const PESpec& spec);

// Calendar attributes of one position. Buckets are validated on use.
struct StampFeatures {
  int minute_bucket = 0;  // 0..287, five-minute resolution
  int day_of_week = 0;    // 0..6, 0 = Sunday
  int holiday = 0;        // 0 or 1
};

// Unix timestamp (UTC seconds) to calendar features; holiday stays 0.
StampFeatures stamp_from_timestamp(long long unix_ts);

// Learned lookup tables, one row per bucket value. Zero-initialized; the
// rows are the only learnable position parameters in the library.
struct StampTables {
  Tensor minute;   // 288 x d
  Tensor day;      // 7 x d
  Tensor holiday;  // 2 x d
  static StampTables zeros(int d);
  int d() const { return minute.ndim() == 2 ? minute.dim(1) : 0; }
  void validate() const;
};

// Sum of the three looked-up table rows, as a length-d vector.
Tensor stamp_embedding(const StampFeatures& f, const StampTables& tables);

// One embedding column per feature entry; gradients reach exactly the
// looked-up rows.
Tensor stamp_matrix(const std::vector<StampFeatures>& fs,
                    const StampTables& tables);

// Variant-dispatched encoding for n positions. Periodic variants ignore
// positions and require stamps; the rest ignore stamps.
Tensor traffic_pe(const std::vector<long long>& positions, const PESpec& spec,
                  const std::vector<StampFeatures>* stamps = nullptr);

// X + P (+ S), shapes must match.
Tensor add_pe_to_embedding(const Tensor& x, const Tensor& p,
                           const Tensor* s = nullptr);

}  // namespace chronoformer
