#include "chronoformer/positional.hpp"

#include <cmath>
#include <string>

#include "chronoformer/error.hpp"

namespace chronoformer {

namespace {

void check_spec(const PESpec& spec) {
  if (spec.d <= 0 || spec.d % 2 != 0) {
    throw ConfigError("positional encoding size must be positive and even, got " +
                      std::to_string(spec.d));
  }
  if (!(spec.base > 1.0)) {
    throw ConfigError("positional encoding base must exceed 1");
  }
}

constexpr long long kSecondsPerDay = 86400;
constexpr long long kSecondsPerBucket = 300;

}  // namespace

PEVariant pe_variant_from_string(const std::string& name) {
  if (name == "sinusoidal") return PEVariant::sinusoidal;
  if (name == "global") return PEVariant::global;
  if (name == "relative") return PEVariant::relative;
  if (name == "periodic_daily") return PEVariant::periodic_daily;
  if (name == "periodic_weekly") return PEVariant::periodic_weekly;
  throw ConfigError("unknown positional-encoding variant '" + name + "'");
}

std::string to_string(PEVariant v) {
  switch (v) {
    case PEVariant::sinusoidal: return "sinusoidal";
    case PEVariant::global: return "global";
    case PEVariant::relative: return "relative";
    case PEVariant::periodic_daily: return "periodic_daily";
    case PEVariant::periodic_weekly: return "periodic_weekly";
  }
  return "?";
}

double pe_pair_frequency(int i, const PESpec& spec) {
  check_spec(spec);
  if (i < 0 || 2 * i >= spec.d) {
    throw ContractError("pair index " + std::to_string(i) +
                        " out of range for d=" + std::to_string(spec.d));
  }
  return std::pow(spec.base, -2.0 * i / spec.d);
}

Tensor sinusoidal_pe(long long pos, const PESpec& spec) {
  check_spec(spec);
  if (pos < 0) {
    throw ContractError("positional encoding position must be non-negative");
  }
  Tensor out({spec.d});
  for (int i = 0; i < spec.d / 2; ++i) {
    const double ang =
        static_cast<double>(pos) * std::pow(spec.base, -2.0 * i / spec.d);
    out.values()[2 * i] = std::sin(ang);
    out.values()[2 * i + 1] = std::cos(ang);
  }
  return out;
}

Tensor pe_matrix(int n, const PESpec& spec, long long first_pos) {
  check_spec(spec);
  if (n < 1) throw DimensionError("pe_matrix needs at least one position");
  Tensor out({spec.d, n});
  for (int j = 0; j < n; ++j) {
    Tensor col = sinusoidal_pe(first_pos + j, spec);
    for (int r = 0; r < spec.d; ++r) out.at(r, j) = col.values()[r];
  }
  return out;
}

Tensor rotation_advance(const Tensor& p, long long k, const PESpec& spec) {
  check_spec(spec);
  if (p.ndim() != 1 || p.dim(0) != spec.d) {
    throw DimensionError("rotation_advance expects a length-" +
                         std::to_string(spec.d) + " vector");
  }
  if (k == 0) return p.clone();
  Tensor out({spec.d});
  for (int i = 0; i < spec.d / 2; ++i) {
    const double ang =
        static_cast<double>(k) * std::pow(spec.base, -2.0 * i / spec.d);
    const double c = std::cos(ang), s = std::sin(ang);
    const double a = p.values()[2 * i], b = p.values()[2 * i + 1];
    out.values()[2 * i] = c * a + s * b;
    out.values()[2 * i + 1] = -s * a + c * b;
  }
  return out;
}

StampFeatures stamp_from_timestamp(long long unix_ts) {
  long long sec_of_day = unix_ts % kSecondsPerDay;
  long long days = unix_ts / kSecondsPerDay;
  if (sec_of_day < 0) {  // floor toward earlier days for pre-epoch stamps
    sec_of_day += kSecondsPerDay;
    days -= 1;
  }
  StampFeatures f;
  f.minute_bucket = static_cast<int>(sec_of_day / kSecondsPerBucket);
  f.day_of_week = static_cast<int>((days % 7 + 7 + 4) % 7);  // epoch day 0 = Thursday
  f.holiday = 0;
  return f;
}

StampTables StampTables::zeros(int d) {
  if (d < 1) throw ConfigError("stamp tables need a positive embedding size");
  StampTables t;
  t.minute = Tensor({288, d});
  t.day = Tensor({7, d});
  t.holiday = Tensor({2, d});
  return t;
}

void StampTables::validate() const {
  const bool ok = minute.ndim() == 2 && day.ndim() == 2 &&
                  holiday.ndim() == 2 && minute.dim(0) == 288 &&
                  day.dim(0) == 7 && holiday.dim(0) == 2 &&
                  minute.dim(1) == day.dim(1) &&
                  minute.dim(1) == holiday.dim(1);
  if (!ok) throw DimensionError("stamp tables must be 288xd, 7xd and 2xd");
}

namespace {

void check_features(const StampFeatures& f) {
  if (f.minute_bucket < 0 || f.minute_bucket > 287) {
    throw DataError("minute bucket " + std::to_string(f.minute_bucket) +
                    " outside 0..287");
  }
  if (f.day_of_week < 0 || f.day_of_week > 6) {
    throw DataError("day of week " + std::to_string(f.day_of_week) +
                    " outside 0..6");
  }
  if (f.holiday != 0 && f.holiday != 1) {
    throw DataError("holiday flag must be 0 or 1");
  }
}

}  // namespace

Tensor stamp_matrix(const std::vector<StampFeatures>& fs,
                    const StampTables& tables) {
  tables.validate();
  if (fs.empty()) throw DimensionError("stamp_matrix needs at least one entry");
  std::vector<int> buckets, dows, flags;
  for (const StampFeatures& f : fs) {
    check_features(f);
    buckets.push_back(f.minute_bucket);
    dows.push_back(f.day_of_week);
    flags.push_back(f.holiday);
  }
  Tensor rows = add(add(gather_rows(tables.minute, buckets),
                        gather_rows(tables.day, dows)),
                    gather_rows(tables.holiday, flags));
  return transpose(rows);
}

Tensor stamp_embedding(const StampFeatures& f, const StampTables& tables) {
  Tensor m = stamp_matrix({f}, tables);
  return reshape(m, {tables.d()});
}

Tensor traffic_pe(const std::vector<long long>& positions, const PESpec& spec,
                  const std::vector<StampFeatures>* stamps) {
  check_spec(spec);
  const bool periodic = spec.variant == PEVariant::periodic_daily ||
                        spec.variant == PEVariant::periodic_weekly;
  if (periodic) {
    if (stamps == nullptr || stamps->empty()) {
      throw ConfigError("periodic positional encodings need timestamps");
    }
    const int n = static_cast<int>(stamps->size());
    Tensor out({spec.d, n});
    for (int j = 0; j < n; ++j) {
      check_features((*stamps)[j]);
      const long long pos = spec.variant == PEVariant::periodic_daily
                                ? (*stamps)[j].minute_bucket
                                : (*stamps)[j].day_of_week;
      Tensor col = sinusoidal_pe(pos, spec);
      for (int r = 0; r < spec.d; ++r) out.at(r, j) = col.values()[r];
    }
    return out;
  }
  if (positions.empty()) {
    throw DimensionError("traffic_pe needs at least one position");
  }
  const int n = static_cast<int>(positions.size());
  Tensor out({spec.d, n});
  for (int j = 0; j < n; ++j) {
    const long long pos = spec.variant == PEVariant::relative
                              ? positions[j] - positions[0]
                              : positions[j];
    Tensor col = sinusoidal_pe(pos, spec);
    for (int r = 0; r < spec.d; ++r) out.at(r, j) = col.values()[r];
  }
  return out;
}

Tensor add_pe_to_embedding(const Tensor& x, const Tensor& p, const Tensor* s) {
  Tensor out = add(x, p);
  if (s != nullptr) out = add(out, *s);
  return out;
}

}  // namespace chronoformer
