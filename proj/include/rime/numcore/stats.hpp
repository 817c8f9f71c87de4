#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>
#include <vector>

#include "rime/numcore/errors.hpp"
#include "rime/numcore/tensor.hpp"

namespace rime {

inline double sample_mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Standard error of the mean (n - 1 denominator); zero for fewer than two values.
inline double standard_error(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = sample_mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

inline double pearson_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw UsageError("pearson_correlation: need two equal-length samples");
  const double ma = sample_mean(a), mb = sample_mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// Equal-mass bin index of every value (bins from the sample quantiles).
inline std::vector<std::size_t> quantile_bins(std::span<const double> v, std::size_t bins) {
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> edges;
  for (std::size_t b = 1; b < bins; ++b) edges.push_back(sorted[b * sorted.size() / bins]);
  std::vector<std::size_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), v[i]) - edges.begin());
  }
  return out;
}

/// Plug-in MI (nats) between two discretised variables.
inline double binned_mi_from_codes(std::span<const std::size_t> a, std::size_t na, std::span<const std::size_t> b,
                                   std::size_t nb) {
  std::vector<double> joint(na * nb, 0.0), pa(na, 0.0), pb(nb, 0.0);
  const double w = 1.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[a[i] * nb + b[i]] += w;
    pa[a[i]] += w;
    pb[b[i]] += w;
  }
  double mi = 0.0;
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      const double p = joint[i * nb + j];
      if (p > 0.0) mi += p * std::log(p / (pa[i] * pb[j]));
    }
  return mi;
}

/// Histogram MI between two continuous samples using equal-mass bins, with
/// the Miller-Madow bias correction.
inline double binned_mi(std::span<const double> a, std::span<const double> b, std::size_t bins = 16) {
  if (a.size() != b.size() || a.empty()) throw UsageError("binned_mi: need two equal-length non-empty samples");
  const auto ca = quantile_bins(a, bins);
  const auto cb = quantile_bins(b, bins);
  const double raw = binned_mi_from_codes(ca, bins, cb, bins);
  const double correction = static_cast<double>((bins - 1) * (bins - 1)) / (2.0 * static_cast<double>(a.size()));
  return std::max(0.0, raw - correction);
}

/// Same, for a discrete label against a continuous sample.
inline double binned_mi_discrete(std::span<const int> labels, std::size_t classes, std::span<const double> b,
                                 std::size_t bins = 16) {
  if (labels.size() != b.size() || labels.empty()) throw UsageError("binned_mi_discrete: length mismatch");
  std::vector<std::size_t> ca(labels.begin(), labels.end());
  const auto cb = quantile_bins(b, bins);
  const double raw = binned_mi_from_codes(ca, classes, cb, bins);
  const double correction = static_cast<double>((classes - 1) * (bins - 1)) / (2.0 * static_cast<double>(b.size()));
  return std::max(0.0, raw - correction);
}

/// 64-bit FNV-1a, used for parameter and log digests.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update(const Matrix& m) { update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double)); }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t digest(std::span<const Tensor> tensors) {
  Fnv1a h;
  for (const auto& t : tensors) h.update(t.value());
  return h.value();
}

inline std::uint64_t digest(std::string_view text) {
  Fnv1a h;
  h.update(text);
  return h.value();
}

}  // namespace rime
