#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "civkit/errors.hpp"

namespace civkit {

// Moment-convention (1/n) mean, variance, covariance. All estimating-equation
// algebra in this library uses 1/n normalization so closed-form identities
// (attenuation correction, reliability round trips) hold exactly.
inline double mean_of(const Eigen::VectorXd& v) { return v.mean(); }

inline double var_mom(const Eigen::VectorXd& v) {
  const double m = v.mean();
  return (v.array() - m).square().mean();
}

inline double cov_mom(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return ((a.array() - a.mean()) * (b.array() - b.mean())).mean();
}

// Sample variance with the R-1 denominator, used for Monte Carlo summaries.
inline double var_sample(const std::vector<double>& v) {
  const auto n = static_cast<double>(v.size());
  if (v.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= n;
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / (n - 1.0);
}

inline double mean_sample(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  return v.empty() ? 0.0 : m / static_cast<double>(v.size());
}

// Quantile of a sample by linear interpolation between order statistics
// (the "type 7" convention): q(p) = v[(m-1)p] with fractional indexing.
inline double quantile_type7(std::vector<double> v, double p) {
  if (v.empty()) throw precondition_error("quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = h - std::floor(h);
  return v[lo] + frac * (v[hi] - v[lo]);
}

// Runs fn(i) for i in [0, count). Results must be written to caller-owned
// slots indexed by i so the outcome is independent of scheduling.
inline void parallel_for(std::int64_t count, int threads,
                         const std::function<void(std::int64_t)>& fn) {
  threads = std::max(1, threads);
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw > 0) threads = std::min(threads, hw);
  if (threads <= 1 || count <= 1) {
    for (std::int64_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace civkit
