#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "qrstore/core.hpp"

namespace qrstore {

struct WorkloadConfig {
  std::uint32_t partitions = 4;
  std::uint64_t records_per_partition = 50'000;
  std::uint32_t record_size = 100;
  double mpt_fraction = 0.0;
  double zipf_theta = 0.0;
  std::uint32_t ops_per_txn = 16;
  double write_fraction = 0.5;
  std::uint32_t partitions_per_mpt = 2;
  double rmw_fraction = 0.0;
  double abort_fraction = 0.0;
  std::uint8_t abort_threshold = 64;
  std::uint64_t seed = 1;

  /// Throws ValidationError naming the offending field.
  void validate() const;
};

/// Zipf over ranks [0, n) with P(k) proportional to 1/(k+1)^theta, sampled by
/// rejection-inversion. theta = 0 gives the uniform distribution.
class ZipfSampler {
 public:
  ZipfSampler(std::uint64_t n, double theta);

  std::uint64_t n() const noexcept { return n_; }
  double theta() const noexcept { return theta_; }

  template <class Rng>
  std::uint64_t operator()(Rng& rng) const {
    if (n_ == 1) return 0;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (;;) {
      const double u = h_integral_n_ + unit(rng) * (h_integral_x1_ - h_integral_n_);
      const double x = h_integral_inverse(u);
      double k = std::floor(x + 0.5);
      if (k < 1) k = 1;
      if (k > static_cast<double>(n_)) k = static_cast<double>(n_);
      if (k - x <= s_ || u >= h_integral(k + 0.5) - h(k)) return static_cast<std::uint64_t>(k) - 1;
    }
  }

  /// Exact probability mass of `rank`.
  double pmf(std::uint64_t rank) const;

 private:
  double h(double x) const;
  double h_integral(double x) const;
  double h_integral_inverse(double x) const;

  std::uint64_t n_;
  double theta_;
  double h_integral_x1_ = 0;
  double h_integral_n_ = 0;
  double s_ = 0;
  double norm_ = 0;
};

/// Deterministic transaction stream for one client (seed + stream id).
class WorkloadGenerator {
 public:
  WorkloadGenerator(WorkloadConfig config, std::uint64_t stream_id);

  Transaction next();
  const WorkloadConfig& config() const noexcept { return config_; }

 private:
  Key draw_key(std::uint32_t partition);

  WorkloadConfig config_;
  std::uint64_t stream_id_;
  std::uint64_t issued_ = 0;
  std::mt19937_64 rng_;
  ZipfSampler zipf_;
};

}  // namespace qrstore
