#include "qrstore/workload.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qrstore {

namespace {

void check_fraction(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string(name) + " must be in [0, 1]");
}

// log1p(x)/x and expm1(x)/x, continuous at 0.
double helper1(double x) { return std::abs(x) > 1e-8 ? std::log1p(x) / x : 1 - x * (0.5 - x * (1.0 / 3 - 0.25 * x)); }
double helper2(double x) {
  return std::abs(x) > 1e-8 ? std::expm1(x) / x : 1 + x * 0.5 * (1 + x * (1.0 / 3) * (1 + 0.25 * x));
}

}  // namespace

void WorkloadConfig::validate() const {
  if (partitions == 0) throw ValidationError("partitions must be >= 1");
  if (records_per_partition == 0) throw ValidationError("records_per_partition must be >= 1");
  if (record_size == 0) throw ValidationError("record_size must be >= 1");
  if (ops_per_txn == 0) throw ValidationError("ops_per_txn must be >= 1");
  check_fraction(mpt_fraction, "mpt_fraction");
  check_fraction(write_fraction, "write_fraction");
  check_fraction(rmw_fraction, "rmw_fraction");
  check_fraction(abort_fraction, "abort_fraction");
  if (write_fraction + rmw_fraction + abort_fraction > 1.0 + 1e-12) {
    throw ValidationError("write_fraction + rmw_fraction + abort_fraction must be <= 1");
  }
  if (!(zipf_theta >= 0.0 && zipf_theta < 1.0)) throw ValidationError("zipf_theta must be in [0, 1)");
  if (partitions_per_mpt == 0 || partitions_per_mpt > partitions) {
    throw ValidationError("partitions_per_mpt must be in [1, partitions]");
  }
  if (mpt_fraction > 0 && partitions_per_mpt > ops_per_txn) {
    throw ValidationError("partitions_per_mpt must be <= ops_per_txn");
  }
}

ZipfSampler::ZipfSampler(std::uint64_t n, double theta) : n_(n), theta_(theta) {
  if (n == 0) throw ValidationError("zipf domain must be non-empty");
  if (!(theta >= 0.0)) throw ValidationError("zipf theta must be >= 0");
  h_integral_x1_ = h_integral(1.5) - 1.0;
  h_integral_n_ = h_integral(static_cast<double>(n) + 0.5);
  s_ = 2.0 - h_integral_inverse(h_integral(2.5) - h(2.0));
  // Normalizer for pmf(); summed from the small terms up.
  double z = 0;
  for (std::uint64_t k = n; k >= 1; --k) z += std::pow(static_cast<double>(k), -theta);
  norm_ = z;
}

double ZipfSampler::h(double x) const { return std::exp(-theta_ * std::log(x)); }

double ZipfSampler::h_integral(double x) const {
  const double lx = std::log(x);
  return helper2((1.0 - theta_) * lx) * lx;
}

double ZipfSampler::h_integral_inverse(double x) const {
  double t = x * (1.0 - theta_);
  if (t < -1.0) t = -1.0;
  return std::exp(helper1(t) * x);
}

double ZipfSampler::pmf(std::uint64_t rank) const {
  if (rank >= n_) return 0.0;
  return std::pow(static_cast<double>(rank + 1), -theta_) / norm_;
}

// ---------------------------------------------------------------------------

WorkloadGenerator::WorkloadGenerator(WorkloadConfig config, std::uint64_t stream_id)
    : config_(std::move(config)),
      stream_id_(stream_id),
      rng_(config_.seed + stream_id),
      zipf_((config_.validate(), config_.records_per_partition), config_.zipf_theta) {}

Key WorkloadGenerator::draw_key(std::uint32_t partition) {
  return Key{zipf_(rng_) * config_.partitions + partition};
}

Transaction WorkloadGenerator::next() {
  const std::uint32_t P = config_.partitions;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::uint32_t> chosen;
  const bool mpt = P > 1 && config_.partitions_per_mpt > 1 && unit(rng_) < config_.mpt_fraction;
  if (mpt) {
    std::vector<std::uint32_t> all(P);
    std::iota(all.begin(), all.end(), 0u);
    for (std::uint32_t i = 0; i < config_.partitions_per_mpt; ++i) {
      std::uniform_int_distribution<std::uint32_t> pick(i, P - 1);
      std::swap(all[i], all[pick(rng_)]);
      chosen.push_back(all[i]);
    }
  } else {
    std::uniform_int_distribution<std::uint32_t> pick(0, P - 1);
    chosen.push_back(pick(rng_));
  }

  Transaction t;
  t.client_id = stream_id_;
  t.ops.reserve(config_.ops_per_txn);
  std::uniform_int_distribution<int> byte(0, 255);
  for (std::uint32_t i = 0; i < config_.ops_per_txn; ++i) {
    const std::uint32_t part = chosen[i % chosen.size()];
    const Key k = draw_key(part);
    const double u = unit(rng_);
    if (u < config_.write_fraction) {
      Bytes v(config_.record_size);
      for (auto& b : v) b = static_cast<std::uint8_t>(byte(rng_));
      t.ops.push_back(Operation::update(k, std::move(v)));
    } else if (u < config_.write_fraction + config_.rmw_fraction) {
      const Key src = draw_key(chosen[(i + 1) % chosen.size()]);
      t.ops.push_back(Operation::rmw(k, src));
    } else if (u < config_.write_fraction + config_.rmw_fraction + config_.abort_fraction) {
      t.ops.push_back(Operation::cond_abort(k, config_.abort_threshold));
    } else {
      t.ops.push_back(Operation::read(k));
    }
  }
  ++issued_;
  return t;
}

}  // namespace qrstore
