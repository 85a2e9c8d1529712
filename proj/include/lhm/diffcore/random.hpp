#pragma once

#include "lhm/diffcore/plain.hpp"

#include <cstdint>
#include <initializer_list>
#include <random>
#include <utility>
#include <vector>

namespace lhm {

// SplitMix64 finalizer; used to derive independent stream seeds from a tuple
// of counters (seed, purpose, record, epoch, ...).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6A09E667F3BCC908ULL;
  for (auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_stream(std::initializer_list<std::uint64_t> parts) { return Rng(stream_key(parts)); }

// Stream purposes, kept stable so that stored seeds stay meaningful.
enum class Purpose : std::uint64_t {
  generator_matrices = 1,
  generator_record = 2,
  split = 3,
  init = 4,
  train_epoch = 5,
  train_sample = 6,
  validation = 7,
  predict = 8,
  bootstrap = 9,
};

inline std::uint64_t tag(Purpose p) { return static_cast<std::uint64_t>(p); }

inline ad::Mat standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  ad::Mat m(rows, cols);
  // column-major fill keeps column j independent of later columns
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = n(rng);
  return m;
}

// Fisher-Yates with explicit draws; std::shuffle's use of the engine is
// implementation-defined.
inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

namespace ad {

// mu + exp(log_scale) * noise, differentiable in mu and log_scale.
template <class T>
T reparameterized_gaussian_sample(const T& mu, const T& log_scale, const Mat& noise) {
  const Mat& m = value_of(mu);
  const Mat& s = value_of(log_scale);
  if (m.rows() != s.rows() || m.rows() != noise.rows() || (m.cols() != noise.cols() && m.cols() != 1) ||
      s.cols() != m.cols())
    throw ContractError("reparameterized_gaussian_sample: shape mismatch");
  return add(mu, mul(exp(log_scale), lift(mu, noise)));
}

}  // namespace ad
}  // namespace lhm
