#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace cefgl {

// Every stochastic component owns one of these; never share a stream between
// components that may run concurrently.
using Rng = std::mt19937_64;

inline Rng make_stream(std::uint64_t seed, std::uint64_t stream_id = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id),
                    static_cast<std::uint32_t>(stream_id >> 32), 0x5eedu};
  return Rng(seq);
}

// Uniform in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

inline double gamma_draw(Rng& rng, double shape) {
  return std::gamma_distribution<double>(shape, 1.0)(rng);
}

inline double beta_draw(Rng& rng, double a, double b) {
  const double x = gamma_draw(rng, a);
  const double y = gamma_draw(rng, b);
  if (x + y <= 0.0) return a / (a + b);
  return x / (x + y);
}

inline std::vector<double> dirichlet_draw(Rng& rng, std::size_t k, double concentration) {
  std::vector<double> out(k);
  double total = 0.0;
  for (auto& v : out) {
    v = gamma_draw(rng, concentration);
    total += v;
  }
  if (total <= 0.0) {
    // All draws underflowed: put the mass on one uniformly chosen bucket.
    std::fill(out.begin(), out.end(), 0.0);
    out[uniform_index(rng, k)] = 1.0;
    return out;
  }
  for (auto& v : out) v /= total;
  return out;
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  // Fisher-Yates with our own index draw so the permutation only depends on
  // the engine output.
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void set_rng_state(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
}

}  // namespace cefgl
