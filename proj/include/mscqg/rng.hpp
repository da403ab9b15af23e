// Seeded random streams. All randomness in the project flows from one run
// seed through named sub-streams so that each stage reproduces on its own.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace mscqg {

using Rng = std::mt19937_64;

/// Derives an independent generator for `stream` from the run seed.
Rng make_stream(std::uint64_t seed, std::string_view stream);

/// Uniform double in [0, 1) with 53 random bits; portable across standard
/// libraries, unlike std::uniform_real_distribution.
double uniform01(Rng& rng);
/// Uniform integer in [0, n).
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);
double standard_normal(Rng& rng);
/// Normal(0, std) resampled until it lies within two standard deviations.
double truncated_normal(Rng& rng, double std);
/// Draws an index with probability proportional to `weights` (non-negative).
/// Zero-weight entries are never returned.
std::size_t sample_categorical(Rng& rng, std::span<const double> weights);

}  // namespace mscqg
