#pragma once

// Counter-based random numbers. Every consumer addresses its stream by a key
// (seed) and a pair of stream words, so a replication or bootstrap draw
// produces the same numbers no matter which thread runs it or in what order.

#include <array>
#include <cstddef>
#include <cstdint>

namespace mrgmm::rng {

using Philox4x32Counter = std::array<std::uint32_t, 4>;
using Philox4x32Key = std::array<std::uint32_t, 2>;

// Philox4x32 with 10 rounds (Salmon et al. 2011).
Philox4x32Counter philox4x32(Philox4x32Counter counter, Philox4x32Key key);

// Stream word tags. Simulation data for replication r uses (r, kDataStream);
// bootstrap draw b uses (r, b) for uniform resampling and
// (r, kWeightedBit | b) for EL-weighted resampling.
inline constexpr std::uint32_t kDataStream = 0xFFFFFFFFu;
inline constexpr std::uint32_t kWeightedBit = 0x80000000u;

class KeyedStream {
public:
    KeyedStream(std::uint64_t seed, std::uint32_t stream_a, std::uint32_t stream_b);

    std::uint64_t next_u64();

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform index in [0, n). Consumes exactly one 64-bit word.
    std::size_t index(std::size_t n);

    // Two independent standard normals by Box-Muller. Consumes exactly two
    // 64-bit words, so streams stay aligned across parameter sweeps.
    std::array<double, 2> normal_pair();

private:
    void refill();

    Philox4x32Key key_;
    std::uint32_t stream_a_;
    std::uint32_t stream_b_;
    std::uint64_t block_ = 0;
    std::array<std::uint64_t, 2> buffer_{};
    int available_ = 0;
};

}  // namespace mrgmm::rng
