#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace motionmask {

struct RngState {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    friend bool operator==(const RngState&, const RngState&) = default;
};

/// Counter-based generator: draw n is a pure function of (seed, n), so a stream
/// can be recreated from its state and split into independent substreams.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) : state_{seed, counter} {}
    explicit Rng(RngState state) : state_(state) {}

    std::uint64_t next_u64();
    /// Uniform on [0, 1) with 53 bits of resolution.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    /// Uniform integer in [0, n). n must be positive.
    std::size_t index(std::size_t n);

    /// Independent stream keyed by `stream`; does not advance this generator.
    Rng split(std::uint64_t stream) const;
    Rng split(std::string_view name) const;

    RngState state() const noexcept { return state_; }

private:
    RngState state_;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_name(std::string_view name);

} // namespace motionmask
