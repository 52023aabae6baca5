#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "motionmask/tensor.hpp"

namespace motionmask {

enum class Part : std::size_t { Face = 0, Hands = 1, Upper = 2, Lower = 3 };

inline constexpr std::array<Part, 4> kParts = {Part::Face, Part::Hands, Part::Upper, Part::Lower};
inline constexpr std::size_t kPartCount = 4;

const char* part_name(Part part);
Part part_from_name(const std::string& name);

/// Four contiguous channel ranges in face, hands, upper, lower order.
struct PartLayout {
    std::array<std::size_t, kPartCount> widths{4, 8, 8, 4};

    std::size_t width(Part p) const { return widths[static_cast<std::size_t>(p)]; }
    std::size_t offset(Part p) const;
    std::size_t channels() const;
    void validate() const;

    friend bool operator==(const PartLayout&, const PartLayout&) = default;
};

/// Frames x channels motion clip. Latent tokens cover kDownscale frames each.
struct MotionSequence {
    Tensor frames;
    PartLayout layout;
    double fps = 30.0;

    std::size_t frame_count() const { return frames.rows(); }
    /// Checks channel count against the layout, the seed-frame minimum, and finiteness.
    void validate() const;
};

inline constexpr std::size_t kDownscale = 4;
/// Minimum clip length: one latent token's worth of frames.
inline constexpr std::size_t kSeedFrames = 4;

inline std::size_t latent_frames(std::size_t frames) { return (frames + kDownscale - 1) / kDownscale; }

} // namespace motionmask
