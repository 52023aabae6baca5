#include "motionmask/motion.hpp"

#include "motionmask/errors.hpp"

namespace motionmask {

const char* part_name(Part part) {
    switch (part) {
    case Part::Face:
        return "face";
    case Part::Hands:
        return "hands";
    case Part::Upper:
        return "upper";
    case Part::Lower:
        return "lower";
    }
    return "?";
}

Part part_from_name(const std::string& name) {
    for (Part p : kParts) {
        if (name == part_name(p)) {
            return p;
        }
    }
    throw FormatError("unknown body part '" + name + "'");
}

std::size_t PartLayout::offset(Part p) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(p); ++i) {
        off += widths[i];
    }
    return off;
}

std::size_t PartLayout::channels() const {
    std::size_t n = 0;
    for (std::size_t w : widths) {
        n += w;
    }
    return n;
}

void PartLayout::validate() const {
    for (Part p : kParts) {
        if (width(p) == 0) {
            throw ConfigError(std::string("part layout: ") + part_name(p) + " has no channels");
        }
    }
}

void MotionSequence::validate() const {
    layout.validate();
    if (frames.cols() != layout.channels()) {
        throw ConfigError("motion has " + std::to_string(frames.cols()) + " channels but layout covers " +
                          std::to_string(layout.channels()));
    }
    if (frames.rows() < kSeedFrames) {
        throw SequenceTooShortError("motion has " + std::to_string(frames.rows()) + " frames; at least " +
                                    std::to_string(kSeedFrames) + " required");
    }
    if (!frames.all_finite()) {
        throw NumericalError("motion contains non-finite values");
    }
    if (!(fps > 0.0)) {
        throw ConfigError("motion fps must be positive");
    }
}

} // namespace motionmask
