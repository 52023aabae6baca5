#include "motionmask/speech.hpp"

#include <algorithm>
#include <cmath>

#include "motionmask/errors.hpp"

namespace motionmask {

void SpeechFeatures::validate() const {
    if (low.rows() != high.rows()) {
        throw DimensionError("speech features: low has " + std::to_string(low.rows()) + " frames, high has " +
                             std::to_string(high.rows()));
    }
    if (low.rows() == 0) {
        throw DimensionError("speech features are empty");
    }
    if (!low.all_finite() || !high.all_finite()) {
        throw NumericalError("speech features contain non-finite values");
    }
}

Tensor resample_rows(const Tensor& x, std::size_t frames) {
    if (x.rows() == 0) {
        throw DimensionError("resample_rows: empty input");
    }
    if (frames == x.rows()) {
        return x;
    }
    Tensor out(frames, x.cols());
    const double ratio = static_cast<double>(x.rows()) / static_cast<double>(frames);
    const double last = static_cast<double>(x.rows() - 1);
    for (std::size_t t = 0; t < frames; ++t) {
        const double pos = std::clamp((static_cast<double>(t) + 0.5) * ratio - 0.5, 0.0, last);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, x.rows() - 1);
        const double w = pos - static_cast<double>(lo);
        for (std::size_t c = 0; c < x.cols(); ++c) {
            out(t, c) = (1.0 - w) * x(lo, c) + w * x(hi, c);
        }
    }
    return out;
}

} // namespace motionmask
