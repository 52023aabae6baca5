#pragma once

#include "motionmask/tensor.hpp"

namespace motionmask {

/// Paired low-level (timing) and high-level (semantic) feature tracks for one utterance.
struct SpeechFeatures {
    Tensor low;
    Tensor high;

    std::size_t frames() const { return low.rows(); }
    void validate() const;
};

/// Linear interpolation of rows onto `frames` rows, aligning cell centres.
Tensor resample_rows(const Tensor& x, std::size_t frames);

} // namespace motionmask
