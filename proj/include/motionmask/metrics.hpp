#pragma once

#include <span>
#include <string>
#include <vector>

#include "motionmask/motion.hpp"
#include "motionmask/rvq_tokenizer.hpp"

namespace motionmask {

/// Mean over unordered clip pairs of the mean absolute elementwise difference.
double diversity(std::span<const MotionSequence> clips);

/// Frames (in seconds) where the aggregate speed over `parts` has a local minimum.
std::vector<double> motion_beats(const MotionSequence& motion, std::span<const Part> parts);

/// Mean over audio beats of exp(-dt^2 / (2 sigma^2)), dt = distance to the nearest motion beat.
double beat_consistency(const MotionSequence& motion, std::span<const double> audio_beats, double sigma,
                        std::span<const Part> parts);
double beat_consistency(const MotionSequence& motion, std::span<const double> audio_beats, double sigma = 0.1);

/// Mean squared / absolute difference over the face channels.
double vertex_mse(const MotionSequence& generated, const MotionSequence& reference);
double lvd(const MotionSequence& generated, const MotionSequence& reference);

/// Fréchet distance between Gaussians fitted to the rows of `a` and `b`
/// (covariances regularized by 1e-6 I).
double frechet_distance(const Tensor& a, const Tensor& b);

/// One row per clip: the time-mean of its encoder latent.
Tensor clip_embeddings(const MotionTokenizer& tokenizer, std::span<const MotionSequence> clips);

double toy_fgd(const MotionTokenizer& tokenizer, std::span<const MotionSequence> generated,
               std::span<const MotionSequence> reference);

struct MetricReport {
    double fgd = 0.0;
    double bc = 0.0;
    double div = 0.0;
    double mse = 0.0;
    double lvd = 0.0;
    double token_accuracy = 0.0; // base-code accuracy on frames generated from the seed
    std::size_t generated = 0;
    std::size_t reference = 0;
    std::string strategy;
    std::string config_echo;

    std::string to_json() const;
    std::string to_table() const;
};

} // namespace motionmask
