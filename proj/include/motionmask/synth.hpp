#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "motionmask/motion.hpp"
#include "motionmask/rng.hpp"
#include "motionmask/speech.hpp"

namespace motionmask {

struct GestureEvent {
    std::size_t onset = 0;    // first raw frame
    std::size_t duration = 0; // frames
    Part part = Part::Hands;
    double amplitude = 1.0;
    std::size_t shape = 0;

    friend bool operator==(const GestureEvent&, const GestureEvent&) = default;
};

struct SynthConfig {
    std::size_t num_sequences = 512;
    std::size_t frames = 64;
    PartLayout layout{};
    double fps = 30.0;
    /// Expected gesture events per second.
    double event_rate = 1.2;
    double noise_level = 0.05;
    std::size_t num_shapes = 4;
    /// Events are placed at most one per slot of this many frames.
    std::size_t slot_frames = 16;
    std::size_t min_event_frames = 8;
    double idle_amplitude = 0.15;

    std::size_t low_channels() const { return 2; }
    std::size_t high_channels() const { return num_shapes + kPartCount; }
    /// Probability that a slot carries an event.
    double slot_probability() const;
    void validate() const;
};

struct SynthSample {
    MotionSequence motion;
    SpeechFeatures features;
    /// Per latent frame: fraction of its 4 raw frames covered by an event.
    std::vector<double> labels;
    std::vector<GestureEvent> events;
    std::uint64_t seed = 0;
};

/// Motion for a sample: per-channel idle sinusoids plus event bursts on the
/// event's part channels. Exposed so tests can rebuild pieces independently.
Tensor synth_motion(const SynthConfig& config, std::span<const GestureEvent> events, Rng& phase_rng);
SpeechFeatures synth_features(const SynthConfig& config, std::span<const GestureEvent> events, Rng& noise_rng);
std::vector<double> event_labels(std::span<const GestureEvent> events, std::size_t frames);

/// Builds one sample from its own seed; `generate` calls this per sequence.
SynthSample generate_sample(const SynthConfig& config, std::uint64_t seed);
/// Sequences are independent and generated in parallel on split streams.
std::vector<SynthSample> generate(const SynthConfig& config, const Rng& rng);

struct Percentiles {
    double p50 = 0.0;
    double p90 = 0.0;
    double p99 = 0.0;
    double max = 0.0;
};

struct CorpusStats {
    std::size_t sequences = 0;
    std::size_t frames = 0;
    std::vector<double> mean;
    std::vector<double> m2; // sum of squared deviations per channel
    Percentiles velocity;   // per-frame L2 norm of frame differences
    std::size_t events = 0;
    double seconds = 0.0;

    std::vector<double> stddev() const;
    double event_density() const { return seconds > 0.0 ? static_cast<double>(events) / seconds : 0.0; }
};

CorpusStats corpus_stats(std::span<const SynthSample> corpus);
CorpusStats motion_stats(std::span<const MotionSequence> clips);
/// Pools mean/variance/event counts of two disjoint corpora (velocity percentiles are not poolable and are cleared).
CorpusStats pool_stats(const CorpusStats& a, const CorpusStats& b);

/// Per-frame L2 speed of motion over all channels (frames - 1 values).
std::vector<double> frame_speeds(const Tensor& frames);
double percentile(std::vector<double> values, double q);

} // namespace motionmask
