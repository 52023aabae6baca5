#include "motionmask/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "motionmask/errors.hpp"

namespace motionmask {

namespace {

constexpr double kNarrowSigma = 1.5; // frames
constexpr double kWideSigma = 4.0;

// Truncated Gaussian taps at offsets -3σ..3σ, peak 1.
std::vector<double> gaussian_taps(double sigma) {
    const auto half = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> taps;
    for (int d = -half; d <= half; ++d) {
        taps.push_back(std::exp(-0.5 * d * d / (sigma * sigma)));
    }
    return taps;
}

// Same-length convolution of each column of x with symmetric taps, scaled by `norm`.
Tensor convolve_columns(const Tensor& x, const std::vector<double>& taps, double norm) {
    Tensor out(x.rows(), x.cols());
    const auto half = static_cast<long>(taps.size() / 2);
    const auto frames = static_cast<long>(x.rows());
    for (long t = 0; t < frames; ++t) {
        for (long d = -half; d <= half; ++d) {
            const long src = t + d;
            if (src < 0 || src >= frames) {
                continue;
            }
            const double w = taps[static_cast<std::size_t>(d + half)] / norm;
            for (std::size_t c = 0; c < x.cols(); ++c) {
                out(static_cast<std::size_t>(t), c) += w * x(static_cast<std::size_t>(src), c);
            }
        }
    }
    return out;
}

double shape_value(std::size_t shape, double u, std::size_t channel) {
    const double envelope = std::sin(std::numbers::pi * u);
    const double carrier = std::sin(static_cast<double>(shape + 1) * std::numbers::pi * u);
    const double weight = (channel + shape) % 2 == 0 ? 1.0 : -0.5;
    return envelope * carrier * weight;
}

} // namespace

double SynthConfig::slot_probability() const {
    return event_rate * static_cast<double>(slot_frames) / fps;
}

void SynthConfig::validate() const {
    layout.validate();
    if (frames < kSeedFrames) {
        throw ConfigError("synth: frames must be at least " + std::to_string(kSeedFrames));
    }
    if (num_sequences == 0) {
        throw ConfigError("synth: num_sequences must be positive");
    }
    if (!(fps > 0.0) || event_rate < 0.0 || noise_level < 0.0 || idle_amplitude < 0.0) {
        throw ConfigError("synth: fps must be positive and rates/levels non-negative");
    }
    if (num_shapes == 0 || slot_frames == 0 || min_event_frames == 0 || min_event_frames > slot_frames) {
        throw ConfigError("synth: need num_shapes > 0 and 0 < min_event_frames <= slot_frames");
    }
    if (slot_probability() > 1.0) {
        throw ConfigError("synth: event rate " + std::to_string(event_rate) + "/s needs more than one event per " +
                          std::to_string(slot_frames) + "-frame slot; non-overlapping placement is impossible");
    }
}

Tensor synth_motion(const SynthConfig& config, std::span<const GestureEvent> events, Rng& phase_rng) {
    const std::size_t channels = config.layout.channels();
    Tensor frames(config.frames, channels);
    for (std::size_t c = 0; c < channels; ++c) {
        const double freq = 0.5 + 0.1 * static_cast<double>(c); // Hz, distinct per channel
        const double phase = phase_rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (std::size_t t = 0; t < config.frames; ++t) {
            frames(t, c) = config.idle_amplitude *
                           std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(t) / config.fps + phase);
        }
    }
    for (const auto& ev : events) {
        const std::size_t offset = config.layout.offset(ev.part);
        const std::size_t width = config.layout.width(ev.part);
        for (std::size_t k = 0; k < ev.duration; ++k) {
            const double u = (static_cast<double>(k) + 0.5) / static_cast<double>(ev.duration);
            for (std::size_t j = 0; j < width; ++j) {
                frames(ev.onset + k, offset + j) += ev.amplitude * shape_value(ev.shape, u, j);
            }
        }
    }
    return frames;
}

SpeechFeatures synth_features(const SynthConfig& config, std::span<const GestureEvent> events, Rng& noise_rng) {
    Tensor timing(config.frames, config.low_channels());
    Tensor identity(config.frames, config.high_channels());
    for (const auto& ev : events) {
        timing(ev.onset, 0) = 1.0;
        timing(ev.onset + ev.duration - 1, 1) = 1.0;
        for (std::size_t k = 0; k < ev.duration; ++k) {
            identity(ev.onset + k, ev.shape) = 1.0;
            identity(ev.onset + k, config.num_shapes + static_cast<std::size_t>(ev.part)) = 1.0;
        }
    }
    const auto narrow = gaussian_taps(kNarrowSigma);
    const auto wide = gaussian_taps(kWideSigma);
    double wide_sum = 0.0;
    for (double w : wide) {
        wide_sum += w;
    }
    SpeechFeatures out{convolve_columns(timing, narrow, 1.0), convolve_columns(identity, wide, wide_sum)};
    if (config.noise_level > 0.0) {
        for (double& v : out.low.flat()) {
            v += config.noise_level * noise_rng.normal();
        }
        for (double& v : out.high.flat()) {
            v += config.noise_level * noise_rng.normal();
        }
    }
    return out;
}

std::vector<double> event_labels(std::span<const GestureEvent> events, std::size_t frames) {
    std::vector<bool> covered(frames, false);
    for (const auto& ev : events) {
        for (std::size_t t = ev.onset; t < ev.onset + ev.duration && t < frames; ++t) {
            covered[t] = true;
        }
    }
    std::vector<double> labels(latent_frames(frames), 0.0);
    for (std::size_t j = 0; j < labels.size(); ++j) {
        std::size_t hits = 0;
        for (std::size_t t = j * kDownscale; t < (j + 1) * kDownscale && t < frames; ++t) {
            hits += covered[t] ? 1 : 0;
        }
        labels[j] = static_cast<double>(hits) / static_cast<double>(kDownscale);
    }
    return labels;
}

SynthSample generate_sample(const SynthConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    Rng event_rng = rng.split("events");
    Rng phase_rng = rng.split("phases");
    Rng noise_rng = rng.split("noise");

    SynthSample sample;
    sample.seed = seed;
    const double p = config.slot_probability();
    for (std::size_t start = 0; start + config.min_event_frames <= config.frames; start += config.slot_frames) {
        const std::size_t room = std::min(config.slot_frames, config.frames - start);
        if (event_rng.uniform() >= p) {
            continue;
        }
        GestureEvent ev;
        ev.duration = config.min_event_frames + event_rng.index(room - config.min_event_frames + 1);
        ev.onset = start + event_rng.index(room - ev.duration + 1);
        ev.part = kParts[event_rng.index(kPartCount)];
        ev.amplitude = event_rng.uniform(0.8, 1.2);
        ev.shape = event_rng.index(config.num_shapes);
        sample.events.push_back(ev);
    }
    sample.motion = MotionSequence{synth_motion(config, sample.events, phase_rng), config.layout, config.fps};
    sample.features = synth_features(config, sample.events, noise_rng);
    sample.labels = event_labels(sample.events, config.frames);
    return sample;
}

std::vector<SynthSample> generate(const SynthConfig& config, const Rng& rng) {
    config.validate();
    std::vector<SynthSample> corpus(config.num_sequences);
    const auto n = static_cast<long>(config.num_sequences);
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i) {
        const auto idx = static_cast<std::uint64_t>(i);
        corpus[static_cast<std::size_t>(i)] = generate_sample(config, rng.split(idx).state().seed);
    }
    return corpus;
}

std::vector<double> frame_speeds(const Tensor& frames) {
    std::vector<double> speeds;
    for (std::size_t t = 1; t < frames.rows(); ++t) {
        double acc = 0.0;
        for (std::size_t c = 0; c < frames.cols(); ++c) {
            const double d = frames(t, c) - frames(t - 1, c);
            acc += d * d;
        }
        speeds.push_back(std::sqrt(acc));
    }
    return speeds;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) {
        return 0.0;
    }
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<double> CorpusStats::stddev() const {
    std::vector<double> out(m2.size(), 0.0);
    if (frames == 0) {
        return out;
    }
    for (std::size_t c = 0; c < m2.size(); ++c) {
        out[c] = std::sqrt(m2[c] / static_cast<double>(frames));
    }
    return out;
}

CorpusStats pool_stats(const CorpusStats& a, const CorpusStats& b) {
    if (a.frames == 0) {
        return b;
    }
    if (b.frames == 0) {
        return a;
    }
    if (a.mean.size() != b.mean.size()) {
        throw DimensionError("pool_stats: channel counts differ");
    }
    CorpusStats out;
    out.sequences = a.sequences + b.sequences;
    out.frames = a.frames + b.frames;
    out.events = a.events + b.events;
    out.seconds = a.seconds + b.seconds;
    const auto na = static_cast<double>(a.frames);
    const auto nb = static_cast<double>(b.frames);
    const double n = na + nb;
    out.mean.resize(a.mean.size());
    out.m2.resize(a.mean.size());
    for (std::size_t c = 0; c < a.mean.size(); ++c) {
        const double delta = b.mean[c] - a.mean[c];
        out.mean[c] = a.mean[c] + delta * nb / n;
        out.m2[c] = a.m2[c] + b.m2[c] + delta * delta * na * nb / n;
    }
    return out;
}

namespace {

CorpusStats single_stats(const MotionSequence& clip) {
    CorpusStats s;
    s.sequences = 1;
    s.frames = clip.frames.rows();
    s.seconds = static_cast<double>(s.frames) / clip.fps;
    const std::size_t channels = clip.frames.cols();
    s.mean.assign(channels, 0.0);
    s.m2.assign(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
        double mean = 0.0;
        for (std::size_t t = 0; t < s.frames; ++t) {
            mean += clip.frames(t, c);
        }
        mean /= static_cast<double>(s.frames);
        double m2 = 0.0;
        for (std::size_t t = 0; t < s.frames; ++t) {
            const double d = clip.frames(t, c) - mean;
            m2 += d * d;
        }
        s.mean[c] = mean;
        s.m2[c] = m2;
    }
    return s;
}

void fill_velocity(CorpusStats& stats, std::span<const MotionSequence> clips) {
    std::vector<double> speeds;
    for (const auto& clip : clips) {
        const auto v = frame_speeds(clip.frames);
        speeds.insert(speeds.end(), v.begin(), v.end());
    }
    stats.velocity = {percentile(speeds, 0.5), percentile(speeds, 0.9), percentile(speeds, 0.99),
                      speeds.empty() ? 0.0 : *std::max_element(speeds.begin(), speeds.end())};
}

} // namespace

CorpusStats motion_stats(std::span<const MotionSequence> clips) {
    if (clips.empty()) {
        throw ConfigError("corpus_stats: corpus is empty");
    }
    CorpusStats total;
    for (const auto& clip : clips) {
        total = pool_stats(total, single_stats(clip));
    }
    fill_velocity(total, clips);
    return total;
}

CorpusStats corpus_stats(std::span<const SynthSample> corpus) {
    std::vector<MotionSequence> clips;
    clips.reserve(corpus.size());
    std::size_t events = 0;
    for (const auto& s : corpus) {
        clips.push_back(s.motion);
        events += s.events.size();
    }
    CorpusStats stats = motion_stats(clips);
    stats.events = events;
    return stats;
}

} // namespace motionmask
