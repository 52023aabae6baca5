#include <cmath>

#include "doctest.h"
#include "motionmask/errors.hpp"
#include "motionmask/synth.hpp"

using namespace motionmask;

namespace {

SynthConfig small_config(std::size_t n = 32) {
    SynthConfig c;
    c.num_sequences = n;
    return c;
}

} // namespace

TEST_CASE("no events and zero noise give zero labels and zero timing features") {
    SynthConfig c = small_config();
    c.noise_level = 0.0;
    Rng noise(1);
    const auto features = synth_features(c, {}, noise);
    for (double v : features.low.flat()) {
        CHECK(v == 0.0);
    }
    for (double v : event_labels({}, c.frames)) {
        CHECK(v == 0.0);
    }

    c.event_rate = 0.0;
    const auto sample = generate_sample(c, 9);
    CHECK(sample.events.empty());
    for (double v : sample.labels) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("an event on raw frames 8..15 labels exactly latent frames 2 and 3") {
    const GestureEvent ev{8, 8, Part::Hands, 1.0, 0};
    const auto labels = event_labels(std::span(&ev, 1), 64);
    REQUIRE(labels.size() == 16);
    for (std::size_t j = 0; j < labels.size(); ++j) {
        CAPTURE(j);
        if (j == 2 || j == 3) {
            CHECK(labels[j] == 1.0);
        } else {
            CHECK(labels[j] == 0.0);
        }
    }

    const GestureEvent partial{9, 8, Part::Face, 1.0, 1};
    const auto soft = event_labels(std::span(&partial, 1), 64);
    CHECK(soft[2] == doctest::Approx(0.75));
    CHECK(soft[3] == 1.0);
    CHECK(soft[4] == doctest::Approx(0.25));
}

TEST_CASE("same seed gives a bitwise identical corpus") {
    const auto a = generate(small_config(), Rng(77));
    const auto b = generate(small_config(), Rng(77));
    const auto c = generate(small_config(), Rng(78));
    REQUIRE(a.size() == b.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].motion.frames == b[i].motion.frames);
        CHECK(a[i].features.low == b[i].features.low);
        CHECK(a[i].features.high == b[i].features.high);
        CHECK(a[i].labels == b[i].labels);
        CHECK(a[i].events == b[i].events);
        any_diff = any_diff || !(a[i].motion.frames == c[i].motion.frames);
    }
    CHECK(any_diff);
}

TEST_CASE("generated samples satisfy the event and label invariants") {
    const SynthConfig c = small_config(64);
    const auto corpus = generate(c, Rng(5));
    for (const auto& s : corpus) {
        s.motion.validate();
        s.features.validate();
        CHECK(s.features.low.cols() == c.low_channels());
        CHECK(s.features.high.cols() == c.high_channels());
        CHECK(s.labels.size() == latent_frames(c.frames));
        std::vector<bool> touched(s.labels.size(), false);
        for (const auto& ev : s.events) {
            CHECK(ev.onset + ev.duration <= c.frames);
            CHECK(ev.amplitude > 0.0);
            for (std::size_t t = ev.onset; t < ev.onset + ev.duration; ++t) {
                touched[t / kDownscale] = true;
            }
        }
        for (std::size_t j = 0; j < s.labels.size(); ++j) {
            CHECK(s.labels[j] >= 0.0);
            CHECK(s.labels[j] <= 1.0);
            CHECK((s.labels[j] > 0.0) == touched[j]);
        }
        for (std::size_t i = 1; i < s.events.size(); ++i) {
            CHECK(s.events[i - 1].onset + s.events[i - 1].duration <= s.events[i].onset);
        }
    }
}

TEST_CASE("an event perturbs only its part's channels") {
    SynthConfig c = small_config();
    for (Part part : kParts) {
        const GestureEvent ev{20, 12, part, 1.0, 2};
        Rng p1(3), p2(3);
        const Tensor idle = synth_motion(c, {}, p1);
        const Tensor with = synth_motion(c, std::span(&ev, 1), p2);
        const std::size_t lo = c.layout.offset(part);
        const std::size_t hi = lo + c.layout.width(part);
        bool changed = false;
        for (std::size_t t = 0; t < c.frames; ++t) {
            for (std::size_t ch = 0; ch < c.layout.channels(); ++ch) {
                if (ch < lo || ch >= hi) {
                    CHECK(with(t, ch) == idle(t, ch));
                } else {
                    changed = changed || with(t, ch) != idle(t, ch);
                }
            }
        }
        CHECK(changed);
    }
}

TEST_CASE("features are a function of events and the noise seed") {
    const SynthConfig c = small_config();
    const std::vector<GestureEvent> events{{4, 10, Part::Upper, 0.9, 3}, {40, 8, Part::Face, 1.1, 1}};
    Rng n1(11), n2(11), n3(12);
    const auto a = synth_features(c, events, n1);
    const auto b = synth_features(c, events, n2);
    const auto d = synth_features(c, events, n3);
    CHECK(a.low == b.low);
    CHECK(a.high == b.high);
    CHECK_FALSE(a.low == d.low);
}

TEST_CASE("an event rate too high for non-overlapping slots is rejected") {
    SynthConfig c = small_config();
    c.event_rate = 2.0 * c.fps / static_cast<double>(c.slot_frames);
    CHECK_THROWS_AS(generate(c, Rng(1)), ConfigError);
    c.event_rate = c.fps / static_cast<double>(c.slot_frames);
    CHECK_NOTHROW(generate(c, Rng(1)));
}

TEST_CASE("constant motion has zero velocity percentiles") {
    std::vector<MotionSequence> clips{{Tensor(16, 24, 0.7), PartLayout{}, 30.0}, {Tensor(8, 24, -1.0), PartLayout{}, 30.0}};
    const auto stats = motion_stats(clips);
    CHECK(stats.velocity.p50 == 0.0);
    CHECK(stats.velocity.p90 == 0.0);
    CHECK(stats.velocity.p99 == 0.0);
    CHECK(stats.velocity.max == 0.0);
    CHECK_THROWS_AS(motion_stats(std::span<const MotionSequence>{}), ConfigError);
}

TEST_CASE("pooled statistics equal statistics of the concatenated corpus") {
    const auto corpus = generate(small_config(24), Rng(8));
    std::vector<MotionSequence> first, second, all;
    Tensor stacked(0, 24);
    std::vector<double> rows;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        (i < 10 ? first : second).push_back(corpus[i].motion);
        all.push_back(corpus[i].motion);
        rows.insert(rows.end(), corpus[i].motion.frames.flat().begin(), corpus[i].motion.frames.flat().end());
    }
    const auto pooled = pool_stats(motion_stats(first), motion_stats(second));
    const auto direct = motion_stats(all);

    // Two-pass oracle over every frame.
    const std::size_t n = rows.size() / 24;
    for (std::size_t c = 0; c < 24; ++c) {
        double mean = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
            mean += rows[t * 24 + c];
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
            var += (rows[t * 24 + c] - mean) * (rows[t * 24 + c] - mean);
        }
        const double sd = std::sqrt(var / static_cast<double>(n));
        CHECK(pooled.mean[c] == doctest::Approx(mean).epsilon(1e-12));
        CHECK(direct.mean[c] == doctest::Approx(mean).epsilon(1e-12));
        CHECK(pooled.stddev()[c] == doctest::Approx(sd).epsilon(1e-12));
    }
    CHECK(pooled.frames == n);
    CHECK(pooled.sequences == corpus.size());
}

TEST_CASE("event density matches the configured rate within three sigma") {
    SynthConfig c = small_config(2000);
    const auto corpus = generate(c, Rng(99));
    const auto stats = corpus_stats(corpus);
    // Each slot is a Bernoulli(p) trial.
    const double slots = static_cast<double>(c.num_sequences * (c.frames / c.slot_frames));
    const double p = c.slot_probability();
    const double sigma_events = std::sqrt(slots * p * (1.0 - p));
    const double sigma_rate = sigma_events / stats.seconds;
    CHECK(std::abs(stats.event_density() - c.event_rate) <= 3.0 * sigma_rate);
}

TEST_CASE("resampling keeps constant tracks and endpoints") {
    Tensor x = Tensor::from_rows({{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}});
    const Tensor y = resample_rows(x, 7);
    for (std::size_t t = 0; t < 7; ++t) {
        CHECK(y(t, 0) == doctest::Approx(1.0));
        CHECK(y(t, 1) == doctest::Approx(2.0));
    }
    Tensor ramp(8, 1);
    for (std::size_t t = 0; t < 8; ++t) {
        ramp(t, 0) = static_cast<double>(t);
    }
    const Tensor half = resample_rows(ramp, 4);
    // Centre of output cell j sits at input position 2j + 0.5.
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(half(j, 0) == doctest::Approx(2.0 * static_cast<double>(j) + 0.5));
    }
}
