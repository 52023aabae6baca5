#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "motionmask/errors.hpp"
#include "motionmask/metrics.hpp"
#include "motionmask/synth.hpp"

using namespace motionmask;

namespace {

MotionSequence random_clip(Rng rng, std::size_t frames) {
    MotionSequence m;
    m.frames = Tensor(frames, m.layout.channels());
    for (double& v : m.frames.flat()) {
        v = rng.normal();
    }
    return m;
}

MotionSequence shifted(const MotionSequence& m, double delta) {
    MotionSequence out = m;
    for (double& v : out.frames.flat()) {
        v += delta;
    }
    return out;
}

// Hands channel follows (t - t0)^2, so the aggregate speed has its only local minimum at t0.
MotionSequence single_beat_clip(std::size_t frames, std::size_t t0) {
    MotionSequence m;
    m.frames = Tensor(frames, m.layout.channels());
    const std::size_t c = m.layout.offset(Part::Hands);
    for (std::size_t t = 0; t < frames; ++t) {
        const double d = static_cast<double>(t) - static_cast<double>(t0);
        m.frames(t, c) = d * d;
    }
    return m;
}

std::vector<MotionSequence> random_set(std::size_t n, Rng rng, double offset) {
    std::vector<MotionSequence> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(shifted(random_clip(rng.split(i), 16), offset));
    }
    return out;
}

} // namespace

TEST_CASE("div closed forms and errors") {
    const MotionSequence a = random_clip(Rng(1), 12);
    const std::vector<MotionSequence> same{a, a, a};
    CHECK(diversity(same) == 0.0);
    const std::vector<MotionSequence> pair{a, shifted(a, 1.0)};
    CHECK(std::abs(diversity(pair) - 1.0) < 1e-6);

    std::vector<MotionSequence> set{a, random_clip(Rng(2), 12), random_clip(Rng(3), 12)};
    const double forward = diversity(set);
    std::swap(set[0], set[2]);
    CHECK(std::abs(diversity(set) - forward) < 1e-12);

    CHECK_THROWS_AS(diversity(std::vector<MotionSequence>{a}), ContractError);
    CHECK_THROWS_AS(diversity(std::vector<MotionSequence>{a, random_clip(Rng(4), 13)}), DimensionError);
}

TEST_CASE("beat consistency closed forms") {
    const MotionSequence m = single_beat_clip(40, 20);
    const std::vector<double> beats = motion_beats(m, std::vector<Part>{Part::Hands, Part::Upper});
    REQUIRE(beats.size() == 1);
    CHECK(beats[0] == doctest::Approx(20.0 / 30.0));

    const double on = beat_consistency(m, std::vector<double>{beats[0]}, 0.1);
    CHECK(std::abs(on - 1.0) < 1e-6);
    const double off = beat_consistency(m, std::vector<double>{beats[0] + 0.1}, 0.1);
    CHECK(std::abs(off - std::exp(-0.5)) < 1e-6);

    double previous = 1.0 + 1e-12;
    for (int k = 0; k <= 20; ++k) {
        const double bc = beat_consistency(m, std::vector<double>{beats[0] + 0.02 * k}, 0.1);
        CHECK(bc < previous);
        previous = bc;
    }

    CHECK_THROWS_AS(beat_consistency(m, std::vector<double>{0.1}, 0.0), ConfigError);
}

TEST_CASE("beat consistency without motion beats is zero") {
    MotionSequence still;
    still.frames = Tensor(20, still.layout.channels());
    CHECK(beat_consistency(still, std::vector<double>{0.2, 0.4}, 0.1) == 0.0);
}

TEST_CASE("beat consistency stays in the unit interval") {
    Rng rng(7);
    for (std::size_t i = 0; i < 200; ++i) {
        Rng r = rng.split(i);
        const MotionSequence m = random_clip(r.split("motion"), 32);
        std::vector<double> audio;
        for (int k = 0; k < 4; ++k) {
            audio.push_back(r.uniform(0.0, 32.0 / 30.0));
        }
        const double bc = beat_consistency(m, audio, 0.1);
        CHECK(bc >= 0.0);
        CHECK(bc <= 1.0);
    }
}

TEST_CASE("face mse and lvd") {
    const MotionSequence gt = random_clip(Rng(11), 10);
    CHECK(vertex_mse(gt, gt) == 0.0);
    CHECK(lvd(gt, gt) == 0.0);

    MotionSequence gen = gt;
    const std::size_t lo = gt.layout.offset(Part::Face);
    for (std::size_t t = 0; t < gen.frames.rows(); ++t) {
        for (std::size_t c = lo; c < lo + gt.layout.width(Part::Face); ++c) {
            gen.frames(t, c) += 2.0;
        }
        // Non-face channels must not count.
        gen.frames(t, gt.layout.offset(Part::Lower)) += 100.0;
    }
    CHECK(std::abs(vertex_mse(gen, gt) - 4.0) < 1e-6);
    CHECK(std::abs(lvd(gen, gt) - 2.0) < 1e-6);

    const MotionSequence other = random_clip(Rng(12), 10);
    CHECK(vertex_mse(other, gt) >= 0.0);
    CHECK(lvd(other, gt) >= 0.0);
    CHECK_THROWS_AS(vertex_mse(random_clip(Rng(13), 9), gt), DimensionError);
    CHECK_THROWS_AS(lvd(random_clip(Rng(13), 9), gt), DimensionError);
}

TEST_CASE("frechet distance closed form in one dimension") {
    // Both sets have sample variance 1 (n - 1 denominator); means 0 and 1.
    Tensor a(2, 1);
    a(0, 0) = -std::sqrt(0.5);
    a(1, 0) = std::sqrt(0.5);
    Tensor b = a;
    b(0, 0) += 1.0;
    b(1, 0) += 1.0;
    CHECK(std::abs(frechet_distance(a, b) - 1.0) < 1e-6);

    // Different variances: (mu1 - mu2)^2 + (s1 - s2)^2 with the ridge included.
    Tensor c = a;
    c(0, 0) *= 3.0;
    c(1, 0) *= 3.0;
    const double s1 = std::sqrt(1.0 + 1e-6);
    const double s2 = std::sqrt(9.0 + 1e-6);
    CHECK(std::abs(frechet_distance(a, c) - (s1 - s2) * (s1 - s2)) < 1e-6);

    CHECK_THROWS_AS(frechet_distance(Tensor(1, 1), a), ContractError);
    CHECK_THROWS_AS(frechet_distance(Tensor(3, 2), a), DimensionError);
}

TEST_CASE("toy fgd identity, symmetry and order invariance") {
    RvqConfig config;
    config.dim = 6;
    config.entries = 8;
    config.layers = 2;
    config.encoder_hidden = 8;
    config.decoder_hidden = 8;
    const MotionTokenizer tokenizer(config, PartLayout{}, Rng(21));

    std::vector<MotionSequence> x = random_set(12, Rng(22), 0.0);
    const std::vector<MotionSequence> y = random_set(12, Rng(23), 0.5);

    CHECK(std::abs(toy_fgd(tokenizer, x, x)) < 1e-6);
    const double xy = toy_fgd(tokenizer, x, y);
    CHECK(xy > 0.0);
    CHECK(std::abs(xy - toy_fgd(tokenizer, y, x)) < 1e-9);

    std::reverse(x.begin(), x.end());
    CHECK(std::abs(toy_fgd(tokenizer, x, y) - xy) < 1e-9);

    Rng rng(24);
    for (std::size_t i = 0; i < 20; ++i) {
        const auto p = random_set(4, rng.split(2 * i), 0.0);
        const auto q = random_set(5, rng.split(2 * i + 1), 0.1);
        CHECK(toy_fgd(tokenizer, p, q) >= 0.0);
    }
}

TEST_CASE("metric report renders one json line and a table") {
    MetricReport r;
    r.fgd = 1.5;
    r.bc = 0.25;
    r.strategy = "attention";
    r.generated = 3;
    r.reference = 4;
    const std::string json = r.to_json();
    CHECK(json.find('\n') == std::string::npos);
    CHECK(json.find("\"fgd\":1.5") != std::string::npos);
    CHECK(json.find("\"strategy\":\"attention\"") != std::string::npos);
    CHECK(r.to_table().find("fgd (toy)") != std::string::npos);
}
