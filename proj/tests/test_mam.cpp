#include <cmath>

#include "doctest.h"
#include "motionmask/errors.hpp"
#include "motionmask/mam.hpp"
#include "motionmask/rvq_tokenizer.hpp"
#include "motionmask/synth.hpp"

using namespace motionmask;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Tensor t(r, c);
    for (double& v : t.flat()) {
        v = scale * rng.normal();
    }
    return t;
}

MamConfig tiny_config() {
    MamConfig c;
    c.latent_dim = 3;
    c.low_channels = 2;
    c.high_channels = 3;
    c.queries = 4;
    c.width = 4;
    c.heads = 2;
    c.hidden = 6;
    return c;
}

SpeechFeatures random_features(const MamConfig& c, std::size_t frames, Rng& rng) {
    return {random_tensor(frames, c.low_channels, rng), random_tensor(frames, c.high_channels, rng)};
}

} // namespace

TEST_CASE("info_nce of a single pair is exactly zero") {
    Rng rng(1);
    for (int rep = 0; rep < 20; ++rep) {
        const Tensor a = random_tensor(1, 5, rng);
        const Tensor b = random_tensor(1, 5, rng);
        CHECK(info_nce(a, b, 0.07).loss == 0.0);
        CHECK(info_nce(a, b, 0.07, false).loss == 0.0);
    }
}

TEST_CASE("info_nce on two orthogonal matched pairs at tau 1") {
    const Tensor e = Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    // Each row: -log(e / (e + 1)).
    const double oracle = 2.0 * -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(info_nce(e, e, 1.0, false).loss == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(oracle == doctest::Approx(0.6265).epsilon(1e-4));
    CHECK(info_nce(e, e, 1.0, true).loss == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("info_nce is nonnegative and rejects a nonpositive temperature") {
    Rng rng(2);
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t b = 1 + rng.index(8);
        const Tensor x = random_tensor(b, 6, rng);
        const Tensor y = random_tensor(b, 6, rng);
        CHECK(info_nce(x, y, 0.07).loss >= 0.0);
    }
    const Tensor e = Tensor::from_rows({{1.0, 0.0}});
    CHECK_THROWS_AS(info_nce(e, e, 0.0), ConfigError);
    CHECK_THROWS_AS(info_nce(e, e, -1.0), ConfigError);
}

TEST_CASE("info_nce falls as the positive similarity rises with negatives fixed") {
    // Pair 0 moves within span(e1, e2); every other vector lives in span(e3, e4),
    // so all negative similarities stay zero.
    Tensor a = Tensor::from_rows({{0, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
    Tensor b = Tensor::from_rows({{1, 0, 0, 0}, {0, 0, 0.6, 0.8}, {0, 0, -0.8, 0.6}});
    for (bool symmetric : {false, true}) {
        double prev = INFINITY;
        for (double theta = 1.5; theta >= 0.0; theta -= 0.1) {
            a(0, 0) = std::cos(theta);
            a(0, 1) = std::sin(theta);
            const double loss = info_nce(a, b, 0.5, symmetric).loss;
            CHECK(loss < prev);
            prev = loss;
        }
    }
}

TEST_CASE("info_nce gradients match finite differences") {
    Rng rng(3);
    ParamSet params;
    params.add("a", random_tensor(4, 3, rng));
    params.add("b", random_tensor(4, 3, rng));
    for (bool symmetric : {false, true}) {
        const auto report = grad_check(
            [&](ParamSet& p) {
                const auto r = info_nce(p.value("a"), p.value("b"), 0.07, symmetric);
                add_inplace(p.grad("a"), r.grad_a);
                add_inplace(p.grad("b"), r.grad_b);
                return r.loss;
            },
            params);
        CAPTURE(report.worst_parameter);
        CHECK(report.max_relative_error <= 1e-4);
    }
}

TEST_CASE("encode_queries returns one query per latent frame for any feature length") {
    MamConfig c;
    const MotionAudioModel model(c, Rng(4));
    Rng rng(5);
    for (std::size_t frames : {3, 16, 64, 101}) {
        const Tensor q = model.encode_queries(random_features(c, frames, rng), 16);
        CHECK(q.rows() == 16);
        CHECK(q.cols() == c.width);
        CHECK(q.all_finite());
    }
    CHECK(model.encode_queries(random_features(c, 10, rng), 5).rows() == 5);
    CHECK_THROWS_AS(model.encode_queries(random_features(c, 10, rng), 17), DimensionError);
    SpeechFeatures bad{Tensor(8, 3), Tensor(8, c.high_channels)};
    CHECK_THROWS_AS(model.encode_queries(bad, 4), DimensionError);
}

TEST_CASE("zero features leave queries dependent only on the learned parameters") {
    MamConfig c;
    const MotionAudioModel model(c, Rng(6));
    const auto zeros = [&](std::size_t frames) {
        return SpeechFeatures{Tensor(frames, c.low_channels), Tensor(frames, c.high_channels)};
    };
    const Tensor a = model.encode_queries(zeros(5), 16);
    const Tensor b = model.encode_queries(zeros(64), 16);
    CHECK(a == b);

    // Changing Q' changes the output; changing an unused feature projection weight does not.
    MotionAudioModel changed = model;
    changed.params().value("low_in.w")(0, 0) += 1.0;
    CHECK(changed.encode_queries(zeros(5), 16) == a);
    changed.params().value("queries")(0, 0) += 1.0;
    CHECK_FALSE(changed.encode_queries(zeros(5), 16) == a);
}

TEST_CASE("constant feature tracks give order-independent queries") {
    MamConfig c;
    const MotionAudioModel model(c, Rng(7));
    Rng rng(8);
    SpeechFeatures f{Tensor(20, c.low_channels), Tensor(20, c.high_channels)};
    const Tensor low_row = random_tensor(1, c.low_channels, rng);
    const Tensor high_row = random_tensor(1, c.high_channels, rng);
    for (std::size_t t = 0; t < 20; ++t) {
        for (std::size_t k = 0; k < c.low_channels; ++k) {
            f.low(t, k) = low_row(0, k);
        }
        for (std::size_t k = 0; k < c.high_channels; ++k) {
            f.high(t, k) = high_row(0, k);
        }
    }
    SpeechFeatures reversed{Tensor(20, c.low_channels), Tensor(20, c.high_channels)};
    for (std::size_t t = 0; t < 20; ++t) {
        for (std::size_t k = 0; k < c.low_channels; ++k) {
            reversed.low(t, k) = f.low(19 - t, k);
        }
        for (std::size_t k = 0; k < c.high_channels; ++k) {
            reversed.high(t, k) = f.high(19 - t, k);
        }
    }
    CHECK(model.encode_queries(f, 16) == model.encode_queries(reversed, 16));
}

TEST_CASE("both tracks go through one shared transformer") {
    MamConfig c;
    const MotionAudioModel model(c, Rng(9));
    Rng rng(10);
    const SpeechFeatures f = random_features(c, 40, rng);
    const Tensor latent = random_tensor(16, c.latent_dim, rng);
    const auto trace = model.forward(model.params(), f, latent);
    CHECK(model.shared(trace.refined) == trace.embedding.speech);
    CHECK(model.shared(trace.motion_input) == trace.embedding.motion);

    const Tensor x = random_tensor(16, c.width, rng);
    CHECK(model.shared(x) == model.shared(x));

    MotionAudioModel perturbed = model;
    for (const auto& name : perturbed.params().names()) {
        if (name.rfind("shared.", 0) == 0) {
            for (double& v : perturbed.params().value(name).flat()) {
                v += 0.05;
            }
        }
    }
    const auto emb = perturbed.joint_embed(f, latent);
    CHECK_FALSE(emb.speech == trace.embedding.speech);
    CHECK_FALSE(emb.motion == trace.embedding.motion);

    // Pooled vectors are time means.
    const Tensor mean = column_means(trace.embedding.speech);
    CHECK(mean == trace.embedding.pooled_speech);
}

TEST_CASE("alignment loss gradients match finite differences") {
    const MamConfig c = tiny_config();
    MotionAudioModel model(c, Rng(11));
    Rng rng(12);
    std::vector<MamExample> batch;
    for (int i = 0; i < 3; ++i) {
        batch.push_back({random_tensor(2, c.latent_dim, rng), random_features(c, 5, rng)});
    }
    ParamSet params = model.params();
    const auto report = grad_check(
        [&](ParamSet& p) { return alignment_loss(model, p, batch, true).total; }, params);
    CAPTURE(report.worst_parameter);
    CAPTURE(report.worst_index);
    CAPTURE(report.worst_analytic);
    CAPTURE(report.worst_numeric);
    CHECK(report.max_relative_error <= 1e-4);
    // Every parameter group takes part in the loss.
    ParamSet probe = model.params();
    probe.zero_grad();
    alignment_loss(model, probe, batch, true);
    for (const auto& [name, p] : probe) {
        CAPTURE(name);
        CHECK(squared_norm(p.grad) > 0.0);
    }
}

TEST_CASE("training aligns speech queries with motion") {
    SynthConfig sc;
    sc.num_sequences = 128;
    const auto corpus = generate(sc, Rng(13));
    std::vector<MotionSequence> clips;
    for (const auto& s : corpus) {
        clips.push_back(s.motion);
    }
    RvqConfig rc;
    rc.epochs = 4;
    const auto tok = train_rvq(clips, rc, PartLayout{}, Rng(14)).tokenizer;
    std::vector<MamExample> examples;
    for (const auto& s : corpus) {
        examples.push_back({tok.tokenize(s.motion).quantized, s.features});
    }
    const std::span<const MamExample> all(examples);
    const auto train = all.subspan(0, 96);
    const auto held = all.subspan(96);

    MamConfig mc;
    mc.high_channels = sc.high_channels();
    mc.epochs = 10;
    const auto result = train_mam(train, mc, Rng(15));
    for (double v : result.loss_curve) {
        REQUIRE(std::isfinite(v));
    }
    const auto after = evaluate_mam(result.model, held, mc.batch);
    MESSAGE("cosine " << result.before.positive_cosine << " -> " << result.after.positive_cosine << ", held-out frame "
                      << after.frame_retrieval << " sentence " << after.sentence_retrieval);
    CHECK(result.after.positive_cosine > result.before.positive_cosine);
    CHECK(after.frame_retrieval > 1.0 / 16.0);
    CHECK(after.sentence_retrieval > 1.0 / static_cast<double>(mc.batch));

    // Mismatched pairs cost more than matched ones.
    std::vector<MamExample> shuffled(held.begin(), held.end());
    for (std::size_t i = 0; i < shuffled.size(); ++i) {
        shuffled[i].latent = held[(i + 1) % held.size()].latent;
    }
    const double matched = evaluate_mam(result.model, held, mc.batch).loss;
    const double mismatched = evaluate_mam(result.model, shuffled, mc.batch).loss;
    CHECK(mismatched > matched);
}
