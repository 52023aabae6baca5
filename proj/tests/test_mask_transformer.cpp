#include <cmath>
#include <numeric>

#include "doctest.h"
#include "motionmask/errors.hpp"
#include "motionmask/mask_transformer.hpp"

using namespace motionmask;

namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    Tensor t(rows, cols);
    for (double& v : t.flat()) {
        v = scale * rng.normal();
    }
    return t;
}

MaskConfig tiny_config() {
    MaskConfig c;
    c.latent_dim = 4;
    c.entries = 5;
    c.speech_width = 6;
    c.width = 8;
    c.heads = 2;
    c.hidden = 8;
    c.blocks = 1;
    c.score_width = 4;
    return c;
}

Tensor tiny_codes(Rng rng) {
    Tensor codes = random_tensor(5, 4, rng);
    for (std::size_t c = 0; c < 4; ++c) {
        codes(0, c) = 0.0;
    }
    return codes;
}

MaskExample tiny_example(std::size_t frames, Rng rng) {
    MaskExample ex;
    ex.latent = random_tensor(frames, 4, rng);
    ex.speech = random_tensor(frames, 6, rng);
    for (std::size_t t = 0; t < frames; ++t) {
        ex.targets.push_back(rng.index(5));
        ex.labels.push_back(t % 3 == 0 ? 1.0 : 0.0);
    }
    return ex;
}

MaskSpec mask_of(std::size_t frames, std::vector<std::size_t> masked) {
    MaskSpec m;
    m.origin.assign(frames, MaskOrigin::Visible);
    for (std::size_t j : masked) {
        m.origin[j] = MaskOrigin::Random;
    }
    m.masked = std::move(masked);
    return m;
}

// Codebook whose base layer equals `base` and deeper layers are small random codes.
Codebook codebook_with_base(const Tensor& base, std::size_t layers, Rng rng) {
    Codebook cb;
    cb.layers.push_back(base);
    for (std::size_t l = 1; l < layers; ++l) {
        Tensor t = random_tensor(base.rows(), base.cols(), rng, 0.3 / static_cast<double>(l));
        for (std::size_t c = 0; c < base.cols(); ++c) {
            t(0, c) = 0.0;
        }
        cb.layers.push_back(t);
    }
    return cb;
}

double sum_abs(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.flat()) {
        acc += std::abs(v);
    }
    return acc;
}

} // namespace

TEST_CASE("strategy names round-trip") {
    for (MaskStrategy s : {MaskStrategy::Attention, MaskStrategy::Random, MaskStrategy::Loss}) {
        CHECK(strategy_from_name(strategy_name(s)) == s);
    }
    CHECK_THROWS_AS(strategy_from_name("greedy"), ConfigError);
}

TEST_CASE("student output shapes and determinism") {
    const MaskTransformer model(tiny_config(), tiny_codes(Rng(1)), Rng(2));
    Rng rng(3);
    for (std::size_t frames : {1, 3, 7}) {
        const Tensor latent = random_tensor(frames, 4, rng);
        const Tensor speech = random_tensor(frames, 6, rng);
        const Tensor tokens = model.mask_tokens(model.params(), latent, std::vector<bool>(frames, true));
        const StudentOutput a = model.output(model.params(), tokens, speech);
        const StudentOutput b = model.output(model.params(), tokens, speech);
        CHECK(a.logits.rows() == frames);
        CHECK(a.logits.cols() == 5);
        CHECK(a.predicted_latents.cols() == 4);
        CHECK(std::equal(a.logits.flat().begin(), a.logits.flat().end(), b.logits.flat().begin()));
    }
    CHECK_THROWS_AS(model.output(model.params(), Tensor(3, 5), Tensor(3, 6)), DimensionError);
    CHECK_THROWS_AS(model.output(model.params(), Tensor(3, 4), Tensor(3, 5)), DimensionError);
    CHECK_THROWS_AS(MaskTransformer(tiny_config(), Tensor(4, 4), Rng(1)), DimensionError);
}

TEST_CASE("masked tokens carry the mask embedding and visible tokens the latent") {
    const MaskTransformer model(tiny_config(), tiny_codes(Rng(1)), Rng(2));
    Rng rng(4);
    const Tensor latent = random_tensor(5, 4, rng);
    const Tensor tokens = model.mask_tokens(model.params(), latent, mask_of(5, {1, 3}));
    const Tensor& mask = model.params().value("mask");
    for (std::size_t t = 0; t < 5; ++t) {
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(tokens(t, c) == (t == 1 || t == 3 ? mask(0, c) : latent(t, c)));
        }
    }
}

TEST_CASE("mmm loss closed forms") {
    const std::size_t entries = 6;
    const std::size_t d = 3;
    const std::vector<std::size_t> targets{2, 0, 5, 1};
    Tensor target_latent(4, d);
    StudentOutput out;
    out.logits = Tensor(4, entries);
    out.predicted_latents = target_latent;
    for (std::size_t t = 0; t < 4; ++t) {
        out.logits(t, targets[t]) = 1000.0;
    }
    const std::vector<std::size_t> masked{0, 2, 3};
    const MmmLoss exact = mmm_loss(out, targets, target_latent, masked);
    CHECK(exact.ce == 0.0);
    CHECK(exact.l2 == 0.0);
    CHECK(exact.accuracy == 1.0);

    for (double& v : out.predicted_latents.flat()) {
        v += 1.0;
    }
    CHECK(mmm_loss(out, targets, target_latent, masked).l2 == doctest::Approx(3.0 * d).epsilon(1e-12));

    out.logits = Tensor(4, entries);
    CHECK(mmm_loss(out, targets, target_latent, masked).ce == doctest::Approx(std::log(6.0)).epsilon(1e-12));

    const MmmLoss empty = mmm_loss(out, targets, target_latent, std::vector<std::size_t>{});
    CHECK(empty.ce == 0.0);
    CHECK(empty.masked == 0);
    CHECK_THROWS_AS(mmm_loss(out, std::vector<std::size_t>{1}, target_latent, masked), DimensionError);
}

TEST_CASE("mmm loss ignores visible positions") {
    Rng rng(5);
    StudentOutput out;
    out.logits = random_tensor(5, 4, rng);
    out.predicted_latents = Tensor(5, 2);
    const Tensor target_latent(5, 2);
    std::vector<std::size_t> targets{0, 1, 2, 3, 0};
    const std::vector<std::size_t> masked{1, 4};
    const MmmLoss base = mmm_loss(out, targets, target_latent, masked);

    // Gradient rows at visible frames are exactly zero.
    for (std::size_t t : {0, 2, 3}) {
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(base.dlogits(t, k) == 0.0);
        }
    }
    // Finite-difference oracle on a visible logit.
    const double eps = 1e-4;
    StudentOutput moved = out;
    moved.logits(2, 1) += eps;
    const double up = mmm_loss(moved, targets, target_latent, masked).ce;
    moved.logits(2, 1) -= 2.0 * eps;
    const double down = mmm_loss(moved, targets, target_latent, masked).ce;
    CHECK((up - down) / (2.0 * eps) == 0.0);

    targets[0] = 3;
    targets[2] = 0;
    CHECK(mmm_loss(out, targets, target_latent, masked).ce == base.ce);
}

TEST_CASE("masked-modeling gradients match finite differences on an 6-frame toy") {
    MaskConfig config = tiny_config();
    config.blocks = 2;
    MaskTransformer model(config, tiny_codes(Rng(6)), Rng(7));
    const MaskExample ex = tiny_example(6, Rng(8));
    const MaskSpec mask = mask_of(6, {0, 2, 5});
    const auto report = grad_check(
        [&](ParamSet& p) { return accumulate_mmm(model, p, ex, mask, 1.0).ce; }, model.params());
    CAPTURE(report.worst_parameter);
    CAPTURE(report.worst_analytic);
    CAPTURE(report.worst_numeric);
    CHECK(report.checked > 100);
    CHECK(report.max_relative_error <= 1e-4);
}

TEST_CASE("semantic loss gradient reaches the score head only") {
    MaskTransformer model(tiny_config(), tiny_codes(Rng(9)), Rng(10));
    const MaskExample ex = tiny_example(6, Rng(11));
    ParamSet& params = model.params();
    params.zero_grad();
    accumulate_semantic(model, params, ex, 1.0);
    double score_grad = 0.0;
    for (const auto& [name, p] : params) {
        if (name.rfind("score.", 0) == 0) {
            score_grad += sum_abs(p.grad);
        } else {
            CAPTURE(name);
            CHECK(sum_abs(p.grad) == 0.0);
        }
    }
    CHECK(score_grad > 0.0);

    // Finite differences over the score head with the rest of the network fixed.
    ParamSet head;
    for (const auto& [name, p] : params) {
        if (name.rfind("score.", 0) == 0) {
            head.add(name, p.value);
        }
    }
    const Tensor poses = model.pose_embedding(params, ex.latent);
    const auto report = grad_check(
        [&](ParamSet& p) {
            ScoreHeadCache cache;
            const AttentionMap map = model.score_head().forward(p, poses, ex.speech, cache);
            const SemanticLoss l = semantic_loss(map.scores, ex.labels);
            model.score_head().backward(p, l.dscores, map, cache);
            return l.loss;
        },
        head);
    CHECK(report.max_relative_error <= 1e-4);
}

TEST_CASE("mask embedding receives gradient whenever a frame is masked") {
    MaskTransformer model(tiny_config(), tiny_codes(Rng(12)), Rng(13));
    const MaskExample ex = tiny_example(5, Rng(14));
    model.params().zero_grad();
    accumulate_mmm(model, model.params(), ex, mask_of(5, {3}), 1.0);
    CHECK(sum_abs(model.params().grad("mask")) > 0.0);

    model.params().zero_grad();
    accumulate_mmm(model, model.params(), ex, mask_of(5, {}), 1.0);
    CHECK(sum_abs(model.params().grad("mask")) == 0.0);
}

TEST_CASE("ema update closed forms") {
    ParamSet student;
    student.add("w", Tensor::from_rows({{1.0, 1.0}, {1.0, 1.0}}));
    ParamSet teacher = student.clone_values();
    for (double& v : teacher.value("w").flat()) {
        v = 0.0;
    }

    ParamSet same = teacher.clone_values();
    ema_update(same, student, 1.0);
    CHECK(sum_abs(same.value("w")) == 0.0);

    ParamSet copy = teacher.clone_values();
    ema_update(copy, student, 0.0);
    CHECK(parameter_distance(copy, student) == 0.0);

    ema_update(teacher, student, 0.99);
    for (double v : teacher.value("w").flat()) {
        CHECK(v == doctest::Approx(0.01).epsilon(1e-12));
    }

    ParamSet other;
    other.add("v", Tensor(2, 2));
    CHECK_THROWS_AS(ema_update(other, student, 0.5), DimensionError);
    CHECK_THROWS_AS(ema_update(teacher, student, 1.5), ConfigError);
}

TEST_CASE("ema update contracts toward a fixed student") {
    const MaskTransformer a(tiny_config(), tiny_codes(Rng(15)), Rng(16));
    const MaskTransformer b(tiny_config(), tiny_codes(Rng(15)), Rng(17));
    ParamSet teacher = a.params().clone_values();
    const ParamSet& student = b.params();
    Rng rng(18);
    for (int i = 0; i < 20; ++i) {
        const double decay = rng.uniform();
        const double before = parameter_distance(teacher, student);
        ema_update(teacher, student, decay);
        CHECK(parameter_distance(teacher, student) == doctest::Approx(decay * before).epsilon(1e-9));
    }
}

TEST_CASE("the training loss does not depend smoothly on teacher parameters") {
    MaskTransformer model(tiny_config(), tiny_codes(Rng(19)), Rng(20));
    const MaskExample ex = tiny_example(8, Rng(21));
    ParamSet teacher = model.params().clone_values();
    const MaskRatios ratios{0.0, 0.5, 0.0};

    auto loss_with = [&](const ParamSet& t) {
        Rng rng(22);
        const MaskSpec mask = select_mask(model.attention(t, ex.latent, ex.speech).scores, ratios, {}, rng);
        ParamSet scratch = model.params().clone_values();
        return accumulate_mmm(model, scratch, ex, mask, 1.0).ce +
               0.1 * accumulate_semantic(model, scratch, ex, 1.0).loss;
    };
    const double base = loss_with(teacher);
    for (auto& [name, p] : teacher) {
        for (std::size_t i = 0; i < p.value.flat().size(); i += 7) {
            const double saved = p.value.flat()[i];
            p.value.flat()[i] = saved + 1e-7;
            CHECK(loss_with(teacher) == base);
            p.value.flat()[i] = saved;
        }
    }
}

TEST_CASE("schedule time covers both ends") {
    MaskSchedule s;
    s.total_epochs = 40.0;
    CHECK(schedule_time(s, 0, 40) == 0.0);
    CHECK(schedule_time(s, 39, 40) == 40.0);
    CHECK(schedule_time(s, 0, 1) == 0.0);
    CHECK(schedule_time(s, 1, 3) == doctest::Approx(20.0).epsilon(1e-15));
}

TEST_CASE("complete with every frame visible reproduces the tokenizer round trip") {
    Rng rng(23);
    const Tensor base = tiny_codes(rng.split("base"));
    const Codebook cb = codebook_with_base(base, 3, rng.split("deep"));
    const MaskTransformer model(tiny_config(), base, rng.split("model"));
    const LatentTokenGrid grid = quantize(random_tensor(6, 4, rng), cb, 3);
    const CompletionResult r = complete(model, model.params(), cb, grid.quantized, std::vector<bool>(6, false),
                                        random_tensor(6, 6, rng));
    CHECK(std::equal(r.latent.flat().begin(), r.latent.flat().end(), grid.quantized.flat().begin()));
    CHECK(r.base_codes == grid.indices[0]);
}

TEST_CASE("completion keeps known frames and codes masked ones from the codebook") {
    Rng rng(24);
    const Tensor base = tiny_codes(rng.split("base"));
    const Codebook cb = codebook_with_base(base, 3, rng.split("deep"));
    const MaskTransformer model(tiny_config(), base, rng.split("model"));
    const Tensor known = quantize(random_tensor(7, 4, rng), cb, 3).quantized;
    const Tensor speech = random_tensor(7, 6, rng);
    std::vector<bool> masked(7, true);
    masked[0] = false;
    for (std::size_t steps : {1, 3}) {
        const CompletionResult r = complete(model, model.params(), cb, known, masked, speech, steps);
        const CompletionResult again = complete(model, model.params(), cb, known, masked, speech, steps);
        CHECK(std::equal(r.latent.flat().begin(), r.latent.flat().end(), again.latent.flat().begin()));
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(r.latent(0, c) == known(0, c));
        }
        // Every completed row is a sum of one code per layer, so re-quantizing is exact.
        const LatentTokenGrid requant = quantize(r.latent, cb, 3);
        for (std::size_t t = 1; t < 7; ++t) {
            CHECK(requant.indices[0][t] == r.base_codes[t]);
        }
        for (double v : r.latent.flat()) {
            CHECK(std::isfinite(v));
        }
    }
    CHECK_THROWS_AS(complete(model, model.params(), cb, known, masked, speech, 0), ConfigError);
}

TEST_CASE("training logs schedule ratios and keeps the teacher within the student path") {
    const MaskConfig config = [] {
        MaskConfig c = tiny_config();
        c.epochs = 4;
        c.batch = 4;
        c.ema_decay = 0.9;
        return c;
    }();
    std::vector<MaskExample> train;
    for (std::size_t i = 0; i < 12; ++i) {
        train.push_back(tiny_example(8, Rng(100 + i)));
    }
    MaskedTrainOptions options;
    options.schedule.total_epochs = 4.0;
    const MaskedTrainResult r = train_masked(train, tiny_codes(Rng(25)), config, options, Rng(26));
    REQUIRE(r.epoch_ratios.size() == 4);
    const MaskRatios first = schedule_at(options.schedule, 0.0);
    const MaskRatios last = schedule_at(options.schedule, 4.0);
    CHECK(r.epoch_ratios.front().soft == first.soft);
    CHECK(r.epoch_ratios.front().hard == first.hard);
    CHECK(r.epoch_ratios.front().random == first.random);
    CHECK(r.epoch_ratios.back().soft == last.soft);
    CHECK(r.epoch_ratios.back().hard == last.hard);
    CHECK(r.epoch_ratios.back().random == last.random);
    CHECK(r.loss_curve.size() == 12);
    for (double d : r.teacher_distance) {
        CHECK(std::isfinite(d));
        CHECK(d <= r.student_path_length + 1e-12);
    }
    for (const auto& [name, p] : r.teacher) {
        CHECK(sum_abs(p.grad) == 0.0);
    }

    options.strategy = MaskStrategy::Random;
    const MaskedTrainResult random = train_masked(train, tiny_codes(Rng(25)), config, options, Rng(26));
    for (const MaskRatios& m : random.epoch_ratios) {
        CHECK(m.soft == 0.0);
        CHECK(m.hard == 0.0);
        CHECK(m.random == options.schedule.alpha);
    }
}

TEST_CASE("the student learns speech-determined codes above chance") {
    // Speech row t one-hot encodes the target code, so the cross-attention path can read it.
    MaskConfig config = tiny_config();
    config.entries = 5;
    config.speech_width = 6;
    config.epochs = 120;
    config.batch = 8;
    config.lr = 3e-3;
    const Tensor codes = tiny_codes(Rng(27));
    auto make = [&](std::size_t n, Rng rng) {
        std::vector<MaskExample> out;
        for (std::size_t i = 0; i < n; ++i) {
            MaskExample ex;
            ex.latent = Tensor(8, 4);
            ex.speech = Tensor(8, 6);
            for (std::size_t t = 0; t < 8; ++t) {
                const std::size_t k = rng.index(5);
                ex.targets.push_back(k);
                ex.speech(t, k) = 1.0;
                for (std::size_t c = 0; c < 4; ++c) {
                    ex.latent(t, c) = codes(k, c);
                }
                ex.labels.push_back(k > 2 ? 1.0 : 0.0);
            }
            out.push_back(std::move(ex));
        }
        return out;
    };
    const auto train = make(64, Rng(28));
    const auto held_out = make(32, Rng(29));
    MaskedTrainOptions options;
    options.schedule.total_epochs = 120.0;
    const MaskedTrainResult r = train_masked(train, codes, config, options, Rng(30));

    double hits = 0.0;
    double total = 0.0;
    Rng mask_rng(31);
    for (const auto& ex : held_out) {
        const MaskSpec mask = select_mask(std::vector<double>(8, 1.0), MaskRatios{0.0, 0.0, 0.5}, {}, mask_rng);
        const StudentOutput out =
            r.model.output(r.model.params(), r.model.mask_tokens(r.model.params(), ex.latent, mask), ex.speech);
        const MmmLoss l = mmm_loss(out, ex.targets, ex.latent, mask.masked);
        hits += l.accuracy * static_cast<double>(l.masked);
        total += static_cast<double>(l.masked);
    }
    const double accuracy = hits / total;
    CAPTURE(accuracy);
    CHECK(accuracy > 1.0 / 5.0 + 0.2);
    CHECK(r.ce_curve.back() < r.ce_curve.front());
}
