#include "motionmask/mask_transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <spdlog/spdlog.h>

#include "motionmask/errors.hpp"

namespace motionmask {

const char* strategy_name(MaskStrategy strategy) {
    switch (strategy) {
    case MaskStrategy::Attention:
        return "attention";
    case MaskStrategy::Random:
        return "random";
    case MaskStrategy::Loss:
        return "loss";
    }
    return "?";
}

MaskStrategy strategy_from_name(const std::string& name) {
    for (MaskStrategy s : {MaskStrategy::Attention, MaskStrategy::Random, MaskStrategy::Loss}) {
        if (name == strategy_name(s)) {
            return s;
        }
    }
    throw ConfigError("unknown masking strategy '" + name + "' (expected attention, random or loss)");
}

void MaskConfig::validate() const {
    if (latent_dim == 0 || entries < 2 || speech_width == 0 || width == 0 || hidden == 0 || blocks == 0 ||
        score_width == 0) {
        throw ConfigError("mask transformer: widths, entries and block count must be positive");
    }
    if (heads == 0 || width % heads != 0) {
        throw ConfigError("mask transformer: width " + std::to_string(width) + " not divisible by heads " +
                          std::to_string(heads));
    }
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) {
        throw ConfigError("mask transformer: EMA decay must lie in [0, 1]");
    }
    if (sem_weight < 0.0 || batch == 0) {
        throw ConfigError("mask transformer: need sem_weight >= 0 and batch > 0");
    }
    AdamOptions{lr, beta1, beta2}.validate("mask transformer");
}

// ---------------------------------------------------------------------------

StudentBlock::StudentBlock(std::string name, std::size_t width, std::size_t speech_width, std::size_t heads,
                           std::size_t hidden)
    : self_(name + ".self", width, width, heads, true),
      cross_(name + ".cross", width, speech_width, heads, false),
      ff_(name + ".ff", width, hidden) {}

void StudentBlock::init(ParamSet& params, const Rng& rng) const {
    self_.init(params, rng);
    cross_.init(params, rng);
    ff_.init(params, rng);
}

Tensor StudentBlock::forward(const ParamSet& params, const Tensor& x, const Tensor& speech,
                             StudentBlockCache& cache) const {
    cache.after_self = self_.forward(params, x, nullptr, cache.self);
    cache.after_cross = cross_.forward(params, cache.after_self, &speech, cache.cross);
    return ff_.forward(params, cache.after_cross, cache.ff);
}

Tensor StudentBlock::backward(ParamSet& params, const Tensor& dy, const StudentBlockCache& cache) const {
    Tensor d = ff_.backward(params, dy, cache.ff);
    d = cross_.backward(params, d, cache.cross).x; // speech embedding is frozen
    return self_.backward(params, d, cache.self).x;
}

// ---------------------------------------------------------------------------

MaskTransformer::MaskTransformer(const MaskConfig& config, const Tensor& base_codes, const Rng& init)
    : config_(config), base_codes_(base_codes) {
    config_.validate();
    if (base_codes.rows() != config_.entries || base_codes.cols() != config_.latent_dim) {
        throw DimensionError("mask transformer: base codebook " + base_codes.shape_string() + " does not match " +
                             std::to_string(config_.entries) + "x" + std::to_string(config_.latent_dim));
    }
    build_layers();
    const Rng rng = init.split("student");
    params_.add("mask", init_normal(rng, "mask", 1, config_.latent_dim, 1.0));
    in_.init(params_, rng);
    for (const auto& block : blocks_) {
        block.init(params_, rng);
    }
    out_norm_.init(params_);
    head_.init(params_, rng);
    score_.init(params_, rng);
}

void MaskTransformer::build_layers() {
    in_ = Linear("in", config_.latent_dim, config_.width);
    blocks_.clear();
    for (std::size_t i = 0; i < config_.blocks; ++i) {
        blocks_.emplace_back("block." + std::to_string(i), config_.width, config_.speech_width, config_.heads,
                             config_.hidden);
    }
    out_norm_ = LayerNorm("out_norm", config_.width);
    head_ = Linear("head", config_.width, config_.entries);
    score_ = ScoreHead("score", config_.speech_width, config_.width, config_.score_width);
}

Tensor MaskTransformer::mask_tokens(const ParamSet& params, const Tensor& latent, const std::vector<bool>& masked) const {
    if (masked.size() != latent.rows()) {
        throw DimensionError("mask_tokens: mask covers " + std::to_string(masked.size()) + " frames, latent has " +
                             std::to_string(latent.rows()));
    }
    Tensor tokens = latent;
    const auto mask = params.value("mask").row(0);
    for (std::size_t t = 0; t < latent.rows(); ++t) {
        if (masked[t]) {
            std::copy(mask.begin(), mask.end(), tokens.row(t).begin());
        }
    }
    return tokens;
}

Tensor MaskTransformer::mask_tokens(const ParamSet& params, const Tensor& latent, const MaskSpec& mask) const {
    std::vector<bool> masked(mask.frames(), false);
    for (std::size_t j : mask.masked) {
        masked[j] = true;
    }
    return mask_tokens(params, latent, masked);
}

Tensor MaskTransformer::forward(const ParamSet& params, const Tensor& tokens, const Tensor& speech,
                                StudentCache& cache) const {
    if (tokens.cols() != config_.latent_dim) {
        throw DimensionError("student: token width " + std::to_string(tokens.cols()) + " != " +
                             std::to_string(config_.latent_dim));
    }
    if (speech.cols() != config_.speech_width) {
        throw DimensionError("student: speech width " + std::to_string(speech.cols()) + " != " +
                             std::to_string(config_.speech_width));
    }
    cache.tokens = tokens;
    cache.hidden_in = add(in_.forward(params, tokens), sinusoidal_positions(tokens.rows(), config_.width));
    cache.blocks.assign(blocks_.size(), {});
    Tensor h = cache.hidden_in;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        h = blocks_[i].forward(params, h, speech, cache.blocks[i]);
    }
    cache.hidden_out = h;
    cache.normed = out_norm_.forward(params, h, cache.norm);
    return head_.forward(params, cache.normed);
}

Tensor MaskTransformer::expected_latents(const Tensor& logits) const {
    return matmul(softmax_rows(logits), base_codes_);
}

StudentOutput MaskTransformer::output(const ParamSet& params, const Tensor& tokens, const Tensor& speech) const {
    StudentCache cache;
    StudentOutput out;
    out.logits = forward(params, tokens, speech, cache);
    out.predicted_latents = expected_latents(out.logits);
    return out;
}

Tensor MaskTransformer::backward(ParamSet& params, const Tensor& dlogits, const StudentCache& cache) const {
    Tensor d = head_.backward(params, cache.normed, dlogits);
    d = out_norm_.backward(params, d, cache.norm);
    for (std::size_t i = blocks_.size(); i-- > 0;) {
        d = blocks_[i].backward(params, d, cache.blocks[i]);
    }
    return in_.backward(params, cache.tokens, d);
}

Tensor MaskTransformer::pose_embedding(const ParamSet& params, const Tensor& latent) const {
    return add(in_.forward(params, latent), sinusoidal_positions(latent.rows(), config_.width));
}

AttentionMap MaskTransformer::attention(const ParamSet& params, const Tensor& latent, const Tensor& speech) const {
    return score_.forward(params, pose_embedding(params, latent), speech);
}

// ---------------------------------------------------------------------------

std::vector<double> frame_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    if (targets.size() != logits.rows()) {
        throw DimensionError("cross entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(logits.rows()) + " frames");
    }
    const Tensor p = softmax_rows(logits);
    std::vector<double> ce(logits.rows());
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        if (targets[t] >= logits.cols()) {
            throw DimensionError("cross entropy: target " + std::to_string(targets[t]) + " out of range");
        }
        ce[t] = -std::log(std::max(p(t, targets[t]), 1e-300));
    }
    return ce;
}

MmmLoss mmm_loss(const StudentOutput& output, std::span<const std::size_t> targets, const Tensor& target_latent,
                 std::span<const std::size_t> masked) {
    const Tensor& logits = output.logits;
    if (targets.size() != logits.rows()) {
        throw DimensionError("mmm_loss: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(logits.rows()) + " frames");
    }
    require_same_shape(output.predicted_latents, target_latent, "mmm_loss latents");
    MmmLoss loss;
    loss.dlogits = Tensor(logits.rows(), logits.cols());
    loss.masked = masked.size();
    if (masked.empty()) {
        spdlog::warn("mmm_loss: empty mask, loss is zero");
        return loss;
    }
    const Tensor p = softmax_rows(logits);
    const auto n = static_cast<double>(masked.size());
    double hits = 0.0;
    for (std::size_t t : masked) {
        const std::size_t y = targets[t];
        loss.ce -= std::log(std::max(p(t, y), 1e-300)) / n;
        const auto row = logits.row(t);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        hits += best == y ? 1.0 : 0.0;
        for (std::size_t k = 0; k < logits.cols(); ++k) {
            loss.dlogits(t, k) = (p(t, k) - (k == y ? 1.0 : 0.0)) / n;
        }
        for (std::size_t c = 0; c < target_latent.cols(); ++c) {
            const double d = output.predicted_latents(t, c) - target_latent(t, c);
            loss.l2 += d * d;
        }
    }
    loss.accuracy = hits / n;
    return loss;
}

MmmLoss accumulate_mmm(const MaskTransformer& model, ParamSet& params, const MaskExample& example,
                       const MaskSpec& mask, double scale) {
    StudentCache cache;
    StudentOutput out;
    out.logits = model.forward(params, model.mask_tokens(params, example.latent, mask), example.speech, cache);
    out.predicted_latents = model.expected_latents(out.logits);
    MmmLoss mmm = mmm_loss(out, example.targets, example.latent, mask.masked);
    if (mmm.masked == 0) {
        return mmm;
    }
    Tensor dlogits = mmm.dlogits;
    scale_inplace(dlogits, scale);
    const Tensor dtokens = model.backward(params, dlogits, cache);
    Tensor& dmask = params.grad("mask");
    for (std::size_t j : mask.masked) {
        for (std::size_t c = 0; c < dtokens.cols(); ++c) {
            dmask(0, c) += dtokens(j, c);
        }
    }
    return mmm;
}

SemanticLoss accumulate_semantic(const MaskTransformer& model, ParamSet& params, const MaskExample& example,
                                 double scale) {
    ScoreHeadCache cache;
    const AttentionMap map =
        model.score_head().forward(params, model.pose_embedding(params, example.latent), example.speech, cache);
    SemanticLoss sl = semantic_loss(map.scores, example.labels);
    std::vector<double> dscores = sl.dscores;
    for (double& d : dscores) {
        d *= scale;
    }
    model.score_head().backward(params, dscores, map, cache);
    return sl;
}

void ema_update(ParamSet& teacher, const ParamSet& student, double decay) {
    if (!teacher.same_layout(student)) {
        throw DimensionError("ema_update: teacher and student parameter layouts differ");
    }
    if (!(decay >= 0.0 && decay <= 1.0)) {
        throw ConfigError("ema_update: decay must lie in [0, 1]");
    }
    for (auto& [name, param] : teacher) {
        const Tensor& s = student.value(name);
        auto t = param.value.flat();
        const auto sv = s.flat();
        for (std::size_t i = 0; i < t.size(); ++i) {
            t[i] = decay * t[i] + (1.0 - decay) * sv[i];
        }
    }
}

double parameter_distance(const ParamSet& a, const ParamSet& b) {
    if (!a.same_layout(b)) {
        throw DimensionError("parameter_distance: layouts differ");
    }
    double acc = 0.0;
    for (const auto& [name, param] : a) {
        const auto& x = param.value.flat();
        const auto& y = b.value(name).flat();
        for (std::size_t i = 0; i < x.size(); ++i) {
            acc += (x[i] - y[i]) * (x[i] - y[i]);
        }
    }
    return std::sqrt(acc);
}

// ---------------------------------------------------------------------------

namespace {

std::size_t argmax_row(const Tensor& x, std::size_t r) {
    const auto row = x.row(r);
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

// Base code plus greedy residual coding of (expected latent - base code) with layers 2..L.
Tensor refine_latent(const Codebook& codebook, std::size_t base, const Tensor& expected) {
    Tensor latent(1, codebook.dim());
    Tensor residual(1, codebook.dim());
    for (std::size_t c = 0; c < codebook.dim(); ++c) {
        latent(0, c) = codebook.layers[0](base, c);
        residual(0, c) = expected(0, c) - latent(0, c);
    }
    if (codebook.layer_count() > 1) {
        Codebook rest;
        rest.layers.assign(codebook.layers.begin() + 1, codebook.layers.end());
        add_inplace(latent, quantize(residual, rest, rest.layer_count()).quantized);
    }
    return latent;
}

} // namespace

CompletionResult complete(const MaskTransformer& model, const ParamSet& params, const Codebook& codebook,
                          const Tensor& known_latent, const std::vector<bool>& masked, const Tensor& speech,
                          std::size_t steps) {
    if (steps == 0) {
        throw ConfigError("complete: steps must be at least 1");
    }
    if (masked.size() != known_latent.rows()) {
        throw DimensionError("complete: mask length does not match latent frames");
    }
    const std::size_t frames = known_latent.rows();
    CompletionResult result;
    result.latent = known_latent;
    result.base_codes.assign(frames, 0);
    for (std::size_t t = 0; t < frames; ++t) {
        if (!masked[t]) {
            result.base_codes[t] = quantize(known_latent.slice_rows(t, 1), codebook, 1).indices[0][0];
        }
    }
    std::vector<bool> open = masked;
    const auto initially = static_cast<std::size_t>(std::count(open.begin(), open.end(), true));
    for (std::size_t step = 1; step <= steps; ++step) {
        const Tensor tokens = model.mask_tokens(params, result.latent, open);
        const StudentOutput out = model.output(params, tokens, speech);
        result.logits = out.logits;
        const Tensor probs = softmax_rows(out.logits);

        std::vector<std::size_t> pending;
        for (std::size_t t = 0; t < frames; ++t) {
            if (open[t]) {
                pending.push_back(t);
            }
        }
        if (pending.empty()) {
            break;
        }
        // Cosine decay of the masked count; the last step fills everything.
        const double frac = std::cos(std::numbers::pi / 2.0 * static_cast<double>(step) / static_cast<double>(steps));
        const auto keep_masked =
            step == steps ? std::size_t{0}
                          : std::min(pending.size() - 1, static_cast<std::size_t>(std::floor(
                                                             static_cast<double>(initially) * frac)));
        std::stable_sort(pending.begin(), pending.end(), [&](std::size_t a, std::size_t b) {
            return probs(a, argmax_row(probs, a)) > probs(b, argmax_row(probs, b));
        });
        for (std::size_t k = 0; k < pending.size() - keep_masked; ++k) {
            const std::size_t t = pending[k];
            const std::size_t base = argmax_row(out.logits, t);
            const Tensor refined = refine_latent(codebook, base, out.predicted_latents.slice_rows(t, 1));
            std::copy(refined.flat().begin(), refined.flat().end(), result.latent.row(t).begin());
            result.base_codes[t] = base;
            open[t] = false;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------

double schedule_time(const MaskSchedule& schedule, std::size_t epoch, std::size_t epochs) {
    if (epochs <= 1) {
        return 0.0;
    }
    if (epoch + 1 == epochs) {
        return schedule.total_epochs;
    }
    return schedule.total_epochs * static_cast<double>(epoch) / static_cast<double>(epochs - 1);
}

MaskedTrainResult train_masked(std::span<const MaskExample> train, const Tensor& base_codes, const MaskConfig& config,
                               const MaskedTrainOptions& options, Rng rng) {
    if (train.empty()) {
        throw ConfigError("train_masked: corpus is empty");
    }
    options.schedule.validate();
    MaskedTrainResult result;
    result.model = MaskTransformer(config, base_codes, rng.split("init"));
    MaskTransformer& model = result.model;
    ParamSet& student = model.params();
    result.teacher = student.clone_values();
    Rng order_rng = rng.split("order");
    Rng mask_rng = rng.split("mask");

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    AdamOptions adam;
    adam.lr = config.lr;
    adam.beta1 = config.beta1;
    adam.beta2 = config.beta2;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        MaskRatios ratios = schedule_at(options.schedule, schedule_time(options.schedule, epoch, config.epochs));
        if (options.strategy == MaskStrategy::Random) {
            ratios = MaskRatios{0.0, 0.0, options.schedule.alpha};
        }
        result.epoch_ratios.push_back(ratios);
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[order_rng.index(i)]);
        }
        double epoch_ce = 0.0;
        double epoch_sem = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch) {
            const std::size_t stop = std::min(order.size(), start + config.batch);
            const auto b = static_cast<double>(stop - start);
            student.zero_grad();
            double ce = 0.0;
            double sem = 0.0;
            double l2 = 0.0;
            for (std::size_t k = start; k < stop; ++k) {
                const MaskExample& ex = train[order[k]];
                std::vector<double> scores;
                switch (options.strategy) {
                case MaskStrategy::Attention:
                    scores = model.attention(result.teacher, ex.latent, ex.speech).scores;
                    break;
                case MaskStrategy::Loss:
                    scores = frame_cross_entropy(model.output(student, ex.latent, ex.speech).logits, ex.targets);
                    break;
                case MaskStrategy::Random:
                    scores.assign(ex.latent.rows(), 1.0);
                    break;
                }
                const MaskSpec mask = select_mask(scores, ratios, {}, mask_rng);

                const MmmLoss mmm = accumulate_mmm(model, student, ex, mask, 1.0 / b);
                ce += mmm.ce / b;
                l2 += mmm.l2 / b;
                sem += accumulate_semantic(model, student, ex, config.sem_weight / b).loss / b;
            }
            if (!std::isfinite(ce)) {
                throw TrainingError("masked training diverged at step " + std::to_string(step + 1) +
                                    " (masked cross-entropy is NaN)");
            }
            if (!std::isfinite(sem)) {
                throw TrainingError("masked training diverged at step " + std::to_string(step + 1) +
                                    " (semantic loss is NaN)");
            }
            const ParamSet before = student;
            adam_step(student, adam, ++step);
            result.student_path_length += parameter_distance(before, student);
            ema_update(result.teacher, student, config.ema_decay);

            result.ce_curve.push_back(ce);
            result.sem_curve.push_back(sem);
            result.l2_curve.push_back(l2);
            result.loss_curve.push_back(ce + config.sem_weight * sem);
            epoch_ce += ce;
            epoch_sem += sem;
            ++epoch_steps;
        }
        result.teacher_distance.push_back(parameter_distance(result.teacher, student));
        spdlog::debug("mask epoch {} ratios soft {:.3f} hard {:.3f} random {:.3f} ce {:.4f} sem {:.4f} lag {:.4f}",
                      epoch + 1, ratios.soft, ratios.hard, ratios.random, epoch_ce / static_cast<double>(epoch_steps),
                      epoch_sem / static_cast<double>(epoch_steps), result.teacher_distance.back());
    }
    return result;
}

} // namespace motionmask
