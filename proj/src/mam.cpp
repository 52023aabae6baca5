#include "motionmask/mam.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "motionmask/errors.hpp"

namespace motionmask {

namespace {

constexpr double kNormEps = 1e-12;

struct Normalized {
    Tensor unit;
    std::vector<double> norms;
};

Normalized normalize_rows(const Tensor& x) {
    Normalized out{Tensor(x.rows(), x.cols()), std::vector<double>(x.rows())};
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double acc = 0.0;
        for (double v : x.row(r)) {
            acc += v * v;
        }
        const double n = std::sqrt(acc + kNormEps);
        out.norms[r] = n;
        for (std::size_t c = 0; c < x.cols(); ++c) {
            out.unit(r, c) = x(r, c) / n;
        }
    }
    return out;
}

Tensor normalize_rows_backward(const Normalized& n, const Tensor& dunit) {
    Tensor dx(dunit.rows(), dunit.cols());
    for (std::size_t r = 0; r < dunit.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dunit.cols(); ++c) {
            dot += n.unit(r, c) * dunit(r, c);
        }
        for (std::size_t c = 0; c < dunit.cols(); ++c) {
            dx(r, c) = (dunit(r, c) - n.unit(r, c) * dot) / n.norms[r];
        }
    }
    return dx;
}

// -sum_i log softmax(logits row i)[i] and its gradient with respect to logits.
double diagonal_ce(const Tensor& logits, Tensor& dlogits, double weight) {
    const Tensor p = softmax_rows(logits);
    double loss = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        loss -= std::log(std::max(p(i, i), 1e-300));
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            dlogits(i, j) += weight * (p(i, j) - (i == j ? 1.0 : 0.0));
        }
    }
    return weight * loss;
}

Tensor transpose(const Tensor& x) {
    Tensor t(x.cols(), x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            t(c, r) = x(r, c);
        }
    }
    return t;
}

} // namespace

void MamConfig::validate() const {
    if (latent_dim == 0 || low_channels == 0 || high_channels == 0 || queries == 0 || width == 0 || hidden == 0) {
        throw ConfigError("mam: widths and query count must be positive");
    }
    if (heads == 0 || width % heads != 0) {
        throw ConfigError("mam: width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
    }
    if (!(tau > 0.0)) {
        throw ConfigError("mam: tau must be positive");
    }
    if (batch == 0) {
        throw ConfigError("mam: batch must be positive");
    }
    AdamOptions{lr, beta1, beta2}.validate("mam");
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
    require_same_shape(Tensor(1, a.cols()), Tensor(1, b.cols()), "cosine_matrix");
    return matmul_nt(normalize_rows(a).unit, normalize_rows(b).unit);
}

InfoNceResult info_nce(const Tensor& a, const Tensor& b, double tau, bool symmetric) {
    if (!(tau > 0.0)) {
        throw ConfigError("info_nce: tau must be positive, got " + std::to_string(tau));
    }
    require_same_shape(a, b, "info_nce");
    if (a.rows() == 0) {
        throw DimensionError("info_nce: empty batch");
    }
    const Normalized na = normalize_rows(a);
    const Normalized nb = normalize_rows(b);
    Tensor logits = matmul_nt(na.unit, nb.unit);
    scale_inplace(logits, 1.0 / tau);

    Tensor dlogits(logits.rows(), logits.cols());
    double loss = 0.0;
    if (symmetric) {
        loss += diagonal_ce(logits, dlogits, 0.5);
        Tensor dlogits_t(logits.cols(), logits.rows());
        loss += diagonal_ce(transpose(logits), dlogits_t, 0.5);
        add_inplace(dlogits, transpose(dlogits_t));
    } else {
        loss += diagonal_ce(logits, dlogits, 1.0);
    }
    scale_inplace(dlogits, 1.0 / tau);
    InfoNceResult out;
    out.loss = loss;
    out.grad_a = normalize_rows_backward(na, matmul(dlogits, nb.unit));
    out.grad_b = normalize_rows_backward(nb, matmul_tn(dlogits, na.unit));
    return out;
}

// ---------------------------------------------------------------------------

MotionAudioModel::MotionAudioModel(const MamConfig& config, const Rng& init) : config_(config) {
    config_.validate();
    build_layers();
    const Rng rng = init.split("mam");
    params_.add("queries", init_normal(rng, "queries", config_.queries, config_.width, 1.0));
    low_in_.init(params_, rng);
    high_in_.init(params_, rng);
    motion_in_.init(params_, rng);
    stage1_cross_.init(params_, rng);
    stage1_block_.init(params_, rng);
    stage2_cross_.init(params_, rng);
    stage2_block_.init(params_, rng);
    for (const auto& block : shared_) {
        block.init(params_, rng);
    }
}

void MotionAudioModel::build_layers() {
    const std::size_t w = config_.width;
    low_in_ = Linear("low_in", config_.low_channels, w);
    high_in_ = Linear("high_in", config_.high_channels, w);
    motion_in_ = Linear("motion_in", config_.latent_dim, w);
    stage1_cross_ = AttentionSublayer("stage1.cross", w, w, config_.heads, false);
    stage1_block_ = TransformerBlock("stage1.block", w, config_.heads, config_.hidden);
    stage2_cross_ = AttentionSublayer("stage2.cross", w, w, config_.heads, false);
    stage2_block_ = TransformerBlock("stage2.block", w, config_.heads, config_.hidden);
    shared_.clear();
    for (std::size_t i = 0; i < config_.shared_blocks; ++i) {
        shared_.emplace_back("shared." + std::to_string(i), w, config_.heads, config_.hidden);
    }
}

Tensor MotionAudioModel::encode_queries(const ParamSet& params, const SpeechFeatures& features,
                                        std::size_t latent_frames, QueryCache& cache) const {
    features.validate();
    if (latent_frames == 0 || latent_frames > config_.queries) {
        throw DimensionError("mam: " + std::to_string(latent_frames) + " latent frames but only " +
                             std::to_string(config_.queries) + " learnable queries");
    }
    if (features.low.cols() != config_.low_channels || features.high.cols() != config_.high_channels) {
        throw DimensionError("mam: feature widths " + std::to_string(features.low.cols()) + "/" +
                             std::to_string(features.high.cols()) + " do not match config " +
                             std::to_string(config_.low_channels) + "/" + std::to_string(config_.high_channels));
    }
    const Tensor positions = sinusoidal_positions(latent_frames, config_.width);
    cache.low = resample_rows(features.low, latent_frames);
    cache.high = resample_rows(features.high, latent_frames);
    cache.low_context = add(low_in_.forward(params, cache.low), positions);
    cache.high_context = add(high_in_.forward(params, cache.high), positions);

    const Tensor q0 = params.value("queries").slice_rows(0, latent_frames);
    cache.after_stage1_cross = stage1_cross_.forward(params, q0, &cache.low_context, cache.stage1_cross);
    cache.after_stage1 = stage1_block_.forward(params, cache.after_stage1_cross, cache.stage1_block);
    cache.after_stage2_cross = stage2_cross_.forward(params, cache.after_stage1, &cache.high_context, cache.stage2_cross);
    return stage2_block_.forward(params, cache.after_stage2_cross, cache.stage2_block);
}

Tensor MotionAudioModel::encode_queries(const SpeechFeatures& features, std::size_t latent_frames) const {
    QueryCache cache;
    return encode_queries(params_, features, latent_frames, cache);
}

Tensor MotionAudioModel::shared(const ParamSet& params, const Tensor& x, SharedCache& cache) const {
    cache.blocks.assign(shared_.size(), {});
    Tensor h = x;
    for (std::size_t i = 0; i < shared_.size(); ++i) {
        h = shared_[i].forward(params, h, cache.blocks[i]);
    }
    return h;
}

Tensor MotionAudioModel::shared(const Tensor& x) const {
    SharedCache cache;
    return shared(params_, x, cache);
}

Tensor MotionAudioModel::shared_backward(ParamSet& params, const Tensor& dy, const SharedCache& cache) const {
    Tensor d = dy;
    for (std::size_t i = shared_.size(); i-- > 0;) {
        d = shared_[i].backward(params, d, cache.blocks[i]);
    }
    return d;
}

MotionAudioModel::Trace MotionAudioModel::forward(const ParamSet& params, const SpeechFeatures& features,
                                                  const Tensor& latent) const {
    if (latent.cols() != config_.latent_dim) {
        throw DimensionError("mam: latent width " + std::to_string(latent.cols()) + " != " +
                             std::to_string(config_.latent_dim));
    }
    Trace trace;
    trace.refined = encode_queries(params, features, latent.rows(), trace.query);
    trace.embedding.speech = shared(params, trace.refined, trace.speech_shared);
    trace.latent = latent;
    trace.motion_input = add(motion_in_.forward(params, latent), sinusoidal_positions(latent.rows(), config_.width));
    trace.embedding.motion = shared(params, trace.motion_input, trace.motion_shared);
    trace.embedding.pooled_speech = column_means(trace.embedding.speech);
    trace.embedding.pooled_motion = column_means(trace.embedding.motion);
    return trace;
}

JointEmbedding MotionAudioModel::joint_embed(const SpeechFeatures& features, const Tensor& latent) const {
    return forward(params_, features, latent).embedding;
}

Tensor MotionAudioModel::speech_embedding(const SpeechFeatures& features, std::size_t latent_frames) const {
    return shared(encode_queries(features, latent_frames));
}

void MotionAudioModel::backward(ParamSet& params, const Tensor& d_speech, const Tensor& d_motion,
                                const Trace& trace) const {
    const Tensor d_motion_input = shared_backward(params, d_motion, trace.motion_shared);
    motion_in_.backward(params, trace.latent, d_motion_input);

    const QueryCache& qc = trace.query;
    Tensor d = shared_backward(params, d_speech, trace.speech_shared);
    d = stage2_block_.backward(params, d, qc.stage2_block);
    auto g2 = stage2_cross_.backward(params, d, qc.stage2_cross);
    high_in_.backward(params, qc.high, g2.context);
    d = stage1_block_.backward(params, g2.x, qc.stage1_block);
    auto g1 = stage1_cross_.backward(params, d, qc.stage1_cross);
    low_in_.backward(params, qc.low, g1.context);

    Tensor& dq = params.grad("queries");
    for (std::size_t r = 0; r < g1.x.rows(); ++r) {
        for (std::size_t c = 0; c < g1.x.cols(); ++c) {
            dq(r, c) += g1.x(r, c);
        }
    }
}

// ---------------------------------------------------------------------------

AlignLoss alignment_loss(const MotionAudioModel& model, ParamSet& params, std::span<const MamExample> batch,
                         bool accumulate) {
    if (batch.empty()) {
        throw ConfigError("alignment_loss: empty batch");
    }
    const double tau = model.config().tau;
    const auto b = static_cast<double>(batch.size());
    std::vector<MotionAudioModel::Trace> traces;
    traces.reserve(batch.size());
    Tensor pooled_speech(batch.size(), model.config().width);
    Tensor pooled_motion(batch.size(), model.config().width);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        traces.push_back(model.forward(params, batch[i].features, batch[i].latent));
        const auto ps = traces.back().embedding.pooled_speech.row(0);
        const auto pm = traces.back().embedding.pooled_motion.row(0);
        std::copy(ps.begin(), ps.end(), pooled_speech.row(i).begin());
        std::copy(pm.begin(), pm.end(), pooled_motion.row(i).begin());
    }

    AlignLoss loss;
    const InfoNceResult sentence = info_nce(pooled_speech, pooled_motion, tau);
    loss.sentence = sentence.loss / b;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& emb = traces[i].embedding;
        const auto frames = static_cast<double>(emb.speech.rows());
        const InfoNceResult frame = info_nce(emb.speech, emb.motion, tau);
        loss.frame += frame.loss / frames / b;
        if (!accumulate) {
            continue;
        }
        // Pooled rows are column means, so their gradient spreads evenly over frames.
        Tensor d_speech = frame.grad_a;
        Tensor d_motion = frame.grad_b;
        scale_inplace(d_speech, 1.0 / frames / b);
        scale_inplace(d_motion, 1.0 / frames / b);
        for (std::size_t t = 0; t < emb.speech.rows(); ++t) {
            for (std::size_t c = 0; c < emb.speech.cols(); ++c) {
                d_speech(t, c) += sentence.grad_a(i, c) / b / frames;
                d_motion(t, c) += sentence.grad_b(i, c) / b / frames;
            }
        }
        model.backward(params, d_speech, d_motion, traces[i]);
    }
    loss.total = loss.frame + loss.sentence;
    return loss;
}

MamDiagnostics evaluate_mam(const MotionAudioModel& model, std::span<const MamExample> examples, std::size_t batch) {
    if (examples.empty() || batch == 0) {
        throw ConfigError("evaluate_mam: need examples and a positive batch size");
    }
    MamDiagnostics diag;
    diag.batch = batch;
    ParamSet params = model.params();
    double cos_sum = 0.0;
    double frame_hits = 0.0;
    double frames = 0.0;
    double sentence_hits = 0.0;
    double batches = 0.0;
    for (std::size_t start = 0; start < examples.size(); start += batch) {
        const auto chunk = examples.subspan(start, std::min(batch, examples.size() - start));
        diag.loss += alignment_loss(model, params, chunk, false).total;
        batches += 1.0;
        Tensor pooled_speech(chunk.size(), model.config().width);
        Tensor pooled_motion(chunk.size(), model.config().width);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            const JointEmbedding emb = model.joint_embed(chunk[i].features, chunk[i].latent);
            const Tensor sim = cosine_matrix(emb.speech, emb.motion);
            for (std::size_t t = 0; t < sim.rows(); ++t) {
                cos_sum += sim(t, t);
                const auto row = sim.row(t);
                const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
                frame_hits += best == t ? 1.0 : 0.0;
                frames += 1.0;
            }
            std::copy(emb.pooled_speech.flat().begin(), emb.pooled_speech.flat().end(), pooled_speech.row(i).begin());
            std::copy(emb.pooled_motion.flat().begin(), emb.pooled_motion.flat().end(), pooled_motion.row(i).begin());
        }
        const Tensor sim = cosine_matrix(pooled_speech, pooled_motion);
        for (std::size_t i = 0; i < sim.rows(); ++i) {
            const auto row = sim.row(i);
            const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            sentence_hits += best == i ? 1.0 : 0.0;
        }
    }
    diag.loss /= batches;
    diag.positive_cosine = cos_sum / frames;
    diag.frame_retrieval = frame_hits / frames;
    diag.sentence_retrieval = sentence_hits / static_cast<double>(examples.size());
    return diag;
}

MamTrainResult train_mam(std::span<const MamExample> train, const MamConfig& config, Rng rng) {
    if (train.empty()) {
        throw ConfigError("train_mam: corpus is empty");
    }
    MamTrainResult result{MotionAudioModel(config, rng.split("init")), {}, {}, {}};
    MotionAudioModel& model = result.model;
    result.before = evaluate_mam(model, train, config.batch);

    Rng order_rng = rng.split("order");
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    AdamOptions adam;
    adam.lr = config.lr;
    adam.beta1 = config.beta1;
    adam.beta2 = config.beta2;
    std::size_t step = 0;
    std::vector<MamExample> batch;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[order_rng.index(i)]);
        }
        double epoch_loss = 0.0;
        std::size_t epoch_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch) {
            batch.clear();
            for (std::size_t k = start; k < std::min(order.size(), start + config.batch); ++k) {
                batch.push_back(train[order[k]]);
            }
            model.params().zero_grad();
            const AlignLoss loss = alignment_loss(model, model.params(), batch, true);
            if (!std::isfinite(loss.total)) {
                throw TrainingError("mam training diverged at step " + std::to_string(step + 1) + " (L_align is NaN)");
            }
            adam_step(model.params(), adam, ++step);
            result.loss_curve.push_back(loss.total);
            epoch_loss += loss.total;
            ++epoch_batches;
        }
        spdlog::debug("mam epoch {} L_align {:.5f}", epoch + 1, epoch_loss / static_cast<double>(epoch_batches));
    }
    result.after = evaluate_mam(model, train, config.batch);
    return result;
}

} // namespace motionmask
