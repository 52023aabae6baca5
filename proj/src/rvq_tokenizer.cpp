#include "motionmask/rvq_tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "motionmask/errors.hpp"

namespace motionmask {

void Codebook::validate() const {
    if (layers.empty()) {
        throw ConfigError("codebook has no layers");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const Tensor& table = layers[l];
        if (table.rows() == 0) {
            throw ConfigError("codebook layer " + std::to_string(l) + " is empty");
        }
        if (table.rows() != entries() || table.cols() != dim()) {
            throw ConfigError("codebook layer " + std::to_string(l) + " has shape " + table.shape_string());
        }
        if (!table.all_finite()) {
            throw ConfigError("codebook layer " + std::to_string(l) + " has non-finite entries");
        }
    }
}

namespace {

struct QuantizeTrace {
    LatentTokenGrid grid;
    std::vector<Tensor> residual_inputs; // per active layer, latent_frames x dim
};

QuantizeTrace quantize_traced(const Tensor& latent, const Codebook& codebook, std::size_t active_layers) {
    if (active_layers < 1 || active_layers > codebook.layer_count()) {
        throw ConfigError("active_layers must be in [1, " + std::to_string(codebook.layer_count()) + "], got " +
                          std::to_string(active_layers));
    }
    for (std::size_t l = 0; l < active_layers; ++l) {
        if (codebook.layers[l].rows() == 0) {
            throw ConfigError("codebook layer " + std::to_string(l) + " is empty");
        }
    }
    if (latent.cols() != codebook.dim()) {
        throw DimensionError("latent width " + std::to_string(latent.cols()) + " != codebook dim " +
                             std::to_string(codebook.dim()));
    }
    QuantizeTrace trace;
    LatentTokenGrid& grid = trace.grid;
    grid.active_layers = active_layers;
    grid.indices.assign(codebook.layer_count(), std::vector<std::size_t>(latent.rows(), 0));
    grid.quantized = Tensor(latent.rows(), latent.cols());
    Tensor residual = latent;
    for (std::size_t l = 0; l < active_layers; ++l) {
        trace.residual_inputs.push_back(residual);
        const Tensor& table = codebook.layers[l];
        const Tensor dist = kernels::squared_distances(residual, table);
        for (std::size_t t = 0; t < latent.rows(); ++t) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < table.rows(); ++k) {
                if (dist(t, k) < dist(t, best)) {
                    best = k;
                }
            }
            grid.indices[l][t] = best;
            for (std::size_t c = 0; c < latent.cols(); ++c) {
                residual(t, c) -= table(best, c);
                grid.quantized(t, c) += table(best, c);
            }
        }
    }
    return trace;
}

Tensor crop_rows(const Tensor& x, std::size_t rows) { return rows == x.rows() ? x : x.slice_rows(0, rows); }

} // namespace

LatentTokenGrid quantize(const Tensor& latent, const Codebook& codebook, std::size_t active_layers) {
    return quantize_traced(latent, codebook, active_layers).grid;
}

Tensor dequantize(const std::vector<std::vector<std::size_t>>& indices, const Codebook& codebook,
                  std::size_t active_layers) {
    if (indices.size() < active_layers || active_layers > codebook.layer_count()) {
        throw ConfigError("dequantize: not enough index layers");
    }
    const std::size_t frames = indices.empty() ? 0 : indices.front().size();
    Tensor out(frames, codebook.dim());
    for (std::size_t l = 0; l < active_layers; ++l) {
        for (std::size_t t = 0; t < frames; ++t) {
            const std::size_t k = indices[l][t];
            if (k >= codebook.entries()) {
                throw ConfigError("code index " + std::to_string(k) + " out of range");
            }
            for (std::size_t c = 0; c < codebook.dim(); ++c) {
                out(t, c) += codebook.layers[l](k, c);
            }
        }
    }
    return out;
}

void RvqConfig::validate() const {
    if (dim == 0 || entries < 2 || layers == 0) {
        throw ConfigError("rvq: dim, entries (>= 2) and layers must be positive");
    }
    if (!(quantizer_dropout >= 0.0 && quantizer_dropout <= 1.0)) {
        throw ConfigError("rvq: quantizer dropout must lie in [0, 1]");
    }
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
        throw ConfigError("rvq: ema decay must lie in [0, 1)");
    }
    if (batch == 0) {
        throw ConfigError("rvq: batch must be positive");
    }
    AdamOptions{lr, beta1, beta2}.validate("rvq");
}

// ---------------------------------------------------------------------------

MotionTokenizer::MotionTokenizer(const RvqConfig& config, const PartLayout& layout, const Rng& init)
    : config_(config), layout_(layout) {
    config_.validate();
    layout_.validate();
    build_layers();
    enc1_.init(params_, init);
    enc2_.init(params_, init);
    for (std::size_t p = 0; p < kPartCount; ++p) {
        dec1_[p].init(params_, init);
        dec2_[p].init(params_, init);
    }
    Rng codes = init.split("codebook");
    codebook_.layers.assign(config_.layers, Tensor(config_.entries, config_.dim));
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const double scale = 0.5 / static_cast<double>(l + 1);
        for (std::size_t k = 1; k < config_.entries; ++k) {
            for (std::size_t c = 0; c < config_.dim; ++c) {
                codebook_.layers[l](k, c) = scale * codes.normal();
            }
        }
    }
}

void MotionTokenizer::build_layers() {
    const std::size_t d = layout_.channels();
    enc1_ = Conv1d("enc.conv1", d, config_.encoder_hidden, 4, 2, 1);
    enc2_ = Conv1d("enc.conv2", config_.encoder_hidden, config_.dim, 4, 2, 1);
    for (Part part : kParts) {
        const auto p = static_cast<std::size_t>(part);
        const std::string prefix = std::string("dec.") + part_name(part);
        dec1_[p] = Conv1d(prefix + ".conv1", config_.dim, config_.decoder_hidden, 3, 1, 1);
        dec2_[p] = Conv1d(prefix + ".conv2", config_.decoder_hidden, layout_.width(part), 3, 1, 1);
    }
}

Tensor MotionTokenizer::pad_frames(const Tensor& frames) {
    const std::size_t t = frames.rows();
    const std::size_t padded = latent_frames(t) * kDownscale;
    if (padded == t) {
        return frames;
    }
    Tensor out(padded, frames.cols());
    for (std::size_t r = 0; r < padded; ++r) {
        const auto src = frames.row(std::min(r, t - 1));
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

Tensor MotionTokenizer::encode_padded(const ParamSet& params, const Tensor& padded, EncoderCache& cache) const {
    Tensor h = enc1_.forward(params, padded, cache.first);
    cache.pre_activation = h;
    return enc2_.forward(params, gelu(h), cache.second);
}

Tensor MotionTokenizer::encode_backward(ParamSet& params, const Tensor& dlatent, const EncoderCache& cache) const {
    const Tensor dh = enc2_.backward(params, dlatent, cache.second);
    return enc1_.backward(params, gelu_backward(cache.pre_activation, dh), cache.first);
}

Tensor MotionTokenizer::decode_frames(const ParamSet& params, const Tensor& quantized, DecoderCache& cache) const {
    if (quantized.cols() != config_.dim) {
        throw DimensionError("decode: latent width " + std::to_string(quantized.cols()) + " != " +
                             std::to_string(config_.dim));
    }
    const Tensor up = upsample_rows(quantized, 2);
    Tensor out(quantized.rows() * kDownscale, layout_.channels());
    for (Part part : kParts) {
        const auto p = static_cast<std::size_t>(part);
        Tensor h = dec1_[p].forward(params, up, cache.first[p]);
        cache.pre_activation[p] = h;
        const Tensor y = dec2_[p].forward(params, upsample_rows(gelu(h), 2), cache.second[p]);
        const std::size_t off = layout_.offset(part);
        for (std::size_t t = 0; t < y.rows(); ++t) {
            for (std::size_t c = 0; c < y.cols(); ++c) {
                out(t, off + c) = y(t, c);
            }
        }
    }
    return out;
}

Tensor MotionTokenizer::decode_backward(ParamSet& params, const Tensor& dframes, const DecoderCache& cache) const {
    Tensor dup(dframes.rows() / 2, config_.dim);
    for (Part part : kParts) {
        const auto p = static_cast<std::size_t>(part);
        const std::size_t off = layout_.offset(part);
        const Tensor dy = dframes.slice_cols(off, layout_.width(part));
        const Tensor dact = upsample_rows_backward(dec2_[p].backward(params, dy, cache.second[p]), 2);
        add_inplace(dup, dec1_[p].backward(params, gelu_backward(cache.pre_activation[p], dact), cache.first[p]));
    }
    return upsample_rows_backward(dup, 2);
}

Tensor MotionTokenizer::encode(const MotionSequence& motion) const {
    if (motion.frames.rows() < kSeedFrames) {
        throw SequenceTooShortError("encode needs at least " + std::to_string(kSeedFrames) + " frames, got " +
                                    std::to_string(motion.frames.rows()));
    }
    if (motion.frames.cols() != layout_.channels()) {
        throw ConfigError("encode: motion has " + std::to_string(motion.frames.cols()) + " channels, tokenizer expects " +
                          std::to_string(layout_.channels()));
    }
    EncoderCache cache;
    return encode_padded(params_, pad_frames(motion.frames), cache);
}

LatentTokenGrid MotionTokenizer::quantize(const Tensor& latent, std::size_t active_layers) const {
    return motionmask::quantize(latent, codebook_, active_layers);
}

LatentTokenGrid MotionTokenizer::tokenize(const MotionSequence& motion) const {
    LatentTokenGrid grid = quantize(encode(motion), config_.layers);
    grid.frames = motion.frames.rows();
    return grid;
}

MotionSequence MotionTokenizer::decode_latent(const Tensor& quantized, std::size_t frames) const {
    if (frames > quantized.rows() * kDownscale) {
        throw ConfigError("decode: cannot produce " + std::to_string(frames) + " frames from " +
                          std::to_string(quantized.rows()) + " latent tokens");
    }
    DecoderCache cache;
    MotionSequence out;
    out.layout = layout_;
    out.fps = fps_;
    out.frames = crop_rows(decode_frames(params_, quantized, cache), frames);
    return out;
}

MotionSequence MotionTokenizer::decode(const LatentTokenGrid& grid) const {
    const std::size_t frames = grid.frames == 0 ? grid.latent_frames() * kDownscale : grid.frames;
    return decode_latent(grid.quantized, frames);
}

MotionSequence MotionTokenizer::round_trip(const MotionSequence& motion, std::size_t active_layers) const {
    LatentTokenGrid grid = quantize(encode(motion), active_layers);
    grid.frames = motion.frames.rows();
    return decode(grid);
}

// ---------------------------------------------------------------------------

namespace {

struct EmaState {
    std::vector<std::vector<double>> cluster_size; // [layer][entry]
    std::vector<Tensor> embed_sum;                 // [layer] entries x dim
    std::vector<std::vector<std::size_t>> idle_batches;
};

EmaState make_ema_state(const Codebook& codebook) {
    EmaState s;
    s.cluster_size.assign(codebook.layer_count(), std::vector<double>(codebook.entries(), 1.0));
    s.embed_sum = codebook.layers;
    s.idle_batches.assign(codebook.layer_count(), std::vector<std::size_t>(codebook.entries(), 0));
    return s;
}

Tensor stack_rows(const std::vector<Tensor>& parts) {
    std::size_t rows = 0;
    for (const auto& p : parts) {
        rows += p.rows();
    }
    Tensor out(rows, parts.front().cols());
    std::size_t r = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < p.rows(); ++i, ++r) {
            std::copy(p.row(i).begin(), p.row(i).end(), out.row(r).begin());
        }
    }
    return out;
}

// Codes 1..K-1 of each layer start at random batch residuals, layer by layer.
void init_codebook_from_data(Codebook& codebook, const Tensor& latents, Rng& rng) {
    Tensor residual = latents;
    for (std::size_t l = 0; l < codebook.layer_count(); ++l) {
        Tensor& table = codebook.layers[l];
        for (std::size_t k = 1; k < table.rows(); ++k) {
            const auto src = residual.row(rng.index(residual.rows()));
            std::copy(src.begin(), src.end(), table.row(k).begin());
        }
        Codebook single;
        single.layers = {table};
        const LatentTokenGrid g = quantize(residual, single, 1);
        residual = subtract(residual, g.quantized);
    }
}

} // namespace

RvqTrainResult train_rvq(std::span<const MotionSequence> corpus, const RvqConfig& config, const PartLayout& layout,
                         Rng rng) {
    if (corpus.empty()) {
        throw ConfigError("train_rvq: corpus is empty");
    }
    RvqTrainResult result{MotionTokenizer(config, layout, rng.split("init")), {}, {}, 0};
    MotionTokenizer& tok = result.tokenizer;
    tok.set_fps(corpus.front().fps);
    Codebook& codebook = tok.codebook();
    ParamSet& params = tok.params();
    Rng order_rng = rng.split("order");
    Rng dropout_rng = rng.split("dropout");
    Rng reseed_rng = rng.split("reseed");

    EmaState ema = make_ema_state(codebook);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    AdamOptions adam;
    adam.lr = config.lr;
    adam.beta1 = config.beta1;
    adam.beta2 = config.beta2;
    std::size_t step = 0;
    bool codebook_seeded = false;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[order_rng.index(i)]);
        }
        for (std::size_t start = 0; start < order.size(); start += config.batch) {
            const std::size_t stop = std::min(order.size(), start + config.batch);
            const double batch_size = static_cast<double>(stop - start);

            std::size_t active = config.layers;
            if (dropout_rng.uniform() < config.quantizer_dropout) {
                active = 1 + dropout_rng.index(config.layers);
            }

            std::vector<Tensor> padded;
            std::vector<MotionTokenizer::EncoderCache> enc_caches(stop - start);
            std::vector<Tensor> latents;
            for (std::size_t b = start; b < stop; ++b) {
                padded.push_back(MotionTokenizer::pad_frames(corpus[order[b]].frames));
                latents.push_back(tok.encode_padded(params, padded.back(), enc_caches[b - start]));
            }
            if (!codebook_seeded) {
                init_codebook_from_data(codebook, stack_rows(latents), reseed_rng);
                ema = make_ema_state(codebook);
                codebook_seeded = true;
            }

            params.zero_grad();
            double total_loss = 0.0;
            double recon_loss = 0.0;
            std::vector<std::vector<Tensor>> residual_inputs(active);
            std::vector<std::vector<std::vector<std::size_t>>> assignments(active);
            for (std::size_t b = start; b < stop; ++b) {
                const std::size_t local = b - start;
                const Tensor& target = corpus[order[b]].frames;
                const Tensor& z_e = latents[local];
                QuantizeTrace trace = quantize_traced(z_e, codebook, active);
                const Tensor& z_q = trace.grid.quantized;
                for (std::size_t l = 0; l < active; ++l) {
                    residual_inputs[l].push_back(std::move(trace.residual_inputs[l]));
                    assignments[l].push_back(trace.grid.indices[l]);
                }

                MotionTokenizer::DecoderCache dec_cache;
                const Tensor recon = tok.decode_frames(params, z_q, dec_cache);
                const std::size_t frames = target.rows();
                const double n_out = static_cast<double>(frames * target.cols());
                Tensor drecon(recon.rows(), recon.cols());
                double sq = 0.0;
                for (std::size_t t = 0; t < frames; ++t) {
                    for (std::size_t c = 0; c < target.cols(); ++c) {
                        const double d = recon(t, c) - target(t, c);
                        sq += d * d;
                        drecon(t, c) = 2.0 * d / n_out / batch_size;
                    }
                }
                const double n_lat = static_cast<double>(z_e.size());
                const Tensor diff = subtract(z_e, z_q);
                const double commit = config.commitment * squared_norm(diff) / n_lat;
                recon_loss += sq / n_out;
                total_loss += sq / n_out + commit;

                // Straight-through: the decoder gradient at z_q is passed to z_e unchanged.
                Tensor dz = tok.decode_backward(params, drecon, dec_cache);
                Tensor dcommit = diff;
                scale_inplace(dcommit, 2.0 * config.commitment / n_lat / batch_size);
                add_inplace(dz, dcommit);
                tok.encode_backward(params, dz, enc_caches[local]);
            }
            total_loss /= batch_size;
            recon_loss /= batch_size;
            if (!std::isfinite(total_loss)) {
                throw TrainingError("rvq training diverged at step " + std::to_string(step + 1) + " (loss is NaN)");
            }
            adam_step(params, adam, ++step);
            result.loss_curve.push_back(total_loss);
            result.recon_curve.push_back(recon_loss);

            // EMA codebook update; entry 0 stays the zero vector.
            const double decay = config.ema_decay;
            for (std::size_t l = 0; l < active; ++l) {
                Tensor& table = codebook.layers[l];
                const std::size_t entries = table.rows();
                std::vector<double> counts(entries, 0.0);
                Tensor sums(entries, table.cols());
                const Tensor rows = stack_rows(residual_inputs[l]);
                std::size_t r = 0;
                for (const auto& seq : assignments[l]) {
                    for (std::size_t k : seq) {
                        counts[k] += 1.0;
                        for (std::size_t c = 0; c < table.cols(); ++c) {
                            sums(k, c) += rows(r, c);
                        }
                        ++r;
                    }
                }
                double n_total = 0.0;
                for (std::size_t k = 1; k < entries; ++k) {
                    ema.cluster_size[l][k] = decay * ema.cluster_size[l][k] + (1.0 - decay) * counts[k];
                    for (std::size_t c = 0; c < table.cols(); ++c) {
                        ema.embed_sum[l](k, c) = decay * ema.embed_sum[l](k, c) + (1.0 - decay) * sums(k, c);
                    }
                    n_total += ema.cluster_size[l][k];
                }
                constexpr double kSmoothing = 1e-5;
                for (std::size_t k = 1; k < entries; ++k) {
                    const double smoothed = (ema.cluster_size[l][k] + kSmoothing) /
                                            (n_total + static_cast<double>(entries - 1) * kSmoothing) * n_total;
                    for (std::size_t c = 0; c < table.cols(); ++c) {
                        table(k, c) = ema.embed_sum[l](k, c) / smoothed;
                    }
                    if (counts[k] > 0.0) {
                        ema.idle_batches[l][k] = 0;
                    } else if (++ema.idle_batches[l][k] >= config.dead_code_batches) {
                        const auto src = rows.row(reseed_rng.index(rows.rows()));
                        std::copy(src.begin(), src.end(), table.row(k).begin());
                        std::copy(src.begin(), src.end(), ema.embed_sum[l].row(k).begin());
                        ema.cluster_size[l][k] = 1.0;
                        ema.idle_batches[l][k] = 0;
                        ++result.reseeded_codes;
                    }
                }
                std::fill(table.row(0).begin(), table.row(0).end(), 0.0);
            }
        }
        spdlog::debug("rvq epoch {} loss {:.5f} recon {:.5f}", epoch + 1, result.loss_curve.back(),
                      result.recon_curve.back());
    }
    return result;
}

double round_trip_mse(const MotionTokenizer& tokenizer, std::span<const MotionSequence> clips,
                      std::size_t active_layers) {
    double sq = 0.0;
    double n = 0.0;
    for (const auto& clip : clips) {
        const MotionSequence out = tokenizer.round_trip(clip, active_layers);
        sq += squared_norm(subtract(out.frames, clip.frames));
        n += static_cast<double>(clip.frames.size());
    }
    return n > 0.0 ? sq / n : 0.0;
}

double mean_predictor_mse(std::span<const MotionSequence> reference, std::span<const MotionSequence> clips) {
    if (reference.empty()) {
        throw ConfigError("mean_predictor_mse: empty reference set");
    }
    Tensor mean(1, reference.front().frames.cols());
    double count = 0.0;
    for (const auto& clip : reference) {
        add_inplace(mean, column_sums(clip.frames));
        count += static_cast<double>(clip.frames.rows());
    }
    scale_inplace(mean, 1.0 / count);
    double sq = 0.0;
    double n = 0.0;
    for (const auto& clip : clips) {
        for (std::size_t t = 0; t < clip.frames.rows(); ++t) {
            for (std::size_t c = 0; c < clip.frames.cols(); ++c) {
                const double d = clip.frames(t, c) - mean(0, c);
                sq += d * d;
            }
        }
        n += static_cast<double>(clip.frames.size());
    }
    return n > 0.0 ? sq / n : 0.0;
}

} // namespace motionmask
