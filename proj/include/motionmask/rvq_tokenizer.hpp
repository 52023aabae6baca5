#pragma once

#include <array>
#include <span>
#include <vector>

#include "motionmask/layers.hpp"
#include "motionmask/motion.hpp"
#include "motionmask/numerics.hpp"

namespace motionmask {

/// Residual codebook stack. Entry 0 of every layer is a frozen zero vector, so
/// choosing it leaves the residual untouched.
struct Codebook {
    std::vector<Tensor> layers; // each entries x dim

    std::size_t layer_count() const { return layers.size(); }
    std::size_t entries() const { return layers.empty() ? 0 : layers.front().rows(); }
    std::size_t dim() const { return layers.empty() ? 0 : layers.front().cols(); }
    void validate() const;
};

struct LatentTokenGrid {
    /// indices[layer][t]; only the first `active_layers` rows are meaningful.
    std::vector<std::vector<std::size_t>> indices;
    /// Sum of the selected code vectors, latent_frames x dim.
    Tensor quantized;
    std::size_t active_layers = 0;
    /// Raw frame count before padding; decode crops back to it.
    std::size_t frames = 0;

    std::size_t latent_frames() const { return quantized.rows(); }
};

/// Nearest-neighbour residual quantization. Layer l codes the residual left by
/// layers < l; ties go to the lowest index.
LatentTokenGrid quantize(const Tensor& latent, const Codebook& codebook, std::size_t active_layers);

/// Sum of code vectors selected by `indices` over the first `active_layers` layers.
Tensor dequantize(const std::vector<std::vector<std::size_t>>& indices, const Codebook& codebook,
                  std::size_t active_layers);

struct RvqConfig {
    std::size_t dim = 32;
    std::size_t entries = 64;
    std::size_t layers = 6;
    std::size_t encoder_hidden = 64;
    std::size_t decoder_hidden = 32;
    double commitment = 0.25;
    double ema_decay = 0.99;
    double quantizer_dropout = 0.2;
    std::size_t dead_code_batches = 32;
    std::size_t epochs = 12;
    std::size_t batch = 16;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;

    void validate() const;
};

/// Strided-convolution encoder (x4 temporal downscale), shared residual
/// quantizer, and one upsampling decoder head per body part.
class MotionTokenizer {
public:
    MotionTokenizer() = default;
    MotionTokenizer(const RvqConfig& config, const PartLayout& layout, const Rng& init);

    /// frames x D -> latent_frames x dim. Pads to a multiple of 4 by repeating the last frame.
    Tensor encode(const MotionSequence& motion) const;
    LatentTokenGrid quantize(const Tensor& latent, std::size_t active_layers) const;
    /// encode + quantize with every layer active.
    LatentTokenGrid tokenize(const MotionSequence& motion) const;
    MotionSequence decode(const LatentTokenGrid& grid) const;
    /// Decodes latent_frames x dim rows into 4 * latent_frames frames, cropped to `frames`.
    MotionSequence decode_latent(const Tensor& quantized, std::size_t frames) const;
    MotionSequence round_trip(const MotionSequence& motion, std::size_t active_layers) const;

    const RvqConfig& config() const { return config_; }
    const PartLayout& layout() const { return layout_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    Codebook& codebook() { return codebook_; }
    const Codebook& codebook() const { return codebook_; }
    double fps() const { return fps_; }
    void set_fps(double fps) { fps_ = fps; }

    // Differentiable pieces used by training.
    struct EncoderCache {
        Conv1dCache first;
        Tensor pre_activation;
        Conv1dCache second;
    };
    struct DecoderCache {
        std::array<Conv1dCache, kPartCount> first;
        std::array<Tensor, kPartCount> pre_activation;
        std::array<Conv1dCache, kPartCount> second;
    };
    Tensor encode_padded(const ParamSet& params, const Tensor& padded, EncoderCache& cache) const;
    Tensor encode_backward(ParamSet& params, const Tensor& dlatent, const EncoderCache& cache) const;
    Tensor decode_frames(const ParamSet& params, const Tensor& quantized, DecoderCache& cache) const;
    Tensor decode_backward(ParamSet& params, const Tensor& dframes, const DecoderCache& cache) const;

    /// Right-pads by edge replication to a multiple of 4 frames.
    static Tensor pad_frames(const Tensor& frames);

private:
    RvqConfig config_;
    PartLayout layout_;
    double fps_ = 30.0;
    ParamSet params_;
    Codebook codebook_;
    Conv1d enc1_, enc2_;
    std::array<Conv1d, kPartCount> dec1_, dec2_;

    void build_layers();
};

struct RvqTrainResult {
    MotionTokenizer tokenizer;
    std::vector<double> loss_curve;  // total loss per batch
    std::vector<double> recon_curve; // reconstruction MSE per batch
    std::size_t reseeded_codes = 0;
};

/// Reconstruction L2 + commitment loss with straight-through gradients,
/// EMA codebook updates, quantizer dropout and dead-code reseeding.
RvqTrainResult train_rvq(std::span<const MotionSequence> corpus, const RvqConfig& config, const PartLayout& layout,
                         Rng rng);

/// Mean squared error of decode(quantize(encode(x))) over a set of clips.
double round_trip_mse(const MotionTokenizer& tokenizer, std::span<const MotionSequence> clips,
                      std::size_t active_layers);

/// MSE of predicting every frame of `clips` by the per-channel mean of `reference`.
double mean_predictor_mse(std::span<const MotionSequence> reference, std::span<const MotionSequence> clips);

} // namespace motionmask
