#pragma once

#include <span>
#include <vector>

#include "motionmask/layers.hpp"
#include "motionmask/speech.hpp"

namespace motionmask {

struct MamConfig {
    std::size_t latent_dim = 32;
    std::size_t low_channels = 2;
    std::size_t high_channels = 8;
    /// Number of learnable queries; equals the latent frame count of a training clip.
    std::size_t queries = 16;
    std::size_t width = 32; // d_q
    std::size_t heads = 4;
    std::size_t hidden = 64;
    std::size_t shared_blocks = 1;
    double tau = 0.07;
    std::size_t epochs = 20;
    std::size_t batch = 16;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;

    void validate() const;
};

struct InfoNceResult {
    double loss = 0.0;
    Tensor grad_a;
    Tensor grad_b;
};

/// Sum over rows i of -log softmax_j(cos(a_i, b_j) / tau)[i]. The symmetric form
/// averages this with the same loss computed from b to a.
InfoNceResult info_nce(const Tensor& a, const Tensor& b, double tau, bool symmetric = true);

/// Row-wise cosine similarity matrix.
Tensor cosine_matrix(const Tensor& a, const Tensor& b);

/// One training pair: the quantized latent of a clip and its speech features.
struct MamExample {
    Tensor latent; // latent_frames x latent_dim
    SpeechFeatures features;
};

struct JointEmbedding {
    Tensor speech; // Q-hat, latent_frames x width
    Tensor motion; // z-hat, latent_frames x width
    Tensor pooled_speech;
    Tensor pooled_motion;
};

/// Learnable speech queries refined by cross-attention over low then high
/// speech features, and a shared transformer that embeds both the refined
/// queries and quantized motion.
class MotionAudioModel {
public:
    MotionAudioModel() = default;
    MotionAudioModel(const MamConfig& config, const Rng& init);

    struct SharedCache {
        std::vector<TransformerBlockCache> blocks;
    };
    struct QueryCache {
        Tensor low;  // resampled features
        Tensor high;
        Tensor low_context; // projected + positions
        Tensor high_context;
        AttentionSublayerCache stage1_cross;
        Tensor after_stage1_cross;
        TransformerBlockCache stage1_block;
        Tensor after_stage1;
        AttentionSublayerCache stage2_cross;
        Tensor after_stage2_cross;
        TransformerBlockCache stage2_block;
    };
    struct Trace {
        QueryCache query;
        Tensor refined;
        SharedCache speech_shared;
        Tensor latent;
        Tensor motion_input;
        SharedCache motion_shared;
        JointEmbedding embedding;
    };

    /// Refined queries (latent_frames x width); features are resampled to latent_frames rows.
    Tensor encode_queries(const ParamSet& params, const SpeechFeatures& features, std::size_t latent_frames,
                          QueryCache& cache) const;
    Tensor encode_queries(const SpeechFeatures& features, std::size_t latent_frames) const;
    Tensor shared(const ParamSet& params, const Tensor& x, SharedCache& cache) const;
    Tensor shared(const Tensor& x) const;

    Trace forward(const ParamSet& params, const SpeechFeatures& features, const Tensor& latent) const;
    JointEmbedding joint_embed(const SpeechFeatures& features, const Tensor& latent) const;
    /// Q used downstream: the shared transformer applied to the refined queries.
    Tensor speech_embedding(const SpeechFeatures& features, std::size_t latent_frames) const;

    void backward(ParamSet& params, const Tensor& d_speech, const Tensor& d_motion, const Trace& trace) const;

    const MamConfig& config() const { return config_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

private:
    MamConfig config_;
    ParamSet params_;
    Linear low_in_, high_in_, motion_in_;
    AttentionSublayer stage1_cross_, stage2_cross_;
    TransformerBlock stage1_block_, stage2_block_;
    std::vector<TransformerBlock> shared_;

    void build_layers();
    Tensor shared_backward(ParamSet& params, const Tensor& dy, const SharedCache& cache) const;
};

struct AlignLoss {
    double total = 0.0;
    double frame = 0.0;    // mean over the batch of frame-level InfoNCE / latent_frames
    double sentence = 0.0; // sentence-level InfoNCE over pooled embeddings / batch
};

/// L_align over a batch; accumulates gradients into `params` when `accumulate` is set.
AlignLoss alignment_loss(const MotionAudioModel& model, ParamSet& params, std::span<const MamExample> batch,
                         bool accumulate);

struct MamDiagnostics {
    double loss = 0.0;
    double positive_cosine = 0.0;     // mean cos(q-hat_i, z-hat_i) over frames
    double frame_retrieval = 0.0;     // fraction of frames whose own motion frame ranks first
    double sentence_retrieval = 0.0;  // same for pooled embeddings across the batch
    std::size_t batch = 0;
};

MamDiagnostics evaluate_mam(const MotionAudioModel& model, std::span<const MamExample> examples, std::size_t batch);

struct MamTrainResult {
    MotionAudioModel model;
    std::vector<double> loss_curve;
    MamDiagnostics before;
    MamDiagnostics after;
};

MamTrainResult train_mam(std::span<const MamExample> train, const MamConfig& config, Rng rng);

} // namespace motionmask
