#pragma once

#include <span>
#include <string>
#include <vector>

#include "motionmask/layers.hpp"
#include "motionmask/rvq_tokenizer.hpp"
#include "motionmask/sqa.hpp"

namespace motionmask {

enum class MaskStrategy { Attention, Random, Loss };
const char* strategy_name(MaskStrategy strategy);
MaskStrategy strategy_from_name(const std::string& name);

struct MaskConfig {
    std::size_t latent_dim = 32;
    std::size_t entries = 64;     // base codebook layer size
    std::size_t speech_width = 32; // d_q of the speech embedding
    std::size_t width = 32;
    std::size_t heads = 4;
    std::size_t hidden = 64;
    std::size_t blocks = 4;
    std::size_t score_width = 16;
    double ema_decay = 0.999;
    double sem_weight = 0.1;
    std::size_t epochs = 40;
    std::size_t batch = 16;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;

    void validate() const;
};

/// One training clip seen by the masked transformer.
struct MaskExample {
    Tensor latent;                     // quantized latent, T_lat x latent_dim
    std::vector<std::size_t> targets;  // base-layer code per latent frame
    Tensor speech;                     // speech embedding Q, T_lat x speech_width
    std::vector<double> labels;        // semantic labels per latent frame
};

struct StudentBlockCache {
    AttentionSublayerCache self;
    Tensor after_self;
    AttentionSublayerCache cross;
    Tensor after_cross;
    FeedForwardCache ff;
};

/// Self-attention over latent frames, cross-attention to the speech embedding, feed-forward.
class StudentBlock {
public:
    StudentBlock() = default;
    StudentBlock(std::string name, std::size_t width, std::size_t speech_width, std::size_t heads, std::size_t hidden);

    void init(ParamSet& params, const Rng& rng) const;
    Tensor forward(const ParamSet& params, const Tensor& x, const Tensor& speech, StudentBlockCache& cache) const;
    Tensor backward(ParamSet& params, const Tensor& dy, const StudentBlockCache& cache) const;

private:
    AttentionSublayer self_, cross_;
    FeedForwardSublayer ff_;
};

struct StudentCache {
    Tensor tokens;
    Tensor hidden_in;
    std::vector<StudentBlockCache> blocks;
    Tensor hidden_out;
    LayerNormCache norm;
    Tensor normed;
};

struct StudentOutput {
    Tensor logits;             // T_lat x entries
    Tensor predicted_latents;  // softmax(logits) x base codebook layer
};

/// The student network. Its ParamSet also holds the speech-queried score head,
/// so the EMA teacher (a copy of the whole set) carries its own attention maps.
class MaskTransformer {
public:
    MaskTransformer() = default;
    MaskTransformer(const MaskConfig& config, const Tensor& base_codes, const Rng& init);

    /// Replaces masked rows of the latent with the learnable mask embedding.
    Tensor mask_tokens(const ParamSet& params, const Tensor& latent, const MaskSpec& mask) const;
    Tensor mask_tokens(const ParamSet& params, const Tensor& latent, const std::vector<bool>& masked) const;

    Tensor forward(const ParamSet& params, const Tensor& tokens, const Tensor& speech, StudentCache& cache) const;
    StudentOutput output(const ParamSet& params, const Tensor& tokens, const Tensor& speech) const;
    /// Returns dL/dtokens.
    Tensor backward(ParamSet& params, const Tensor& dlogits, const StudentCache& cache) const;

    /// Latent poses p fed to the score head: the token embedding of unmasked latents.
    Tensor pose_embedding(const ParamSet& params, const Tensor& latent) const;
    AttentionMap attention(const ParamSet& params, const Tensor& latent, const Tensor& speech) const;
    const ScoreHead& score_head() const { return score_; }

    Tensor expected_latents(const Tensor& logits) const;

    const MaskConfig& config() const { return config_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    const Tensor& base_codes() const { return base_codes_; }

private:
    MaskConfig config_;
    Tensor base_codes_;
    ParamSet params_;
    Linear in_;
    std::vector<StudentBlock> blocks_;
    LayerNorm out_norm_;
    Linear head_;
    ScoreHead score_;

    void build_layers();
};

struct MmmLoss {
    double ce = 0.0;        // mean cross-entropy over masked frames
    double l2 = 0.0;        // sum over masked frames of |predicted latent - target latent|^2 (logged only)
    double accuracy = 0.0;  // argmax accuracy over masked frames
    std::size_t masked = 0;
    Tensor dlogits;
};

/// Training loss over masked frames only. An empty mask gives zero loss and a warning.
MmmLoss mmm_loss(const StudentOutput& output, std::span<const std::size_t> targets, const Tensor& target_latent,
                 std::span<const std::size_t> masked);

/// Student forward on `example` under `mask`, mmm_loss, and backward; adds
/// scale * gradient to params, the mask embedding included.
MmmLoss accumulate_mmm(const MaskTransformer& model, ParamSet& params, const MaskExample& example,
                       const MaskSpec& mask, double scale);

/// Semantic loss of the score head on the unmasked latent. Adds scale * gradient
/// to the score head only; the pose embedding is held constant.
SemanticLoss accumulate_semantic(const MaskTransformer& model, ParamSet& params, const MaskExample& example,
                                 double scale);

/// Per-frame cross-entropy of logits against targets.
std::vector<double> frame_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

/// teacher <- decay * teacher + (1 - decay) * student.
void ema_update(ParamSet& teacher, const ParamSet& student, double decay);
double parameter_distance(const ParamSet& a, const ParamSet& b);

struct CompletionResult {
    Tensor latent;                       // completed quantized latent
    std::vector<std::size_t> base_codes; // argmax or known base code per frame
    Tensor logits;                       // logits from the final pass
};

/// Fills masked frames: base codes from the student, deeper layers by greedy
/// nearest-neighbour coding of the residual between the expected latent and
/// the chosen base code. Known frames keep their latents. steps > 1 keeps the
/// most confident predictions each round and re-masks the rest.
CompletionResult complete(const MaskTransformer& model, const ParamSet& params, const Codebook& codebook,
                          const Tensor& known_latent, const std::vector<bool>& masked, const Tensor& speech,
                          std::size_t steps = 1);

struct MaskedTrainOptions {
    MaskStrategy strategy = MaskStrategy::Attention;
    MaskSchedule schedule{};
};

struct MaskedTrainResult {
    MaskTransformer model;
    ParamSet teacher;
    std::vector<double> loss_curve;   // per step: ce + w_sem * sem
    std::vector<double> ce_curve;
    std::vector<double> sem_curve;
    std::vector<double> l2_curve;
    std::vector<MaskRatios> epoch_ratios;
    std::vector<double> teacher_distance; // per epoch, after its last step
    double student_path_length = 0.0;     // sum of per-step parameter displacement norms
};

MaskedTrainResult train_masked(std::span<const MaskExample> train, const Tensor& base_codes, const MaskConfig& config,
                               const MaskedTrainOptions& options, Rng rng);

/// Schedule time for training epoch e of E, spanning [0, total_epochs].
double schedule_time(const MaskSchedule& schedule, std::size_t epoch, std::size_t epochs);

} // namespace motionmask
