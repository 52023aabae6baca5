#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "motionmask/mam.hpp"
#include "motionmask/mask_transformer.hpp"
#include "motionmask/metrics.hpp"
#include "motionmask/rvq_tokenizer.hpp"
#include "motionmask/sqa.hpp"
#include "motionmask/synth.hpp"

namespace motionmask {

/// Every tunable of the staged pipeline, addressable as flat key=value records.
struct PipelineConfig {
    std::string profile = "toy";
    std::uint64_t seed = 1;
    SynthConfig synth{};
    std::size_t eval_sequences = 64;
    RvqConfig rvq{};
    MamConfig mam{};
    MaskConfig mask{};
    MaskSchedule schedule{};
    MaskStrategy strategy = MaskStrategy::Attention;
    std::size_t steps = 1;     // completion rounds at inference
    double bc_sigma = 0.1;     // seconds

    /// Sub-configs plus cross-stage agreement (latent width, codebook size, speech width, clip length).
    void validate() const;

    /// Applies one record. Unknown keys and unparsable values raise ConfigError.
    void set(const std::string& key, const std::string& value);
    /// Fully resolved config, one `key=value` per line in a fixed order.
    std::string to_text() const;
    std::map<std::string, std::string> to_map() const;
};

/// "toy" (desk scale) or "paper" (published batch/epoch/lr values).
PipelineConfig profile_config(const std::string& name);

/// Parses `key=value` lines on top of `base`; '#' starts a comment.
PipelineConfig parse_config(const std::string& text, PipelineConfig base);
PipelineConfig load_config(const std::string& path, PipelineConfig base);

/// Trained stages needed for inference and evaluation.
struct ModelStack {
    MotionTokenizer tokenizer;
    MotionAudioModel mam;
    MaskTransformer mask;
    ParamSet teacher;
};

std::vector<MamExample> prepare_mam_examples(const MotionTokenizer& tokenizer, std::span<const SynthSample> samples);
std::vector<MaskExample> prepare_mask_examples(const MotionTokenizer& tokenizer, const MotionAudioModel& mam,
                                               std::span<const SynthSample> samples);

/// Longest clip one generation window covers.
std::size_t window_frames(const ModelStack& stack);

/// Frames over which the seed reconstruction residual fades out after the seed.
inline constexpr std::size_t kSeamFrames = 8;

/// Generates `target_frames` frames from speech features and exactly four seed
/// frames. Output frames 0..3 are the seed, copied bit for bit. Frame 3 + k for
/// 0 < k < kSeamFrames is the decoded frame plus (1 - k / kSeamFrames) times the
/// difference between the seed and its decoded reconstruction at frame 3.
MotionSequence infer(const ModelStack& stack, const SpeechFeatures& features, const MotionSequence& seed,
                     std::size_t target_frames, std::size_t steps = 1);

/// Completion details behind `infer`, exposed for evaluation.
struct Generation {
    MotionSequence motion;
    CompletionResult completion;
};
Generation generate_from_seed(const ModelStack& stack, const SpeechFeatures& features, const MotionSequence& seed,
                              std::size_t target_frames, std::size_t steps);

/// Chains windows of window_frames(stack); each window after the first is seeded
/// with the last four frames of its predecessor. Features cover target_frames rows.
MotionSequence infer_long(const ModelStack& stack, const SpeechFeatures& features, const MotionSequence& seed,
                          std::size_t target_frames, std::size_t steps = 1);

/// Raw frame indices where a new window starts (its first generated frame).
std::vector<std::size_t> window_junctions(const ModelStack& stack, std::size_t target_frames);

struct Evaluation {
    MetricReport report;
    double event_score = 0.0; // mean teacher semantic score on frames with label > 0
    double idle_score = 0.0;  // on frames with label 0
    std::vector<MotionSequence> generated;
};

/// One row per evaluation: strategy, fgd, bc, div, token accuracy, event and idle scores.
std::string ablation_table(const std::vector<Evaluation>& evaluations);

/// Audio beats for synthetic data: event onsets in seconds.
std::vector<double> audio_beats(const SynthSample& sample, double fps);

Evaluation evaluate(const ModelStack& stack, std::span<const SynthSample> samples, const PipelineConfig& config);

/// Training corpus and a disjoint evaluation corpus (separate RNG streams).
std::vector<SynthSample> eval_corpus(const PipelineConfig& config);
std::vector<SynthSample> train_corpus(const PipelineConfig& config);

/// Accepts "error", "warn", "info" or "debug"; anything else raises ConfigError.
void set_log_level(const std::string& level);
/// Applies EM_LOG when set, otherwise `fallback`.
void set_log_level_from_env(const std::string& fallback);

} // namespace motionmask
