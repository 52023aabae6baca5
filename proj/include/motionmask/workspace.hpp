#pragma once

#include <string>
#include <vector>

#include "motionmask/io.hpp"
#include "motionmask/pipeline.hpp"

namespace motionmask {

/// File layout of a staged run under one work directory:
///   config.txt                 resolved config of the last gen-data
///   corpus/{train,eval}/       manifest.csv plus <id>.motion.emtf / <id>.features.emtf
///   rvq.emck, mam.emck         tokenizer and alignment checkpoints
///   mask.<strategy>.emck       student + EMA teacher per masking strategy
///   <stage>.loss.csv           training curves
struct Workspace {
    std::string root;

    std::string path(const std::string& name) const;
    std::string corpus_dir(const std::string& split) const { return path("corpus/" + split); }
    std::string rvq_checkpoint() const { return path("rvq.emck"); }
    std::string mam_checkpoint() const { return path("mam.emck"); }
    std::string mask_checkpoint(MaskStrategy s) const { return path(std::string("mask.") + strategy_name(s) + ".emck"); }
};

/// Features as one tensor: low channels then high channels.
Tensor pack_features(const SpeechFeatures& f);
SpeechFeatures unpack_features(const Tensor& packed, std::size_t low_channels);

std::string events_text(const std::vector<GestureEvent>& events);
std::vector<GestureEvent> parse_events(const std::string& text);

void save_corpus(const std::string& dir, const std::vector<SynthSample>& samples, const PipelineConfig& config);
/// Raises StageError("gen-data") when the manifest is missing.
std::vector<SynthSample> load_corpus(const std::string& dir, const PipelineConfig& config);

Checkpoint tokenizer_checkpoint(const MotionTokenizer& tokenizer, const PipelineConfig& config, RngState rng);
Checkpoint mam_checkpoint(const MotionAudioModel& mam, const PipelineConfig& config, RngState rng);
Checkpoint mask_checkpoint(const MaskTransformer& model, const ParamSet& teacher, const PipelineConfig& config,
                           RngState rng);

MotionTokenizer tokenizer_from(const Checkpoint& c);
MotionAudioModel mam_from(const Checkpoint& c);
/// Returns the student; the teacher parameters are written to `teacher`.
MaskTransformer mask_from(const Checkpoint& c, ParamSet& teacher);

/// Throws ConfigError naming the first key under one of `prefixes` whose value
/// differs between `config` and the echo stored in `upstream`.
void require_compatible(const PipelineConfig& config, const Checkpoint& upstream,
                        const std::vector<std::string>& prefixes);

/// Loads every stage needed to run the `strategy` generator.
ModelStack load_stack(const Workspace& work, const PipelineConfig& config, MaskStrategy strategy);

// Commands. Each validates its inputs before creating any output file.
void run_gen_data(const PipelineConfig& config, const Workspace& work);
RvqTrainResult run_train_rvq(const PipelineConfig& config, const Workspace& work);
MamTrainResult run_train_mam(const PipelineConfig& config, const Workspace& work);
MaskedTrainResult run_train_mask(const PipelineConfig& config, const Workspace& work);

struct InferRequest {
    std::string features;   // EMTF, frames x (low + high)
    std::string seed;       // EMTF, 4 x channels
    std::size_t frames = 0; // 0: one output frame per feature row
    std::string out;
};
MotionSequence run_infer(const PipelineConfig& config, const Workspace& work, const InferRequest& request);

/// One evaluation per strategy on the eval split; `out` (optional) receives the JSON lines.
std::vector<Evaluation> run_eval(const PipelineConfig& config, const Workspace& work,
                                 const std::vector<MaskStrategy>& strategies, const std::string& out);

/// Teacher attention map of eval sample `sample` written as CSV files.
AttentionMap run_export_attention(const PipelineConfig& config, const Workspace& work, std::size_t sample,
                                  const std::string& out);

} // namespace motionmask
