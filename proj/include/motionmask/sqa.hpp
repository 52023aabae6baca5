#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "motionmask/layers.hpp"
#include "motionmask/motion.hpp"

namespace motionmask {

/// Post-softmax attention of speech queries (rows) over latent frames (columns).
struct AttentionMap {
    std::array<Tensor, kPartCount> per_part;
    Tensor total;
    /// s_j: column sums of the total map.
    std::vector<double> scores;
};

/// Builds an AttentionMap from raw per-part logits (softmax over each row).
AttentionMap attention_from_logits(const std::array<Tensor, kPartCount>& logits);

struct ScoreHeadCache {
    std::array<Tensor, kPartCount> queries; // projected speech queries
    std::array<Tensor, kPartCount> keys;    // projected latent poses
    Tensor speech;
    Tensor poses;
};

/// Per-part query/key projections of the speech-queried attention.
class ScoreHead {
public:
    ScoreHead() = default;
    ScoreHead(std::string name, std::size_t speech_width, std::size_t pose_width, std::size_t width);

    void init(ParamSet& params, const Rng& rng) const;
    /// poses: T_lat x pose_width (keys); speech: n_q x speech_width (queries).
    AttentionMap forward(const ParamSet& params, const Tensor& poses, const Tensor& speech, ScoreHeadCache& cache) const;
    AttentionMap forward(const ParamSet& params, const Tensor& poses, const Tensor& speech) const;
    /// Accumulates parameter gradients from dL/ds. Inputs are treated as constants.
    void backward(ParamSet& params, std::span<const double> dscores, const AttentionMap& map,
                  const ScoreHeadCache& cache) const;

    std::size_t width() const { return width_; }

private:
    std::array<Linear, kPartCount> wq_, wk_;
    std::size_t width_ = 0;
};

/// Mean binary cross-entropy between predictions in (0,1) and labels in [0,1].
double binary_cross_entropy(std::span<const double> predicted, std::span<const double> labels);

struct SemanticLoss {
    double loss = 0.0;
    std::vector<double> predicted;  // sigmoid of standardized scores
    std::vector<double> dscores;    // dL/ds
};

/// L_sem from raw frame scores: standardize s, squash with a sigmoid, then mean BCE.
SemanticLoss semantic_loss(std::span<const double> scores, std::span<const double> labels);

struct MaskSchedule {
    double alpha = 0.5;
    double soft_start = 0.3;
    double soft_end = 0.0;
    double hard_start = 0.0;
    double hard_end = 0.3;
    double total_epochs = 40.0;

    void validate() const;
};

struct MaskRatios {
    double soft = 0.0;
    double hard = 0.0;
    double random = 0.0;
};

/// Linear interpolation of the soft and hard ratios between the schedule endpoints.
MaskRatios schedule_at(const MaskSchedule& schedule, double epoch);

enum class MaskOrigin { Visible, Soft, Hard, Random, Protected };
const char* origin_name(MaskOrigin origin);

struct MaskSpec {
    std::vector<MaskOrigin> origin;   // one per latent frame
    std::vector<std::size_t> masked;  // ascending
    std::size_t requested = 0;
    std::size_t shortfall = 0;

    std::size_t frames() const { return origin.size(); }
    bool is_masked(std::size_t j) const;
    std::size_t count(MaskOrigin o) const;
    std::vector<std::size_t> visible() const;
};

struct MaskCounts {
    std::size_t hard = 0;
    std::size_t soft = 0;
    std::size_t random = 0;
};

/// Frame counts for a ratio triple; floors carry a 1e-9 tolerance so 0.3 * 10 gives 3.
MaskCounts mask_counts(const MaskRatios& ratios, std::size_t frames);

/// Hard picks the highest scores (ties to the lower index), soft samples without
/// replacement with probability proportional to score (zero scores weigh 1e-9),
/// random fills the rest uniformly. The three sets are disjoint and avoid `protect`.
MaskSpec select_mask(std::span<const double> scores, const MaskCounts& counts, std::span<const std::size_t> protect,
                     Rng& rng);
MaskSpec select_mask(std::span<const double> scores, const MaskRatios& ratios, std::span<const std::size_t> protect,
                     Rng& rng);

/// CSV with header `query,0,1,...`, one row per query, and a final `score` row of column sums.
std::string attention_csv(const Tensor& map);
/// "maps/s2.csv" -> "maps/s2.<part>.csv"; a path without the .csv suffix just gains one.
std::string attention_part_path(const std::string& path, Part part);
/// Writes the total map to `path` and each part map to attention_part_path(path, part).
void export_attention(const AttentionMap& map, const std::string& path);

} // namespace motionmask
