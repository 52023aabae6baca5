#include "motionmask/sqa.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "motionmask/errors.hpp"

namespace motionmask {

AttentionMap attention_from_logits(const std::array<Tensor, kPartCount>& logits) {
    AttentionMap map;
    for (std::size_t p = 0; p < kPartCount; ++p) {
        require_same_shape(logits[p], logits[0], "attention_from_logits");
        map.per_part[p] = softmax_rows(logits[p]);
        if (p == 0) {
            map.total = map.per_part[p];
        } else {
            add_inplace(map.total, map.per_part[p]);
        }
    }
    const Tensor sums = column_sums(map.total);
    map.scores.assign(sums.flat().begin(), sums.flat().end());
    return map;
}

ScoreHead::ScoreHead(std::string name, std::size_t speech_width, std::size_t pose_width, std::size_t width)
    : width_(width) {
    for (Part part : kParts) {
        const auto p = static_cast<std::size_t>(part);
        const std::string prefix = name + "." + part_name(part);
        wq_[p] = Linear(prefix + ".q", speech_width, width, false);
        wk_[p] = Linear(prefix + ".k", pose_width, width, false);
    }
}

void ScoreHead::init(ParamSet& params, const Rng& rng) const {
    for (std::size_t p = 0; p < kPartCount; ++p) {
        wq_[p].init(params, rng);
        wk_[p].init(params, rng);
    }
}

AttentionMap ScoreHead::forward(const ParamSet& params, const Tensor& poses, const Tensor& speech,
                                ScoreHeadCache& cache) const {
    cache.poses = poses;
    cache.speech = speech;
    std::array<Tensor, kPartCount> logits;
    const double scale = 1.0 / std::sqrt(static_cast<double>(width_));
    for (std::size_t p = 0; p < kPartCount; ++p) {
        cache.queries[p] = wq_[p].forward(params, speech);
        cache.keys[p] = wk_[p].forward(params, poses);
        logits[p] = matmul_nt(cache.queries[p], cache.keys[p]);
        scale_inplace(logits[p], scale);
    }
    return attention_from_logits(logits);
}

AttentionMap ScoreHead::forward(const ParamSet& params, const Tensor& poses, const Tensor& speech) const {
    ScoreHeadCache cache;
    return forward(params, poses, speech, cache);
}

void ScoreHead::backward(ParamSet& params, std::span<const double> dscores, const AttentionMap& map,
                         const ScoreHeadCache& cache) const {
    if (dscores.size() != map.total.cols()) {
        throw DimensionError("score head backward: " + std::to_string(dscores.size()) + " score gradients for " +
                             std::to_string(map.total.cols()) + " frames");
    }
    Tensor dtotal(map.total.rows(), map.total.cols());
    for (std::size_t i = 0; i < dtotal.rows(); ++i) {
        std::copy(dscores.begin(), dscores.end(), dtotal.row(i).begin());
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(width_));
    for (std::size_t p = 0; p < kPartCount; ++p) {
        Tensor dlogits = softmax_rows_backward(map.per_part[p], dtotal);
        scale_inplace(dlogits, scale);
        wq_[p].backward(params, cache.speech, matmul(dlogits, cache.keys[p]));
        wk_[p].backward(params, cache.poses, matmul_tn(dlogits, cache.queries[p]));
    }
}

// ---------------------------------------------------------------------------

double binary_cross_entropy(std::span<const double> predicted, std::span<const double> labels) {
    if (predicted.size() != labels.size()) {
        throw DimensionError("semantic loss: " + std::to_string(predicted.size()) + " predictions for " +
                             std::to_string(labels.size()) + " labels");
    }
    if (predicted.empty()) {
        throw DimensionError("semantic loss: no frames");
    }
    double loss = 0.0;
    for (std::size_t j = 0; j < predicted.size(); ++j) {
        const double p = std::clamp(predicted[j], 1e-12, 1.0 - 1e-12);
        loss -= labels[j] * std::log(p) + (1.0 - labels[j]) * std::log(1.0 - p);
    }
    return loss / static_cast<double>(predicted.size());
}

SemanticLoss semantic_loss(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) {
        throw DimensionError("semantic loss: " + std::to_string(scores.size()) + " scores for " +
                             std::to_string(labels.size()) + " labels");
    }
    const auto n = static_cast<double>(scores.size());
    const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
    double var = 0.0;
    for (double s : scores) {
        var += (s - mean) * (s - mean);
    }
    var /= n;
    const double sigma = std::sqrt(var + 1e-6);

    SemanticLoss out;
    std::vector<double> z(scores.size());
    out.predicted.resize(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j) {
        z[j] = (scores[j] - mean) / sigma;
        out.predicted[j] = sigmoid(z[j]);
    }
    out.loss = binary_cross_entropy(out.predicted, labels);

    // d/dz of BCE(sigmoid(z)) is (sigmoid(z) - y) / n; then back through the standardization.
    std::vector<double> dz(scores.size());
    double dz_mean = 0.0;
    double dz_z_mean = 0.0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        dz[j] = (out.predicted[j] - labels[j]) / n;
        dz_mean += dz[j] / n;
        dz_z_mean += dz[j] * z[j] / n;
    }
    out.dscores.resize(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j) {
        out.dscores[j] = (dz[j] - dz_mean - z[j] * dz_z_mean) / sigma;
    }
    return out;
}

// ---------------------------------------------------------------------------

void MaskSchedule::validate() const {
    for (double r : {alpha, soft_start, soft_end, hard_start, hard_end}) {
        if (!(r >= 0.0 && r <= 1.0)) {
            throw ConfigError("mask schedule ratios must lie in [0, 1]");
        }
    }
    if (!(total_epochs > 0.0)) {
        throw ConfigError("mask schedule needs a positive epoch count");
    }
    // Both ratios are linear in t, so checking the endpoints covers every epoch.
    constexpr double kSlack = 1e-12;
    if (soft_start + hard_start > alpha + kSlack || soft_end + hard_end > alpha + kSlack) {
        throw ConfigError("mask schedule: soft + hard ratio exceeds alpha = " + std::to_string(alpha) +
                          ", leaving a negative random ratio");
    }
}

MaskRatios schedule_at(const MaskSchedule& schedule, double epoch) {
    if (!(epoch >= 0.0 && epoch <= schedule.total_epochs)) {
        throw ContractError("schedule_at: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(schedule.total_epochs) + "]");
    }
    MaskRatios r;
    if (epoch == schedule.total_epochs) {
        r.soft = schedule.soft_end;
        r.hard = schedule.hard_end;
    } else {
        const double f = epoch / schedule.total_epochs;
        r.soft = schedule.soft_start + f * (schedule.soft_end - schedule.soft_start);
        r.hard = schedule.hard_start + f * (schedule.hard_end - schedule.hard_start);
    }
    r.random = schedule.alpha - r.soft - r.hard;
    return r;
}

// ---------------------------------------------------------------------------

const char* origin_name(MaskOrigin origin) {
    switch (origin) {
    case MaskOrigin::Visible:
        return "visible";
    case MaskOrigin::Soft:
        return "soft";
    case MaskOrigin::Hard:
        return "hard";
    case MaskOrigin::Random:
        return "random";
    case MaskOrigin::Protected:
        return "protected";
    }
    return "?";
}

bool MaskSpec::is_masked(std::size_t j) const {
    const MaskOrigin o = origin.at(j);
    return o == MaskOrigin::Soft || o == MaskOrigin::Hard || o == MaskOrigin::Random;
}

std::size_t MaskSpec::count(MaskOrigin o) const {
    return static_cast<std::size_t>(std::count(origin.begin(), origin.end(), o));
}

std::vector<std::size_t> MaskSpec::visible() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < origin.size(); ++j) {
        if (!is_masked(j)) {
            out.push_back(j);
        }
    }
    return out;
}

MaskCounts mask_counts(const MaskRatios& ratios, std::size_t frames) {
    const auto t = static_cast<double>(frames);
    const auto count = [&](double r) { return static_cast<std::size_t>(std::floor(r * t + 1e-9)); };
    MaskCounts c;
    c.hard = count(ratios.hard);
    c.soft = count(ratios.soft);
    const std::size_t total = count(ratios.soft + ratios.hard + ratios.random);
    c.random = total > c.hard + c.soft ? total - c.hard - c.soft : 0;
    return c;
}

MaskSpec select_mask(std::span<const double> scores, const MaskCounts& counts, std::span<const std::size_t> protect,
                     Rng& rng) {
    const std::size_t frames = scores.size();
    MaskSpec spec;
    spec.origin.assign(frames, MaskOrigin::Visible);
    spec.requested = counts.hard + counts.soft + counts.random;
    for (std::size_t j : protect) {
        if (j >= frames) {
            throw DimensionError("select_mask: protected index " + std::to_string(j) + " out of range");
        }
        spec.origin[j] = MaskOrigin::Protected;
    }
    std::vector<std::size_t> pool;
    for (std::size_t j = 0; j < frames; ++j) {
        if (spec.origin[j] == MaskOrigin::Visible) {
            pool.push_back(j);
        }
    }

    // Hard: top scores, lower index first on ties.
    std::vector<std::size_t> ranked = pool;
    std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const std::size_t n_hard = std::min(counts.hard, ranked.size());
    for (std::size_t k = 0; k < n_hard; ++k) {
        spec.origin[ranked[k]] = MaskOrigin::Hard;
    }
    std::erase_if(pool, [&](std::size_t j) { return spec.origin[j] != MaskOrigin::Visible; });

    // Soft: sequential weighted draws without replacement.
    std::vector<double> weight(pool.size());
    for (std::size_t k = 0; k < pool.size(); ++k) {
        weight[k] = scores[pool[k]] > 0.0 ? scores[pool[k]] : 1e-9;
    }
    for (std::size_t draw = 0; draw < counts.soft && !pool.empty(); ++draw) {
        const double total = std::accumulate(weight.begin(), weight.end(), 0.0);
        const double u = rng.uniform() * total;
        double acc = 0.0;
        std::size_t pick = pool.size() - 1;
        for (std::size_t k = 0; k < pool.size(); ++k) {
            acc += weight[k];
            if (u < acc) {
                pick = k;
                break;
            }
        }
        spec.origin[pool[pick]] = MaskOrigin::Soft;
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        weight.erase(weight.begin() + static_cast<std::ptrdiff_t>(pick));
    }

    // Random: uniform without replacement from what is left.
    for (std::size_t draw = 0; draw < counts.random && !pool.empty(); ++draw) {
        const std::size_t pick = rng.index(pool.size());
        spec.origin[pool[pick]] = MaskOrigin::Random;
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    }

    for (std::size_t j = 0; j < frames; ++j) {
        if (spec.is_masked(j)) {
            spec.masked.push_back(j);
        }
    }
    spec.shortfall = spec.requested - spec.masked.size();
    return spec;
}

MaskSpec select_mask(std::span<const double> scores, const MaskRatios& ratios, std::span<const std::size_t> protect,
                     Rng& rng) {
    return select_mask(scores, mask_counts(ratios, scores.size()), protect, rng);
}

// ---------------------------------------------------------------------------

std::string attention_csv(const Tensor& map) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "query";
    for (std::size_t j = 0; j < map.cols(); ++j) {
        out << ',' << j;
    }
    out << '\n';
    for (std::size_t i = 0; i < map.rows(); ++i) {
        out << i;
        for (std::size_t j = 0; j < map.cols(); ++j) {
            out << ',' << map(i, j);
        }
        out << '\n';
    }
    const Tensor sums = column_sums(map);
    out << "score";
    for (double s : sums.flat()) {
        out << ',' << s;
    }
    out << '\n';
    return out.str();
}

std::string attention_part_path(const std::string& path, Part part) {
    const bool csv = path.size() > 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
    return (csv ? path.substr(0, path.size() - 4) : path) + "." + part_name(part) + ".csv";
}

void export_attention(const AttentionMap& map, const std::string& path) {
    const auto write = [](const std::string& file, const std::string& text) {
        std::ofstream out(file, std::ios::binary);
        if (!out) {
            throw FormatError("cannot open " + file + " for writing");
        }
        out << text;
    };
    write(path, attention_csv(map.total));
    for (Part part : kParts) {
        write(attention_part_path(path, part), attention_csv(map.per_part[static_cast<std::size_t>(part)]));
    }
}

} // namespace motionmask
