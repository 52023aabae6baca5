#include "motionmask/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <array>
#include <sstream>

#include <Eigen/Dense>
#include "json.hpp"
#include <spdlog/spdlog.h>

#include "motionmask/errors.hpp"
#include "motionmask/numerics.hpp"

namespace motionmask {

namespace {

constexpr std::array<Part, 2> kBeatParts = {Part::Hands, Part::Upper};

void require_same_frames(const MotionSequence& a, const MotionSequence& b, const char* what) {
    if (a.frames.rows() != b.frames.rows() || a.frames.cols() != b.frames.cols()) {
        throw DimensionError(std::string(what) + ": shapes " + a.frames.shape_string() + " and " +
                             b.frames.shape_string() + " differ");
    }
}

Eigen::MatrixXd to_eigen(const Tensor& x) {
    Eigen::MatrixXd m(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = x(r, c);
        }
    }
    return m;
}

// Sample covariance (n - 1 denominator) plus ridge.
Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& mean) {
    const Eigen::MatrixXd centered = x.rowwise() - mean;
    Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    cov.diagonal().array() += 1e-6;
    return cov;
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m, const char* what) {
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
    if (solver.info() != Eigen::Success) {
        throw NumericalError(std::string(what) + ": eigen decomposition failed");
    }
    Eigen::VectorXd values = solver.eigenvalues();
    const double tolerance = 1e-9 * std::max(1.0, values.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (values(i) < -tolerance) {
            throw NumericalError(std::string(what) + ": matrix is not positive semidefinite (eigenvalue " +
                                 std::to_string(values(i)) + ")");
        }
        values(i) = std::sqrt(std::max(values(i), 0.0));
    }
    return solver.eigenvectors() * values.asDiagonal() * solver.eigenvectors().transpose();
}

std::pair<std::size_t, std::size_t> face_range(const MotionSequence& m) {
    return {m.layout.offset(Part::Face), m.layout.width(Part::Face)};
}

} // namespace

double diversity(std::span<const MotionSequence> clips) {
    if (clips.size() < 2) {
        throw ContractError("diversity needs at least 2 clips, got " + std::to_string(clips.size()));
    }
    double total = 0.0;
    double pairs = 0.0;
    for (std::size_t i = 0; i < clips.size(); ++i) {
        for (std::size_t j = i + 1; j < clips.size(); ++j) {
            require_same_frames(clips[i], clips[j], "diversity");
            const auto a = clips[i].frames.flat();
            const auto b = clips[j].frames.flat();
            double acc = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                acc += std::abs(a[k] - b[k]);
            }
            total += acc / static_cast<double>(a.size());
            pairs += 1.0;
        }
    }
    return total / pairs;
}

std::vector<double> motion_beats(const MotionSequence& motion, std::span<const Part> parts) {
    const std::size_t frames = motion.frames.rows();
    // speed[t] is the displacement from frame t-1 to frame t.
    std::vector<double> speed(frames, 0.0);
    for (std::size_t t = 1; t < frames; ++t) {
        double acc = 0.0;
        for (Part p : parts) {
            const std::size_t lo = motion.layout.offset(p);
            for (std::size_t c = lo; c < lo + motion.layout.width(p); ++c) {
                const double d = motion.frames(t, c) - motion.frames(t - 1, c);
                acc += d * d;
            }
        }
        speed[t] = std::sqrt(acc);
    }
    std::vector<double> beats;
    for (std::size_t t = 2; t + 1 < frames; ++t) {
        if (speed[t] < speed[t - 1] && speed[t] <= speed[t + 1]) {
            beats.push_back(static_cast<double>(t) / motion.fps);
        }
    }
    return beats;
}

double beat_consistency(const MotionSequence& motion, std::span<const double> audio_beats, double sigma,
                        std::span<const Part> parts) {
    if (!(sigma > 0.0)) {
        throw ConfigError("beat_consistency: sigma must be positive");
    }
    if (motion.frames.rows() == 0) {
        throw ContractError("beat_consistency: empty motion");
    }
    if (audio_beats.empty()) {
        return 0.0;
    }
    const std::vector<double> beats = motion_beats(motion, parts);
    if (beats.empty()) {
        spdlog::warn("beat_consistency: motion has no beats, score is 0");
        return 0.0;
    }
    double total = 0.0;
    for (double a : audio_beats) {
        double best = std::numeric_limits<double>::infinity();
        for (double m : beats) {
            best = std::min(best, std::abs(a - m));
        }
        total += std::exp(-best * best / (2.0 * sigma * sigma));
    }
    return total / static_cast<double>(audio_beats.size());
}

double beat_consistency(const MotionSequence& motion, std::span<const double> audio_beats, double sigma) {
    return beat_consistency(motion, audio_beats, sigma, kBeatParts);
}

double vertex_mse(const MotionSequence& generated, const MotionSequence& reference) {
    require_same_frames(generated, reference, "vertex_mse");
    const auto [lo, width] = face_range(reference);
    double acc = 0.0;
    for (std::size_t t = 0; t < reference.frames.rows(); ++t) {
        for (std::size_t c = lo; c < lo + width; ++c) {
            const double d = generated.frames(t, c) - reference.frames(t, c);
            acc += d * d;
        }
    }
    return acc / static_cast<double>(reference.frames.rows() * width);
}

double lvd(const MotionSequence& generated, const MotionSequence& reference) {
    require_same_frames(generated, reference, "lvd");
    const auto [lo, width] = face_range(reference);
    double acc = 0.0;
    for (std::size_t t = 0; t < reference.frames.rows(); ++t) {
        for (std::size_t c = lo; c < lo + width; ++c) {
            acc += std::abs(generated.frames(t, c) - reference.frames(t, c));
        }
    }
    return acc / static_cast<double>(reference.frames.rows() * width);
}

double frechet_distance(const Tensor& a, const Tensor& b) {
    if (a.rows() < 2 || b.rows() < 2) {
        throw ContractError("frechet_distance needs at least 2 samples per set");
    }
    if (a.cols() != b.cols()) {
        throw DimensionError("frechet_distance: embedding widths differ");
    }
    const Eigen::MatrixXd x = to_eigen(a);
    const Eigen::MatrixXd y = to_eigen(b);
    const Eigen::RowVectorXd mx = x.colwise().mean();
    const Eigen::RowVectorXd my = y.colwise().mean();
    const Eigen::MatrixXd cx = covariance(x, mx);
    const Eigen::MatrixXd cy = covariance(y, my);
    // Tr (Cx Cy)^(1/2) = Tr (Cx^(1/2) Cy Cx^(1/2))^(1/2), and the inner matrix is symmetric.
    const Eigen::MatrixXd root_x = symmetric_sqrt(cx, "frechet_distance");
    const Eigen::MatrixXd inner = root_x * cy * root_x;
    const Eigen::MatrixXd cross = symmetric_sqrt(0.5 * (inner + inner.transpose()), "frechet_distance");
    const double d = (mx - my).squaredNorm() + cx.trace() + cy.trace() - 2.0 * cross.trace();
    return std::max(d, 0.0);
}

Tensor clip_embeddings(const MotionTokenizer& tokenizer, std::span<const MotionSequence> clips) {
    Tensor out(clips.size(), tokenizer.config().dim);
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const Tensor mean = column_means(tokenizer.encode(clips[i]));
        std::copy(mean.flat().begin(), mean.flat().end(), out.row(i).begin());
    }
    return out;
}

double toy_fgd(const MotionTokenizer& tokenizer, std::span<const MotionSequence> generated,
               std::span<const MotionSequence> reference) {
    return frechet_distance(clip_embeddings(tokenizer, generated), clip_embeddings(tokenizer, reference));
}

std::string MetricReport::to_json() const {
    nlohmann::ordered_json j;
    j["strategy"] = strategy;
    j["fgd"] = fgd;
    j["bc"] = bc;
    j["div"] = div;
    j["mse"] = mse;
    j["lvd"] = lvd;
    j["token_accuracy"] = token_accuracy;
    j["generated"] = generated;
    j["reference"] = reference;
    j["config"] = config_echo;
    return j.dump();
}

std::string MetricReport::to_table() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(5);
    out << "metric          value\n";
    out << "fgd (toy)       " << fgd << '\n';
    out << "bc              " << bc << '\n';
    out << "div             " << div << '\n';
    out << "mse (face)      " << mse << '\n';
    out << "lvd (face)      " << lvd << '\n';
    out << "token accuracy  " << token_accuracy << '\n';
    out << "clips           " << generated << " generated / " << reference << " reference\n";
    return out.str();
}

} // namespace motionmask
