#include "motionmask/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "motionmask/errors.hpp"

namespace motionmask {

Tensor matmul(const Tensor& a, const Tensor& b) { return kernels::matmul(a, b); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return kernels::matmul_nt(a, b); }
Tensor matmul_tn(const Tensor& a, const Tensor& b) { return kernels::matmul_tn(a, b); }
Tensor softmax_rows(const Tensor& x) { return kernels::softmax_rows(x); }

Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy) {
    require_same_shape(y, dy, "softmax_rows_backward");
    Tensor dx(y.rows(), y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < y.cols(); ++c) {
            dot += y(r, c) * dy(r, c);
        }
        for (std::size_t c = 0; c < y.cols(); ++c) {
            dx(r, c) = y(r, c) * (dy(r, c) - dot);
        }
    }
    return dx;
}

void add_inplace(Tensor& dst, const Tensor& src) {
    require_same_shape(dst, src, "add_inplace");
    auto d = dst.flat();
    auto s = src.flat();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
}

void scale_inplace(Tensor& dst, double s) {
    for (double& v : dst.flat()) {
        v *= s;
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    add_inplace(out, b);
    return out;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "subtract");
    Tensor out = a;
    auto o = out.flat();
    auto s = b.flat();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] -= s[i];
    }
    return out;
}

void add_row_inplace(Tensor& x, const Tensor& bias) {
    if (bias.rows() != 1 || bias.cols() != x.cols()) {
        throw DimensionError("add_row_inplace: bias " + bias.shape_string() + " for " + x.shape_string());
    }
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (std::size_t c = 0; c < x.cols(); ++c) {
            row[c] += bias(0, c);
        }
    }
}

Tensor column_sums(const Tensor& x) {
    Tensor out(1, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            out(0, c) += x(r, c);
        }
    }
    return out;
}

Tensor column_means(const Tensor& x) {
    Tensor out = column_sums(x);
    if (x.rows() > 0) {
        scale_inplace(out, 1.0 / static_cast<double>(x.rows()));
    }
    return out;
}

double squared_norm(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.flat()) {
        acc += v * v;
    }
    return acc;
}

double sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.flat()) {
        acc += v;
    }
    return acc;
}

namespace {
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
} // namespace

double gelu(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Tensor gelu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.flat()) {
        v = gelu(v);
    }
    return y;
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor sinusoidal_positions(std::size_t rows, std::size_t width) {
    Tensor pe(rows, width);
    for (std::size_t t = 0; t < rows; ++t) {
        for (std::size_t i = 0; i < width; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(width));
            pe(t, i) = std::sin(static_cast<double>(t) * freq);
            if (i + 1 < width) {
                pe(t, i + 1) = std::cos(static_cast<double>(t) * freq);
            }
        }
    }
    return pe;
}

AttentionResult cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t dim) {
    if (q.cols() != dim || k.cols() != dim) {
        throw DimensionError("cross_attention: query/key width must equal dim " + std::to_string(dim) + " (got " +
                             q.shape_string() + ", " + k.shape_string() + ")");
    }
    if (v.rows() != k.rows()) {
        throw DimensionError("cross_attention: value rows " + std::to_string(v.rows()) + " != key rows " +
                             std::to_string(k.rows()));
    }
    Tensor logits = matmul_nt(q, k);
    scale_inplace(logits, 1.0 / std::sqrt(static_cast<double>(dim)));
    AttentionResult result;
    result.weights = softmax_rows(logits);
    result.out = matmul(result.weights, v);
    return result;
}

// ---------------------------------------------------------------------------

Tensor& ParamSet::add(const std::string& name, Tensor init) {
    if (contains(name)) {
        throw ConfigError("duplicate parameter name '" + name + "'");
    }
    Parameter p;
    p.grad = Tensor(init.rows(), init.cols());
    p.first_moment = Tensor(init.rows(), init.cols());
    p.second_moment = Tensor(init.rows(), init.cols());
    p.value = std::move(init);
    return params_.emplace(name, std::move(p)).first->second.value;
}

Parameter& ParamSet::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw ConfigError("unknown parameter '" + name + "'");
    }
    return it->second;
}

const Parameter& ParamSet::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw ConfigError("unknown parameter '" + name + "'");
    }
    return it->second;
}

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) {
        n += p.value.size();
    }
    return n;
}

std::vector<std::string> ParamSet::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, p] : params_) {
        out.push_back(name);
    }
    return out;
}

void ParamSet::zero_grad() {
    for (auto& [name, p] : params_) {
        p.grad.fill(0.0);
    }
}

ParamSet ParamSet::clone_values() const {
    ParamSet out;
    for (const auto& [name, p] : params_) {
        out.add(name, p.value);
    }
    return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
    if (params_.size() != other.params_.size()) {
        return false;
    }
    auto a = params_.begin();
    auto b = other.params_.begin();
    for (; a != params_.end(); ++a, ++b) {
        if (a->first != b->first || !a->second.value.same_shape(b->second.value)) {
            return false;
        }
    }
    return true;
}

Tensor init_normal(const Rng& rng, const std::string& name, std::size_t rows, std::size_t cols, double scale) {
    Rng stream = rng.split(name);
    Tensor t(rows, cols);
    for (double& v : t.flat()) {
        v = scale * stream.normal();
    }
    return t;
}

void AdamOptions::validate(const std::string& who) const {
    if (!(lr > 0.0)) {
        throw ConfigError(who + ": learning rate must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError(who + ": Adam betas must lie in [0, 1)");
    }
}

void adam_step(ParamSet& params, const AdamOptions& options, std::size_t step) {
    if (step == 0) {
        throw ConfigError("adam_step: step counts from 1");
    }
    for (auto& [name, p] : params) {
        if (!p.grad.all_finite()) {
            throw TrainingError("non-finite gradient for parameter '" + name + "'");
        }
    }
    const double t = static_cast<double>(step);
    const double c1 = 1.0 - std::pow(options.beta1, t);
    const double c2 = 1.0 - std::pow(options.beta2, t);
    for (auto& [name, p] : params) {
        auto w = p.value.flat();
        auto g = p.grad.flat();
        auto m = p.first_moment.flat();
        auto v = p.second_moment.flat();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g[i];
            v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            w[i] -= options.lr * mhat / (std::sqrt(vhat) + options.eps);
        }
    }
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const LossFn& loss_fn, ParamSet& params, const GradCheckOptions& options) {
    params.zero_grad();
    const double f0 = loss_fn(params);
    std::map<std::string, Tensor> analytic;
    for (const auto& [name, p] : params) {
        analytic.emplace(name, p.grad);
    }
    params.zero_grad();
    const double f1 = loss_fn(params);
    if (f0 != f1) {
        throw ContractError("grad_check: loss function is not deterministic (" + std::to_string(f0) + " vs " +
                            std::to_string(f1) + ")");
    }
    for (const auto& [name, p] : params) {
        if (!(p.grad == analytic.at(name))) {
            throw ContractError("grad_check: gradient of '" + name + "' differs between two evaluations");
        }
    }

    GradCheckReport report;
    for (const std::string& name : params.names()) {
        Tensor& value = params.value(name);
        const std::size_t n = value.size();
        const std::size_t want = options.max_per_parameter == 0 ? n : std::min(n, options.max_per_parameter);
        for (std::size_t s = 0; s < want; ++s) {
            const std::size_t idx = want == n ? s : (s * n) / want;
            double& slot = value.flat()[idx];
            const double original = slot;
            slot = original + options.eps;
            params.zero_grad();
            const double fp = loss_fn(params);
            slot = original - options.eps;
            params.zero_grad();
            const double fm = loss_fn(params);
            slot = original;

            const double numeric = (fp - fm) / (2.0 * options.eps);
            const double a = analytic.at(name).flat()[idx];
            const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
            double rel = std::abs(a - numeric) / denom;
            if (std::isnan(rel)) {
                rel = INFINITY;
            }
            ++report.checked;
            if (report.checked == 1 || rel > report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst_parameter = name;
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    params.zero_grad();
    for (auto& [name, p] : params) {
        p.grad = analytic.at(name);
    }
    report.passed = report.max_relative_error <= options.tolerance;
    return report;
}

} // namespace motionmask
