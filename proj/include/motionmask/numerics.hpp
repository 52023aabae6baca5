#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "motionmask/kernels.hpp"
#include "motionmask/rng.hpp"
#include "motionmask/tensor.hpp"

namespace motionmask {

// ---------------------------------------------------------------------------
// Elementwise and reduction helpers

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);

/// Row-wise softmax computed with max subtraction. Throws DimensionError on empty input.
Tensor softmax_rows(const Tensor& x);
/// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy);

void add_inplace(Tensor& dst, const Tensor& src);
void scale_inplace(Tensor& dst, double s);
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
/// Adds the 1 x cols row `bias` to every row of x.
void add_row_inplace(Tensor& x, const Tensor& bias);
Tensor column_sums(const Tensor& x);
Tensor column_means(const Tensor& x);
double squared_norm(const Tensor& x);
double sum(const Tensor& x);

double gelu(double x);
double gelu_grad(double x);
Tensor gelu(const Tensor& x);
double sigmoid(double x);

/// Standard sinusoidal position table of shape rows x width.
Tensor sinusoidal_positions(std::size_t rows, std::size_t width);

struct AttentionResult {
    Tensor out;
    Tensor weights;
};

/// Single-head scaled dot-product attention without projections:
/// weights = softmax(q k^T / sqrt(dim)), out = weights v.
AttentionResult cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t dim);

// ---------------------------------------------------------------------------
// Parameters

struct Parameter {
    Tensor value;
    Tensor grad;
    Tensor first_moment;
    Tensor second_moment;
};

/// Named trainable tensors with gradient and optimizer slots. Iteration order is
/// the lexicographic name order, which makes every sweep deterministic.
class ParamSet {
public:
    using Map = std::map<std::string, Parameter>;

    Tensor& add(const std::string& name, Tensor init);

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    const Tensor& value(const std::string& name) const { return at(name).value; }
    Tensor& value(const std::string& name) { return at(name).value; }
    Tensor& grad(const std::string& name) { return at(name).grad; }
    const Tensor& grad(const std::string& name) const { return at(name).grad; }

    std::size_t size() const noexcept { return params_.size(); }
    std::size_t scalar_count() const;
    std::vector<std::string> names() const;

    void zero_grad();
    /// Copies values only; moments and gradients of the result are zero.
    ParamSet clone_values() const;
    bool same_layout(const ParamSet& other) const;

    Map::iterator begin() { return params_.begin(); }
    Map::iterator end() { return params_.end(); }
    Map::const_iterator begin() const { return params_.begin(); }
    Map::const_iterator end() const { return params_.end(); }

private:
    Map params_;
};

/// Glorot-style normal initializer scaled by 1/sqrt(fan_in); the stream is keyed
/// by the parameter name so initialization does not depend on creation order.
Tensor init_normal(const Rng& rng, const std::string& name, std::size_t rows, std::size_t cols, double scale);

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    /// Requires lr > 0 and both betas in [0, 1).
    void validate(const std::string& who) const;
};

/// Bias-corrected Adam update applied in place. `step` counts from 1.
/// Throws TrainingError naming the parameter if any gradient is not finite.
void adam_step(ParamSet& params, const AdamOptions& options, std::size_t step);

// ---------------------------------------------------------------------------
// Gradient verification

/// Evaluates the loss at the current parameter values and accumulates its
/// analytic gradient into the (already zeroed) gradient slots.
using LossFn = std::function<double(ParamSet&)>;

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

struct GradCheckOptions {
    double eps = 1e-4;
    double tolerance = 1e-4;
    /// Denominator floor: relative error is |a - n| / max(|a|, |n|, floor).
    double floor = 1e-6;
    /// Check at most this many entries per parameter (0 = all), spread evenly.
    std::size_t max_per_parameter = 0;
};

/// Compares analytic gradients with central differences (f(x+e) - f(x-e)) / 2e.
/// Throws ContractError if two evaluations at the same point disagree.
GradCheckReport grad_check(const LossFn& loss_fn, ParamSet& params, const GradCheckOptions& options = {});

} // namespace motionmask
