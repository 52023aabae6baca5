#pragma once

#include <string>
#include <vector>

#include "motionmask/numerics.hpp"

// Layers with explicit backward passes. A layer object only describes shapes
// and parameter names; values live in a ParamSet so the same layer can run
// against student and teacher copies. Forward fills a cache that the matching
// backward consumes; backward accumulates into ParamSet gradients and returns
// the gradient with respect to the layer input.

namespace motionmask {

class Linear {
public:
    Linear() = default;
    Linear(std::string name, std::size_t in, std::size_t out, bool bias = true);

    void init(ParamSet& params, const Rng& rng, double gain = 1.0) const;
    Tensor forward(const ParamSet& params, const Tensor& x) const;
    /// x is the forward input.
    Tensor backward(ParamSet& params, const Tensor& x, const Tensor& dy) const;

    const std::string& weight_name() const { return weight_; }
    const std::string& bias_name() const { return bias_name_; }
    std::size_t in() const { return in_; }
    std::size_t out() const { return out_; }

private:
    std::string weight_;
    std::string bias_name_;
    std::size_t in_ = 0;
    std::size_t out_ = 0;
    bool bias_ = true;
};

struct LayerNormCache {
    Tensor normalized;
    std::vector<double> inv_std;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(std::string name, std::size_t width);

    void init(ParamSet& params) const;
    Tensor forward(const ParamSet& params, const Tensor& x, LayerNormCache& cache) const;
    Tensor backward(ParamSet& params, const Tensor& dy, const LayerNormCache& cache) const;

private:
    std::string gain_;
    std::string shift_;
    std::size_t width_ = 0;
    static constexpr double kEps = 1e-5;
};

struct AttentionCache {
    Tensor query_input;
    Tensor context_input;
    Tensor q;
    Tensor k;
    Tensor v;
    std::vector<Tensor> weights; // one queries x keys matrix per head
    Tensor merged;
};

/// Multi-head scaled dot-product attention with input/output projections.
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(std::string name, std::size_t query_width, std::size_t context_width, std::size_t width,
                       std::size_t heads);

    void init(ParamSet& params, const Rng& rng, bool zero_output = false) const;
    Tensor forward(const ParamSet& params, const Tensor& queries, const Tensor& context, AttentionCache& cache) const;

    struct Grads {
        Tensor queries;
        Tensor context;
    };
    Grads backward(ParamSet& params, const Tensor& dy, const AttentionCache& cache) const;

    std::size_t heads() const { return heads_; }
    std::size_t width() const { return width_; }

private:
    std::string name_;
    std::size_t heads_ = 1;
    std::size_t width_ = 0;
    std::size_t context_width_ = 0;
    Linear wq_, wk_, wv_, wo_;
};

struct AttentionSublayerCache {
    LayerNormCache norm;
    Tensor normed;
    AttentionCache attention;
};

/// x + Attention(LayerNorm(x), context); context = LayerNorm(x) for self-attention.
class AttentionSublayer {
public:
    AttentionSublayer() = default;
    AttentionSublayer(std::string name, std::size_t width, std::size_t context_width, std::size_t heads,
                      bool self_attention);

    void init(ParamSet& params, const Rng& rng, bool zero_output = false) const;
    Tensor forward(const ParamSet& params, const Tensor& x, const Tensor* context, AttentionSublayerCache& cache) const;

    struct Grads {
        Tensor x;
        Tensor context; // empty for self-attention
    };
    Grads backward(ParamSet& params, const Tensor& dy, const AttentionSublayerCache& cache) const;

    bool is_self() const { return self_; }
    std::size_t width() const { return width_; }

private:
    LayerNorm norm_;
    MultiHeadAttention attention_;
    std::size_t width_ = 0;
    bool self_ = true;
};

struct FeedForwardCache {
    LayerNormCache norm;
    Tensor normed;
    Tensor pre_activation;
    Tensor hidden;
};

/// x + W2 gelu(W1 LayerNorm(x) + b1) + b2
class FeedForwardSublayer {
public:
    FeedForwardSublayer() = default;
    FeedForwardSublayer(std::string name, std::size_t width, std::size_t hidden);

    void init(ParamSet& params, const Rng& rng, bool zero_output = false) const;
    Tensor forward(const ParamSet& params, const Tensor& x, FeedForwardCache& cache) const;
    Tensor backward(ParamSet& params, const Tensor& dy, const FeedForwardCache& cache) const;

private:
    LayerNorm norm_;
    Linear up_;
    Linear down_;
};

struct TransformerBlockCache {
    AttentionSublayerCache self;
    Tensor after_self;
    FeedForwardCache ff;
};

/// Pre-norm residual block: self-attention followed by a feed-forward sublayer.
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(std::string name, std::size_t width, std::size_t heads, std::size_t hidden);

    void init(ParamSet& params, const Rng& rng, bool zero_output = false) const;
    Tensor forward(const ParamSet& params, const Tensor& x, TransformerBlockCache& cache) const;
    Tensor forward(const ParamSet& params, const Tensor& x) const;
    Tensor backward(ParamSet& params, const Tensor& dy, const TransformerBlockCache& cache) const;

    std::size_t width() const { return width_; }

private:
    std::size_t width_ = 0;
    AttentionSublayer self_;
    FeedForwardSublayer ff_;
};

struct Conv1dCache {
    Tensor columns; // output_frames x (kernel * in)
    std::size_t input_frames = 0;
};

/// Temporal convolution over rows (frames) with zero padding, via im2col.
class Conv1d {
public:
    Conv1d() = default;
    Conv1d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
           std::size_t padding);

    void init(ParamSet& params, const Rng& rng) const;
    std::size_t output_frames(std::size_t input_frames) const;
    Tensor forward(const ParamSet& params, const Tensor& x, Conv1dCache& cache) const;
    Tensor backward(ParamSet& params, const Tensor& dy, const Conv1dCache& cache) const;

    const Linear& projection() const { return proj_; }

private:
    Linear proj_;
    std::size_t in_ = 0;
    std::size_t kernel_ = 1;
    std::size_t stride_ = 1;
    std::size_t padding_ = 0;
};

/// Repeats every row `factor` times (nearest-neighbour temporal upsampling).
Tensor upsample_rows(const Tensor& x, std::size_t factor);
Tensor upsample_rows_backward(const Tensor& dy, std::size_t factor);

Tensor gelu_backward(const Tensor& pre_activation, const Tensor& dy);

} // namespace motionmask
