#include "motionmask/layers.hpp"

#include <cmath>

#include "motionmask/errors.hpp"

namespace motionmask {
namespace {

void set_cols(Tensor& dst, std::size_t begin, const Tensor& src) {
    for (std::size_t r = 0; r < src.rows(); ++r) {
        for (std::size_t c = 0; c < src.cols(); ++c) {
            dst(r, begin + c) = src(r, c);
        }
    }
}

void require_width(const Tensor& x, std::size_t width, const std::string& who) {
    if (x.cols() != width) {
        throw DimensionError(who + ": expected width " + std::to_string(width) + ", got " + x.shape_string());
    }
}

} // namespace

// ---------------------------------------------------------------------------

Linear::Linear(std::string name, std::size_t in, std::size_t out, bool bias)
    : weight_(name + ".w"), bias_name_(name + ".b"), in_(in), out_(out), bias_(bias) {}

void Linear::init(ParamSet& params, const Rng& rng, double gain) const {
    params.add(weight_, init_normal(rng, weight_, in_, out_, gain / std::sqrt(static_cast<double>(in_))));
    if (bias_) {
        params.add(bias_name_, Tensor(1, out_));
    }
}

Tensor Linear::forward(const ParamSet& params, const Tensor& x) const {
    require_width(x, in_, weight_);
    Tensor y = matmul(x, params.value(weight_));
    if (bias_) {
        add_row_inplace(y, params.value(bias_name_));
    }
    return y;
}

Tensor Linear::backward(ParamSet& params, const Tensor& x, const Tensor& dy) const {
    add_inplace(params.grad(weight_), matmul_tn(x, dy));
    if (bias_) {
        add_inplace(params.grad(bias_name_), column_sums(dy));
    }
    return matmul_nt(dy, params.value(weight_));
}

// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(std::string name, std::size_t width)
    : gain_(name + ".gain"), shift_(name + ".shift"), width_(width) {}

void LayerNorm::init(ParamSet& params) const {
    params.add(gain_, Tensor(1, width_, 1.0));
    params.add(shift_, Tensor(1, width_));
}

Tensor LayerNorm::forward(const ParamSet& params, const Tensor& x, LayerNormCache& cache) const {
    require_width(x, width_, gain_);
    const Tensor& g = params.value(gain_);
    const Tensor& b = params.value(shift_);
    const double n = static_cast<double>(width_);
    cache.normalized = Tensor(x.rows(), x.cols());
    cache.inv_std.assign(x.rows(), 0.0);
    Tensor y(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < width_; ++c) {
            mean += x(r, c);
        }
        mean /= n;
        double var = 0.0;
        for (std::size_t c = 0; c < width_; ++c) {
            const double d = x(r, c) - mean;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + kEps);
        cache.inv_std[r] = inv;
        for (std::size_t c = 0; c < width_; ++c) {
            const double xhat = (x(r, c) - mean) * inv;
            cache.normalized(r, c) = xhat;
            y(r, c) = g(0, c) * xhat + b(0, c);
        }
    }
    return y;
}

Tensor LayerNorm::backward(ParamSet& params, const Tensor& dy, const LayerNormCache& cache) const {
    const Tensor& g = params.value(gain_);
    Tensor& dg = params.grad(gain_);
    Tensor& db = params.grad(shift_);
    const double n = static_cast<double>(width_);
    Tensor dx(dy.rows(), dy.cols());
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < width_; ++c) {
            const double xhat = cache.normalized(r, c);
            dg(0, c) += dy(r, c) * xhat;
            db(0, c) += dy(r, c);
            const double dxhat = dy(r, c) * g(0, c);
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for (std::size_t c = 0; c < width_; ++c) {
            const double xhat = cache.normalized(r, c);
            const double dxhat = dy(r, c) * g(0, c);
            dx(r, c) = cache.inv_std[r] / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(std::string name, std::size_t query_width, std::size_t context_width,
                                       std::size_t width, std::size_t heads)
    : name_(std::move(name)), heads_(heads), width_(width), context_width_(context_width),
      wq_(name_ + ".q", query_width, width), wk_(name_ + ".k", context_width, width),
      wv_(name_ + ".v", context_width, width), wo_(name_ + ".o", width, query_width) {
    if (heads == 0 || width % heads != 0) {
        throw ConfigError(name_ + ": width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                          " heads");
    }
}

void MultiHeadAttention::init(ParamSet& params, const Rng& rng, bool zero_output) const {
    wq_.init(params, rng);
    wk_.init(params, rng);
    wv_.init(params, rng);
    wo_.init(params, rng, zero_output ? 0.0 : 1.0);
}

Tensor MultiHeadAttention::forward(const ParamSet& params, const Tensor& queries, const Tensor& context,
                                   AttentionCache& cache) const {
    require_width(context, context_width_, name_ + " context");
    cache.query_input = queries;
    cache.context_input = context;
    cache.q = wq_.forward(params, queries);
    cache.k = wk_.forward(params, context);
    cache.v = wv_.forward(params, context);
    const std::size_t dh = width_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    cache.weights.assign(heads_, Tensor());
    cache.merged = Tensor(queries.rows(), width_);
    for (std::size_t h = 0; h < heads_; ++h) {
        const Tensor qh = cache.q.slice_cols(h * dh, dh);
        const Tensor kh = cache.k.slice_cols(h * dh, dh);
        const Tensor vh = cache.v.slice_cols(h * dh, dh);
        Tensor logits = matmul_nt(qh, kh);
        scale_inplace(logits, scale);
        cache.weights[h] = softmax_rows(logits);
        set_cols(cache.merged, h * dh, matmul(cache.weights[h], vh));
    }
    return wo_.forward(params, cache.merged);
}

MultiHeadAttention::Grads MultiHeadAttention::backward(ParamSet& params, const Tensor& dy,
                                                       const AttentionCache& cache) const {
    const Tensor dmerged = wo_.backward(params, cache.merged, dy);
    const std::size_t dh = width_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor dq(cache.q.rows(), width_);
    Tensor dk(cache.k.rows(), width_);
    Tensor dv(cache.v.rows(), width_);
    for (std::size_t h = 0; h < heads_; ++h) {
        const Tensor qh = cache.q.slice_cols(h * dh, dh);
        const Tensor kh = cache.k.slice_cols(h * dh, dh);
        const Tensor vh = cache.v.slice_cols(h * dh, dh);
        const Tensor doh = dmerged.slice_cols(h * dh, dh);
        const Tensor& p = cache.weights[h];
        const Tensor dp = matmul_nt(doh, vh);
        set_cols(dv, h * dh, matmul_tn(p, doh));
        Tensor dlogits = softmax_rows_backward(p, dp);
        scale_inplace(dlogits, scale);
        set_cols(dq, h * dh, matmul(dlogits, kh));
        set_cols(dk, h * dh, matmul_tn(dlogits, qh));
    }
    Grads grads;
    grads.queries = wq_.backward(params, cache.query_input, dq);
    grads.context = wk_.backward(params, cache.context_input, dk);
    add_inplace(grads.context, wv_.backward(params, cache.context_input, dv));
    return grads;
}

// ---------------------------------------------------------------------------

AttentionSublayer::AttentionSublayer(std::string name, std::size_t width, std::size_t context_width,
                                     std::size_t heads, bool self_attention)
    : norm_(name + ".norm", width),
      attention_(name + ".attn", width, self_attention ? width : context_width, width, heads), width_(width),
      self_(self_attention) {}

void AttentionSublayer::init(ParamSet& params, const Rng& rng, bool zero_output) const {
    norm_.init(params);
    attention_.init(params, rng, zero_output);
}

Tensor AttentionSublayer::forward(const ParamSet& params, const Tensor& x, const Tensor* context,
                                  AttentionSublayerCache& cache) const {
    cache.normed = norm_.forward(params, x, cache.norm);
    if (!self_ && context == nullptr) {
        throw DimensionError("cross-attention sublayer requires a context");
    }
    const Tensor& ctx = self_ ? cache.normed : *context;
    Tensor y = attention_.forward(params, cache.normed, ctx, cache.attention);
    add_inplace(y, x);
    return y;
}

AttentionSublayer::Grads AttentionSublayer::backward(ParamSet& params, const Tensor& dy,
                                                     const AttentionSublayerCache& cache) const {
    auto attn = attention_.backward(params, dy, cache.attention);
    Grads grads;
    Tensor dnormed = std::move(attn.queries);
    if (self_) {
        add_inplace(dnormed, attn.context);
    } else {
        grads.context = std::move(attn.context);
    }
    grads.x = norm_.backward(params, dnormed, cache.norm);
    add_inplace(grads.x, dy);
    return grads;
}

// ---------------------------------------------------------------------------

FeedForwardSublayer::FeedForwardSublayer(std::string name, std::size_t width, std::size_t hidden)
    : norm_(name + ".norm", width), up_(name + ".up", width, hidden), down_(name + ".down", hidden, width) {}

void FeedForwardSublayer::init(ParamSet& params, const Rng& rng, bool zero_output) const {
    norm_.init(params);
    up_.init(params, rng);
    down_.init(params, rng, zero_output ? 0.0 : 1.0);
}

Tensor FeedForwardSublayer::forward(const ParamSet& params, const Tensor& x, FeedForwardCache& cache) const {
    cache.normed = norm_.forward(params, x, cache.norm);
    cache.pre_activation = up_.forward(params, cache.normed);
    cache.hidden = gelu(cache.pre_activation);
    Tensor y = down_.forward(params, cache.hidden);
    add_inplace(y, x);
    return y;
}

Tensor FeedForwardSublayer::backward(ParamSet& params, const Tensor& dy, const FeedForwardCache& cache) const {
    const Tensor dhidden = down_.backward(params, cache.hidden, dy);
    const Tensor dpre = gelu_backward(cache.pre_activation, dhidden);
    const Tensor dnormed = up_.backward(params, cache.normed, dpre);
    Tensor dx = norm_.backward(params, dnormed, cache.norm);
    add_inplace(dx, dy);
    return dx;
}

// ---------------------------------------------------------------------------

TransformerBlock::TransformerBlock(std::string name, std::size_t width, std::size_t heads, std::size_t hidden)
    : width_(width), self_(name + ".self", width, width, heads, true), ff_(name + ".ff", width, hidden) {}

void TransformerBlock::init(ParamSet& params, const Rng& rng, bool zero_output) const {
    self_.init(params, rng, zero_output);
    ff_.init(params, rng, zero_output);
}

Tensor TransformerBlock::forward(const ParamSet& params, const Tensor& x, TransformerBlockCache& cache) const {
    require_width(x, width_, "transformer block");
    cache.after_self = self_.forward(params, x, nullptr, cache.self);
    return ff_.forward(params, cache.after_self, cache.ff);
}

Tensor TransformerBlock::forward(const ParamSet& params, const Tensor& x) const {
    TransformerBlockCache cache;
    return forward(params, x, cache);
}

Tensor TransformerBlock::backward(ParamSet& params, const Tensor& dy, const TransformerBlockCache& cache) const {
    const Tensor dmid = ff_.backward(params, dy, cache.ff);
    return self_.backward(params, dmid, cache.self).x;
}

// ---------------------------------------------------------------------------

Conv1d::Conv1d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
               std::size_t padding)
    : proj_(std::move(name), kernel * in, out), in_(in), kernel_(kernel), stride_(stride), padding_(padding) {}

void Conv1d::init(ParamSet& params, const Rng& rng) const { proj_.init(params, rng); }

std::size_t Conv1d::output_frames(std::size_t input_frames) const {
    const std::size_t padded = input_frames + 2 * padding_;
    if (padded < kernel_) {
        return 0;
    }
    return (padded - kernel_) / stride_ + 1;
}

Tensor Conv1d::forward(const ParamSet& params, const Tensor& x, Conv1dCache& cache) const {
    require_width(x, in_, proj_.weight_name());
    const std::size_t frames = output_frames(x.rows());
    if (frames == 0) {
        throw DimensionError(proj_.weight_name() + ": input of " + std::to_string(x.rows()) + " frames too short");
    }
    cache.input_frames = x.rows();
    cache.columns = Tensor(frames, kernel_ * in_);
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t k = 0; k < kernel_; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride_ + k) -
                                       static_cast<std::ptrdiff_t>(padding_);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(x.rows())) {
                continue;
            }
            for (std::size_t c = 0; c < in_; ++c) {
                cache.columns(t, k * in_ + c) = x(static_cast<std::size_t>(src), c);
            }
        }
    }
    return proj_.forward(params, cache.columns);
}

Tensor Conv1d::backward(ParamSet& params, const Tensor& dy, const Conv1dCache& cache) const {
    const Tensor dcols = proj_.backward(params, cache.columns, dy);
    Tensor dx(cache.input_frames, in_);
    for (std::size_t t = 0; t < dcols.rows(); ++t) {
        for (std::size_t k = 0; k < kernel_; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride_ + k) -
                                       static_cast<std::ptrdiff_t>(padding_);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(cache.input_frames)) {
                continue;
            }
            for (std::size_t c = 0; c < in_; ++c) {
                dx(static_cast<std::size_t>(src), c) += dcols(t, k * in_ + c);
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------

Tensor upsample_rows(const Tensor& x, std::size_t factor) {
    Tensor y(x.rows() * factor, x.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) {
        const auto src = x.row(r / factor);
        auto dst = y.row(r);
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return y;
}

Tensor upsample_rows_backward(const Tensor& dy, std::size_t factor) {
    Tensor dx(dy.rows() / factor, dy.cols());
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        for (std::size_t c = 0; c < dy.cols(); ++c) {
            dx(r / factor, c) += dy(r, c);
        }
    }
    return dx;
}

Tensor gelu_backward(const Tensor& pre_activation, const Tensor& dy) {
    require_same_shape(pre_activation, dy, "gelu_backward");
    Tensor dx = dy;
    auto d = dx.flat();
    auto x = pre_activation.flat();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] *= gelu_grad(x[i]);
    }
    return dx;
}

} // namespace motionmask
