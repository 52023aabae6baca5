#include "motionmask/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "motionmask/errors.hpp"

namespace motionmask {
namespace {

void check_inner(std::size_t lhs, std::size_t rhs, const char* op, const Tensor& a, const Tensor& b) {
    if (lhs != rhs) {
        throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                             b.shape_string());
    }
}

void check_nonempty(const Tensor& x, const char* op) {
    if (x.empty()) {
        throw DimensionError(std::string(op) + ": empty tensor");
    }
}

// Per-row work units for the parallel build.

inline void matmul_row(const Tensor& a, const Tensor& b, Tensor& c, std::size_t i) {
    const std::size_t k = a.cols();
    const std::size_t n = b.cols();
    double* out = c.data() + i * n;
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
        const double s = arow[p];
        const double* brow = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += s * brow[j];
        }
    }
}

inline void matmul_nt_row(const Tensor& a, const Tensor& b, Tensor& c, std::size_t i) {
    const std::size_t k = a.cols();
    const std::size_t n = b.rows();
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b.data() + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            acc += arow[p] * brow[p];
        }
        c(i, j) = acc;
    }
}

inline void matmul_tn_row(const Tensor& a, const Tensor& b, Tensor& c, std::size_t p) {
    const std::size_t m = a.rows();
    const std::size_t n = b.cols();
    double* out = c.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
        const double s = a(i, p);
        const double* brow = b.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += s * brow[j];
        }
    }
}

inline void softmax_row(const Tensor& x, Tensor& y, std::size_t r) {
    const auto in = x.row(r);
    auto out = y.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
        out[j] = std::exp(in[j] - mx);
        total += out[j];
    }
    const double inv = 1.0 / total;
    for (double& v : out) {
        v *= inv;
    }
}

inline void distance_row(const Tensor& x, const Tensor& c, Tensor& d, std::size_t i) {
    const auto xi = x.row(i);
    for (std::size_t k = 0; k < c.rows(); ++k) {
        const auto ck = c.row(k);
        double acc = 0.0;
        for (std::size_t j = 0; j < xi.size(); ++j) {
            const double diff = xi[j] - ck[j];
            acc += diff * diff;
        }
        d(i, k) = acc;
    }
}

using Index = std::int64_t;

} // namespace

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_inner(a.cols(), b.rows(), "matmul", a, b);
    Tensor c(a.rows(), b.cols());
    const Index m = static_cast<Index>(a.rows());
    const std::size_t work = a.rows() * a.cols() * b.cols();
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (Index i = 0; i < m; ++i) {
        matmul_row(a, b, c, static_cast<std::size_t>(i));
    }
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_inner(a.cols(), b.cols(), "matmul_nt", a, b);
    Tensor c(a.rows(), b.rows());
    const Index m = static_cast<Index>(a.rows());
    const std::size_t work = a.rows() * a.cols() * b.rows();
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (Index i = 0; i < m; ++i) {
        matmul_nt_row(a, b, c, static_cast<std::size_t>(i));
    }
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    check_inner(a.rows(), b.rows(), "matmul_tn", a, b);
    Tensor c(a.cols(), b.cols());
    const Index k = static_cast<Index>(a.cols());
    const std::size_t work = a.rows() * a.cols() * b.cols();
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (Index p = 0; p < k; ++p) {
        matmul_tn_row(a, b, c, static_cast<std::size_t>(p));
    }
    return c;
}

Tensor softmax_rows(const Tensor& x) {
    check_nonempty(x, "softmax_rows");
    Tensor y(x.rows(), x.cols());
    const Index m = static_cast<Index>(x.rows());
#pragma omp parallel for schedule(static) if (x.size() > kParallelWork)
    for (Index r = 0; r < m; ++r) {
        softmax_row(x, y, static_cast<std::size_t>(r));
    }
    return y;
}

Tensor squared_distances(const Tensor& x, const Tensor& c) {
    check_inner(x.cols(), c.cols(), "squared_distances", x, c);
    Tensor d(x.rows(), c.rows());
    const Index m = static_cast<Index>(x.rows());
    const std::size_t work = x.rows() * c.rows() * x.cols();
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (Index i = 0; i < m; ++i) {
        distance_row(x, c, d, static_cast<std::size_t>(i));
    }
    return d;
}

} // namespace kernels

namespace reference {

// Textbook loops, written independently of the row kernels above. Each output
// element accumulates over the reduction index in ascending order, which is
// also the order the parallel kernels use.

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_inner(a.cols(), b.rows(), "matmul", a, b);
    Tensor c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p) {
                acc += a(i, p) * b(p, j);
            }
            c(i, j) = acc;
        }
    }
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_inner(a.cols(), b.cols(), "matmul_nt", a, b);
    Tensor c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p) {
                acc += a(i, p) * b(j, p);
            }
            c(i, j) = acc;
        }
    }
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    check_inner(a.rows(), b.rows(), "matmul_tn", a, b);
    Tensor c(a.cols(), b.cols());
    for (std::size_t p = 0; p < a.cols(); ++p) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < a.rows(); ++i) {
                acc += a(i, p) * b(i, j);
            }
            c(p, j) = acc;
        }
    }
    return c;
}

Tensor softmax_rows(const Tensor& x) {
    check_nonempty(x, "softmax_rows");
    Tensor y(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mx = x(r, 0);
        for (std::size_t j = 1; j < x.cols(); ++j) {
            mx = std::max(mx, x(r, j));
        }
        double total = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            y(r, j) = std::exp(x(r, j) - mx);
            total += y(r, j);
        }
        for (std::size_t j = 0; j < x.cols(); ++j) {
            y(r, j) *= 1.0 / total;
        }
    }
    return y;
}

Tensor squared_distances(const Tensor& x, const Tensor& c) {
    check_inner(x.cols(), c.cols(), "squared_distances", x, c);
    Tensor d(x.rows(), c.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t k = 0; k < c.rows(); ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < x.cols(); ++j) {
                acc += (x(i, j) - c(k, j)) * (x(i, j) - c(k, j));
            }
            d(i, k) = acc;
        }
    }
    return d;
}

} // namespace reference
} // namespace motionmask
