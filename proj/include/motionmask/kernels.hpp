#pragma once

#include "motionmask/tensor.hpp"

// Dense inner loops. `kernels` is the OpenMP build used by the models; `reference`
// holds the serial versions the tests and benchmark compare against. Both visit
// the reduction index in the same order, so results agree bit for bit.

namespace motionmask::kernels {

/// a (m x k) * b (k x n)
Tensor matmul(const Tensor& a, const Tensor& b);
/// a (m x k) * b^T where b is (n x k)
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// a^T * b where a is (m x k) and b is (m x n)
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& x);
/// Squared Euclidean distance between every row of x and every row of c.
Tensor squared_distances(const Tensor& x, const Tensor& c);

/// Work (multiply-adds) below which kernels stay on the calling thread.
inline constexpr std::size_t kParallelWork = 1u << 15;

} // namespace motionmask::kernels

namespace motionmask::reference {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& x);
Tensor squared_distances(const Tensor& x, const Tensor& c);

} // namespace motionmask::reference
