#pragma once

#include <vector>

#include "stpredict/tensor.hpp"

namespace stpredict {

enum class PoolKind { Avg, Max };

// All ops record onto `g` when it is non-null; with g == nullptr they run
// forward-only (no history, outputs untracked). Shapes follow the NCHW
// convention: input [B,C,H,W], kernel [Cout,Cin,kh,kw].

// Stride-1 cross-correlation with zero padding, padding == (k-1)/2 so the
// spatial extent is preserved. `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(Graph<T>* g, const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int padding);

template <typename T>
Tensor<T> add(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(Graph<T>* g, const Tensor<T>& a, T s);
// s - a, elementwise.
template <typename T>
Tensor<T> sub_from_scalar(Graph<T>* g, T s, const Tensor<T>& a);

template <typename T>
Tensor<T> sigmoid(Graph<T>* g, const Tensor<T>& a);
template <typename T>
Tensor<T> tanh_act(Graph<T>* g, const Tensor<T>& a);

// [B,C,H,W] -> [B,C]; H*W reduced. Max routes its subgradient to the first
// (row-major) maximal element.
template <typename T>
Tensor<T> spatial_pool(Graph<T>* g, const Tensor<T>& x, PoolKind kind);
// [B,C,H,W] -> [B,1,H,W]; C reduced.
template <typename T>
Tensor<T> channel_pool(Graph<T>* g, const Tensor<T>& x, PoolKind kind);

// input [B,C] * weight[Cout,C]^T + bias[Cout] -> [B,Cout].
template <typename T>
Tensor<T> affine(Graph<T>* g, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias);

// coef [B,C] scales x [B,C,H,W] per channel.
template <typename T>
Tensor<T> channel_mul(Graph<T>* g, const Tensor<T>& coef, const Tensor<T>& x);
// mask [B,1,H,W] scales x [B,C,H,W] per pixel.
template <typename T>
Tensor<T> spatial_mul(Graph<T>* g, const Tensor<T>& mask, const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(Graph<T>* g, const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> narrow_channels(Graph<T>* g, const Tensor<T>& x, std::size_t start,
                          std::size_t count);

template <typename T>
Tensor<T> sum_all(Graph<T>* g, const Tensor<T>& x);

// mean((a - b)^2); fused so rollout losses do not materialize square maps.
template <typename T>
Tensor<T> mse_mean(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b);

// sum_b w[b] * mean_elements((a_b - b_b)^2) over the leading axis.
template <typename T>
Tensor<T> rowwise_weighted_mse(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b,
                               const std::vector<T>& row_weights);

namespace detail {
// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate);
// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void matmul_at_b(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate);
// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void matmul_a_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate);
}  // namespace detail

}  // namespace stpredict
