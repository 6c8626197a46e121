#pragma once

#include <cstdint>
#include <vector>

#include "stpredict/tensor.hpp"

namespace stpredict {

// ADAM with bias correction. Moment buffers are positional: state slot i
// belongs to params[i], so the caller must keep the parameter list stable.
template <typename T>
struct AdamState {
    std::int64_t step = 0;
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    void init(const std::vector<Tensor<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.numel(), T(0));
            v.emplace_back(p.numel(), T(0));
        }
    }
};

// One update from the gradients stored on the params; grads are consumed
// (zeroed) afterwards.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state);

// SGD step used by the meta student; also consumes gradients.
template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, T lr);

}  // namespace stpredict
