#include "stpredict/adam.hpp"

#include <cmath>
#include <string>

namespace stpredict {

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
    if (state.m.size() != params.size()) {
        throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) +
                         " slots for " + std::to_string(params.size()) + " params");
    }
    state.step += 1;
    const T c1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
    const T c2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.has_grad()) {
            throw ShapeError("adam_step: missing grad for param " + std::to_string(i));
        }
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.numel()) {
            throw ShapeError("adam_step: moment size " + std::to_string(m.size()) +
                             " does not match param " + format_dims(p.dims()));
        }
        T* pd = p.data();
        const std::vector<T>& gd = p.grad_vec();
        for (std::size_t j = 0; j < m.size(); ++j) {
            const T gj = gd[j];
            m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * gj * gj;
            const T mhat = m[j] / c1;
            const T vhat = v[j] / c2;
            pd[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        p.zero_grad();
    }
}

template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, T lr) {
    for (auto& p : params) {
        if (!p.has_grad()) throw ShapeError("sgd_step: missing grad");
        T* pd = p.data();
        const std::vector<T>& gd = p.grad_vec();
        for (std::size_t j = 0; j < p.numel(); ++j) pd[j] -= lr * gd[j];
        p.zero_grad();
    }
}

template void adam_step<float>(std::vector<Tensor<float>>&, AdamState<float>&);
template void adam_step<double>(std::vector<Tensor<double>>&, AdamState<double>&);
template void sgd_step<float>(std::vector<Tensor<float>>&, float);
template void sgd_step<double>(std::vector<Tensor<double>>&, double);

}  // namespace stpredict
