#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stpredict/ops.hpp"
#include "stpredict/rng.hpp"
#include "stpredict/tensor.hpp"

namespace stpredict {

// Registry of named parameters in creation order; the order defines the
// checkpoint blob layout and the optimizer slot mapping.
template <typename T>
class ParamRegistry {
  public:
    Tensor<T> create(const std::string& name, std::vector<std::size_t> dims) {
        Tensor<T> t(std::move(dims), /*requires_grad=*/true);
        names_.push_back(name);
        params_.push_back(t);
        return t;
    }

    std::vector<Tensor<T>>& params() { return params_; }
    const std::vector<Tensor<T>>& params() const { return params_; }
    const std::vector<std::string>& names() const { return names_; }

    std::size_t total_numel() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

  private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> params_;
};

template <typename T>
struct LayerState {
    Tensor<T> h;
    Tensor<T> c;
};

template <typename T>
struct SharedState {
    Tensor<T> m;  // spatial memory threaded across the stack
    Tensor<T> z;  // gradient-highway state
};

// Gate blocks are emitted by one fused convolution; the channel order of the
// 3-way split is (g, i, f) and of the 4-way ConvLSTM split is (i, f, o, g).

template <typename T>
struct ConvLstmParams {
    Tensor<T> gates_w, gates_b;  // [4C, Cx+C, k, k]
};

template <typename T>
struct CausalLstmParams {
    Tensor<T> w1, b1;  // [3C, Cx+2C, k, k],   gates over [X, H, C]
    Tensor<T> w2, b2;  // [3C, Cx+C+Cm, k, k], gates over [X, C', M_in]
    Tensor<T> w3, b3;  // [C, Cm, 1, 1]
    Tensor<T> w4, b4;  // [C, Cx+2C, k, k],    output gate over [X, C', M']
    Tensor<T> w5, b5;  // [C, 2C, 1, 1],       fusion over [C', M']
};

template <typename T>
struct StLstmParams {
    Tensor<T> wh, bh;        // [3C, Cx+C, k, k], temporal branch over [X, H]
    Tensor<T> wm, bm;        // [3C, Cx+C, k, k], spatial branch over [X, M]
    Tensor<T> wo, bo;        // [C, Cx+3C, k, k], output gate over [X, H, C', M']
    Tensor<T> wfuse, bfuse;  // [C, 2C, 1, 1]
    Tensor<T> min_adapt_w, min_adapt_b;  // optional [C, Cm, 1, 1] when Cm != C
};

template <typename T>
struct TemporalAttentionParams {
    Tensor<T> conv_w, conv_b;      // [C, C, k, k] modulation
    Tensor<T> reduce_w, reduce_b;  // [C/4, C]
    Tensor<T> expand_w, expand_b;  // [C, C/4]
};

template <typename T>
struct StaAttentionParams {
    Tensor<T> mlp1_w, mlp1_b;        // [C/r, C], shared by avg and max paths
    Tensor<T> mlp2_w, mlp2_b;        // [C, C/r]
    Tensor<T> spatial_w, spatial_b;  // [1, 2, 7, 7]
};

template <typename T>
struct GhuParams {
    Tensor<T> px_w, px_b;  // [Cz, Cx, k, k]
    Tensor<T> pz_w, pz_b;  // [Cz, Cz, k, k]
    Tensor<T> sx_w, sx_b;  // [Cz, Cx, k, k]
    Tensor<T> sz_w, sz_b;  // [Cz, Cz, k, k]
};

// Parameter construction. Weights are uniform in +-1/sqrt(fan_in), biases
// zero except forget-gate segments which start at +1.
template <typename T>
ConvLstmParams<T> make_convlstm_params(ParamRegistry<T>& reg, const std::string& prefix,
                                       std::size_t cx, std::size_t c, int kernel, Rng& rng);
template <typename T>
CausalLstmParams<T> make_causal_params(ParamRegistry<T>& reg, const std::string& prefix,
                                       std::size_t cx, std::size_t c, std::size_t cm,
                                       int kernel, Rng& rng);
template <typename T>
StLstmParams<T> make_st_params(ParamRegistry<T>& reg, const std::string& prefix,
                               std::size_t cx, std::size_t c, std::size_t cm,
                               int kernel, Rng& rng);
template <typename T>
TemporalAttentionParams<T> make_ta_params(ParamRegistry<T>& reg, const std::string& prefix,
                                          std::size_t c, int kernel, Rng& rng);
template <typename T>
StaAttentionParams<T> make_sta_params(ParamRegistry<T>& reg, const std::string& prefix,
                                      std::size_t c, Rng& rng);
template <typename T>
GhuParams<T> make_ghu_params(ParamRegistry<T>& reg, const std::string& prefix,
                             std::size_t cx, std::size_t cz, int kernel, Rng& rng);

// Cell forwards. All are pure in (inputs, params).

template <typename T>
LayerState<T> convlstm_forward(Graph<T>* g, const Tensor<T>& x,
                               const LayerState<T>& state,
                               const ConvLstmParams<T>& p);

template <typename T>
std::pair<LayerState<T>, Tensor<T>> causal_lstm_forward(Graph<T>* g, const Tensor<T>& x,
                                                        const LayerState<T>& state,
                                                        const Tensor<T>& m_in,
                                                        const CausalLstmParams<T>& p);

template <typename T>
std::pair<LayerState<T>, Tensor<T>> st_lstm_forward(Graph<T>* g, const Tensor<T>& x,
                                                    const LayerState<T>& state,
                                                    const Tensor<T>& m_in,
                                                    const StLstmParams<T>& p);

// U = conv(X); e = tanh(expand(sigmoid(reduce(spatial_mean(U))))); out = e.U
template <typename T>
Tensor<T> temporal_attention(Graph<T>* g, const Tensor<T>& x,
                             const TemporalAttentionParams<T>& p);

// Channel attention then 7x7 spatial attention (CBAM-style).
template <typename T>
Tensor<T> sta_attention(Graph<T>* g, const Tensor<T>& x,
                        const StaAttentionParams<T>& p);

// C <- C + TA(C); M <- STA(M). Applied before the causal cell each step.
template <typename T>
std::pair<LayerState<T>, Tensor<T>> context_memory_update(
    Graph<T>* g, const LayerState<T>& state, const Tensor<T>& m_prev,
    const TemporalAttentionParams<T>* ta, const StaAttentionParams<T>* sta);

template <typename T>
Tensor<T> ghu_forward(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& z_prev,
                      const GhuParams<T>& p);

// Context conditioning composed with the causal cell for one layer.
template <typename T>
std::pair<LayerState<T>, Tensor<T>> context_lstm_forward(
    Graph<T>* g, const Tensor<T>& x, const LayerState<T>& state,
    const Tensor<T>& m_in, const CausalLstmParams<T>& p,
    const TemporalAttentionParams<T>* ta, const StaAttentionParams<T>* sta);

}  // namespace stpredict
