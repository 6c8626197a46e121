#include "stpredict/cells.hpp"

#include <cmath>

namespace stpredict {

namespace {

template <typename T>
void fill_uniform(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    T* p = t.data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
        p[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
}

// Forget segment of a (g,i,f) fused bias starts at +1.
template <typename T>
void bias_forget_init(Tensor<T>& b, std::size_t c, std::size_t forget_offset) {
    T* p = b.data();
    for (std::size_t i = 0; i < c; ++i) p[forget_offset + i] = T(1);
}

template <typename T>
Tensor<T> conv_weight(ParamRegistry<T>& reg, const std::string& name,
                      std::size_t cout, std::size_t cin, int k, Rng& rng) {
    auto w = reg.create(name, {cout, cin, static_cast<std::size_t>(k),
                               static_cast<std::size_t>(k)});
    fill_uniform(w, cin * k * k, rng);
    return w;
}

template <typename T>
std::size_t reduced(std::size_t c, std::size_t ratio) {
    return c < ratio ? 1 : c / ratio;
}

}  // namespace

template <typename T>
ConvLstmParams<T> make_convlstm_params(ParamRegistry<T>& reg, const std::string& prefix,
                                       std::size_t cx, std::size_t c, int kernel, Rng& rng) {
    ConvLstmParams<T> p;
    p.gates_w = conv_weight(reg, prefix + ".gates.weight", 4 * c, cx + c, kernel, rng);
    p.gates_b = reg.create(prefix + ".gates.bias", {4 * c});
    bias_forget_init(p.gates_b, c, c);  // (i,f,o,g): f block second
    return p;
}

template <typename T>
CausalLstmParams<T> make_causal_params(ParamRegistry<T>& reg, const std::string& prefix,
                                       std::size_t cx, std::size_t c, std::size_t cm,
                                       int kernel, Rng& rng) {
    CausalLstmParams<T> p;
    p.w1 = conv_weight(reg, prefix + ".w1.weight", 3 * c, cx + 2 * c, kernel, rng);
    p.b1 = reg.create(prefix + ".w1.bias", {3 * c});
    bias_forget_init(p.b1, c, 2 * c);  // (g,i,f): f block third
    p.w2 = conv_weight(reg, prefix + ".w2.weight", 3 * c, cx + c + cm, kernel, rng);
    p.b2 = reg.create(prefix + ".w2.bias", {3 * c});
    bias_forget_init(p.b2, c, 2 * c);
    p.w3 = conv_weight(reg, prefix + ".w3.weight", c, cm, 1, rng);
    p.b3 = reg.create(prefix + ".w3.bias", {c});
    p.w4 = conv_weight(reg, prefix + ".w4.weight", c, cx + 2 * c, kernel, rng);
    p.b4 = reg.create(prefix + ".w4.bias", {c});
    p.w5 = conv_weight(reg, prefix + ".w5.weight", c, 2 * c, 1, rng);
    p.b5 = reg.create(prefix + ".w5.bias", {c});
    return p;
}

template <typename T>
StLstmParams<T> make_st_params(ParamRegistry<T>& reg, const std::string& prefix,
                               std::size_t cx, std::size_t c, std::size_t cm,
                               int kernel, Rng& rng) {
    StLstmParams<T> p;
    p.wh = conv_weight(reg, prefix + ".wh.weight", 3 * c, cx + c, kernel, rng);
    p.bh = reg.create(prefix + ".wh.bias", {3 * c});
    bias_forget_init(p.bh, c, 2 * c);
    p.wm = conv_weight(reg, prefix + ".wm.weight", 3 * c, cx + c, kernel, rng);
    p.bm = reg.create(prefix + ".wm.bias", {3 * c});
    bias_forget_init(p.bm, c, 2 * c);
    p.wo = conv_weight(reg, prefix + ".wo.weight", c, cx + 3 * c, kernel, rng);
    p.bo = reg.create(prefix + ".wo.bias", {c});
    p.wfuse = conv_weight(reg, prefix + ".fuse.weight", c, 2 * c, 1, rng);
    p.bfuse = reg.create(prefix + ".fuse.bias", {c});
    if (cm != c) {
        p.min_adapt_w = conv_weight(reg, prefix + ".m_in_adapter.weight", c, cm, 1, rng);
        p.min_adapt_b = reg.create(prefix + ".m_in_adapter.bias", {c});
    }
    return p;
}

template <typename T>
TemporalAttentionParams<T> make_ta_params(ParamRegistry<T>& reg, const std::string& prefix,
                                          std::size_t c, int kernel, Rng& rng) {
    TemporalAttentionParams<T> p;
    const std::size_t hidden = reduced<T>(c, 4);
    p.conv_w = conv_weight(reg, prefix + ".mod.weight", c, c, kernel, rng);
    p.conv_b = reg.create(prefix + ".mod.bias", {c});
    p.reduce_w = reg.create(prefix + ".reduce.weight", {hidden, c});
    fill_uniform(p.reduce_w, c, rng);
    p.reduce_b = reg.create(prefix + ".reduce.bias", {hidden});
    p.expand_w = reg.create(prefix + ".expand.weight", {c, hidden});
    fill_uniform(p.expand_w, hidden, rng);
    p.expand_b = reg.create(prefix + ".expand.bias", {c});
    return p;
}

template <typename T>
StaAttentionParams<T> make_sta_params(ParamRegistry<T>& reg, const std::string& prefix,
                                      std::size_t c, Rng& rng) {
    StaAttentionParams<T> p;
    const std::size_t hidden = reduced<T>(c, 8);
    p.mlp1_w = reg.create(prefix + ".mlp1.weight", {hidden, c});
    fill_uniform(p.mlp1_w, c, rng);
    p.mlp1_b = reg.create(prefix + ".mlp1.bias", {hidden});
    p.mlp2_w = reg.create(prefix + ".mlp2.weight", {c, hidden});
    fill_uniform(p.mlp2_w, hidden, rng);
    p.mlp2_b = reg.create(prefix + ".mlp2.bias", {c});
    p.spatial_w = conv_weight(reg, prefix + ".spatial.weight", 1, 2, 7, rng);
    p.spatial_b = reg.create(prefix + ".spatial.bias", {1});
    return p;
}

template <typename T>
GhuParams<T> make_ghu_params(ParamRegistry<T>& reg, const std::string& prefix,
                             std::size_t cx, std::size_t cz, int kernel, Rng& rng) {
    GhuParams<T> p;
    p.px_w = conv_weight(reg, prefix + ".px.weight", cz, cx, kernel, rng);
    p.px_b = reg.create(prefix + ".px.bias", {cz});
    p.pz_w = conv_weight(reg, prefix + ".pz.weight", cz, cz, kernel, rng);
    p.pz_b = reg.create(prefix + ".pz.bias", {cz});
    p.sx_w = conv_weight(reg, prefix + ".sx.weight", cz, cx, kernel, rng);
    p.sx_b = reg.create(prefix + ".sx.bias", {cz});
    p.sz_w = conv_weight(reg, prefix + ".sz.weight", cz, cz, kernel, rng);
    p.sz_b = reg.create(prefix + ".sz.bias", {cz});
    return p;
}

namespace {

template <typename T>
int pad_of(const Tensor<T>& w) {
    return static_cast<int>(w.dim(2) - 1) / 2;
}

struct GateSplit3 {
    std::size_t c;
};

// (g,i,f) from one fused conv map.
template <typename T>
void split_gif(Graph<T>* g, const Tensor<T>& fused, std::size_t c, Tensor<T>& gate_g,
               Tensor<T>& gate_i, Tensor<T>& gate_f) {
    gate_g = tanh_act(g, narrow_channels(g, fused, 0, c));
    gate_i = sigmoid(g, narrow_channels(g, fused, c, c));
    gate_f = sigmoid(g, narrow_channels(g, fused, 2 * c, c));
}

}  // namespace

template <typename T>
LayerState<T> convlstm_forward(Graph<T>* g, const Tensor<T>& x,
                               const LayerState<T>& state, const ConvLstmParams<T>& p) {
    const std::size_t c = state.h.dim(1);
    auto fused = conv2d(g, concat_channels(g, {x, state.h}), p.gates_w, p.gates_b,
                        pad_of(p.gates_w));
    auto gate_i = sigmoid(g, narrow_channels(g, fused, 0, c));
    auto gate_f = sigmoid(g, narrow_channels(g, fused, c, c));
    auto gate_o = sigmoid(g, narrow_channels(g, fused, 2 * c, c));
    auto gate_g = tanh_act(g, narrow_channels(g, fused, 3 * c, c));
    auto c_new = add(g, mul(g, gate_f, state.c), mul(g, gate_i, gate_g));
    auto h_new = mul(g, gate_o, tanh_act(g, c_new));
    return {h_new, c_new};
}

template <typename T>
std::pair<LayerState<T>, Tensor<T>> causal_lstm_forward(Graph<T>* g, const Tensor<T>& x,
                                                        const LayerState<T>& state,
                                                        const Tensor<T>& m_in,
                                                        const CausalLstmParams<T>& p) {
    if (!m_in.defined()) {
        throw ShapeError("causal_lstm_forward: missing spatial memory input");
    }
    const std::size_t c = state.c.dim(1);
    Tensor<T> gate_g, gate_i, gate_f;
    auto fused1 = conv2d(g, concat_channels(g, {x, state.h, state.c}), p.w1, p.b1,
                         pad_of(p.w1));
    split_gif(g, fused1, c, gate_g, gate_i, gate_f);
    auto c_new = add(g, mul(g, gate_f, state.c), mul(g, gate_i, gate_g));

    Tensor<T> gate_g2, gate_i2, gate_f2;
    auto fused2 = conv2d(g, concat_channels(g, {x, c_new, m_in}), p.w2, p.b2,
                         pad_of(p.w2));
    split_gif(g, fused2, c, gate_g2, gate_i2, gate_f2);
    auto m_fold = tanh_act(g, conv2d(g, m_in, p.w3, p.b3, 0));
    auto m_new = add(g, mul(g, gate_f2, m_fold), mul(g, gate_i2, gate_g2));

    // 5e uses tanh, as printed.
    auto gate_o = tanh_act(g, conv2d(g, concat_channels(g, {x, c_new, m_new}), p.w4,
                                     p.b4, pad_of(p.w4)));
    auto h_new = mul(g, gate_o,
                     tanh_act(g, conv2d(g, concat_channels(g, {c_new, m_new}), p.w5,
                                        p.b5, 0)));
    return {LayerState<T>{h_new, c_new}, m_new};
}

template <typename T>
std::pair<LayerState<T>, Tensor<T>> st_lstm_forward(Graph<T>* g, const Tensor<T>& x,
                                                    const LayerState<T>& state,
                                                    const Tensor<T>& m_in,
                                                    const StLstmParams<T>& p) {
    if (!m_in.defined()) {
        throw ShapeError("st_lstm_forward: missing spatial memory input");
    }
    const std::size_t c = state.c.dim(1);
    Tensor<T> m = m_in;
    if (p.min_adapt_w.defined()) {
        m = conv2d(g, m, p.min_adapt_w, p.min_adapt_b, 0);
    }

    Tensor<T> gate_g, gate_i, gate_f;
    auto fused_h = conv2d(g, concat_channels(g, {x, state.h}), p.wh, p.bh, pad_of(p.wh));
    split_gif(g, fused_h, c, gate_g, gate_i, gate_f);
    auto c_new = add(g, mul(g, gate_f, state.c), mul(g, gate_i, gate_g));

    Tensor<T> gate_g2, gate_i2, gate_f2;
    auto fused_m = conv2d(g, concat_channels(g, {x, m}), p.wm, p.bm, pad_of(p.wm));
    split_gif(g, fused_m, c, gate_g2, gate_i2, gate_f2);
    auto m_new = add(g, mul(g, gate_f2, m), mul(g, gate_i2, gate_g2));

    auto gate_o = sigmoid(g, conv2d(g, concat_channels(g, {x, state.h, c_new, m_new}),
                                    p.wo, p.bo, pad_of(p.wo)));
    auto h_new = mul(g, gate_o,
                     tanh_act(g, conv2d(g, concat_channels(g, {c_new, m_new}), p.wfuse,
                                        p.bfuse, 0)));
    return {LayerState<T>{h_new, c_new}, m_new};
}

template <typename T>
Tensor<T> temporal_attention(Graph<T>* g, const Tensor<T>& x,
                             const TemporalAttentionParams<T>& p) {
    auto u = conv2d(g, x, p.conv_w, p.conv_b, pad_of(p.conv_w));
    auto s = spatial_pool(g, u, PoolKind::Avg);
    auto hidden = sigmoid(g, affine(g, s, p.reduce_w, p.reduce_b));
    auto e = tanh_act(g, affine(g, hidden, p.expand_w, p.expand_b));
    return channel_mul(g, e, u);
}

template <typename T>
Tensor<T> sta_attention(Graph<T>* g, const Tensor<T>& x, const StaAttentionParams<T>& p) {
    auto mlp = [&](const Tensor<T>& v) {
        return affine(g, sigmoid(g, affine(g, v, p.mlp1_w, p.mlp1_b)), p.mlp2_w,
                      p.mlp2_b);
    };
    auto channel_map = sigmoid(g, add(g, mlp(spatial_pool(g, x, PoolKind::Avg)),
                                      mlp(spatial_pool(g, x, PoolKind::Max))));
    auto refined = channel_mul(g, channel_map, x);
    auto pooled = concat_channels(g, {channel_pool(g, refined, PoolKind::Avg),
                                      channel_pool(g, refined, PoolKind::Max)});
    auto spatial_map = sigmoid(g, conv2d(g, pooled, p.spatial_w, p.spatial_b, 3));
    return spatial_mul(g, spatial_map, refined);
}

template <typename T>
std::pair<LayerState<T>, Tensor<T>> context_memory_update(
    Graph<T>* g, const LayerState<T>& state, const Tensor<T>& m_prev,
    const TemporalAttentionParams<T>* ta, const StaAttentionParams<T>* sta) {
    LayerState<T> out = state;
    Tensor<T> m = m_prev;
    if (ta) out.c = add(g, state.c, temporal_attention(g, state.c, *ta));
    if (sta) m = sta_attention(g, m_prev, *sta);
    return {out, m};
}

template <typename T>
Tensor<T> ghu_forward(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& z_prev,
                      const GhuParams<T>& p) {
    auto pt = tanh_act(g, add(g, conv2d(g, x, p.px_w, p.px_b, pad_of(p.px_w)),
                              conv2d(g, z_prev, p.pz_w, p.pz_b, pad_of(p.pz_w))));
    auto st = sigmoid(g, add(g, conv2d(g, x, p.sx_w, p.sx_b, pad_of(p.sx_w)),
                             conv2d(g, z_prev, p.sz_w, p.sz_b, pad_of(p.sz_w))));
    auto keep = sub_from_scalar(g, T(1), st);
    return add(g, mul(g, st, pt), mul(g, keep, z_prev));
}

template <typename T>
std::pair<LayerState<T>, Tensor<T>> context_lstm_forward(
    Graph<T>* g, const Tensor<T>& x, const LayerState<T>& state,
    const Tensor<T>& m_in, const CausalLstmParams<T>& p,
    const TemporalAttentionParams<T>* ta, const StaAttentionParams<T>* sta) {
    auto [conditioned, m] = context_memory_update(g, state, m_in, ta, sta);
    return causal_lstm_forward(g, x, conditioned, m, p);
}

#define STPREDICT_INSTANTIATE_CELLS(T)                                               \
    template ConvLstmParams<T> make_convlstm_params<T>(                              \
        ParamRegistry<T>&, const std::string&, std::size_t, std::size_t, int, Rng&); \
    template CausalLstmParams<T> make_causal_params<T>(                              \
        ParamRegistry<T>&, const std::string&, std::size_t, std::size_t,             \
        std::size_t, int, Rng&);                                                     \
    template StLstmParams<T> make_st_params<T>(ParamRegistry<T>&, const std::string&,\
                                               std::size_t, std::size_t,             \
                                               std::size_t, int, Rng&);              \
    template TemporalAttentionParams<T> make_ta_params<T>(                           \
        ParamRegistry<T>&, const std::string&, std::size_t, int, Rng&);              \
    template StaAttentionParams<T> make_sta_params<T>(ParamRegistry<T>&,             \
                                                      const std::string&,            \
                                                      std::size_t, Rng&);            \
    template GhuParams<T> make_ghu_params<T>(ParamRegistry<T>&, const std::string&,  \
                                             std::size_t, std::size_t, int, Rng&);   \
    template LayerState<T> convlstm_forward<T>(Graph<T>*, const Tensor<T>&,          \
                                               const LayerState<T>&,                 \
                                               const ConvLstmParams<T>&);            \
    template std::pair<LayerState<T>, Tensor<T>> causal_lstm_forward<T>(             \
        Graph<T>*, const Tensor<T>&, const LayerState<T>&, const Tensor<T>&,         \
        const CausalLstmParams<T>&);                                                 \
    template std::pair<LayerState<T>, Tensor<T>> st_lstm_forward<T>(                 \
        Graph<T>*, const Tensor<T>&, const LayerState<T>&, const Tensor<T>&,         \
        const StLstmParams<T>&);                                                     \
    template Tensor<T> temporal_attention<T>(Graph<T>*, const Tensor<T>&,            \
                                             const TemporalAttentionParams<T>&);     \
    template Tensor<T> sta_attention<T>(Graph<T>*, const Tensor<T>&,                 \
                                        const StaAttentionParams<T>&);               \
    template std::pair<LayerState<T>, Tensor<T>> context_memory_update<T>(           \
        Graph<T>*, const LayerState<T>&, const Tensor<T>&,                           \
        const TemporalAttentionParams<T>*, const StaAttentionParams<T>*);            \
    template Tensor<T> ghu_forward<T>(Graph<T>*, const Tensor<T>&, const Tensor<T>&, \
                                      const GhuParams<T>&);                          \
    template std::pair<LayerState<T>, Tensor<T>> context_lstm_forward<T>(            \
        Graph<T>*, const Tensor<T>&, const LayerState<T>&, const Tensor<T>&,         \
        const CausalLstmParams<T>&, const TemporalAttentionParams<T>*,               \
        const StaAttentionParams<T>*);

STPREDICT_INSTANTIATE_CELLS(float)
STPREDICT_INSTANTIATE_CELLS(double)

#undef STPREDICT_INSTANTIATE_CELLS

}  // namespace stpredict
