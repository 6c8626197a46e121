#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "stpredict/cells.hpp"
#include "stpredict/rng.hpp"

using namespace stpredict;

namespace {

template <typename T>
void randomize(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t.data()[i] = static_cast<T>(rng.uniform(lo, hi));
    }
}

template <typename T>
Tensor<T> random_tensor(std::vector<std::size_t> dims, Rng& rng, double lo = -1.0,
                        double hi = 1.0) {
    Tensor<T> t(std::move(dims));
    randomize(t, rng, lo, hi);
    return t;
}

template <typename T>
void zero_params(ParamRegistry<T>& reg) {
    for (auto& p : reg.params()) {
        std::fill(p.vec().begin(), p.vec().end(), T(0));
    }
}

template <typename T>
oracle::CausalRefParams causal_ref_params(const CausalLstmParams<T>& p) {
    return {oracle::from_tensor(p.w1), oracle::from_tensor(p.b1),
            oracle::from_tensor(p.w2), oracle::from_tensor(p.b2),
            oracle::from_tensor(p.w3), oracle::from_tensor(p.b3),
            oracle::from_tensor(p.w4), oracle::from_tensor(p.b4),
            oracle::from_tensor(p.w5), oracle::from_tensor(p.b5)};
}

template <typename T>
oracle::TaRefParams ta_ref_params(const TemporalAttentionParams<T>& p) {
    return {oracle::from_tensor(p.conv_w),   oracle::from_tensor(p.conv_b),
            oracle::from_tensor(p.reduce_w), oracle::from_tensor(p.reduce_b),
            oracle::from_tensor(p.expand_w), oracle::from_tensor(p.expand_b)};
}

template <typename T>
oracle::StaRefParams sta_ref_params(const StaAttentionParams<T>& p) {
    return {oracle::from_tensor(p.mlp1_w),    oracle::from_tensor(p.mlp1_b),
            oracle::from_tensor(p.mlp2_w),    oracle::from_tensor(p.mlp2_b),
            oracle::from_tensor(p.spatial_w), oracle::from_tensor(p.spatial_b)};
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const oracle::RefTensor& b) {
    REQUIRE(a.numel() == b.numel());
    double worst = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - b.v[i]));
    }
    return worst;
}

}  // namespace

TEST_CASE("convlstm: zero params give the closed form") {
    Rng rng(1);
    ParamRegistry<float> reg;
    auto p = make_convlstm_params(reg, "cell", 3, 2, 3, rng);
    zero_params(reg);
    auto x = random_tensor<float>({1, 3, 4, 4}, rng);
    LayerState<float> st{random_tensor<float>({1, 2, 4, 4}, rng),
                         random_tensor<float>({1, 2, 4, 4}, rng)};
    auto out = convlstm_forward<float>(nullptr, x, st, p);
    for (std::size_t i = 0; i < out.c.numel(); ++i) {
        CHECK(out.c.data()[i] == doctest::Approx(0.5F * st.c.data()[i]));
        CHECK(out.h.data()[i] ==
              doctest::Approx(0.5F * std::tanh(0.5F * st.c.data()[i])));
    }
}

TEST_CASE("convlstm: zero input and state give exactly zero h") {
    Rng rng(2);
    ParamRegistry<float> reg;
    auto p = make_convlstm_params(reg, "cell", 3, 2, 3, rng);
    auto x = Tensor<float>::zeros({1, 3, 4, 4});
    LayerState<float> st{Tensor<float>::zeros({1, 2, 4, 4}),
                         Tensor<float>::zeros({1, 2, 4, 4})};
    // Zero C and g = tanh(bias-only) = 0 on the g block force H' = o * tanh(i*g) = 0
    zero_params(reg);
    auto out = convlstm_forward<float>(nullptr, x, st, p);
    for (std::size_t i = 0; i < out.h.numel(); ++i) CHECK(out.h.data()[i] == 0.0F);
}

TEST_CASE("convlstm matches the scalar-loop oracle") {
    Rng rng(3);
    for (int rep = 0; rep < 5; ++rep) {
        ParamRegistry<float> reg;
        auto p = make_convlstm_params(reg, "cell", 3, 4, 3, rng);
        auto x = random_tensor<float>({2, 3, 4, 4}, rng);
        LayerState<float> st{random_tensor<float>({2, 4, 4, 4}, rng),
                             random_tensor<float>({2, 4, 4, 4}, rng)};
        auto out = convlstm_forward<float>(nullptr, x, st, p);
        oracle::ConvLstmRefParams rp{oracle::from_tensor(p.gates_w),
                                     oracle::from_tensor(p.gates_b)};
        auto ref = oracle::convlstm_ref(oracle::from_tensor(x), oracle::from_tensor(st.h),
                                        oracle::from_tensor(st.c), rp);
        CHECK(max_abs_diff(out.h, ref.h) < 1e-5);
        CHECK(max_abs_diff(out.c, ref.c) < 1e-5);
    }
}

TEST_CASE("causal lstm: zero params and inputs give zero memories") {
    Rng rng(4);
    ParamRegistry<float> reg;
    auto p = make_causal_params(reg, "cell", 2, 2, 2, 3, rng);
    zero_params(reg);
    auto x = Tensor<float>::zeros({1, 2, 4, 4});
    LayerState<float> st{Tensor<float>::zeros({1, 2, 4, 4}),
                         Tensor<float>::zeros({1, 2, 4, 4})};
    auto m = Tensor<float>::zeros({1, 2, 4, 4});
    auto [out, m_new] = causal_lstm_forward<float>(nullptr, x, st, m, p);
    for (std::size_t i = 0; i < out.c.numel(); ++i) {
        CHECK(out.c.data()[i] == 0.0F);
        CHECK(out.h.data()[i] == 0.0F);
        CHECK(m_new.data()[i] == 0.0F);
    }
}

TEST_CASE("causal lstm: saturated forget keeps the temporal memory") {
    Rng rng(5);
    ParamRegistry<float> reg;
    auto p = make_causal_params(reg, "cell", 2, 2, 2, 3, rng);
    // f -> 1 and i -> 0 through large biases on the (g,i,f) blocks
    for (std::size_t c = 0; c < 2; ++c) {
        p.b1.data()[2 + c] = -60.0F;  // i block
        p.b1.data()[4 + c] = 60.0F;   // f block
    }
    auto x = random_tensor<float>({1, 2, 4, 4}, rng);
    LayerState<float> st{random_tensor<float>({1, 2, 4, 4}, rng),
                         random_tensor<float>({1, 2, 4, 4}, rng)};
    auto m = random_tensor<float>({1, 2, 4, 4}, rng);
    auto [out, m_new] = causal_lstm_forward<float>(nullptr, x, st, m, p);
    for (std::size_t i = 0; i < out.c.numel(); ++i) {
        CHECK(out.c.data()[i] == doctest::Approx(st.c.data()[i]).epsilon(1e-5));
    }
}

TEST_CASE("causal lstm matches the scalar-loop oracle, incl. unequal M width") {
    Rng rng(6);
    for (int rep = 0; rep < 5; ++rep) {
        const std::size_t cm = (rep % 2 == 0) ? 2 : 4;
        ParamRegistry<float> reg;
        auto p = make_causal_params(reg, "cell", 3, 2, cm, 3, rng);
        auto x = random_tensor<float>({2, 3, 4, 4}, rng);
        LayerState<float> st{random_tensor<float>({2, 2, 4, 4}, rng),
                             random_tensor<float>({2, 2, 4, 4}, rng)};
        auto m = random_tensor<float>({2, cm, 4, 4}, rng);
        auto [out, m_new] = causal_lstm_forward<float>(nullptr, x, st, m, p);
        auto ref = oracle::causal_ref(oracle::from_tensor(x), oracle::from_tensor(st.h),
                                      oracle::from_tensor(st.c), oracle::from_tensor(m),
                                      causal_ref_params(p));
        CHECK(max_abs_diff(out.h, ref.h) < 1e-5);
        CHECK(max_abs_diff(out.c, ref.c) < 1e-5);
        CHECK(max_abs_diff(m_new, ref.m) < 1e-5);
    }
}

TEST_CASE("causal lstm 5b linearity: i == 0 makes C a pure forget product") {
    Rng rng(7);
    ParamRegistry<float> reg;
    auto p = make_causal_params(reg, "cell", 2, 2, 2, 3, rng);
    for (std::size_t c = 0; c < 2; ++c) p.b1.data()[2 + c] = -60.0F;  // i -> 0
    auto x = random_tensor<float>({1, 2, 4, 4}, rng);
    LayerState<float> st{random_tensor<float>({1, 2, 4, 4}, rng),
                         random_tensor<float>({1, 2, 4, 4}, rng)};
    auto m = random_tensor<float>({1, 2, 4, 4}, rng);
    auto [out, m_new] = causal_lstm_forward<float>(nullptr, x, st, m, p);

    // recompute f from the printed gate equation and check C' = f (.) C
    auto fused = oracle::conv2d_ref(
        oracle::concat_ref({oracle::from_tensor(x), oracle::from_tensor(st.h),
                            oracle::from_tensor(st.c)}),
        oracle::from_tensor(p.w1), oracle::from_tensor(p.b1), 1);
    auto f = oracle::map_ref(oracle::slice_ref(fused, 4, 2), oracle::sig);
    for (std::size_t i = 0; i < out.c.numel(); ++i) {
        CHECK(out.c.data()[i] ==
              doctest::Approx(f.v[i] * st.c.data()[i]).epsilon(1e-4));
    }
}

TEST_CASE("st lstm: zero params and inputs give zero outputs") {
    Rng rng(8);
    ParamRegistry<float> reg;
    auto p = make_st_params(reg, "cell", 2, 2, 2, 3, rng);
    zero_params(reg);
    auto x = Tensor<float>::zeros({1, 2, 4, 4});
    LayerState<float> st{Tensor<float>::zeros({1, 2, 4, 4}),
                         Tensor<float>::zeros({1, 2, 4, 4})};
    auto m = Tensor<float>::zeros({1, 2, 4, 4});
    auto [out, m_new] = st_lstm_forward<float>(nullptr, x, st, m, p);
    for (std::size_t i = 0; i < out.h.numel(); ++i) {
        CHECK(out.h.data()[i] == 0.0F);
        CHECK(out.c.data()[i] == 0.0F);
        CHECK(m_new.data()[i] == 0.0F);
    }
}

TEST_CASE("st lstm: tied branches are symmetric under swapping C and M") {
    Rng rng(9);
    ParamRegistry<float> reg;
    auto p = make_st_params(reg, "cell", 2, 2, 2, 3, rng);
    // tie the two gate branches
    p.wm.vec() = p.wh.vec();
    p.bm.vec() = p.bh.vec();
    // output gate channels are [x(2), h(2), c(2), m(2)]: tie the C and M
    // blocks and silence the H block, which is not symmetric under the swap
    {
        const std::size_t in_c = 8, kk = 9;
        for (std::size_t oc = 0; oc < 2; ++oc) {
            for (std::size_t ci = 0; ci < 2; ++ci) {
                for (std::size_t t = 0; t < kk; ++t) {
                    const std::size_t h_idx = (oc * in_c + 2 + ci) * kk + t;
                    const std::size_t c_idx = (oc * in_c + 4 + ci) * kk + t;
                    const std::size_t m_idx = (oc * in_c + 6 + ci) * kk + t;
                    p.wo.data()[h_idx] = 0.0F;
                    p.wo.data()[m_idx] = p.wo.data()[c_idx];
                }
            }
        }
    }
    // tie the fusion halves
    for (std::size_t oc = 0; oc < 2; ++oc) {
        for (std::size_t ci = 0; ci < 2; ++ci) {
            p.wfuse.data()[oc * 4 + 2 + ci] = p.wfuse.data()[oc * 4 + ci];
        }
    }

    auto x = random_tensor<float>({1, 2, 4, 4}, rng);
    auto sa = random_tensor<float>({1, 2, 4, 4}, rng);
    auto sb = random_tensor<float>({1, 2, 4, 4}, rng);
    // both branches see identical inputs when H == C
    LayerState<float> st1{sa, sa};
    auto [out1, m1] = st_lstm_forward<float>(nullptr, x, st1, sb, p);
    LayerState<float> st2{sb, sb};
    auto [out2, m2] = st_lstm_forward<float>(nullptr, x, st2, sa, p);

    for (std::size_t i = 0; i < out1.h.numel(); ++i) {
        CHECK(out1.c.data()[i] == doctest::Approx(m2.data()[i]).epsilon(1e-5));
        CHECK(m1.data()[i] == doctest::Approx(out2.c.data()[i]).epsilon(1e-5));
        CHECK(out1.h.data()[i] == doctest::Approx(out2.h.data()[i]).epsilon(1e-5));
    }
}

TEST_CASE("st lstm matches the scalar-loop oracle") {
    Rng rng(10);
    for (int rep = 0; rep < 5; ++rep) {
        const std::size_t cm = (rep % 2 == 0) ? 2 : 4;
        ParamRegistry<float> reg;
        auto p = make_st_params(reg, "cell", 3, 2, cm, 3, rng);
        auto x = random_tensor<float>({2, 3, 4, 4}, rng);
        LayerState<float> st{random_tensor<float>({2, 2, 4, 4}, rng),
                             random_tensor<float>({2, 2, 4, 4}, rng)};
        auto m = random_tensor<float>({2, cm, 4, 4}, rng);
        auto [out, m_new] = st_lstm_forward<float>(nullptr, x, st, m, p);
        oracle::StRefParams rp{
            oracle::from_tensor(p.wh),    oracle::from_tensor(p.bh),
            oracle::from_tensor(p.wm),    oracle::from_tensor(p.bm),
            oracle::from_tensor(p.wo),    oracle::from_tensor(p.bo),
            oracle::from_tensor(p.wfuse), oracle::from_tensor(p.bfuse)};
        if (p.min_adapt_w.defined()) {
            rp.adapt_w = oracle::from_tensor(p.min_adapt_w);
            rp.adapt_b = oracle::from_tensor(p.min_adapt_b);
        }
        auto ref = oracle::st_ref(oracle::from_tensor(x), oracle::from_tensor(st.h),
                                  oracle::from_tensor(st.c), oracle::from_tensor(m), rp);
        CHECK(max_abs_diff(out.h, ref.h) < 1e-5);
        CHECK(max_abs_diff(out.c, ref.c) < 1e-5);
        CHECK(max_abs_diff(m_new, ref.m) < 1e-5);
    }
}

TEST_CASE("temporal attention: zero expand weight kills the output") {
    Rng rng(11);
    ParamRegistry<float> reg;
    auto p = make_ta_params(reg, "ta", 4, 3, rng);
    std::fill(p.expand_w.vec().begin(), p.expand_w.vec().end(), 0.0F);
    std::fill(p.expand_b.vec().begin(), p.expand_b.vec().end(), 0.0F);
    auto x = random_tensor<float>({2, 4, 4, 4}, rng);
    auto out = temporal_attention<float>(nullptr, x, p);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0F);
}

TEST_CASE("temporal attention: output is exactly e_c times U_c; e in (-1,1)") {
    Rng rng(12);
    ParamRegistry<float> reg;
    auto p = make_ta_params(reg, "ta", 4, 3, rng);
    auto x = random_tensor<float>({2, 4, 4, 4}, rng, -2, 2);
    auto out = temporal_attention<float>(nullptr, x, p);

    auto rp = ta_ref_params(p);
    auto u = oracle::conv2d_ref(oracle::from_tensor(x), rp.conv_w, rp.conv_b, 1);
    // per channel, out/u must be a constant in (-1, 1)
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t c = 0; c < 4; ++c) {
            double ratio = 0;
            bool seen = false;
            for (std::size_t h = 0; h < 4; ++h) {
                for (std::size_t w = 0; w < 4; ++w) {
                    const double uu = u.at4(b, c, h, w);
                    if (std::abs(uu) < 1e-3) continue;
                    const double r =
                        out.data()[((b * 4 + c) * 4 + h) * 4 + w] / uu;
                    if (!seen) {
                        ratio = r;
                        seen = true;
                    } else {
                        CHECK(r == doctest::Approx(ratio).epsilon(1e-3));
                    }
                }
            }
            REQUIRE(seen);
            CHECK(ratio > -1.0);
            CHECK(ratio < 1.0);
        }
    }

    auto ref = oracle::ta_ref(oracle::from_tensor(x), rp);
    CHECK(max_abs_diff(out, ref) < 1e-5);
}

TEST_CASE("sta attention: zero params scale the input by exactly 0.25") {
    Rng rng(13);
    ParamRegistry<float> reg;
    auto p = make_sta_params(reg, "sta", 4, rng);
    zero_params(reg);
    auto x = random_tensor<float>({2, 4, 4, 4}, rng);
    auto out = sta_attention<float>(nullptr, x, p);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(0.25F * x.data()[i]).epsilon(1e-6));
    }
}

TEST_CASE("sta attention: |out| <= |x| elementwise and oracle equivalence") {
    Rng rng(14);
    for (int rep = 0; rep < 5; ++rep) {
        ParamRegistry<float> reg;
        auto p = make_sta_params(reg, "sta", 4, rng);
        auto x = random_tensor<float>({2, 4, 4, 4}, rng, -2, 2);
        auto out = sta_attention<float>(nullptr, x, p);
        for (std::size_t i = 0; i < out.numel(); ++i) {
            CHECK(std::abs(out.data()[i]) <= std::abs(x.data()[i]) + 1e-6F);
        }
        auto ref = oracle::sta_ref(oracle::from_tensor(x), sta_ref_params(p));
        CHECK(max_abs_diff(out, ref) < 1e-5);
    }
}

TEST_CASE("context memory update: zeroed attentions leave C and scale M by 0.25") {
    Rng rng(15);
    ParamRegistry<float> reg;
    auto ta = make_ta_params(reg, "ta", 2, 3, rng);
    auto sta = make_sta_params(reg, "sta", 2, rng);
    zero_params(reg);
    LayerState<float> st{random_tensor<float>({1, 2, 4, 4}, rng),
                         random_tensor<float>({1, 2, 4, 4}, rng)};
    auto m = random_tensor<float>({1, 2, 4, 4}, rng);
    auto [cond, m_cond] = context_memory_update<float>(nullptr, st, m, &ta, &sta);
    for (std::size_t i = 0; i < st.c.numel(); ++i) {
        CHECK(cond.c.data()[i] == st.c.data()[i]);
        CHECK(m_cond.data()[i] == doctest::Approx(0.25F * m.data()[i]).epsilon(1e-6));
    }
}

TEST_CASE("context memory update matches the chained oracle") {
    Rng rng(16);
    ParamRegistry<float> reg;
    auto ta = make_ta_params(reg, "ta", 3, 3, rng);
    auto sta = make_sta_params(reg, "sta", 3, rng);
    LayerState<float> st{random_tensor<float>({2, 3, 4, 4}, rng),
                         random_tensor<float>({2, 3, 4, 4}, rng)};
    auto m = random_tensor<float>({2, 3, 4, 4}, rng);
    auto [cond, m_cond] = context_memory_update<float>(nullptr, st, m, &ta, &sta);

    auto c_ref = oracle::from_tensor(st.c);
    auto ta_out = oracle::ta_ref(c_ref, ta_ref_params(ta));
    for (std::size_t i = 0; i < c_ref.v.size(); ++i) c_ref.v[i] += ta_out.v[i];
    auto m_ref = oracle::sta_ref(oracle::from_tensor(m), sta_ref_params(sta));
    CHECK(max_abs_diff(cond.c, c_ref) < 1e-5);
    CHECK(max_abs_diff(m_cond, m_ref) < 1e-5);
}

TEST_CASE("ghu: saturated switch selects P or the previous state") {
    Rng rng(17);
    ParamRegistry<float> reg;
    auto p = make_ghu_params(reg, "ghu", 2, 2, 3, rng);
    auto x = random_tensor<float>({1, 2, 4, 4}, rng);
    auto z = random_tensor<float>({1, 2, 4, 4}, rng);

    std::fill(p.sx_b.vec().begin(), p.sx_b.vec().end(), 80.0F);  // S -> 1
    auto z1 = ghu_forward<float>(nullptr, x, z, p);
    auto pt = oracle::zip_ref(
        oracle::conv2d_ref(oracle::from_tensor(x), oracle::from_tensor(p.px_w),
                           oracle::from_tensor(p.px_b), 1),
        oracle::conv2d_ref(oracle::from_tensor(z), oracle::from_tensor(p.pz_w),
                           oracle::from_tensor(p.pz_b), 1),
        [](double a, double b) { return std::tanh(a + b); });
    CHECK(max_abs_diff(z1, pt) < 1e-4);

    std::fill(p.sx_b.vec().begin(), p.sx_b.vec().end(), -80.0F);  // S -> 0
    auto z0 = ghu_forward<float>(nullptr, x, z, p);
    for (std::size_t i = 0; i < z.numel(); ++i) {
        CHECK(z0.data()[i] == doctest::Approx(z.data()[i]).epsilon(1e-5));
    }
}

TEST_CASE("ghu: output lies between P and z_prev elementwise; oracle equivalence") {
    Rng rng(18);
    for (int rep = 0; rep < 5; ++rep) {
        ParamRegistry<float> reg;
        auto p = make_ghu_params(reg, "ghu", 3, 3, 3, rng);
        auto x = random_tensor<float>({2, 3, 4, 4}, rng, -2, 2);
        auto z = random_tensor<float>({2, 3, 4, 4}, rng, -2, 2);
        auto out = ghu_forward<float>(nullptr, x, z, p);

        oracle::GhuRefParams rp{
            oracle::from_tensor(p.px_w), oracle::from_tensor(p.px_b),
            oracle::from_tensor(p.pz_w), oracle::from_tensor(p.pz_b),
            oracle::from_tensor(p.sx_w), oracle::from_tensor(p.sx_b),
            oracle::from_tensor(p.sz_w), oracle::from_tensor(p.sz_b)};
        auto ref = oracle::ghu_ref(oracle::from_tensor(x), oracle::from_tensor(z), rp);
        CHECK(max_abs_diff(out, ref) < 1e-5);

        auto pt = oracle::zip_ref(
            oracle::conv2d_ref(oracle::from_tensor(x), rp.px_w, rp.px_b, 1),
            oracle::conv2d_ref(oracle::from_tensor(z), rp.pz_w, rp.pz_b, 1),
            [](double a, double b) { return std::tanh(a + b); });
        for (std::size_t i = 0; i < out.numel(); ++i) {
            const double lo = std::min(pt.v[i], static_cast<double>(z.data()[i]));
            const double hi = std::max(pt.v[i], static_cast<double>(z.data()[i]));
            CHECK(out.data()[i] >= lo - 1e-6);
            CHECK(out.data()[i] <= hi + 1e-6);
        }
    }
}

TEST_CASE("context lstm: zero params give zero outputs") {
    Rng rng(19);
    ParamRegistry<float> reg;
    auto p = make_causal_params(reg, "cell", 2, 2, 2, 3, rng);
    auto ta = make_ta_params(reg, "ta", 2, 3, rng);
    auto sta = make_sta_params(reg, "sta", 2, rng);
    zero_params(reg);
    auto x = Tensor<float>::zeros({1, 2, 4, 4});
    LayerState<float> st{Tensor<float>::zeros({1, 2, 4, 4}),
                         Tensor<float>::zeros({1, 2, 4, 4})};
    auto m = Tensor<float>::zeros({1, 2, 4, 4});
    auto [out, m_new] = context_lstm_forward<float>(nullptr, x, st, m, p, &ta, &sta);
    for (std::size_t i = 0; i < out.h.numel(); ++i) {
        CHECK(out.h.data()[i] == 0.0F);
        CHECK(out.c.data()[i] == 0.0F);
        CHECK(m_new.data()[i] == 0.0F);
    }
}

TEST_CASE("context lstm with zeroed attentions equals causal on 0.25 M") {
    Rng rng(20);
    ParamRegistry<float> reg;
    auto p = make_causal_params(reg, "cell", 2, 2, 2, 3, rng);
    ParamRegistry<float> attn_reg;
    auto ta = make_ta_params(attn_reg, "ta", 2, 3, rng);
    auto sta = make_sta_params(attn_reg, "sta", 2, rng);
    zero_params(attn_reg);

    auto x = random_tensor<float>({1, 2, 4, 4}, rng);
    LayerState<float> st{random_tensor<float>({1, 2, 4, 4}, rng),
                         random_tensor<float>({1, 2, 4, 4}, rng)};
    auto m = random_tensor<float>({1, 2, 4, 4}, rng);

    auto [out_ctx, m_ctx] = context_lstm_forward<float>(nullptr, x, st, m, p, &ta, &sta);
    Tensor<float> m_scaled(m.dims());
    for (std::size_t i = 0; i < m.numel(); ++i) m_scaled.data()[i] = 0.25F * m.data()[i];
    auto [out_causal, m_causal] = causal_lstm_forward<float>(nullptr, x, st, m_scaled, p);
    CHECK(max_abs_diff(out_ctx.h, oracle::from_tensor(out_causal.h)) < 1e-6);
    CHECK(max_abs_diff(out_ctx.c, oracle::from_tensor(out_causal.c)) < 1e-6);
    CHECK(max_abs_diff(m_ctx, oracle::from_tensor(m_causal)) < 1e-6);
}

TEST_CASE("context lstm matches the end-to-end scalar-loop oracle") {
    Rng rng(21);
    for (int rep = 0; rep < 5; ++rep) {
        ParamRegistry<float> reg;
        auto p = make_causal_params(reg, "cell", 2, 2, 2, 3, rng);
        auto ta = make_ta_params(reg, "ta", 2, 3, rng);
        auto sta = make_sta_params(reg, "sta", 2, rng);
        auto x = random_tensor<float>({2, 2, 4, 4}, rng);
        LayerState<float> st{random_tensor<float>({2, 2, 4, 4}, rng),
                             random_tensor<float>({2, 2, 4, 4}, rng)};
        auto m = random_tensor<float>({2, 2, 4, 4}, rng);
        auto [out, m_new] = context_lstm_forward<float>(nullptr, x, st, m, p, &ta, &sta);

        auto c_ref = oracle::from_tensor(st.c);
        auto ta_out = oracle::ta_ref(c_ref, ta_ref_params(ta));
        for (std::size_t i = 0; i < c_ref.v.size(); ++i) c_ref.v[i] += ta_out.v[i];
        auto m_ref = oracle::sta_ref(oracle::from_tensor(m), sta_ref_params(sta));
        auto ref = oracle::causal_ref(oracle::from_tensor(x), oracle::from_tensor(st.h),
                                      c_ref, m_ref, causal_ref_params(p));
        CHECK(max_abs_diff(out.h, ref.h) < 1e-5);
        CHECK(max_abs_diff(out.c, ref.c) < 1e-5);
        CHECK(max_abs_diff(m_new, ref.m) < 1e-5);
    }
}

TEST_CASE("every cell passes finite-difference jacobian checks on 1x2x4x4") {
    Rng rng(22);

    auto check_params = [](ParamRegistry<double>& reg,
                           const std::function<Tensor<double>(Graph<double>*)>& fwd) {
        Graph<double> g;
        g.backward(sum_all(&g, fwd(&g)));
        auto loss_value = [&]() {
            auto out = fwd(nullptr);
            double acc = 0;
            for (std::size_t i = 0; i < out.numel(); ++i) acc += out.data()[i];
            return acc;
        };
        for (auto& p : reg.params()) {
            auto fd = oracle::fd_grad(p, loss_value);
            std::vector<double> an(p.grad_vec().begin(), p.grad_vec().end());
            auto res = oracle::compare_grads(an, fd, 1e-2);
            CHECK(res.ok);
            p.zero_grad();
        }
    };

    auto x = random_tensor<double>({1, 2, 4, 4}, rng);
    LayerState<double> st{random_tensor<double>({1, 2, 4, 4}, rng),
                          random_tensor<double>({1, 2, 4, 4}, rng)};
    auto m = random_tensor<double>({1, 2, 4, 4}, rng);
    auto z = random_tensor<double>({1, 2, 4, 4}, rng);

    {
        ParamRegistry<double> reg;
        auto p = make_convlstm_params(reg, "c", 2, 2, 3, rng);
        check_params(reg, [&](Graph<double>* g) {
            auto out = convlstm_forward(g, x, st, p);
            return add(g, sum_all(g, out.h), sum_all(g, out.c));
        });
    }
    {
        ParamRegistry<double> reg;
        auto p = make_causal_params(reg, "c", 2, 2, 2, 3, rng);
        check_params(reg, [&](Graph<double>* g) {
            auto [out, mn] = causal_lstm_forward(g, x, st, m, p);
            return add(g, add(g, sum_all(g, out.h), sum_all(g, out.c)),
                       sum_all(g, mn));
        });
    }
    {
        ParamRegistry<double> reg;
        auto p = make_st_params(reg, "c", 2, 2, 2, 3, rng);
        check_params(reg, [&](Graph<double>* g) {
            auto [out, mn] = st_lstm_forward(g, x, st, m, p);
            return add(g, add(g, sum_all(g, out.h), sum_all(g, out.c)),
                       sum_all(g, mn));
        });
    }
    {
        ParamRegistry<double> reg;
        auto p = make_ta_params(reg, "c", 2, 3, rng);
        check_params(reg, [&](Graph<double>* g) {
            return sum_all(g, temporal_attention(g, x, p));
        });
    }
    {
        ParamRegistry<double> reg;
        auto p = make_sta_params(reg, "c", 2, rng);
        check_params(reg, [&](Graph<double>* g) {
            return sum_all(g, sta_attention(g, x, p));
        });
    }
    {
        ParamRegistry<double> reg;
        auto p = make_ghu_params(reg, "c", 2, 2, 3, rng);
        check_params(reg, [&](Graph<double>* g) {
            return sum_all(g, ghu_forward(g, x, z, p));
        });
    }
}
