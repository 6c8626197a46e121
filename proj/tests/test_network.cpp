#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <limits>

#include "oracles.hpp"
#include "stpredict/evaluation.hpp"
#include "stpredict/network.hpp"
#include "stpredict/rng.hpp"

using namespace stpredict;

namespace {

VariantSpec desk_variant(BaseCell base, bool ta, bool sta, bool ghu) {
    VariantSpec v;
    v.base = base;
    v.ta = ta;
    v.sta = sta;
    v.ghu = ghu;
    v.channels = {8, 8};
    v.ghu_channels = 8;
    return v;
}

Tensor<float> random_windows(std::size_t n, std::size_t l, std::size_t d,
                             std::size_t side, Rng& rng) {
    Tensor<float> t({n, l, d, side, side});
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t.data()[i] = static_cast<float>(rng.uniform(-1, 1));
    }
    return t;
}

// Rollout probe that returns its input unchanged.
struct CopyModel {
    void init_states(std::size_t, std::vector<LayerState<float>>&,
                     SharedState<float>&) const {}
    Tensor<float> step(Graph<float>*, const Tensor<float>& frame,
                       std::vector<LayerState<float>>&, SharedState<float>&) const {
        return frame.detached();
    }
};

std::size_t conv_params(std::size_t cout, std::size_t cin, std::size_t k) {
    return cout * cin * k * k + cout;
}

}  // namespace

TEST_CASE("variant validation and the ablation table rows") {
    auto rows = default_ablation_variants({8, 8}, 8);
    REQUIRE(rows.size() == 7);
    CHECK(rows[0].label() == "ConvLSTM");
    CHECK(rows[1].label() == "ST-ConvLSTM");
    CHECK(rows[2].label() == "CA-ConvLSTM");
    CHECK(rows[3].label() == "CA-ConvLSTM+T.Atten");
    CHECK(rows[4].label() == "CA-ConvLSTM+S.T.Atten");
    CHECK(rows[5].label() == "CA-ConvLSTM+CC.Atten");
    CHECK(rows[6].label() == "CA-ConvLSTM+CC.Atten+GHU");

    VariantSpec bad = desk_variant(BaseCell::ConvLstm, false, false, true);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(build_model<float>(bad, 4, 8, 0), ConfigError);
    VariantSpec odd = desk_variant(BaseCell::CaConvLstm, true, true, true);
    CHECK_THROWS_AS(build_model<float>(odd, 4, 7, 0), ConfigError);
}

TEST_CASE("two builds from the same seed are bit-identical") {
    auto v = desk_variant(BaseCell::CaConvLstm, true, true, true);
    auto a = build_model<float>(v, 4, 8, 42);
    auto b = build_model<float>(v, 4, 8, 42);
    REQUIRE(a.params().size() == b.params().size());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        CHECK(a.params()[i].vec() == b.params()[i].vec());
    }
    auto c = build_model<float>(v, 4, 8, 43);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        if (a.params()[i].vec() != c.params()[i].vec()) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("desk parameter count matches the closed-form sum") {
    auto v = desk_variant(BaseCell::CaConvLstm, true, true, true);
    auto model = build_model<float>(v, 4, 8, 1);

    std::size_t expected = 0;
    expected += conv_params(8, 4, 1);  // input projection
    for (int layer = 0; layer < 2; ++layer) {
        expected += conv_params(24, 24, 3);  // w1 over [x, h, c]
        expected += conv_params(24, 24, 3);  // w2 over [x, c, m]
        expected += conv_params(8, 8, 1);    // w3
        expected += conv_params(8, 24, 3);   // w4 over [x, c, m]
        expected += conv_params(8, 16, 1);   // w5 over [c, m]
        // temporal attention: modulation conv + bottleneck MLP (8 -> 2 -> 8)
        expected += conv_params(8, 8, 3);
        expected += 2 * 8 + 2;
        expected += 8 * 2 + 8;
        // sta: shared MLP (8 -> 1 -> 8) + 7x7 spatial conv on 2 pooled maps
        expected += 1 * 8 + 1;
        expected += 8 * 1 + 8;
        expected += conv_params(1, 2, 7);
    }
    expected += 4 * conv_params(8, 8, 3);  // ghu px/pz/sx/sz
    expected += conv_params(4, 8, 1);      // output projection

    CHECK(count_params(model) == expected);

    // registry total equals the sum over named entries (no orphan tensors)
    std::size_t named = 0;
    for (const auto& p : model.registry().params()) named += p.numel();
    CHECK(named == count_params(model));
}

TEST_CASE("paper-config parameter counts (reported by the acceptance suite)") {
    VariantSpec proposed;  // defaults: CAConvLSTM, [128,64,64,64], ghu 128
    proposed.ta = proposed.sta = proposed.ghu = true;
    auto full = build_model<float>(proposed, 61, 16, 0);
    VariantSpec conv;
    conv.base = BaseCell::ConvLstm;
    auto base = build_model<float>(conv, 61, 16, 0);
    // sanity only here: proposed must be the larger architecture
    CHECK(count_params(full) > count_params(base));
    CHECK(count_params(base) > 1000000);
    std::printf("paper-config params: convlstm=%zu proposed=%zu\n",
                count_params(base), count_params(full));
}

TEST_CASE("rollout copy dynamics: teacher forcing then frozen tail") {
    Rng rng(3);
    const std::size_t J = 4, K = 3, L = J + K;
    auto frames = random_windows(2, L, 3, 4, rng);
    CopyModel copy;
    auto preds = rollout<float, CopyModel>(nullptr, copy, frames, J, K);
    REQUIRE(preds.size() == J + K - 1);
    // prediction of frame t (= s+2) equals frame t-1 while t <= J+1
    for (std::size_t s = 0; s < J; ++s) {
        auto expect = frame_at(frames, s);
        CHECK(preds[s].vec() == expect.vec());
    }
    // autoregressive tail stays frozen at frame J
    auto frozen = frame_at(frames, J - 1);
    for (std::size_t s = J; s < preds.size(); ++s) {
        CHECK(preds[s].vec() == frozen.vec());
    }
}

TEST_CASE("rollout K=0 returns exactly J-1 teacher-forced predictions") {
    Rng rng(4);
    auto frames = random_windows(1, 6, 2, 4, rng);
    auto model = build_model<float>(desk_variant(BaseCell::CaConvLstm, false, false, false),
                                    2, 4, 7);
    auto preds = rollout(nullptr, model, frames, 6, 0);
    CHECK(preds.size() == 5);
}

TEST_CASE("rollout rejects sequences shorter than J") {
    Rng rng(5);
    auto frames = random_windows(1, 4, 2, 4, rng);
    auto model = build_model<float>(desk_variant(BaseCell::CaConvLstm, false, false, false),
                                    2, 4, 7);
    CHECK_THROWS_AS(rollout(nullptr, model, frames, 6, 1), ShapeError);
}

TEST_CASE("zero-parameter model predicts zero and scores NMSE 1") {
    Rng rng(6);
    auto frames = random_windows(2, 8, 2, 4, rng);
    auto model = build_model<float>(desk_variant(BaseCell::CaConvLstm, true, true, true),
                                    2, 4, 7);
    for (auto& p : model.params()) std::fill(p.vec().begin(), p.vec().end(), 0.0F);
    auto preds = rollout(nullptr, model, frames, 4, 4);
    for (const auto& pred : preds) {
        for (std::size_t i = 0; i < pred.numel(); ++i) CHECK(pred.data()[i] == 0.0F);
    }
    auto summary = evaluate_model(model, frames, 4, 4, 1);
    CHECK(summary.nmse_linear == doctest::Approx(1.0));
    CHECK(summary.nmse_db == doctest::Approx(0.0));
}

TEST_CASE("teacher-forced steps never read frames past J (NaN poisoning)") {
    Rng rng(7);
    const std::size_t J = 4, K = 4, L = 8;
    auto frames = random_windows(1, L, 2, 4, rng);
    const std::size_t chunk = 2 * 4 * 4;
    for (std::size_t t = J; t < L; ++t) {
        for (std::size_t i = 0; i < chunk; ++i) {
            frames.data()[t * chunk + i] = std::numeric_limits<float>::quiet_NaN();
        }
    }
    auto model = build_model<float>(desk_variant(BaseCell::CaConvLstm, true, true, true),
                                    2, 4, 9);
    auto preds = rollout(nullptr, model, frames, J, K);
    for (const auto& pred : preds) {
        for (std::size_t i = 0; i < pred.numel(); ++i) {
            CHECK(std::isfinite(pred.data()[i]));
        }
    }
}

TEST_CASE("same seed and data give bit-identical rollouts") {
    Rng rng(8);
    auto frames = random_windows(2, 6, 3, 8, rng);
    auto v = desk_variant(BaseCell::CaConvLstm, true, true, true);
    auto m1 = build_model<float>(v, 3, 8, 11);
    auto m2 = build_model<float>(v, 3, 8, 11);
    auto p1 = rollout(nullptr, m1, frames, 3, 3);
    auto p2 = rollout(nullptr, m2, frames, 3, 3);
    for (std::size_t s = 0; s < p1.size(); ++s) CHECK(p1[s].vec() == p2[s].vec());
}

TEST_CASE("gradients reach layer-0 params through a GHU rollout") {
    Rng rng(9);
    auto frames = random_windows(2, 6, 3, 8, rng);
    auto v = desk_variant(BaseCell::CaConvLstm, true, true, true);
    auto model = build_model<float>(v, 3, 8, 13);
    Graph<float> g;
    auto preds = rollout(&g, model, frames, 3, 3);
    Tensor<float> loss;
    for (auto& p : preds) {
        auto s = mse_mean(&g, p, frame_at(frames, 1));
        loss = loss.defined() ? add(&g, loss, s) : s;
    }
    g.backward(loss);
    double norm = 0;
    const auto& names = model.registry().names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i].rfind("layer0.", 0) == 0) {
            for (const float v2 : model.params()[i].grad_vec()) {
                norm += static_cast<double>(v2) * v2;
            }
        }
    }
    CHECK(norm > 0.0);
}

TEST_CASE("flop counting formulas") {
    // single conv example: 3x3, 4->8 channels on 16x16
    CHECK(flops_conv2d(4, 8, 3, 16, 16, 1) ==
          2ull * (3 * 3 * 4) * 8 * 16 * 16 + 8ull * 16 * 16);
    // one 1x1 conv with bias has cout*(cin+1) params: 2->3 gives 9
    auto w = Tensor<float>::zeros({3, 2, 1, 1});
    auto b = Tensor<float>::zeros({3});
    CHECK(w.numel() + b.numel() == 9);

    VariantSpec v = desk_variant(BaseCell::CaConvLstm, true, true, true);
    const auto f20 = count_flops(v, 4, 8, 20, 1);
    const auto f10 = count_flops(v, 4, 8, 10, 1);
    CHECK(f20 > f10);
    // per-step cost is constant, so FLOPs scale with L-1
    CHECK(f20 * 9 == f10 * 19);
    CHECK(count_flops(v, 4, 8, 20, 2) == 2 * f20);
}

TEST_CASE("checkpoint round trip is exact; mismatches are explicit") {
    Rng rng(10);
    auto v = desk_variant(BaseCell::CaConvLstm, true, false, true);
    auto model = build_model<float>(v, 3, 8, 17);
    const std::string path = "ckpt_roundtrip.stpc";
    save_checkpoint(model, path);
    auto loaded = load_checkpoint<float>(path);
    CHECK(loaded.variant == model.variant);
    REQUIRE(loaded.params().size() == model.params().size());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        CHECK(loaded.params()[i].vec() == model.params()[i].vec());
    }

    // truncated blob
    {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        std::fseek(f, 0, SEEK_END);
        const long full = std::ftell(f);
        std::fseek(f, 0, SEEK_SET);
        std::vector<char> buf(static_cast<std::size_t>(full - 64));
        REQUIRE(std::fread(buf.data(), 1, buf.size(), f) == buf.size());
        std::fclose(f);
        std::FILE* g2 = std::fopen("ckpt_truncated.stpc", "wb");
        std::fwrite(buf.data(), 1, buf.size(), g2);
        std::fclose(g2);
        CHECK_THROWS_AS(load_checkpoint<float>("ckpt_truncated.stpc"), FormatError);
    }
    // bad magic
    {
        std::FILE* g2 = std::fopen("ckpt_badmagic.stpc", "wb");
        std::fwrite("NOPE", 1, 4, g2);
        std::fclose(g2);
        CHECK_THROWS_AS(load_checkpoint<float>("ckpt_badmagic.stpc"), FormatError);
    }
}
