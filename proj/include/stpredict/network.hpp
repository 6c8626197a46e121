#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "stpredict/cells.hpp"

namespace stpredict {

enum class BaseCell { ConvLstm, StConvLstm, CaConvLstm };

std::string to_string(BaseCell b);
BaseCell base_cell_from_string(const std::string& s);

// One row of the ablation grid. ta/sta/ghu are only meaningful on the
// CaConvLstm base.
struct VariantSpec {
    BaseCell base = BaseCell::CaConvLstm;
    bool ta = false;
    bool sta = false;
    bool ghu = false;
    std::vector<int> channels = {128, 64, 64, 64};
    int ghu_channels = 128;
    int kernel = 3;

    void validate() const;
    std::string label() const;
    bool operator==(const VariantSpec&) const = default;
};

// The seven rows of the ablation table, in presentation order.
std::vector<VariantSpec> default_ablation_variants(const std::vector<int>& channels,
                                                   int ghu_channels);

template <typename T>
struct ModelLayer {
    std::size_t channels = 0;
    ConvLstmParams<T> conv;
    CausalLstmParams<T> causal;
    StLstmParams<T> st;
    std::optional<TemporalAttentionParams<T>> ta;
    std::optional<StaAttentionParams<T>> sta;
    Tensor<T> m_out_adapt_w, m_out_adapt_b;  // lifts cell M back to the threaded width
};

template <typename T>
class Model {
  public:
    Model() = default;

    VariantSpec variant;
    std::size_t input_channels = 0;
    std::size_t spatial = 0;

    Tensor<T> input_proj_w, input_proj_b;    // 1x1, D -> channels[0]
    Tensor<T> output_proj_w, output_proj_b;  // 1x1, channels.back() -> D
    std::vector<ModelLayer<T>> layers;
    std::optional<GhuParams<T>> ghu;

    ParamRegistry<T>& registry() { return registry_; }
    const ParamRegistry<T>& registry() const { return registry_; }
    std::vector<Tensor<T>>& params() { return registry_.params(); }
    const std::vector<Tensor<T>>& params() const { return registry_.params(); }

    std::size_t memory_channels() const {
        return static_cast<std::size_t>(variant.channels.front());
    }

    // One recurrent step; `frame` is [B, D, H, W]. State vectors are resized
    // and zero-initialized on first use.
    Tensor<T> step(Graph<T>* g, const Tensor<T>& frame,
                   std::vector<LayerState<T>>& states, SharedState<T>& shared) const;

    void init_states(std::size_t batch, std::vector<LayerState<T>>& states,
                     SharedState<T>& shared) const;

    Model clone() const;

  private:
    ParamRegistry<T> registry_;

    template <typename U>
    friend Model<U> build_model(const VariantSpec&, std::size_t, std::size_t,
                                std::uint64_t);
};

template <typename T>
Model<T> build_model(const VariantSpec& variant, std::size_t input_channels,
                     std::size_t spatial, std::uint64_t seed);

// frames [B, L, D, H, W] -> untracked copy of step t as [B, D, H, W].
template <typename T>
Tensor<T> frame_at(const Tensor<T>& frames, std::size_t t);

// Teacher-forced plus autoregressive rollout over a window batch
// [B, L, D, H, W]; returns the L-1 predictions aligned to targets t=2..J+K.
// Input to the step producing x_t is the ground truth frame while t-1 <= J
// and the previous prediction afterwards. ModelT provides init_states/step.
template <typename T, typename ModelT = Model<T>>
std::vector<Tensor<T>> rollout(std::type_identity_t<Graph<T>*> g, const ModelT& model,
                               const Tensor<T>& frames, std::size_t J,
                               std::size_t K) {
    if (frames.ndim() != 5) {
        throw ShapeError("rollout expects [B,L,D,H,W], got " + format_dims(frames.dims()));
    }
    const std::size_t L = frames.dim(1);
    if (J < 1) throw ShapeError("rollout: J must be >= 1");
    if (L < J) {
        throw ShapeError("rollout: sequence length " + std::to_string(L) +
                         " shorter than J=" + std::to_string(J));
    }
    const std::size_t steps = J + K - 1;
    std::vector<LayerState<T>> states;
    SharedState<T> shared;
    model.init_states(frames.dim(0), states, shared);

    std::vector<Tensor<T>> preds;
    preds.reserve(steps);
    Tensor<T> prev_pred;
    for (std::size_t s = 0; s < steps; ++s) {
        Tensor<T> input = (s < J) ? frame_at(frames, s) : prev_pred;
        prev_pred = model.step(g, input, states, shared);
        preds.push_back(prev_pred);
    }
    return preds;
}

// FLOP conventions: one multiply-add counts 2 FLOPs, a bias add or an
// activation counts 1 FLOP per element.
std::size_t flops_conv2d(std::size_t cin, std::size_t cout, std::size_t kernel,
                         std::size_t h, std::size_t w, std::size_t batch);

template <typename T>
std::size_t count_params(const Model<T>& model);

// Analytic multiply-add count over one rollout of L frames (L-1 cell steps),
// 1 MAC = 2 FLOPs, elementwise/activation = 1 FLOP per element.
std::size_t count_flops(const VariantSpec& variant, std::size_t input_channels,
                        std::size_t spatial, std::size_t seq_len, std::size_t batch);

// Checkpoint: "STPC", version byte, u32 JSON header length, UTF-8 JSON
// (variant, geometry, parameter manifest), then raw little-endian f32 blobs
// in manifest order.
template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path);
template <typename T>
Model<T> load_checkpoint(const std::string& path);

std::string variant_to_json(const VariantSpec& v);
VariantSpec variant_from_json_text(const std::string& text);

}  // namespace stpredict
