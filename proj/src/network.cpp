#include "stpredict/network.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace stpredict {

using nlohmann::json;

std::string to_string(BaseCell b) {
    switch (b) {
        case BaseCell::ConvLstm: return "ConvLSTM";
        case BaseCell::StConvLstm: return "STConvLSTM";
        case BaseCell::CaConvLstm: return "CAConvLSTM";
    }
    return "?";
}

BaseCell base_cell_from_string(const std::string& s) {
    if (s == "ConvLSTM") return BaseCell::ConvLstm;
    if (s == "STConvLSTM") return BaseCell::StConvLstm;
    if (s == "CAConvLSTM") return BaseCell::CaConvLstm;
    throw ConfigError("unknown base cell '" + s + "'");
}

void VariantSpec::validate() const {
    if (channels.empty()) throw ConfigError("variant: channels must be non-empty");
    for (int c : channels) {
        if (c <= 0) throw ConfigError("variant: channel widths must be positive");
    }
    if (kernel != 1 && kernel != 3 && kernel != 7) {
        throw ConfigError("variant: kernel must be 1, 3 or 7");
    }
    if (base != BaseCell::CaConvLstm && (ta || sta || ghu)) {
        throw ConfigError("variant: ta/sta/ghu require the CAConvLSTM base, got " +
                          to_string(base));
    }
    if (ghu && ghu_channels <= 0) {
        throw ConfigError("variant: ghu_channels must be positive");
    }
    if (ghu && channels.size() < 2) {
        throw ConfigError("variant: the GHU sits between layers 1 and 2; need >= 2 layers");
    }
}

std::string VariantSpec::label() const {
    if (base == BaseCell::ConvLstm) return "ConvLSTM";
    if (base == BaseCell::StConvLstm) return "ST-ConvLSTM";
    std::string s = "CA-ConvLSTM";
    if (ta && sta) {
        s += "+CC.Atten";
    } else if (ta) {
        s += "+T.Atten";
    } else if (sta) {
        s += "+S.T.Atten";
    }
    if (ghu) s += "+GHU";
    return s;
}

std::vector<VariantSpec> default_ablation_variants(const std::vector<int>& channels,
                                                   int ghu_channels) {
    std::vector<VariantSpec> out;
    auto mk = [&](BaseCell base, bool ta, bool sta, bool ghu) {
        VariantSpec v;
        v.base = base;
        v.ta = ta;
        v.sta = sta;
        v.ghu = ghu;
        v.channels = channels;
        v.ghu_channels = ghu_channels;
        out.push_back(v);
    };
    mk(BaseCell::ConvLstm, false, false, false);
    mk(BaseCell::StConvLstm, false, false, false);
    mk(BaseCell::CaConvLstm, false, false, false);
    mk(BaseCell::CaConvLstm, true, false, false);
    mk(BaseCell::CaConvLstm, false, true, false);
    mk(BaseCell::CaConvLstm, true, true, false);
    mk(BaseCell::CaConvLstm, true, true, true);
    return out;
}

template <typename T>
Model<T> build_model(const VariantSpec& variant, std::size_t input_channels,
                     std::size_t spatial, std::uint64_t seed) {
    variant.validate();
    if (input_channels < 1) throw ConfigError("build_model: input_channels must be >= 1");
    if (spatial < 2 || spatial % 2 != 0) {
        throw ConfigError("build_model: spatial extent must be even and >= 2, got " +
                          std::to_string(spatial));
    }

    Model<T> model;
    model.variant = variant;
    model.input_channels = input_channels;
    model.spatial = spatial;
    Rng rng(Rng::derive(seed, 0xC0DE));
    auto& reg = model.registry();

    const std::size_t c0 = static_cast<std::size_t>(variant.channels[0]);
    const std::size_t cm = c0;
    const int k = variant.kernel;

    model.input_proj_w = reg.create("input_proj.weight", {c0, input_channels, 1, 1});
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(input_channels));
        T* p = model.input_proj_w.data();
        for (std::size_t i = 0; i < model.input_proj_w.numel(); ++i) {
            p[i] = static_cast<T>(rng.uniform(-bound, bound));
        }
    }
    model.input_proj_b = reg.create("input_proj.bias", {c0});

    std::size_t cx = c0;  // channels entering each layer
    for (std::size_t li = 0; li < variant.channels.size(); ++li) {
        const std::size_t c = static_cast<std::size_t>(variant.channels[li]);
        ModelLayer<T> layer;
        layer.channels = c;
        const std::string prefix = "layer" + std::to_string(li);
        switch (variant.base) {
            case BaseCell::ConvLstm:
                layer.conv = make_convlstm_params(reg, prefix, cx, c, k, rng);
                break;
            case BaseCell::StConvLstm:
                layer.st = make_st_params(reg, prefix, cx, c, cm, k, rng);
                break;
            case BaseCell::CaConvLstm:
                layer.causal = make_causal_params(reg, prefix, cx, c, cm, k, rng);
                if (variant.ta) {
                    layer.ta = make_ta_params(reg, prefix + ".ta", c, k, rng);
                }
                if (variant.sta) {
                    layer.sta = make_sta_params(reg, prefix + ".sta", cm, rng);
                }
                break;
        }
        if (variant.base != BaseCell::ConvLstm && c != cm) {
            layer.m_out_adapt_w = reg.create(prefix + ".m_out_adapter.weight", {cm, c, 1, 1});
            const double bound = 1.0 / std::sqrt(static_cast<double>(c));
            T* p = layer.m_out_adapt_w.data();
            for (std::size_t i = 0; i < layer.m_out_adapt_w.numel(); ++i) {
                p[i] = static_cast<T>(rng.uniform(-bound, bound));
            }
            layer.m_out_adapt_b = reg.create(prefix + ".m_out_adapter.bias", {cm});
        }
        model.layers.push_back(std::move(layer));

        if (li == 0 && variant.ghu) {
            model.ghu = make_ghu_params(reg, "ghu", c,
                                        static_cast<std::size_t>(variant.ghu_channels),
                                        k, rng);
            cx = static_cast<std::size_t>(variant.ghu_channels);
        } else {
            cx = c;
        }
    }

    const std::size_t ctop = static_cast<std::size_t>(variant.channels.back());
    model.output_proj_w = reg.create("output_proj.weight", {input_channels, ctop, 1, 1});
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(ctop));
        T* p = model.output_proj_w.data();
        for (std::size_t i = 0; i < model.output_proj_w.numel(); ++i) {
            p[i] = static_cast<T>(rng.uniform(-bound, bound));
        }
    }
    model.output_proj_b = reg.create("output_proj.bias", {input_channels});
    return model;
}

template <typename T>
void Model<T>::init_states(std::size_t batch, std::vector<LayerState<T>>& states,
                           SharedState<T>& shared) const {
    states.clear();
    for (const auto& layer : layers) {
        LayerState<T> st;
        st.h = Tensor<T>::zeros({batch, layer.channels, spatial, spatial});
        st.c = Tensor<T>::zeros({batch, layer.channels, spatial, spatial});
        states.push_back(st);
    }
    if (variant.base != BaseCell::ConvLstm) {
        shared.m = Tensor<T>::zeros({batch, memory_channels(), spatial, spatial});
    }
    if (variant.ghu) {
        shared.z = Tensor<T>::zeros(
            {batch, static_cast<std::size_t>(variant.ghu_channels), spatial, spatial});
    }
}

template <typename T>
Tensor<T> Model<T>::step(Graph<T>* g, const Tensor<T>& frame,
                         std::vector<LayerState<T>>& states,
                         SharedState<T>& shared) const {
    auto x = conv2d(g, frame, input_proj_w, input_proj_b, 0);
    Tensor<T> m = shared.m;  // topmost memory of the previous step enters layer 0
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const auto& layer = layers[li];
        switch (variant.base) {
            case BaseCell::ConvLstm: {
                states[li] = convlstm_forward(g, x, states[li], layer.conv);
                x = states[li].h;
                break;
            }
            case BaseCell::StConvLstm: {
                auto [st, m_new] = st_lstm_forward(g, x, states[li], m, layer.st);
                states[li] = st;
                m = m_new;
                x = st.h;
                break;
            }
            case BaseCell::CaConvLstm: {
                auto [st, m_new] = context_lstm_forward(
                    g, x, states[li], m, layer.causal,
                    layer.ta ? &*layer.ta : nullptr, layer.sta ? &*layer.sta : nullptr);
                states[li] = st;
                m = m_new;
                x = st.h;
                break;
            }
        }
        if (layer.m_out_adapt_w.defined()) {
            m = conv2d(g, m, layer.m_out_adapt_w, layer.m_out_adapt_b, 0);
        }
        if (li == 0 && ghu) {
            shared.z = ghu_forward(g, x, shared.z, *ghu);
            x = shared.z;
        }
    }
    if (variant.base != BaseCell::ConvLstm) shared.m = m;
    return conv2d(g, x, output_proj_w, output_proj_b, 0);
}

template <typename T>
Tensor<T> frame_at(const Tensor<T>& frames, std::size_t t) {
    if (frames.ndim() != 5 || t >= frames.dim(1)) {
        throw ShapeError("frame_at: step " + std::to_string(t) + " out of " +
                         format_dims(frames.dims()));
    }
    const std::size_t b = frames.dim(0), l = frames.dim(1), d = frames.dim(2),
                      h = frames.dim(3), w = frames.dim(4);
    Tensor<T> out({b, d, h, w});
    const std::size_t chunk = d * h * w;
    for (std::size_t bi = 0; bi < b; ++bi) {
        std::memcpy(out.data() + bi * chunk,
                    frames.data() + (bi * l + t) * chunk, chunk * sizeof(T));
    }
    return out;
}

template <typename T>
std::size_t count_params(const Model<T>& model) {
    return model.registry().total_numel();
}

namespace {

struct FlopTally {
    std::size_t flops = 0;
    std::size_t hw = 0;
    std::size_t batch = 1;
    std::size_t side = 0;

    void conv(std::size_t cin, std::size_t cout, std::size_t k) {
        flops += flops_conv2d(cin, cout, k, side, side, batch);
    }
    void affine_op(std::size_t cin, std::size_t cout) {
        flops += batch * (2 * cin * cout + cout);
    }
    void elementwise(std::size_t c, std::size_t n = 1) { flops += batch * c * hw * n; }
    void vector_op(std::size_t c) { flops += batch * c; }
    void pool_spatial(std::size_t c) { flops += batch * c * hw; }
    void pool_channel(std::size_t c) { flops += batch * c * hw; }
};

std::size_t reduced_width(std::size_t c, std::size_t ratio) {
    return c < ratio ? 1 : c / ratio;
}

void tally_ta(FlopTally& t, std::size_t c, std::size_t k) {
    t.conv(c, c, k);                             // modulation
    t.pool_spatial(c);                           // spatial mean
    const std::size_t hidden = reduced_width(c, 4);
    t.affine_op(c, hidden);
    t.vector_op(hidden);                         // sigmoid
    t.affine_op(hidden, c);
    t.vector_op(c);                              // tanh
    t.elementwise(c);                            // channel-wise product
}

void tally_sta(FlopTally& t, std::size_t c) {
    const std::size_t hidden = reduced_width(c, 8);
    t.pool_spatial(c);
    t.pool_spatial(c);
    for (int rep = 0; rep < 2; ++rep) {
        t.affine_op(c, hidden);
        t.vector_op(hidden);
        t.affine_op(hidden, c);
    }
    t.vector_op(c);      // add + sigmoid
    t.vector_op(c);
    t.elementwise(c);    // channel refine
    t.pool_channel(c);
    t.pool_channel(c);
    t.conv(2, 1, 7);
    t.elementwise(1);    // sigmoid on the map
    t.elementwise(c);    // spatial product
}

}  // namespace

std::size_t flops_conv2d(std::size_t cin, std::size_t cout, std::size_t kernel,
                         std::size_t h, std::size_t w, std::size_t batch) {
    return batch * (2 * cin * kernel * kernel * cout * h * w + cout * h * w);
}

std::size_t count_flops(const VariantSpec& variant, std::size_t input_channels,
                        std::size_t spatial, std::size_t seq_len, std::size_t batch) {
    variant.validate();
    FlopTally t;
    t.hw = spatial * spatial;
    t.side = spatial;
    t.batch = batch;

    const std::size_t c0 = static_cast<std::size_t>(variant.channels[0]);
    const std::size_t cm = c0;
    const std::size_t k = static_cast<std::size_t>(variant.kernel);

    t.conv(input_channels, c0, 1);  // input projection
    std::size_t cx = c0;
    for (std::size_t li = 0; li < variant.channels.size(); ++li) {
        const std::size_t c = static_cast<std::size_t>(variant.channels[li]);
        switch (variant.base) {
            case BaseCell::ConvLstm:
                t.conv(cx + c, 4 * c, k);
                t.elementwise(4 * c);      // gate activations
                t.elementwise(c, 3);       // f*C + i*g
                t.elementwise(c, 2);       // tanh(C'), o*tanh
                break;
            case BaseCell::StConvLstm:
                if (cm != c) t.conv(cm, c, 1);
                t.conv(cx + c, 3 * c, k);
                t.conv(cx + c, 3 * c, k);
                t.elementwise(6 * c);      // both gate activations
                t.elementwise(c, 6);       // two memory updates
                t.conv(cx + 3 * c, c, k);
                t.elementwise(c);          // sigmoid(o)
                t.conv(2 * c, c, 1);
                t.elementwise(c, 2);       // tanh + product
                break;
            case BaseCell::CaConvLstm:
                if (variant.ta) {
                    tally_ta(t, c, k);
                    t.elementwise(c);      // residual add
                }
                if (variant.sta) tally_sta(t, cm);
                t.conv(cx + 2 * c, 3 * c, k);
                t.elementwise(3 * c);
                t.elementwise(c, 3);
                t.conv(cx + c + cm, 3 * c, k);
                t.elementwise(3 * c);
                t.conv(cm, c, 1);
                t.elementwise(c, 4);       // tanh fold + update
                t.conv(cx + 2 * c, c, k);
                t.elementwise(c);          // tanh(o)
                t.conv(2 * c, c, 1);
                t.elementwise(c, 2);
                break;
        }
        if (variant.base != BaseCell::ConvLstm && c != cm) t.conv(c, cm, 1);
        if (li == 0 && variant.ghu) {
            const std::size_t cz = static_cast<std::size_t>(variant.ghu_channels);
            t.conv(c, cz, k);
            t.conv(cz, cz, k);
            t.conv(c, cz, k);
            t.conv(cz, cz, k);
            t.elementwise(cz, 7);  // adds, activations, convex mix
            cx = cz;
        } else {
            cx = c;
        }
    }
    t.conv(static_cast<std::size_t>(variant.channels.back()), input_channels, 1);

    return t.flops * (seq_len - 1);
}

// ---- checkpoint I/O ----

std::string variant_to_json(const VariantSpec& v) {
    json j;
    j["base"] = to_string(v.base);
    j["ta"] = v.ta;
    j["sta"] = v.sta;
    j["ghu"] = v.ghu;
    j["channels"] = v.channels;
    j["ghu_channels"] = v.ghu_channels;
    j["kernel"] = v.kernel;
    return j.dump();
}

VariantSpec variant_from_json_text(const std::string& text) {
    json j = json::parse(text);
    VariantSpec v;
    v.base = base_cell_from_string(j.at("base").get<std::string>());
    v.ta = j.at("ta").get<bool>();
    v.sta = j.at("sta").get<bool>();
    v.ghu = j.at("ghu").get<bool>();
    v.channels = j.at("channels").get<std::vector<int>>();
    v.ghu_channels = j.at("ghu_channels").get<int>();
    v.kernel = j.at("kernel").get<int>();
    v.validate();
    return v;
}

namespace {

void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("checkpoint truncated in header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
    json header;
    header["format_version"] = 1;
    header["variant"] = json::parse(variant_to_json(model.variant));
    header["input_channels"] = model.input_channels;
    header["spatial"] = model.spatial;
    json manifest = json::array();
    const auto& reg = model.registry();
    for (std::size_t i = 0; i < reg.params().size(); ++i) {
        json entry;
        entry["name"] = reg.names()[i];
        entry["dims"] = reg.params()[i].dims();
        manifest.push_back(entry);
    }
    header["manifest"] = manifest;
    const std::string htext = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint '" + path + "'");
    os.write("STPC", 4);
    os.put(static_cast<char>(1));
    write_u32_le(os, static_cast<std::uint32_t>(htext.size()));
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& p : reg.params()) {
        std::vector<float> buf(p.numel());
        for (std::size_t i = 0; i < buf.size(); ++i) {
            buf[i] = static_cast<float>(p.data()[i]);
        }
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!os) throw DataError("short write on checkpoint '" + path + "'");
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "STPC", 4) != 0) {
        throw FormatError("bad checkpoint magic in '" + path + "'");
    }
    const int version = is.get();
    if (version != 1) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t hlen = read_u32_le(is);
    std::string htext(hlen, '\0');
    is.read(htext.data(), hlen);
    if (!is) throw FormatError("checkpoint truncated in JSON header");
    json header = json::parse(htext);

    VariantSpec v = variant_from_json_text(header.at("variant").dump());
    auto model = build_model<T>(v, header.at("input_channels").get<std::size_t>(),
                                header.at("spatial").get<std::size_t>(), 0);

    const json& manifest = header.at("manifest");
    auto& reg = model.registry();
    if (manifest.size() != reg.params().size()) {
        throw FormatError("checkpoint manifest lists " + std::to_string(manifest.size()) +
                          " params, model has " + std::to_string(reg.params().size()));
    }
    for (std::size_t i = 0; i < reg.params().size(); ++i) {
        const auto& entry = manifest[i];
        auto& p = reg.params()[i];
        if (entry.at("name").get<std::string>() != reg.names()[i] ||
            entry.at("dims").get<std::vector<std::size_t>>() != p.dims()) {
            throw FormatError("checkpoint manifest entry " + std::to_string(i) +
                              " ('" + entry.at("name").get<std::string>() +
                              "') does not match model param '" + reg.names()[i] + "'");
        }
        std::vector<float> buf(p.numel());
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!is) {
            throw FormatError("checkpoint truncated in blob for '" + reg.names()[i] + "'");
        }
        for (std::size_t j = 0; j < buf.size(); ++j) {
            p.data()[j] = static_cast<T>(buf[j]);
        }
    }
    return model;
}

template <typename T>
Model<T> Model<T>::clone() const {
    Model<T> copy = build_model<T>(variant, input_channels, spatial, 0);
    const auto& src = registry().params();
    auto& dst = copy.registry().params();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i].vec() = src[i].vec();
    }
    return copy;
}

#define STPREDICT_INSTANTIATE_NETWORK(T)                                           \
    template Model<T> build_model<T>(const VariantSpec&, std::size_t, std::size_t, \
                                     std::uint64_t);                               \
    template class Model<T>;                                                       \
    template Tensor<T> frame_at<T>(const Tensor<T>&, std::size_t);                 \
    template std::size_t count_params<T>(const Model<T>&);                         \
    template void save_checkpoint<T>(const Model<T>&, const std::string&);         \
    template Model<T> load_checkpoint<T>(const std::string&);

STPREDICT_INSTANTIATE_NETWORK(float)
STPREDICT_INSTANTIATE_NETWORK(double)

#undef STPREDICT_INSTANTIATE_NETWORK

}  // namespace stpredict
