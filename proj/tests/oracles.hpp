#pragma once

// Scalar-loop reference implementations of the recurrent cells and their
// building blocks, written directly from the update equations with plain
// nested loops. They share no code with the engine (no graph, no im2col, no
// fused ops) and run in double precision; the test suites compare engine
// outputs and gradients against them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "stpredict/tensor.hpp"

namespace oracle {

struct RefTensor {
    std::vector<std::size_t> dims;
    std::vector<double> v;

    RefTensor() = default;
    explicit RefTensor(std::vector<std::size_t> d) : dims(std::move(d)) {
        std::size_t n = 1;
        for (auto x : dims) n *= x;
        v.assign(n, 0.0);
    }

    std::size_t numel() const { return v.size(); }
    std::size_t dim(std::size_t i) const { return dims[i]; }

    double& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return v[((a * dims[1] + b) * dims[2] + c) * dims[3] + d];
    }
    double at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return v[((a * dims[1] + b) * dims[2] + c) * dims[3] + d];
    }
    double& at2(std::size_t a, std::size_t b) { return v[a * dims[1] + b]; }
    double at2(std::size_t a, std::size_t b) const { return v[a * dims[1] + b]; }
};

template <typename T>
RefTensor from_tensor(const stpredict::Tensor<T>& t) {
    RefTensor r(t.dims());
    for (std::size_t i = 0; i < t.numel(); ++i) r.v[i] = static_cast<double>(t.data()[i]);
    return r;
}

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Cross-correlation, stride 1, zero padding.
inline RefTensor conv2d_ref(const RefTensor& x, const RefTensor& k, const RefTensor& bias,
                            int pad) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t CO = k.dim(0), KH = k.dim(2), KW = k.dim(3);
    RefTensor out({B, CO, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t oc = 0; oc < CO; ++oc) {
            for (std::size_t oh = 0; oh < H; ++oh) {
                for (std::size_t ow = 0; ow < W; ++ow) {
                    double acc = bias.v.empty() ? 0.0 : bias.v[oc];
                    for (std::size_t ci = 0; ci < C; ++ci) {
                        for (std::size_t ki = 0; ki < KH; ++ki) {
                            for (std::size_t kj = 0; kj < KW; ++kj) {
                                const long ih = static_cast<long>(oh + ki) - pad;
                                const long iw = static_cast<long>(ow + kj) - pad;
                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) ||
                                    iw >= static_cast<long>(W)) {
                                    continue;
                                }
                                acc += x.at4(b, ci, ih, iw) * k.at4(oc, ci, ki, kj);
                            }
                        }
                    }
                    out.at4(b, oc, oh, ow) = acc;
                }
            }
        }
    }
    return out;
}

inline RefTensor concat_ref(const std::vector<RefTensor>& parts) {
    const std::size_t B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
    std::size_t C = 0;
    for (const auto& p : parts) C += p.dim(1);
    RefTensor out({B, C, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t coff = 0;
        for (const auto& p : parts) {
            for (std::size_t c = 0; c < p.dim(1); ++c) {
                for (std::size_t h = 0; h < H; ++h) {
                    for (std::size_t w = 0; w < W; ++w) {
                        out.at4(b, coff + c, h, w) = p.at4(b, c, h, w);
                    }
                }
            }
            coff += p.dim(1);
        }
    }
    return out;
}

inline RefTensor slice_ref(const RefTensor& x, std::size_t start, std::size_t count) {
    RefTensor out({x.dim(0), count, x.dim(2), x.dim(3)});
    for (std::size_t b = 0; b < x.dim(0); ++b) {
        for (std::size_t c = 0; c < count; ++c) {
            for (std::size_t h = 0; h < x.dim(2); ++h) {
                for (std::size_t w = 0; w < x.dim(3); ++w) {
                    out.at4(b, c, h, w) = x.at4(b, start + c, h, w);
                }
            }
        }
    }
    return out;
}

inline RefTensor map_ref(const RefTensor& x, const std::function<double(double)>& f) {
    RefTensor out = x;
    for (auto& v : out.v) v = f(v);
    return out;
}

inline RefTensor zip_ref(const RefTensor& a, const RefTensor& b,
                         const std::function<double(double, double)>& f) {
    RefTensor out = a;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = f(a.v[i], b.v[i]);
    return out;
}

struct ConvLstmRefParams {
    RefTensor w, b;  // (i,f,o,g) stacked
};

struct CellRefOut {
    RefTensor h, c, m;
};

inline CellRefOut convlstm_ref(const RefTensor& x, const RefTensor& h, const RefTensor& c,
                               const ConvLstmRefParams& p) {
    const std::size_t C = h.dim(1);
    const int pad = static_cast<int>(p.w.dim(2) - 1) / 2;
    auto fused = conv2d_ref(concat_ref({x, h}), p.w, p.b, pad);
    auto gi = map_ref(slice_ref(fused, 0, C), sig);
    auto gf = map_ref(slice_ref(fused, C, C), sig);
    auto go = map_ref(slice_ref(fused, 2 * C, C), sig);
    auto gg = map_ref(slice_ref(fused, 3 * C, C), [](double v) { return std::tanh(v); });
    CellRefOut out;
    out.c = zip_ref(zip_ref(gf, c, [](double a, double b2) { return a * b2; }),
                    zip_ref(gi, gg, [](double a, double b2) { return a * b2; }),
                    [](double a, double b2) { return a + b2; });
    out.h = zip_ref(go, map_ref(out.c, [](double v) { return std::tanh(v); }),
                    [](double a, double b2) { return a * b2; });
    return out;
}

struct CausalRefParams {
    RefTensor w1, b1, w2, b2, w3, b3, w4, b4, w5, b5;
};

inline CellRefOut causal_ref(const RefTensor& x, const RefTensor& h, const RefTensor& c,
                             const RefTensor& m, const CausalRefParams& p) {
    const std::size_t C = c.dim(1);
    const int pad = static_cast<int>(p.w1.dim(2) - 1) / 2;
    auto mulr = [](const RefTensor& a, const RefTensor& b) {
        return zip_ref(a, b, [](double u, double v) { return u * v; });
    };
    auto addr = [](const RefTensor& a, const RefTensor& b) {
        return zip_ref(a, b, [](double u, double v) { return u + v; });
    };
    auto tanhr = [](const RefTensor& a) {
        return map_ref(a, [](double v) { return std::tanh(v); });
    };

    auto fused1 = conv2d_ref(concat_ref({x, h, c}), p.w1, p.b1, pad);
    auto g1 = tanhr(slice_ref(fused1, 0, C));
    auto i1 = map_ref(slice_ref(fused1, C, C), sig);
    auto f1 = map_ref(slice_ref(fused1, 2 * C, C), sig);
    auto c_new = addr(mulr(f1, c), mulr(i1, g1));

    auto fused2 = conv2d_ref(concat_ref({x, c_new, m}), p.w2, p.b2, pad);
    auto g2 = tanhr(slice_ref(fused2, 0, C));
    auto i2 = map_ref(slice_ref(fused2, C, C), sig);
    auto f2 = map_ref(slice_ref(fused2, 2 * C, C), sig);
    auto m_fold = tanhr(conv2d_ref(m, p.w3, p.b3, 0));
    auto m_new = addr(mulr(f2, m_fold), mulr(i2, g2));

    auto o = tanhr(conv2d_ref(concat_ref({x, c_new, m_new}), p.w4, p.b4, pad));
    auto h_new = mulr(o, tanhr(conv2d_ref(concat_ref({c_new, m_new}), p.w5, p.b5, 0)));
    return {h_new, c_new, m_new};
}

struct StRefParams {
    RefTensor wh, bh, wm, bm, wo, bo, wfuse, bfuse;
    RefTensor adapt_w, adapt_b;  // optional
};

inline CellRefOut st_ref(const RefTensor& x, const RefTensor& h, const RefTensor& c,
                         const RefTensor& m_in, const StRefParams& p) {
    const std::size_t C = c.dim(1);
    const int pad = static_cast<int>(p.wh.dim(2) - 1) / 2;
    auto mulr = [](const RefTensor& a, const RefTensor& b) {
        return zip_ref(a, b, [](double u, double v) { return u * v; });
    };
    auto addr = [](const RefTensor& a, const RefTensor& b) {
        return zip_ref(a, b, [](double u, double v) { return u + v; });
    };
    auto tanhr = [](const RefTensor& a) {
        return map_ref(a, [](double v) { return std::tanh(v); });
    };

    RefTensor m = m_in;
    if (!p.adapt_w.v.empty()) m = conv2d_ref(m_in, p.adapt_w, p.adapt_b, 0);

    auto fused_h = conv2d_ref(concat_ref({x, h}), p.wh, p.bh, pad);
    auto g1 = tanhr(slice_ref(fused_h, 0, C));
    auto i1 = map_ref(slice_ref(fused_h, C, C), sig);
    auto f1 = map_ref(slice_ref(fused_h, 2 * C, C), sig);
    auto c_new = addr(mulr(f1, c), mulr(i1, g1));

    auto fused_m = conv2d_ref(concat_ref({x, m}), p.wm, p.bm, pad);
    auto g2 = tanhr(slice_ref(fused_m, 0, C));
    auto i2 = map_ref(slice_ref(fused_m, C, C), sig);
    auto f2 = map_ref(slice_ref(fused_m, 2 * C, C), sig);
    auto m_new = addr(mulr(f2, m), mulr(i2, g2));

    auto o = map_ref(conv2d_ref(concat_ref({x, h, c_new, m_new}), p.wo, p.bo, pad), sig);
    auto h_new = mulr(o, tanhr(conv2d_ref(concat_ref({c_new, m_new}), p.wfuse,
                                          p.bfuse, 0)));
    return {h_new, c_new, m_new};
}

struct TaRefParams {
    RefTensor conv_w, conv_b, reduce_w, reduce_b, expand_w, expand_b;
};

inline RefTensor ta_ref(const RefTensor& x, const TaRefParams& p) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int pad = static_cast<int>(p.conv_w.dim(2) - 1) / 2;
    auto u = conv2d_ref(x, p.conv_w, p.conv_b, pad);
    RefTensor s({B, C});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0;
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t w = 0; w < W; ++w) acc += u.at4(b, c, h, w);
            }
            s.at2(b, c) = acc / static_cast<double>(H * W);
        }
    }
    const std::size_t HID = p.reduce_w.dim(0);
    RefTensor e({B, C});
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> hid(HID, 0.0);
        for (std::size_t j = 0; j < HID; ++j) {
            double acc = p.reduce_b.v[j];
            for (std::size_t c = 0; c < C; ++c) acc += p.reduce_w.at2(j, c) * s.at2(b, c);
            hid[j] = sig(acc);
        }
        for (std::size_t c = 0; c < C; ++c) {
            double acc = p.expand_b.v[c];
            for (std::size_t j = 0; j < HID; ++j) acc += p.expand_w.at2(c, j) * hid[j];
            e.at2(b, c) = std::tanh(acc);
        }
    }
    RefTensor out({B, C, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t w = 0; w < W; ++w) {
                    out.at4(b, c, h, w) = e.at2(b, c) * u.at4(b, c, h, w);
                }
            }
        }
    }
    return out;
}

struct StaRefParams {
    RefTensor mlp1_w, mlp1_b, mlp2_w, mlp2_b, spatial_w, spatial_b;
};

inline RefTensor sta_ref(const RefTensor& x, const StaRefParams& p) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t HID = p.mlp1_w.dim(0);
    auto mlp = [&](const std::vector<double>& in, std::vector<double>& out) {
        std::vector<double> hid(HID);
        for (std::size_t j = 0; j < HID; ++j) {
            double acc = p.mlp1_b.v[j];
            for (std::size_t c = 0; c < C; ++c) acc += p.mlp1_w.at2(j, c) * in[c];
            hid[j] = sig(acc);
        }
        out.assign(C, 0.0);
        for (std::size_t c = 0; c < C; ++c) {
            double acc = p.mlp2_b.v[c];
            for (std::size_t j = 0; j < HID; ++j) acc += p.mlp2_w.at2(c, j) * hid[j];
            out[c] = acc;
        }
    };

    RefTensor refined({B, C, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> avg(C, 0.0), mx(C, -1e300);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t w = 0; w < W; ++w) {
                    avg[c] += x.at4(b, c, h, w);
                    mx[c] = std::max(mx[c], x.at4(b, c, h, w));
                }
            }
            avg[c] /= static_cast<double>(H * W);
        }
        std::vector<double> m_avg, m_max;
        mlp(avg, m_avg);
        mlp(mx, m_max);
        for (std::size_t c = 0; c < C; ++c) {
            const double mc = sig(m_avg[c] + m_max[c]);
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t w = 0; w < W; ++w) {
                    refined.at4(b, c, h, w) = mc * x.at4(b, c, h, w);
                }
            }
        }
    }

    RefTensor pooled({B, 2, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) {
                double acc = 0, mx = -1e300;
                for (std::size_t c = 0; c < C; ++c) {
                    acc += refined.at4(b, c, h, w);
                    mx = std::max(mx, refined.at4(b, c, h, w));
                }
                pooled.at4(b, 0, h, w) = acc / static_cast<double>(C);
                pooled.at4(b, 1, h, w) = mx;
            }
        }
    }
    auto mask = map_ref(conv2d_ref(pooled, p.spatial_w, p.spatial_b, 3), sig);
    RefTensor out({B, C, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t w = 0; w < W; ++w) {
                    out.at4(b, c, h, w) = mask.at4(b, 0, h, w) * refined.at4(b, c, h, w);
                }
            }
        }
    }
    return out;
}

struct GhuRefParams {
    RefTensor px_w, px_b, pz_w, pz_b, sx_w, sx_b, sz_w, sz_b;
};

inline RefTensor ghu_ref(const RefTensor& x, const RefTensor& z, const GhuRefParams& p) {
    const int pad = static_cast<int>(p.px_w.dim(2) - 1) / 2;
    auto pt = zip_ref(conv2d_ref(x, p.px_w, p.px_b, pad),
                      conv2d_ref(z, p.pz_w, p.pz_b, pad),
                      [](double a, double b) { return std::tanh(a + b); });
    auto st = zip_ref(conv2d_ref(x, p.sx_w, p.sx_b, pad),
                      conv2d_ref(z, p.sz_w, p.sz_b, pad),
                      [](double a, double b) { return sig(a + b); });
    RefTensor out = pt;
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        out.v[i] = st.v[i] * pt.v[i] + (1.0 - st.v[i]) * z.v[i];
    }
    return out;
}

// Central finite differences of `loss()` with respect to every element of
// `param`. The forward is re-run twice per element.
template <typename T>
std::vector<double> fd_grad(stpredict::Tensor<T>& param,
                            const std::function<double()>& loss, double h = 1e-3) {
    std::vector<double> out(param.numel());
    for (std::size_t i = 0; i < param.numel(); ++i) {
        const T saved = param.data()[i];
        param.data()[i] = static_cast<T>(static_cast<double>(saved) + h);
        const double up = loss();
        param.data()[i] = static_cast<T>(static_cast<double>(saved) - h);
        const double down = loss();
        param.data()[i] = saved;
        out[i] = (up - down) / (2.0 * h);
    }
    return out;
}

struct GradCheckResult {
    double max_rel = 0;
    std::size_t checked = 0;
    bool ok = true;
};

// Mixed absolute/relative comparison; elements below `atol` in both views
// pass outright.
inline GradCheckResult compare_grads(const std::vector<double>& analytic,
                                     const std::vector<double>& fd,
                                     double rtol = 1e-2, double atol = 1e-4) {
    GradCheckResult r;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i];
        const double b = fd[i];
        const double denom = std::max({std::abs(a), std::abs(b), atol});
        const double rel = std::abs(a - b) / denom;
        if (std::abs(a - b) > atol) {
            r.max_rel = std::max(r.max_rel, rel);
            r.checked += 1;
            if (rel > rtol) r.ok = false;
        }
    }
    return r;
}

}  // namespace oracle
