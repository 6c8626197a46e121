#include "stpredict/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "stpredict/rng.hpp"

namespace stpredict {

using nlohmann::json;

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kSpeedOfLight = 299792458.0;
// Resolvable Doppler limit of the sounder geometry the generator mimics.
constexpr double kMaxResolvableDopplerHz = 806.0;
}  // namespace

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::S1_city_campus: return "S1_city_campus";
        case Scenario::S2_static_rx: return "S2_static_rx";
        case Scenario::S3_highway: return "S3_highway";
    }
    return "?";
}

Scenario scenario_from_string(const std::string& s) {
    if (s == "S1_city_campus") return Scenario::S1_city_campus;
    if (s == "S2_static_rx") return Scenario::S2_static_rx;
    if (s == "S3_highway") return Scenario::S3_highway;
    throw ConfigError("unknown scenario '" + s + "'");
}

void ScenarioConfig::validate() const {
    if (bursts < 1) throw ConfigError("scenario: bursts must be >= 1");
    if (delay_taps < 1) throw ConfigError("scenario: delay_taps must be >= 1");
    if (n_antennas < 1) throw ConfigError("scenario: n_antennas must be >= 1");
    if (n_paths < 1) throw ConfigError("scenario: n_paths must be >= 1");
    if (burst_interval_s <= 0) throw ConfigError("scenario: burst_interval_s must be > 0");
    if (max_doppler_hz < 0 || max_doppler_hz > kMaxResolvableDopplerHz) {
        throw ConfigError("scenario: max_doppler_hz must lie in [0, 806], got " +
                          std::to_string(max_doppler_hz));
    }
    if (path_lifetime_bursts < 0) {
        throw ConfigError("scenario: path_lifetime_bursts must be >= 0");
    }
    for (const auto& [start, len] : stationary_segments) {
        if (start < 0 || len <= 0 || start + len > bursts) {
            throw ConfigError("scenario: stationary segment [" + std::to_string(start) +
                              ", +" + std::to_string(len) + ") outside 0.." +
                              std::to_string(bursts));
        }
    }
}

ScenarioConfig ScenarioConfig::preset(Scenario s) {
    ScenarioConfig cfg;
    cfg.scenario = s;
    switch (s) {
        case Scenario::S1_city_campus:
            cfg.max_doppler_hz = 60.0;
            break;
        case Scenario::S2_static_rx:
            cfg.max_doppler_hz = 30.0;
            break;
        case Scenario::S3_highway:
            cfg.max_doppler_hz = 600.0;
            break;
    }
    return cfg;
}

namespace {

struct Path {
    double amplitude = 0;
    double delay = 0;       // fractional tap position
    double doppler_hz = 0;
    double phase0 = 0;
    std::vector<double> tx_phase;
    std::vector<double> rx_phase;
    int born = 0;
};

// Raised-cosine envelope over the tap axis, support width +-2 taps.
double tap_envelope(double x) {
    const double support = 2.0;
    const double a = std::abs(x);
    if (a >= support) return 0.0;
    return 0.5 * (1.0 + std::cos(kPi * a / support));
}

// Uniform circular array phase profile for a path leaving/arriving at
// `angle`; adjacent elements are half a wavelength apart.
std::vector<double> uca_phases(int n, double angle, double wavelength) {
    std::vector<double> out(static_cast<std::size_t>(n));
    if (n == 1) {
        out[0] = 0.0;
        return out;
    }
    const double radius = wavelength / (4.0 * std::sin(kPi / n));
    const double k = 2.0 * kPi / wavelength;
    for (int e = 0; e < n; ++e) {
        const double elem_angle = 2.0 * kPi * e / n;
        out[static_cast<std::size_t>(e)] = k * radius * std::cos(angle - elem_angle);
    }
    return out;
}

void draw_path(Path& p, const ScenarioConfig& cfg, double wavelength, int born,
               bool keep_rx, Rng& rng) {
    p.delay = rng.uniform(0.0, std::max(1.0, static_cast<double>(cfg.delay_taps - 1)));
    p.amplitude = rng.uniform(0.5, 1.5) *
                  std::exp(-p.delay / (cfg.delay_taps / 3.0 + 1.0)) /
                  std::sqrt(static_cast<double>(cfg.n_paths));
    p.doppler_hz = rng.uniform(-cfg.max_doppler_hz, cfg.max_doppler_hz);
    p.phase0 = rng.uniform(0.0, 2.0 * kPi);
    p.tx_phase = uca_phases(cfg.n_antennas, rng.uniform(0.0, 2.0 * kPi), wavelength);
    if (!keep_rx || p.rx_phase.empty()) {
        p.rx_phase = uca_phases(cfg.n_antennas, rng.uniform(0.0, 2.0 * kPi), wavelength);
    }
    p.born = born;
}

double life_envelope(int t, int born, int lifetime) {
    if (lifetime <= 0) return 1.0;
    const int age = t - born;
    const int fade = std::max(1, std::min(lifetime / 4, 10));
    if (age < fade) return 0.5 * (1.0 - std::cos(kPi * age / fade));
    const int remaining = lifetime - age;
    if (remaining < fade) return 0.5 * (1.0 - std::cos(kPi * remaining / fade));
    return 1.0;
}

}  // namespace

ComplexCsiSequence generate_synthetic(const ScenarioConfig& cfg) {
    cfg.validate();
    const double wavelength = kSpeedOfLight / cfg.carrier_hz;
    Rng rng(Rng::derive(cfg.seed, 0xDA7A));

    std::vector<Path> paths(static_cast<std::size_t>(cfg.n_paths));
    std::vector<int> offsets(paths.size(), 0);
    for (std::size_t p = 0; p < paths.size(); ++p) {
        if (cfg.path_lifetime_bursts > 0) {
            // Stagger rebirths so the scene never resets all at once.
            offsets[p] = static_cast<int>(
                rng.index(static_cast<std::size_t>(cfg.path_lifetime_bursts)));
        }
        draw_path(paths[p], cfg, wavelength, -offsets[p], false, rng);
    }

    const bool rx_static = cfg.scenario == Scenario::S2_static_rx;
    const std::size_t n = static_cast<std::size_t>(cfg.n_antennas);
    const std::size_t d = static_cast<std::size_t>(cfg.delay_taps);

    ComplexCsiSequence seq;
    seq.bursts = static_cast<std::size_t>(cfg.bursts);
    seq.delay_taps = d;
    seq.n_antennas = n;
    seq.values.assign(seq.bursts * d * n * n, {0.0F, 0.0F});

    auto in_stationary = [&](int t) {
        for (const auto& [start, len] : cfg.stationary_segments) {
            if (t >= start && t < start + len) return true;
        }
        return false;
    };

    // Doppler phase is integrated burst by burst so that freezing it inside
    // stationary segments keeps the phase continuous.
    std::vector<double> doppler_phase(paths.size(), 0.0);
    for (std::size_t p = 0; p < paths.size(); ++p) doppler_phase[p] = paths[p].phase0;

    std::vector<std::complex<double>> tap_gain(d);
    for (int t = 0; t < cfg.bursts; ++t) {
        for (std::size_t p = 0; p < paths.size(); ++p) {
            auto& path = paths[p];
            if (cfg.path_lifetime_bursts > 0 &&
                t - path.born >= cfg.path_lifetime_bursts) {
                draw_path(path, cfg, wavelength, t, rx_static, rng);
                doppler_phase[p] = path.phase0;
            }
        }
        const bool frozen = in_stationary(t);
        for (std::size_t p = 0; p < paths.size(); ++p) {
            const auto& path = paths[p];
            const double env = life_envelope(t, path.born, cfg.path_lifetime_bursts);
            if (env == 0.0) continue;
            const std::complex<double> rot(std::cos(doppler_phase[p]),
                                           std::sin(doppler_phase[p]));
            for (std::size_t di = 0; di < d; ++di) {
                const double gd =
                    tap_envelope(static_cast<double>(di) - path.delay);
                tap_gain[di] = gd == 0.0
                                   ? std::complex<double>(0.0, 0.0)
                                   : env * path.amplitude * gd * rot;
            }
            for (std::size_t di = 0; di < d; ++di) {
                if (tap_gain[di] == std::complex<double>(0.0, 0.0)) continue;
                for (std::size_t i = 0; i < n; ++i) {
                    const double tx = path.tx_phase[i];
                    for (std::size_t j = 0; j < n; ++j) {
                        const double ang = tx + path.rx_phase[j];
                        const std::complex<double> steer(std::cos(ang), std::sin(ang));
                        const std::complex<double> v = tap_gain[di] * steer;
                        auto& cell = seq.values[((static_cast<std::size_t>(t) * d + di) * n + i) * n + j];
                        cell += std::complex<float>(static_cast<float>(v.real()),
                                                    static_cast<float>(v.imag()));
                    }
                }
            }
        }
        // Advance Doppler phases toward the next burst.
        if (!frozen) {
            for (std::size_t p = 0; p < paths.size(); ++p) {
                doppler_phase[p] +=
                    2.0 * kPi * paths[p].doppler_hz * cfg.burst_interval_s;
            }
        }
    }
    return seq;
}

Tensor<float> complex_to_real(const ComplexCsiSequence& seq) {
    const std::size_t t = seq.bursts, d = seq.delay_taps, n = seq.n_antennas;
    Tensor<float> out({t, d, 2 * n, 2 * n});
    float* po = out.data();
    const std::size_t side = 2 * n;
    for (std::size_t ti = 0; ti < t; ++ti) {
        for (std::size_t di = 0; di < d; ++di) {
            float* plane = po + (ti * d + di) * side * side;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const auto v = seq.at(ti, di, i, j);
                    plane[i * side + j] = v.real();
                    plane[i * side + (j + n)] = -v.imag();
                    plane[(i + n) * side + j] = v.imag();
                    plane[(i + n) * side + (j + n)] = v.real();
                }
            }
        }
    }
    return out;
}

std::vector<Tensor<float>> window_slices(const Tensor<float>& seq, std::size_t width,
                                         std::size_t stride) {
    if (seq.ndim() != 4) {
        throw ShapeError("window_slices expects [T,D,H,W], got " +
                         format_dims(seq.dims()));
    }
    if (width == 0 || stride == 0) throw ConfigError("window width/stride must be > 0");
    const std::size_t t = seq.dim(0);
    const std::size_t chunk = seq.numel() / t;
    std::vector<Tensor<float>> out;
    for (std::size_t start = 0; start + width <= t; start += stride) {
        Tensor<float> w({width, seq.dim(1), seq.dim(2), seq.dim(3)});
        std::memcpy(w.data(), seq.data() + start * chunk,
                    width * chunk * sizeof(float));
        out.push_back(std::move(w));
    }
    return out;
}

SplitIndices split_dataset(std::size_t n_windows, const std::vector<int>& ratios,
                           std::uint64_t seed) {
    if (ratios.size() != 3 || ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0) {
        throw ConfigError("split ratios must be three positive integers");
    }
    if (n_windows < 10) {
        throw DataError("split_dataset needs at least 10 windows, got " +
                        std::to_string(n_windows));
    }
    std::vector<std::size_t> order(n_windows);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::derive(seed, 0x5117));
    rng.shuffle(order);

    const double total = ratios[0] + ratios[1] + ratios[2];
    double exact[3];
    std::size_t sizes[3];
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        exact[i] = n_windows * (ratios[i] / total);
        sizes[i] = static_cast<std::size_t>(exact[i]);
        assigned += sizes[i];
    }
    // Largest remainder keeps every split within one window of proportion.
    while (assigned < n_windows) {
        int best = 0;
        double best_rem = -1;
        for (int i = 0; i < 3; ++i) {
            const double rem = exact[i] - static_cast<double>(sizes[i]);
            if (rem > best_rem) {
                best_rem = rem;
                best = i;
            }
        }
        sizes[best] += 1;
        assigned += 1;
    }

    SplitIndices out;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < sizes[0]; ++i) out.train.push_back(order[pos++]);
    for (std::size_t i = 0; i < sizes[1]; ++i) out.val.push_back(order[pos++]);
    for (std::size_t i = 0; i < sizes[2]; ++i) out.test.push_back(order[pos++]);
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

NormalizationScales fit_antennawise_scales(const std::vector<Tensor<float>>& train) {
    if (train.empty()) throw DataError("antenna-wise normalization: empty training split");
    const std::size_t side = train[0].dim(2);
    const std::size_t n = side / 2;
    NormalizationScales out;
    out.n_antennas = n;
    out.scales.assign(n * n, 0.0F);

    std::vector<double> acc(n * n, 0.0);
    std::size_t samples = 0;
    for (const auto& w : train) {
        if (w.ndim() != 4 || w.dim(2) != side || w.dim(3) != side) {
            throw ShapeError("normalization: inconsistent window " +
                             format_dims(w.dims()));
        }
        const std::size_t planes = w.dim(0) * w.dim(1);
        const float* p = w.data();
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const float* base = p + pl * side * side;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double re = base[i * side + j];
                    const double im = base[(i + n) * side + j];
                    acc[i * n + j] += re * re + im * im;
                }
            }
        }
        samples += planes;
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double ms = acc[i * n + j] / static_cast<double>(samples);
            if (ms <= 0.0) {
                throw DataError("antenna pair (" + std::to_string(i) + "," +
                                std::to_string(j) + ") has zero energy in the training split");
            }
            out.scales[i * n + j] = static_cast<float>(std::sqrt(ms));
        }
    }
    return out;
}

void apply_antennawise_scales(std::vector<Tensor<float>>& windows,
                              const NormalizationScales& scales) {
    const std::size_t n = scales.n_antennas;
    const std::size_t side = 2 * n;
    for (auto& w : windows) {
        if (w.dim(2) != side || w.dim(3) != side) {
            throw ShapeError("normalization: window " + format_dims(w.dims()) +
                             " does not match scales for N=" + std::to_string(n));
        }
        const std::size_t planes = w.dim(0) * w.dim(1);
        float* p = w.data();
        for (std::size_t pl = 0; pl < planes; ++pl) {
            float* base = p + pl * side * side;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const float s = scales.at(i, j);
                    base[i * side + j] /= s;
                    base[i * side + (j + n)] /= s;
                    base[(i + n) * side + j] /= s;
                    base[(i + n) * side + (j + n)] /= s;
                }
            }
        }
    }
}

// ---- CSIT file format ----

namespace {

void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& is, std::size_t offset) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) {
        throw FormatError("CSIT file truncated at byte offset " + std::to_string(offset));
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_csit_header(std::ostream& os, std::uint8_t dtype,
                       const std::vector<std::size_t>& dims) {
    os.write("CSIT", 4);
    os.put(static_cast<char>(1));  // version
    os.put(static_cast<char>(dtype));
    os.put(static_cast<char>(dims.size()));
    for (std::size_t d : dims) write_u64_le(os, d);
}

struct CsitHeader {
    std::uint8_t dtype = 0;
    std::vector<std::size_t> dims;
    std::size_t payload_offset = 0;
};

CsitHeader read_csit_header(std::istream& is, const std::string& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CSIT", 4) != 0) {
        throw FormatError("bad CSIT magic at byte offset 0 in '" + path + "'");
    }
    const int version = is.get();
    if (version != 1) {
        throw FormatError("unsupported CSIT version " + std::to_string(version) +
                          " at byte offset 4 in '" + path + "'");
    }
    CsitHeader h;
    const int dtype = is.get();
    if (dtype != 0 && dtype != 1) {
        throw FormatError("unknown CSIT dtype " + std::to_string(dtype) +
                          " at byte offset 5 in '" + path + "'");
    }
    h.dtype = static_cast<std::uint8_t>(dtype);
    const int ndim = is.get();
    if (ndim < 1 || ndim > 5) {
        throw FormatError("CSIT rank " + std::to_string(ndim) +
                          " out of range at byte offset 6 in '" + path + "'");
    }
    for (int i = 0; i < ndim; ++i) {
        h.dims.push_back(static_cast<std::size_t>(read_u64_le(is, 7 + 8 * i)));
    }
    h.payload_offset = 7 + 8 * static_cast<std::size_t>(ndim);
    return h;
}

template <typename V>
void read_payload(std::istream& is, V* out, std::size_t count, std::size_t offset,
                  const std::string& path) {
    is.read(reinterpret_cast<char*>(out),
            static_cast<std::streamsize>(count * sizeof(V)));
    const std::size_t got = static_cast<std::size_t>(is.gcount());
    if (got != count * sizeof(V)) {
        throw FormatError("CSIT payload truncated in '" + path + "': expected " +
                          std::to_string(count * sizeof(V)) + " bytes at offset " +
                          std::to_string(offset) + ", got " + std::to_string(got));
    }
    char extra;
    if (is.read(&extra, 1)) {
        throw FormatError("CSIT payload overlong in '" + path + "': expected " +
                          std::to_string(count * sizeof(V)) + " bytes at offset " +
                          std::to_string(offset));
    }
}

}  // namespace

void write_tensor(const std::string& path, const Tensor<float>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write '" + path + "'");
    write_csit_header(os, 0, t.dims());
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!os) throw DataError("short write on '" + path + "'");
}

Tensor<float> read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    const CsitHeader h = read_csit_header(is, path);
    if (h.dtype != 0) {
        throw FormatError("'" + path + "' holds complex data; use read_complex_tensor");
    }
    Tensor<float> t(h.dims);
    read_payload(is, t.data(), t.numel(), h.payload_offset, path);
    return t;
}

void write_complex_tensor(const std::string& path, const ComplexCsiSequence& seq) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write '" + path + "'");
    write_csit_header(os, 1,
                      {seq.bursts, seq.delay_taps, seq.n_antennas, seq.n_antennas});
    os.write(reinterpret_cast<const char*>(seq.values.data()),
             static_cast<std::streamsize>(seq.values.size() * sizeof(std::complex<float>)));
    if (!os) throw DataError("short write on '" + path + "'");
}

ComplexCsiSequence read_complex_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    const CsitHeader h = read_csit_header(is, path);
    if (h.dtype != 1 || h.dims.size() != 4 || h.dims[2] != h.dims[3]) {
        throw FormatError("'" + path + "' is not a [T,D,N,N] complex CSI file");
    }
    ComplexCsiSequence seq;
    seq.bursts = h.dims[0];
    seq.delay_taps = h.dims[1];
    seq.n_antennas = h.dims[2];
    seq.values.resize(seq.bursts * seq.delay_taps * seq.n_antennas * seq.n_antennas);
    read_payload(is, seq.values.data(), seq.values.size(), h.payload_offset, path);
    return seq;
}

Tensor<float> stack_windows(const std::vector<Tensor<float>>& windows,
                            const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw DataError("stack_windows: empty index set");
    const auto& first = windows.at(indices[0]);
    Tensor<float> out({indices.size(), first.dim(0), first.dim(1), first.dim(2),
                       first.dim(3)});
    const std::size_t chunk = first.numel();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& w = windows.at(indices[i]);
        if (w.dims() != first.dims()) {
            throw ShapeError("stack_windows: inconsistent window shapes " +
                             format_dims(w.dims()) + " vs " + format_dims(first.dims()));
        }
        std::memcpy(out.data() + i * chunk, w.data(), chunk * sizeof(float));
    }
    return out;
}

// ---- SHA-256 ----

namespace {

struct Sha256 {
    std::uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                          0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
    unsigned char block[64];
    std::size_t block_len = 0;
    std::uint64_t total = 0;

    static std::uint32_t rotr(std::uint32_t x, int n) {
        return (x >> n) | (x << (32 - n));
    }

    void compress(const unsigned char* p) {
        static const std::uint32_t k[64] = {
            0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
            0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
            0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
            0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
            0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
            0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
            0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
            0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
            0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
            0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
            0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};
        std::uint32_t w[64];
        for (int i = 0; i < 16; ++i) {
            w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
                   (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
        }
        for (int i = 16; i < 64; ++i) {
            const std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            const std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5],
                      g = h[6], hh = h[7];
        for (int i = 0; i < 64; ++i) {
            const std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            const std::uint32_t ch = (e & f) ^ (~e & g);
            const std::uint32_t t1 = hh + s1 + ch + k[i] + w[i];
            const std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            const std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            const std::uint32_t t2 = s0 + maj;
            hh = g; g = f; f = e; e = d + t1;
            d = c; c = b; b = a; a = t1 + t2;
        }
        h[0] += a; h[1] += b; h[2] += c; h[3] += d;
        h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
    }

    void update(const unsigned char* data, std::size_t len) {
        total += len;
        while (len > 0) {
            const std::size_t take = std::min(len, 64 - block_len);
            std::memcpy(block + block_len, data, take);
            block_len += take;
            data += take;
            len -= take;
            if (block_len == 64) {
                compress(block);
                block_len = 0;
            }
        }
    }

    std::string finish() {
        const std::uint64_t bits = total * 8;
        unsigned char pad = 0x80;
        update(&pad, 1);
        unsigned char zero = 0;
        while (block_len != 56) update(&zero, 1);
        unsigned char lenb[8];
        for (int i = 0; i < 8; ++i) {
            lenb[i] = static_cast<unsigned char>((bits >> (56 - 8 * i)) & 0xFF);
        }
        update(lenb, 8);
        static const char* hex = "0123456789abcdef";
        std::string out;
        out.reserve(64);
        for (std::uint32_t word : h) {
            for (int shift = 28; shift >= 0; shift -= 4) {
                out.push_back(hex[(word >> shift) & 0xF]);
            }
        }
        return out;
    }
};

}  // namespace

std::string sha256_hex(const unsigned char* data, std::size_t len) {
    Sha256 s;
    s.update(data, len);
    return s.finish();
}

std::string sha256_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot hash '" + path + "'");
    Sha256 s;
    std::vector<unsigned char> buf(1 << 16);
    while (is) {
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size()));
        s.update(buf.data(), static_cast<std::size_t>(is.gcount()));
    }
    return s.finish();
}

// ---- config JSON ----

std::string scenario_config_to_json(const ScenarioConfig& cfg) {
    json j;
    j["scenario"] = to_string(cfg.scenario);
    j["bursts"] = cfg.bursts;
    j["delay_taps"] = cfg.delay_taps;
    j["n_antennas"] = cfg.n_antennas;
    j["carrier_hz"] = cfg.carrier_hz;
    j["burst_interval_s"] = cfg.burst_interval_s;
    j["max_doppler_hz"] = cfg.max_doppler_hz;
    j["n_paths"] = cfg.n_paths;
    j["path_lifetime_bursts"] = cfg.path_lifetime_bursts;
    json segs = json::array();
    for (const auto& [a, b] : cfg.stationary_segments) segs.push_back({a, b});
    j["stationary_segments"] = segs;
    j["seed"] = cfg.seed;
    return j.dump();
}

ScenarioConfig scenario_config_from_json(const std::string& text) {
    json j = json::parse(text);
    ScenarioConfig cfg = ScenarioConfig::preset(
        scenario_from_string(j.at("scenario").get<std::string>()));
    if (j.contains("bursts")) cfg.bursts = j["bursts"].get<int>();
    if (j.contains("delay_taps")) cfg.delay_taps = j["delay_taps"].get<int>();
    if (j.contains("n_antennas")) cfg.n_antennas = j["n_antennas"].get<int>();
    if (j.contains("carrier_hz")) cfg.carrier_hz = j["carrier_hz"].get<double>();
    if (j.contains("burst_interval_s")) cfg.burst_interval_s = j["burst_interval_s"].get<double>();
    if (j.contains("max_doppler_hz")) cfg.max_doppler_hz = j["max_doppler_hz"].get<double>();
    if (j.contains("n_paths")) cfg.n_paths = j["n_paths"].get<int>();
    if (j.contains("path_lifetime_bursts")) {
        cfg.path_lifetime_bursts = j["path_lifetime_bursts"].get<int>();
    }
    if (j.contains("stationary_segments")) {
        cfg.stationary_segments.clear();
        for (const auto& seg : j["stationary_segments"]) {
            cfg.stationary_segments.emplace_back(seg.at(0).get<int>(), seg.at(1).get<int>());
        }
    }
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

}  // namespace stpredict
