#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stpredict/tensor.hpp"

namespace stpredict {

enum class Scenario { S1_city_campus, S2_static_rx, S3_highway };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

// Geometry-based sum-of-paths generator configuration. Scenarios differ by
// Doppler scale and by whether RX-side path phases persist across rebirths
// (S2 models a static receiver).
struct ScenarioConfig {
    Scenario scenario = Scenario::S1_city_campus;
    int bursts = 1200;
    int delay_taps = 61;
    int n_antennas = 8;
    double carrier_hz = 5.9e9;
    double burst_interval_s = 0.05;
    double max_doppler_hz = 60.0;
    int n_paths = 8;
    // Bursts a path lives before being redrawn; 0 keeps paths for the whole
    // sequence.
    int path_lifetime_bursts = 300;
    std::vector<std::pair<int, int>> stationary_segments;  // (start, len)
    std::uint64_t seed = 0;

    void validate() const;
    static ScenarioConfig preset(Scenario s);
};

// [T, D, N, N] complex64 stream stored as interleaved re/im floats.
struct ComplexCsiSequence {
    std::size_t bursts = 0, delay_taps = 0, n_antennas = 0;
    std::vector<std::complex<float>> values;

    std::complex<float>& at(std::size_t t, std::size_t d, std::size_t i, std::size_t j) {
        return values[((t * delay_taps + d) * n_antennas + i) * n_antennas + j];
    }
    std::complex<float> at(std::size_t t, std::size_t d, std::size_t i,
                           std::size_t j) const {
        return values[((t * delay_taps + d) * n_antennas + i) * n_antennas + j];
    }
};

ComplexCsiSequence generate_synthetic(const ScenarioConfig& cfg);

// Per (t, d): N x N complex X -> 2N x 2N real [[Re, -Im], [Im, Re]].
// Output tensor is [T, D, 2N, 2N].
Tensor<float> complex_to_real(const ComplexCsiSequence& seq);

// Non-overlapping windows over the leading axis of [T, D, H, W]; each window
// is [width, D, H, W]. The tail remainder is dropped.
std::vector<Tensor<float>> window_slices(const Tensor<float>& seq, std::size_t width = 20,
                                         std::size_t stride = 20);

// Deterministic shuffle then largest-remainder proportional split.
struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};
SplitIndices split_dataset(std::size_t n_windows, const std::vector<int>& ratios,
                           std::uint64_t seed);

// Per TX/RX antenna pair RMS of the complex magnitude over the training
// split. Scales are [N, N]; applying divides all four block entries.
struct NormalizationScales {
    std::size_t n_antennas = 0;
    std::vector<float> scales;  // row-major N x N

    float at(std::size_t i, std::size_t j) const { return scales[i * n_antennas + j]; }
};

NormalizationScales fit_antennawise_scales(const std::vector<Tensor<float>>& train);
void apply_antennawise_scales(std::vector<Tensor<float>>& windows,
                              const NormalizationScales& scales);

// CSIT tensor file: "CSIT", version byte 1, u8 dtype (0 = f32, 1 = c64 as
// interleaved f32), u8 ndim, ndim x u64 little-endian dims, row-major payload.
void write_tensor(const std::string& path, const Tensor<float>& t);
Tensor<float> read_tensor(const std::string& path);
void write_complex_tensor(const std::string& path, const ComplexCsiSequence& seq);
ComplexCsiSequence read_complex_tensor(const std::string& path);

std::string sha256_hex(const unsigned char* data, std::size_t len);
std::string sha256_file(const std::string& path);

// Stacks a set of windows into one [n, L, D, H, W] tensor.
Tensor<float> stack_windows(const std::vector<Tensor<float>>& windows,
                            const std::vector<std::size_t>& indices);

std::string scenario_config_to_json(const ScenarioConfig& cfg);
ScenarioConfig scenario_config_from_json(const std::string& text);

}  // namespace stpredict
