#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <thread>
#include <vector>

#include "stpredict/data.hpp"
#include "stpredict/network.hpp"

namespace stpredict {

// Error energy (or absolute error) normalized by the ground-truth energy
// (or absolute sum); Frobenius reading, i.e. ratio of sums.
template <typename T>
double nmse(const Tensor<T>& truth, const Tensor<T>& pred);
template <typename T>
double nmae(const Tensor<T>& truth, const Tensor<T>& pred);

double to_db(double x);
// to_db with the -120 dB sentinel for a zero-error floor (emitted files stay
// numeric).
double to_db_floored(double x);

struct EvalSummary {
    double nmse_linear = 0;
    double nmse_db = 0;
    double nmae_linear = 0;
    double nmae_db = 0;
    std::vector<double> per_step_nmse;  // K forecast steps
    std::vector<double> per_step_nmae;
    std::vector<double> window_nmse;    // one value per window, forecast frames only
};

// Rollout over every window (forecast-only metrics), batched; `threads` > 1
// evaluates batches concurrently with shared read-only params. Defined at the
// end of this header; ModelT as for rollout().
template <typename T, typename ModelT = Model<T>>
EvalSummary evaluate_model(const ModelT& model, const Tensor<T>& windows,
                           std::size_t J, std::size_t K, std::size_t threads);

struct CdfSeries {
    std::vector<double> values;     // ascending
    std::vector<double> fractions;  // ends at 1.0
};

CdfSeries mse_cdf(const std::vector<double>& window_values);

struct MetricsRecord {
    VariantSpec variant;
    std::string scenario_train;
    std::string scenario_test;
    std::uint64_t seed = 0;
    std::size_t param_count = 0;
    std::size_t flop_count = 0;
    EvalSummary summary;
};

struct AblationDataset {
    std::string name;
    Tensor<float> train, val, test;
};

struct AblationOptions {
    std::size_t iters = 1000;
    std::size_t batch = 4;
    double lr = 1e-3;
    std::size_t J = 10;
    std::size_t K = 10;
    std::size_t val_every = 0;
    std::size_t eval_threads = 1;
};

// Trains and evaluates every variant x scenario x seed cell of the grid.
std::vector<MetricsRecord> run_ablation(const std::vector<VariantSpec>& variants,
                                        const std::vector<AblationDataset>& scenarios,
                                        const std::vector<std::uint64_t>& seeds,
                                        const AblationOptions& opts);

// metrics.csv + curves.json + cdf.json + run manifest under out_dir.
void emit_report(const std::vector<MetricsRecord>& records, const std::string& out_dir,
                 const std::string& run_config_json,
                 const std::vector<std::pair<std::string, std::string>>& dataset_hashes);

std::size_t worker_threads_from_env(bool for_training);


namespace detail {

struct WindowSums {
    std::vector<double> num_mse, den_mse, num_mae, den_mae;  // one per step
};

template <typename T>
WindowSums window_forecast_sums(const Tensor<T>& batch, std::size_t window_in_batch,
                                std::size_t J, std::size_t K,
                                const std::vector<Tensor<T>>& preds) {
    WindowSums sums;
    sums.num_mse.assign(K, 0);
    sums.den_mse.assign(K, 0);
    sums.num_mae.assign(K, 0);
    sums.den_mae.assign(K, 0);
    const std::size_t chunk = batch.numel() / (batch.dim(0) * batch.dim(1));
    for (std::size_t k = 0; k < K; ++k) {
        const std::size_t s = J - 1 + k;  // prediction of frame J+1+k (1-based)
        const T* pp = preds[s].data() + window_in_batch * chunk;
        const T* pt = batch.data() +
                      (window_in_batch * batch.dim(1) + (s + 1)) * chunk;
        for (std::size_t i = 0; i < chunk; ++i) {
            const double t = pt[i];
            const double d = t - static_cast<double>(pp[i]);
            sums.num_mse[k] += d * d;
            sums.den_mse[k] += t * t;
            sums.num_mae[k] += std::abs(d);
            sums.den_mae[k] += std::abs(t);
        }
    }
    return sums;
}

}  // namespace detail

template <typename T, typename ModelT>
EvalSummary evaluate_model(const ModelT& model, const Tensor<T>& windows,
                           std::size_t J, std::size_t K, std::size_t threads) {
    if (!windows.defined() || windows.ndim() != 5) {
        throw DataError("evaluate_model: window stack missing");
    }
    if (windows.dim(1) < J + K) {
        throw ShapeError("evaluate_model: window length " +
                         std::to_string(windows.dim(1)) + " < J+K");
    }
    if (K == 0) throw ConfigError("evaluate_model: K must be >= 1");
    const std::size_t n = windows.dim(0);
    const std::size_t batch_size = 16;
    const std::size_t n_batches = (n + batch_size - 1) / batch_size;
    std::vector<detail::WindowSums> all_sums(n);

    auto run_batch = [&](std::size_t bi) {
        const std::size_t lo = bi * batch_size;
        const std::size_t hi = std::min(n, lo + batch_size);
        const std::size_t chunk = windows.numel() / n;
        Tensor<T> batch({hi - lo, windows.dim(1), windows.dim(2), windows.dim(3),
                         windows.dim(4)});
        std::memcpy(batch.data(), windows.data() + lo * chunk,
                    (hi - lo) * chunk * sizeof(T));
        auto preds = rollout<T, ModelT>(nullptr, model, batch, J, K);
        for (std::size_t w = lo; w < hi; ++w) {
            all_sums[w] = detail::window_forecast_sums(batch, w - lo, J, K, preds);
        }
    };

    if (threads <= 1 || n_batches <= 1) {
        for (std::size_t bi = 0; bi < n_batches; ++bi) run_batch(bi);
    } else {
        const std::size_t workers = std::min(threads, n_batches);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w]() {
                for (std::size_t bi = w; bi < n_batches; bi += workers) run_batch(bi);
            });
        }
        for (auto& t : pool) t.join();
    }

    EvalSummary out;
    out.per_step_nmse.assign(K, 0);
    out.per_step_nmae.assign(K, 0);
    std::vector<double> step_num_mse(K, 0), step_den_mse(K, 0), step_num_mae(K, 0),
        step_den_mae(K, 0);
    double total_num_mse = 0, total_den_mse = 0, total_num_mae = 0, total_den_mae = 0;
    for (std::size_t w = 0; w < n; ++w) {
        const auto& s = all_sums[w];
        double wn = 0, wd = 0;
        for (std::size_t k = 0; k < K; ++k) {
            step_num_mse[k] += s.num_mse[k];
            step_den_mse[k] += s.den_mse[k];
            step_num_mae[k] += s.num_mae[k];
            step_den_mae[k] += s.den_mae[k];
            wn += s.num_mse[k];
            wd += s.den_mse[k];
        }
        if (wd <= 0) throw DataError("evaluate_model: window " + std::to_string(w) +
                                     " has zero forecast energy");
        out.window_nmse.push_back(wn / wd);
        total_num_mse += wn;
        total_den_mse += wd;
        for (std::size_t k = 0; k < K; ++k) {
            total_num_mae += s.num_mae[k];
            total_den_mae += s.den_mae[k];
        }
    }
    for (std::size_t k = 0; k < K; ++k) {
        out.per_step_nmse[k] = step_num_mse[k] / step_den_mse[k];
        out.per_step_nmae[k] = step_num_mae[k] / step_den_mae[k];
    }
    out.nmse_linear = total_num_mse / total_den_mse;
    out.nmae_linear = total_num_mae / total_den_mae;
    out.nmse_db = to_db_floored(out.nmse_linear);
    out.nmae_db = to_db_floored(out.nmae_linear);
    return out;
}

}  // namespace stpredict
