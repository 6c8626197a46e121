#include "stpredict/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "stpredict/training.hpp"

namespace stpredict {

using nlohmann::json;

template <typename T>
double nmse(const Tensor<T>& truth, const Tensor<T>& pred) {
    if (truth.dims() != pred.dims()) {
        throw ShapeError("nmse: shape mismatch " + format_dims(truth.dims()) + " vs " +
                         format_dims(pred.dims()));
    }
    double num = 0, den = 0;
    const T* pt = truth.data();
    const T* pp = pred.data();
    for (std::size_t i = 0; i < truth.numel(); ++i) {
        const double d = static_cast<double>(pt[i]) - static_cast<double>(pp[i]);
        num += d * d;
        den += static_cast<double>(pt[i]) * static_cast<double>(pt[i]);
    }
    if (den <= 0) throw DataError("nmse: ground truth has zero energy");
    return num / den;
}

template <typename T>
double nmae(const Tensor<T>& truth, const Tensor<T>& pred) {
    if (truth.dims() != pred.dims()) {
        throw ShapeError("nmae: shape mismatch " + format_dims(truth.dims()) + " vs " +
                         format_dims(pred.dims()));
    }
    double num = 0, den = 0;
    const T* pt = truth.data();
    const T* pp = pred.data();
    for (std::size_t i = 0; i < truth.numel(); ++i) {
        num += std::abs(static_cast<double>(pt[i]) - static_cast<double>(pp[i]));
        den += std::abs(static_cast<double>(pt[i]));
    }
    if (den <= 0) throw DataError("nmae: ground truth has zero energy");
    return num / den;
}

double to_db(double x) {
    if (x <= 0) {
        throw NumericError("to_db requires a positive argument, got " +
                           std::to_string(x));
    }
    return 10.0 * std::log10(x);
}

double to_db_floored(double x) {
    if (x <= 0) return -120.0;
    return std::max(to_db(x), -120.0);
}

CdfSeries mse_cdf(const std::vector<double>& window_values) {
    CdfSeries out;
    out.values = window_values;
    std::sort(out.values.begin(), out.values.end());
    out.fractions.resize(out.values.size());
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.fractions[i] = static_cast<double>(i + 1) /
                           static_cast<double>(out.values.size());
    }
    return out;
}

std::vector<MetricsRecord> run_ablation(const std::vector<VariantSpec>& variants,
                                        const std::vector<AblationDataset>& scenarios,
                                        const std::vector<std::uint64_t>& seeds,
                                        const AblationOptions& opts) {
    std::vector<MetricsRecord> records;
    for (const auto& variant : variants) {
        variant.validate();
        for (const auto& scenario : scenarios) {
            for (const std::uint64_t seed : seeds) {
                const std::size_t d = scenario.train.dim(2);
                const std::size_t spatial = scenario.train.dim(3);
                auto model = build_model<float>(variant, d, spatial, seed);

                TrainOptions topts;
                topts.iters = opts.iters;
                topts.batch = opts.batch;
                topts.lr = opts.lr;
                topts.seed = seed;
                topts.J = opts.J;
                topts.K = opts.K;
                topts.val_every = opts.val_every;
                supervised_train(model, scenario.train, Tensor<float>{}, topts);

                MetricsRecord rec;
                rec.variant = variant;
                rec.scenario_train = scenario.name;
                rec.scenario_test = scenario.name;
                rec.seed = seed;
                rec.param_count = count_params(model);
                rec.flop_count = count_flops(variant, d, spatial, opts.J + opts.K, 1);
                rec.summary = evaluate_model(model, scenario.test, opts.J, opts.K,
                                             opts.eval_threads);
                records.push_back(std::move(rec));
            }
        }
    }
    return records;
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string quoted = "\"";
    for (char c : s) {
        if (c == '"') quoted += '"';
        quoted += c;
    }
    quoted += '"';
    return quoted;
}

json record_key(const MetricsRecord& r) {
    json j;
    j["variant"] = r.variant.label();
    j["scenario_train"] = r.scenario_train;
    j["scenario_test"] = r.scenario_test;
    j["seed"] = r.seed;
    return j;
}

}  // namespace

void emit_report(const std::vector<MetricsRecord>& records, const std::string& out_dir,
                 const std::string& run_config_json,
                 const std::vector<std::pair<std::string, std::string>>& dataset_hashes) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output directory '" + out_dir + "'");

    {
        std::ofstream csv(out_dir + "/metrics.csv");
        if (!csv) throw DataError("cannot write '" + out_dir + "/metrics.csv'");
        csv << "variant,scenario_train,scenario_test,seed,nmse_linear,nmse_db,"
               "nmae_linear,nmae_db,params,flops\n";
        csv.precision(17);
        for (const auto& r : records) {
            csv << csv_field(r.variant.label()) << ',' << csv_field(r.scenario_train)
                << ',' << csv_field(r.scenario_test) << ',' << r.seed << ','
                << r.summary.nmse_linear << ',' << r.summary.nmse_db << ','
                << r.summary.nmae_linear << ',' << r.summary.nmae_db << ','
                << r.param_count << ',' << r.flop_count << "\n";
        }
    }
    {
        json curves = json::array();
        for (const auto& r : records) {
            json j = record_key(r);
            j["nmse_per_step"] = r.summary.per_step_nmse;
            j["nmae_per_step"] = r.summary.per_step_nmae;
            curves.push_back(j);
        }
        std::ofstream os(out_dir + "/curves.json");
        os << curves.dump(2) << "\n";
    }
    {
        json cdfs = json::array();
        for (const auto& r : records) {
            const auto series = mse_cdf(r.summary.window_nmse);
            json j = record_key(r);
            j["values"] = series.values;
            j["fractions"] = series.fractions;
            cdfs.push_back(j);
        }
        std::ofstream os(out_dir + "/cdf.json");
        os << cdfs.dump(2) << "\n";
    }
    {
        json manifest;
        manifest["config"] = run_config_json.empty() ? json(nullptr)
                                                     : json::parse(run_config_json);
        json hashes = json::object();
        for (const auto& [name, hash] : dataset_hashes) hashes[name] = hash;
        manifest["dataset_hashes"] = hashes;
        json rows = json::array();
        for (const auto& r : records) rows.push_back(record_key(r));
        manifest["records"] = rows;
        std::ofstream os(out_dir + "/manifest.json");
        os << manifest.dump(2) << "\n";
    }
}

std::size_t worker_threads_from_env(bool for_training) {
    const char* env = std::getenv("STPREDICT_THREADS");
    if (env && *env) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    if (for_training) return 1;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

template double nmse<float>(const Tensor<float>&, const Tensor<float>&);
template double nmse<double>(const Tensor<double>&, const Tensor<double>&);
template double nmae<float>(const Tensor<float>&, const Tensor<float>&);
template double nmae<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace stpredict
