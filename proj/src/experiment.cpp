#include "stpredict/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

namespace stpredict {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void reject_unknown_keys(const json& obj, const std::string& pointer,
                         const std::vector<std::string>& allowed) {
    for (const auto& [key, value] : obj.items()) {
        bool known = false;
        for (const auto& a : allowed) {
            if (key == a) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ConfigError(pointer + "/" + key + ": unknown key");
        }
    }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    return obj.at(key).get<T>();
}

ScenarioConfig parse_data_section(const json& d) {
    reject_unknown_keys(d, "/data",
                        {"scenario", "bursts", "delay_taps", "n_antennas", "carrier_hz",
                         "burst_interval_s", "max_doppler_hz", "n_paths",
                         "path_lifetime_bursts", "stationary_segments", "seed", "window",
                         "stride", "ratios", "J", "K"});
    ScenarioConfig cfg = ScenarioConfig::preset(
        scenario_from_string(get_or<std::string>(d, "scenario", "S1_city_campus")));
    cfg.bursts = get_or(d, "bursts", cfg.bursts);
    cfg.delay_taps = get_or(d, "delay_taps", cfg.delay_taps);
    cfg.n_antennas = get_or(d, "n_antennas", cfg.n_antennas);
    cfg.carrier_hz = get_or(d, "carrier_hz", cfg.carrier_hz);
    cfg.burst_interval_s = get_or(d, "burst_interval_s", cfg.burst_interval_s);
    cfg.max_doppler_hz = get_or(d, "max_doppler_hz", cfg.max_doppler_hz);
    cfg.n_paths = get_or(d, "n_paths", cfg.n_paths);
    cfg.path_lifetime_bursts = get_or(d, "path_lifetime_bursts", cfg.path_lifetime_bursts);
    if (d.contains("stationary_segments")) {
        cfg.stationary_segments.clear();
        for (const auto& seg : d.at("stationary_segments")) {
            if (!seg.is_array() || seg.size() != 2) {
                throw ConfigError("/data/stationary_segments: entries must be [start, len]");
            }
            cfg.stationary_segments.emplace_back(seg.at(0).get<int>(),
                                                 seg.at(1).get<int>());
        }
    }
    cfg.seed = get_or<std::uint64_t>(d, "seed", cfg.seed);
    return cfg;
}

VariantSpec parse_model_section(const json& m) {
    reject_unknown_keys(m, "/model",
                        {"base", "ta", "sta", "ghu", "channels", "ghu_channels", "kernel"});
    VariantSpec v;
    v.base = base_cell_from_string(get_or<std::string>(m, "base", "CAConvLSTM"));
    v.ta = get_or(m, "ta", v.ta);
    v.sta = get_or(m, "sta", v.sta);
    v.ghu = get_or(m, "ghu", v.ghu);
    v.channels = get_or(m, "channels", v.channels);
    v.ghu_channels = get_or(m, "ghu_channels", v.ghu_channels);
    v.kernel = get_or(m, "kernel", v.kernel);
    v.validate();
    return v;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    reject_unknown_keys(j, "", {"data", "model", "train", "meta", "eval", "ablate"});

    ExperimentConfig cfg;
    if (j.contains("data")) {
        const json& d = j.at("data");
        cfg.data = parse_data_section(d);
        cfg.window = get_or<std::size_t>(d, "window", cfg.window);
        cfg.stride = get_or<std::size_t>(d, "stride", cfg.stride);
        if (d.contains("ratios")) {
            const json& r = d.at("ratios");
            if (!r.is_array() || r.size() != 3 || !r[0].is_number_integer() ||
                !r[1].is_number_integer() || !r[2].is_number_integer()) {
                throw ConfigError("/data/ratios: must be three integers");
            }
            cfg.ratios = r.get<std::vector<int>>();
            for (int v : cfg.ratios) {
                if (v <= 0) throw ConfigError("/data/ratios: entries must be positive");
            }
        }
        cfg.horizon_j = get_or<std::size_t>(d, "J", cfg.horizon_j);
        cfg.horizon_k = get_or<std::size_t>(d, "K", cfg.horizon_k);
    }
    if (j.contains("model")) cfg.model = parse_model_section(j.at("model"));
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown_keys(t, "/train", {"iters", "batch", "lr", "seed", "val_every"});
        cfg.train.iters = get_or<std::size_t>(t, "iters", cfg.train.iters);
        cfg.train.batch = get_or<std::size_t>(t, "batch", cfg.train.batch);
        cfg.train.lr = get_or(t, "lr", cfg.train.lr);
        cfg.train.seed = get_or<std::uint64_t>(t, "seed", cfg.train.seed);
        cfg.train.val_every = get_or<std::size_t>(t, "val_every", cfg.train.val_every);
        if (cfg.train.batch < 1) throw ConfigError("/train/batch: must be >= 1");
        if (cfg.train.lr <= 0) throw ConfigError("/train/lr: must be positive");
    }
    if (j.contains("meta")) {
        const json& m = j.at("meta");
        reject_unknown_keys(m, "/meta",
                            {"student_lr", "teacher_lr", "labeled_fraction", "adaptive",
                             "feedback_clip"});
        cfg.meta.student_lr = get_or(m, "student_lr", cfg.meta.student_lr);
        cfg.meta.teacher_lr = get_or(m, "teacher_lr", cfg.meta.teacher_lr);
        cfg.meta.labeled_fraction = get_or(m, "labeled_fraction", cfg.meta.labeled_fraction);
        cfg.meta.adaptive = get_or(m, "adaptive", cfg.meta.adaptive);
        cfg.meta.feedback_clip = get_or(m, "feedback_clip", cfg.meta.feedback_clip);
        cfg.meta.validate();
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        reject_unknown_keys(e, "/eval", {"out_dir"});
        cfg.eval_out_dir = get_or<std::string>(e, "out_dir", cfg.eval_out_dir);
    }
    if (j.contains("ablate")) {
        const json& a = j.at("ablate");
        reject_unknown_keys(a, "/ablate", {"seeds", "scenarios"});
        if (a.contains("seeds")) {
            cfg.ablate_seeds = a.at("seeds").get<std::vector<std::uint64_t>>();
            if (cfg.ablate_seeds.empty()) {
                throw ConfigError("/ablate/seeds: must list at least one seed");
            }
        }
        if (a.contains("scenarios")) {
            cfg.ablate_scenarios.clear();
            for (const auto& s : a.at("scenarios")) {
                cfg.ablate_scenarios.push_back(scenario_from_string(s.get<std::string>()));
            }
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
    return from_json_text(text);
}

void ExperimentConfig::validate() const {
    data.validate();
    model.validate();
    if (horizon_j < 1 || horizon_k < 1) {
        throw ConfigError("/data/J and /data/K must be >= 1");
    }
    if (horizon_j + horizon_k != window) {
        throw ConfigError("/data/window must equal J+K, got window=" +
                          std::to_string(window) + " J+K=" +
                          std::to_string(horizon_j + horizon_k));
    }
}

std::string ExperimentConfig::resolved_json() const {
    json j;
    json d = json::parse(scenario_config_to_json(data));
    d["window"] = window;
    d["stride"] = stride;
    d["ratios"] = ratios;
    d["J"] = horizon_j;
    d["K"] = horizon_k;
    j["data"] = d;
    j["model"] = json::parse(variant_to_json(model));
    j["train"] = {{"iters", train.iters},
                  {"batch", train.batch},
                  {"lr", train.lr},
                  {"seed", train.seed},
                  {"val_every", train.val_every}};
    j["meta"] = {{"student_lr", meta.student_lr},
                 {"teacher_lr", meta.teacher_lr},
                 {"labeled_fraction", meta.labeled_fraction},
                 {"adaptive", meta.adaptive},
                 {"feedback_clip", meta.feedback_clip}};
    j["eval"] = {{"out_dir", eval_out_dir}};
    json scen = json::array();
    for (const auto s : ablate_scenarios) scen.push_back(to_string(s));
    j["ablate"] = {{"seeds", ablate_seeds}, {"scenarios", scen}};
    return j.dump(2);
}

void generate_dataset(const ExperimentConfig& cfg, const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create dataset directory '" + out_dir + "'");

    auto seq = generate_synthetic(cfg.data);
    auto frames = complex_to_real(seq);
    auto windows = window_slices(frames, cfg.window, cfg.stride);
    if (windows.size() < 10) {
        throw DataError("only " + std::to_string(windows.size()) +
                        " windows; increase /data/bursts");
    }
    auto split = split_dataset(windows.size(), cfg.ratios, cfg.data.seed);

    std::vector<Tensor<float>> train_w, val_w, test_w;
    for (auto i : split.train) train_w.push_back(windows[i]);
    for (auto i : split.val) val_w.push_back(windows[i]);
    for (auto i : split.test) test_w.push_back(windows[i]);

    auto scales = fit_antennawise_scales(train_w);
    apply_antennawise_scales(train_w, scales);
    apply_antennawise_scales(val_w, scales);
    apply_antennawise_scales(test_w, scales);

    auto all_indices = [](std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        return idx;
    };
    write_tensor(out_dir + "/train.csit",
                 stack_windows(train_w, all_indices(train_w.size())));
    write_tensor(out_dir + "/val.csit", stack_windows(val_w, all_indices(val_w.size())));
    write_tensor(out_dir + "/test.csit",
                 stack_windows(test_w, all_indices(test_w.size())));

    std::string combined = sha256_file(out_dir + "/train.csit") +
                           sha256_file(out_dir + "/val.csit") +
                           sha256_file(out_dir + "/test.csit");
    const std::string hash = sha256_hex(
        reinterpret_cast<const unsigned char*>(combined.data()), combined.size());

    json manifest;
    manifest["format_version"] = 1;
    manifest["scenario"] = json::parse(scenario_config_to_json(cfg.data));
    manifest["window"] = {{"width", cfg.window},
                          {"stride", cfg.stride},
                          {"J", cfg.horizon_j},
                          {"K", cfg.horizon_k}};
    manifest["splits"] = {
        {"train", {{"file", "train.csit"}, {"count", split.train.size()}, {"windows", split.train}}},
        {"val", {{"file", "val.csit"}, {"count", split.val.size()}, {"windows", split.val}}},
        {"test", {{"file", "test.csit"}, {"count", split.test.size()}, {"windows", split.test}}}};
    json scales_json = json::array();
    for (std::size_t i = 0; i < scales.n_antennas; ++i) {
        json row = json::array();
        for (std::size_t k = 0; k < scales.n_antennas; ++k) {
            row.push_back(scales.at(i, k));
        }
        scales_json.push_back(row);
    }
    manifest["scales"] = scales_json;
    manifest["content_hash"] = hash;
    std::ofstream os(out_dir + "/manifest.json");
    if (!os) throw DataError("cannot write '" + out_dir + "/manifest.json'");
    os << manifest.dump(2) << "\n";
}

DatasetOnDisk load_dataset(const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw DataError("missing dataset manifest '" + dir + "/manifest.json'");
    json manifest = json::parse(is, nullptr, /*allow_exceptions=*/false);
    if (manifest.is_discarded()) {
        throw FormatError("dataset manifest '" + dir + "/manifest.json' is not valid JSON");
    }
    DatasetOnDisk ds;
    ds.dir = dir;
    ds.train = read_tensor(dir + "/train.csit");
    ds.val = read_tensor(dir + "/val.csit");
    ds.test = read_tensor(dir + "/test.csit");
    ds.horizon_j = manifest.at("window").at("J").get<std::size_t>();
    ds.horizon_k = manifest.at("window").at("K").get<std::size_t>();
    ds.content_hash = manifest.at("content_hash").get<std::string>();
    const auto& scales = manifest.at("scales");
    ds.scales.n_antennas = scales.size();
    for (const auto& row : scales) {
        for (const auto& v : row) ds.scales.scales.push_back(v.get<float>());
    }
    return ds;
}

namespace {

void log_resolved_config(const ExperimentConfig& cfg) {
    std::cerr << "resolved config:\n" << cfg.resolved_json() << "\n";
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write '" + path + "'");
    os << text;
}

json eval_summary_json(const EvalSummary& s) {
    json j;
    j["nmse_linear"] = s.nmse_linear;
    j["nmse_db"] = s.nmse_db;
    j["nmae_linear"] = s.nmae_linear;
    j["nmae_db"] = s.nmae_db;
    j["nmse_per_step"] = s.per_step_nmse;
    j["nmae_per_step"] = s.per_step_nmae;
    return j;
}

}  // namespace

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
    auto cfg = ExperimentConfig::from_file(config_path);
    log_resolved_config(cfg);
    generate_dataset(cfg, out_dir);
    auto ds = load_dataset(out_dir);
    json out;
    out["dir"] = out_dir;
    out["content_hash"] = ds.content_hash;
    out["counts"] = {{"train", ds.train.dim(0)},
                     {"val", ds.val.dim(0)},
                     {"test", ds.test.dim(0)}};
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
    auto cfg = ExperimentConfig::from_file(config_path);
    log_resolved_config(cfg);
    auto ds = load_dataset(data_dir);
    if (ds.horizon_j != cfg.horizon_j || ds.horizon_k != cfg.horizon_k) {
        throw DataError("dataset horizons J=" + std::to_string(ds.horizon_j) + " K=" +
                        std::to_string(ds.horizon_k) + " do not match config J=" +
                        std::to_string(cfg.horizon_j) + " K=" +
                        std::to_string(cfg.horizon_k));
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output directory '" + out_dir + "'");

    TrainOptions opts = cfg.train;
    opts.J = cfg.horizon_j;
    opts.K = cfg.horizon_k;
    auto model = build_model<float>(cfg.model, ds.train.dim(2), ds.train.dim(3),
                                    cfg.train.seed);
    auto history = supervised_train(model, ds.train, ds.val, opts);
    save_checkpoint(model, out_dir + "/checkpoint.stpc");
    write_history_jsonl(history, out_dir + "/history.jsonl");
    write_text(out_dir + "/config.json", cfg.resolved_json() + "\n");

    json out;
    out["checkpoint"] = out_dir + "/checkpoint.stpc";
    out["iters"] = history.records.size();
    out["params"] = count_params(model);
    for (auto it = history.records.rbegin(); it != history.records.rend(); ++it) {
        if (it->val_nmse_db) {
            out["final_val_nmse_db"] = *it->val_nmse_db;
            break;
        }
    }
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_meta_train(const std::string& config_path, const std::string& labeled_dir,
                   const std::string& unlabeled_dir, const std::string& out_dir,
                   bool adaptive) {
    auto cfg = ExperimentConfig::from_file(config_path);
    if (adaptive) cfg.meta.adaptive = true;
    log_resolved_config(cfg);
    auto labeled = load_dataset(labeled_dir);
    auto unlabeled = load_dataset(unlabeled_dir);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output directory '" + out_dir + "'");

    TrainOptions opts = cfg.train;
    opts.J = cfg.horizon_j;
    opts.K = cfg.horizon_k;
    auto teacher = build_model<float>(cfg.model, labeled.train.dim(2),
                                      labeled.train.dim(3), cfg.train.seed);
    auto student = build_model<float>(cfg.model, labeled.train.dim(2),
                                      labeled.train.dim(3),
                                      Rng::derive(cfg.train.seed, 0x57D));
    auto history = meta_train(teacher, student, labeled.train, unlabeled.train,
                              unlabeled.val, cfg.meta, opts);
    save_checkpoint(student, out_dir + "/student.stpc");
    save_checkpoint(teacher, out_dir + "/teacher.stpc");
    write_history_jsonl(history, out_dir + "/history.jsonl");
    write_text(out_dir + "/config.json", cfg.resolved_json() + "\n");

    json out;
    out["student"] = out_dir + "/student.stpc";
    out["teacher"] = out_dir + "/teacher.stpc";
    out["iters"] = history.records.size();
    for (auto it = history.records.rbegin(); it != history.records.rend(); ++it) {
        if (it->val_nmse_db) {
            out["final_student_val_nmse_db"] = *it->val_nmse_db;
            break;
        }
    }
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& out_dir) {
    auto model = load_checkpoint<float>(checkpoint_path);
    auto ds = load_dataset(data_dir);
    if (model.input_channels != ds.test.dim(2) || model.spatial != ds.test.dim(3)) {
        throw DataError("checkpoint geometry (D=" + std::to_string(model.input_channels) +
                        ", spatial=" + std::to_string(model.spatial) +
                        ", variant=" + model.variant.label() +
                        ") does not match dataset (D=" + std::to_string(ds.test.dim(2)) +
                        ", spatial=" + std::to_string(ds.test.dim(3)) + ")");
    }
    const std::size_t threads = worker_threads_from_env(/*for_training=*/false);
    auto summary = evaluate_model(model, ds.test, ds.horizon_j, ds.horizon_k, threads);

    if (!out_dir.empty()) {
        MetricsRecord rec;
        rec.variant = model.variant;
        rec.scenario_train = "checkpoint";
        rec.scenario_test = ds.dir;
        rec.param_count = count_params(model);
        rec.flop_count = count_flops(model.variant, model.input_channels, model.spatial,
                                     ds.horizon_j + ds.horizon_k, 1);
        rec.summary = summary;
        emit_report({rec}, out_dir, "", {{"test", ds.content_hash}});
    }
    json out = eval_summary_json(summary);
    out["params"] = count_params(model);
    out["dataset_hash"] = ds.content_hash;
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir) {
    auto cfg = ExperimentConfig::from_file(config_path);
    log_resolved_config(cfg);

    std::vector<Scenario> scenarios = cfg.ablate_scenarios;
    if (scenarios.empty()) scenarios.push_back(cfg.data.scenario);

    std::vector<AblationDataset> datasets;
    std::vector<std::pair<std::string, std::string>> hashes;
    for (const Scenario s : scenarios) {
        ExperimentConfig scenario_cfg = cfg;
        const double configured = cfg.data.max_doppler_hz;
        const double preset = ScenarioConfig::preset(cfg.data.scenario).max_doppler_hz;
        scenario_cfg.data = ScenarioConfig::preset(s);
        scenario_cfg.data.bursts = cfg.data.bursts;
        scenario_cfg.data.delay_taps = cfg.data.delay_taps;
        scenario_cfg.data.n_antennas = cfg.data.n_antennas;
        scenario_cfg.data.n_paths = cfg.data.n_paths;
        scenario_cfg.data.path_lifetime_bursts = cfg.data.path_lifetime_bursts;
        scenario_cfg.data.seed = cfg.data.seed;
        // keep the configured doppler scaling relative to its preset
        if (preset > 0) {
            scenario_cfg.data.max_doppler_hz *= configured / preset;
        }
        const std::string dir = out_dir + "/data_" + to_string(s);
        generate_dataset(scenario_cfg, dir);
        auto ds = load_dataset(dir);
        AblationDataset ab;
        ab.name = to_string(s);
        ab.train = ds.train;
        ab.val = ds.val;
        ab.test = ds.test;
        datasets.push_back(std::move(ab));
        hashes.emplace_back(to_string(s), ds.content_hash);
    }

    AblationOptions opts;
    opts.iters = cfg.train.iters;
    opts.batch = cfg.train.batch;
    opts.lr = cfg.train.lr;
    opts.J = cfg.horizon_j;
    opts.K = cfg.horizon_k;
    opts.eval_threads = worker_threads_from_env(/*for_training=*/false);
    auto variants = default_ablation_variants(cfg.model.channels, cfg.model.ghu_channels);
    auto records = run_ablation(variants, datasets, cfg.ablate_seeds, opts);
    emit_report(records, out_dir, cfg.resolved_json(), hashes);

    json rows = json::array();
    for (const auto& r : records) {
        json row;
        row["variant"] = r.variant.label();
        row["scenario"] = r.scenario_test;
        row["seed"] = r.seed;
        row["nmse_db"] = r.summary.nmse_db;
        row["nmae_db"] = r.summary.nmae_db;
        row["params"] = r.param_count;
        rows.push_back(row);
    }
    std::cout << rows.dump() << "\n";
    return 0;
}

int cmd_params(const std::string& config_path) {
    auto cfg = ExperimentConfig::from_file(config_path);
    const std::size_t d = static_cast<std::size_t>(cfg.data.delay_taps);
    const std::size_t spatial = 2 * static_cast<std::size_t>(cfg.data.n_antennas);
    auto model = build_model<float>(cfg.model, d, spatial, cfg.train.seed);
    json out;
    out["variant"] = cfg.model.label();
    out["input_channels"] = d;
    out["spatial"] = spatial;
    out["params"] = count_params(model);
    out["flops_per_window"] =
        count_flops(cfg.model, d, spatial, cfg.horizon_j + cfg.horizon_k, 1);
    std::cout << out.dump() << "\n";
    return 0;
}

}  // namespace stpredict
