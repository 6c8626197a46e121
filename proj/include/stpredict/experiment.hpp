#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stpredict/data.hpp"
#include "stpredict/evaluation.hpp"
#include "stpredict/network.hpp"
#include "stpredict/training.hpp"

namespace stpredict {

// Fully-resolved run configuration. JSON is the source of truth; command-line
// flags only select files and toggle booleans. Unknown keys are rejected with
// their JSON pointer path.
struct ExperimentConfig {
    ScenarioConfig data;
    std::size_t window = 20;
    std::size_t stride = 20;
    std::vector<int> ratios = {7, 1, 2};
    std::size_t horizon_j = 10;
    std::size_t horizon_k = 10;

    VariantSpec model;
    TrainOptions train;
    MetaConfig meta;

    std::string eval_out_dir = "out";
    std::vector<Scenario> ablate_scenarios;
    std::vector<std::uint64_t> ablate_seeds = {1};

    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
    std::string resolved_json() const;

    void validate() const;
};

struct DatasetOnDisk {
    Tensor<float> train, val, test;
    NormalizationScales scales;
    std::size_t horizon_j = 0, horizon_k = 0;
    std::string content_hash;
    std::string dir;
};

// Generate, preprocess (complex->real, window, split, normalize with
// training-split scales) and persist a dataset directory.
void generate_dataset(const ExperimentConfig& cfg, const std::string& out_dir);

DatasetOnDisk load_dataset(const std::string& dir);

// Command bodies shared by the CLI binary and the test suites. Each returns
// the process exit code.
int cmd_gen_data(const std::string& config_path, const std::string& out_dir);
int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir);
int cmd_meta_train(const std::string& config_path, const std::string& labeled_dir,
                   const std::string& unlabeled_dir, const std::string& out_dir,
                   bool adaptive);
int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& out_dir);
int cmd_ablate(const std::string& config_path, const std::string& out_dir);
int cmd_params(const std::string& config_path);

}  // namespace stpredict
