#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oocs/data.hpp"
#include "oocs/nn.hpp"
#include "oocs/oocs_builder.hpp"

namespace oocs::harness {

struct TrainConfig {
    std::string network = "base";  // base | oocs | oocs-flat | oocs-3x3
    int epochs = 10;
    int batch_size = 64;
    double learning_rate = 1e-4;
    uint64_t seed = 0;
    int kernel_size = 3;
    double gamma = 0.5;
    std::string insertion = "relu1";
    std::string checkpoint_path = "model.ckpt";
    std::string history_path = "history.csv";
    std::string data_dir;      // empty: use OOCS_DATA_DIR
    int train_subset = 0;      // 0 = all training samples after the validation holdout
};

/// Conv(32)-Conv(32)-Pool-Conv(64)-Pool-Dense(128)-Dropout-Dense(10) stack
/// for 28x28x1 inputs.
nn::NetworkSpec default_mnist_base();

/// Split covering the first conv block only, so the transform preserves the
/// parameter count exactly.
builder::OocsConfig default_oocs_config(int kernel_size, double gamma,
                                        bool flat_kernel,
                                        const std::string& insertion = "relu1");

/// Network for a TrainConfig, with its model id (the network variant name).
struct BuiltNetwork {
    nn::NetworkSpec spec;
    std::string model_id;
};
BuiltNetwork build_network(const TrainConfig& cfg);

std::string resolve_data_dir(const std::string& flag_value);

/// Deterministic train/validation split: seed-0 shuffle, last 5000 held out.
struct DataSplit {
    data::Dataset train;
    data::Dataset validation;
};
DataSplit split_mnist_train(const data::Dataset& full, int train_subset);

struct Metrics {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    size_t n = 0;
};
Metrics evaluate(const nn::NetworkSpec& spec, const nn::Params& params,
                 const data::Dataset& ds, int batch_size = 256);

struct TrainResult {
    nn::NetworkSpec spec;
    nn::Params params;
    std::string model_id;
};
TrainResult run_train(const TrainConfig& cfg);

struct EvalRow {
    std::string model_id;
    std::string test_set_id;
    std::string perturbation;
    double magnitude = 0.0;
    uint64_t seed = 0;
    double accuracy = 0.0;
    double mean_loss = 0.0;
    size_t n = 0;
};

inline constexpr const char* kReportHeader =
    "model_id,test_set_id,perturbation,magnitude,seed,accuracy,mean_loss,n";

void append_report_rows(const std::string& csv_path, const std::vector<EvalRow>& rows);
std::vector<EvalRow> parse_report_csv(const std::string& csv_path);

/// Identity magnitude first, then the published grid for the kind.
std::vector<double> default_magnitudes(const std::string& kind);

data::Dataset perturb_dataset(const data::Dataset& ds, const std::string& kind,
                              double magnitude, uint64_t seed);

/// One row per (kind, magnitude, seed), sorted canonically.
std::vector<EvalRow> run_robustness(const nn::NetworkSpec& spec, const nn::Params& params,
                                    const std::string& model_id, const data::Dataset& test,
                                    const std::vector<std::string>& kinds,
                                    const std::vector<uint64_t>& seeds);

/// Markdown summary plus one accuracy-vs-magnitude SVG per perturbation kind.
void write_report(const std::vector<EvalRow>& rows, const std::string& out_dir);

}  // namespace oocs::harness
