#include "oocs/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace oocs::harness {

namespace fs = std::filesystem;

nn::NetworkSpec default_mnist_base() {
    const std::string text =
        "oocs-net-v1\n"
        "input 28 28 1\n"
        "conv1 conv3x3 filters=32 inputs=input\n"
        "relu1 relu inputs=conv1\n"
        "conv2 conv3x3 filters=32 inputs=relu1\n"
        "relu2 relu inputs=conv2\n"
        "pool1 maxpool2x2 inputs=relu2\n"
        "conv3 conv3x3 filters=64 inputs=pool1\n"
        "relu3 relu inputs=conv3\n"
        "pool2 maxpool2x2 inputs=relu3\n"
        "flat flatten inputs=pool2\n"
        "dense1 dense units=128 inputs=flat\n"
        "relu4 relu inputs=dense1\n"
        "drop1 dropout rate=0.5 inputs=relu4\n"
        "dense2 dense units=10 inputs=drop1\n"
        "loss softmax_ce inputs=dense2\n";
    return nn::NetworkSpec::parse(text);
}

builder::OocsConfig default_oocs_config(int kernel_size, double gamma, bool flat_kernel,
                                        const std::string& insertion) {
    builder::OocsConfig cfg;
    cfg.split_start = "conv1";
    cfg.split_end = "relu1";
    cfg.insertion_node = insertion;
    cfg.dog_kernel_size = kernel_size;
    cfg.dog_gamma = gamma;
    cfg.response_source = builder::ResponseSource::NetworkInput;
    cfg.flat_kernel = flat_kernel;
    return cfg;
}

BuiltNetwork build_network(const TrainConfig& cfg) {
    const nn::NetworkSpec base = default_mnist_base();
    if (cfg.network == "base") return {base, "base"};

    int kernel = cfg.kernel_size;
    double gamma = cfg.gamma;
    bool flat = false;
    if (cfg.network == "oocs-3x3") {
        kernel = 3;
        gamma = 0.5;
    } else if (cfg.network == "oocs-flat") {
        flat = true;
    } else if (cfg.network != "oocs") {
        throw std::invalid_argument("unknown network variant '" + cfg.network + "'");
    }
    const auto oocs_cfg = default_oocs_config(kernel, gamma, flat, cfg.insertion);
    nn::NetworkSpec spec = builder::build_oocs_network(base, oocs_cfg);
    const auto report = builder::validate_equivalence(base, spec);
    if (!report.ok) {
        std::string msg = "oocs transform failed equivalence validation:";
        for (const auto& f : report.failures) msg += " " + f + ";";
        throw std::runtime_error(msg);
    }
    return {std::move(spec), cfg.network};
}

std::string resolve_data_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("OOCS_DATA_DIR")) return env;
    throw data::DataError(data::DataErrorCode::Io,
                          "no data directory: pass --data-dir or set OOCS_DATA_DIR");
}

DataSplit split_mnist_train(const data::Dataset& full, int train_subset) {
    constexpr size_t kValidationSize = 5000;
    if (full.size() <= kValidationSize)
        throw std::invalid_argument("training set too small for the validation holdout");
    const std::vector<size_t> order = data::shuffled_indices(full.size(), 0);

    DataSplit split;
    split.train.num_classes = split.validation.num_classes = full.num_classes;
    split.train.name = full.name + "-train";
    split.validation.name = full.name + "-val";

    const size_t train_pool = full.size() - kValidationSize;
    const size_t take = (train_subset > 0)
                            ? std::min<size_t>(train_subset, train_pool)
                            : train_pool;
    for (size_t i = 0; i < take; ++i) {
        split.train.images.push_back(full.images[order[i]]);
        split.train.labels.push_back(full.labels[order[i]]);
    }
    for (size_t i = train_pool; i < full.size(); ++i) {
        split.validation.images.push_back(full.images[order[i]]);
        split.validation.labels.push_back(full.labels[order[i]]);
    }
    return split;
}

namespace {

size_t correct_predictions(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
    size_t correct = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index best;
        logits.row(r).maxCoeff(&best);
        if (static_cast<int>(best) == labels[r]) ++correct;
    }
    return correct;
}

}  // namespace

Metrics evaluate(const nn::NetworkSpec& spec, const nn::Params& params,
                 const data::Dataset& ds, int batch_size) {
    Metrics m;
    m.n = ds.size();
    double loss_sum = 0.0;
    size_t correct = 0;
    for (size_t start = 0; start < ds.size(); start += batch_size) {
        const size_t end = std::min(ds.size(), start + batch_size);
        std::vector<const img::ImageTensor*> images;
        std::vector<int> labels;
        for (size_t i = start; i < end; ++i) {
            images.push_back(&ds.images[i]);
            labels.push_back(ds.labels[i]);
        }
        const nn::Tensor batch = nn::pack_batch(images);
        const nn::ForwardResult fwd = nn::forward(spec, params, batch, nn::RunMode::Eval, 0);
        loss_sum += nn::cross_entropy(fwd.logits, labels) * static_cast<double>(labels.size());
        correct += correct_predictions(fwd.logits, labels);
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(m.n);
    m.mean_loss = loss_sum / static_cast<double>(m.n);
    return m;
}

TrainResult run_train(const TrainConfig& cfg) {
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw std::invalid_argument("epochs and batch size must be positive");
    const std::string dir = resolve_data_dir(cfg.data_dir);
    const data::Dataset full = data::load_mnist_idx(dir + "/train-images-idx3-ubyte",
                                                    dir + "/train-labels-idx1-ubyte");
    const DataSplit split = split_mnist_train(full, cfg.train_subset);

    BuiltNetwork net = build_network(cfg);
    nn::Params params = nn::init_params(net.spec, cfg.seed);
    std::printf("model=%s params=%zu train=%zu val=%zu\n", net.model_id.c_str(),
                params.total_count(), split.train.size(), split.validation.size());

    nn::AdamConfig adam_cfg;
    adam_cfg.learning_rate = cfg.learning_rate;
    nn::AdamState adam = nn::AdamState::make(params, adam_cfg);

    std::ofstream history(cfg.history_path);
    if (!history) throw std::runtime_error("cannot open '" + cfg.history_path + "'");
    history << "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds\n";

    uint64_t step_seed = cfg.seed * 0x9e3779b97f4a7c15ULL + 1;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        data::BatchPlan plan;
        plan.batch_size = cfg.batch_size;
        plan.shuffle_seed = cfg.seed * 1000003ULL + epoch;
        double loss_sum = 0.0;
        size_t seen = 0, correct = 0;
        for (const data::Batch& b : data::batches(split.train, plan)) {
            const nn::Tensor batch = nn::pack_batch(b.images);
            ++step_seed;
            const nn::ForwardResult fwd =
                nn::forward(net.spec, params, batch, nn::RunMode::Train, step_seed);
            const nn::BackwardResult bwd = nn::backward(net.spec, params, fwd.cache, b.labels);
            nn::adam_step(params, bwd.grads, adam);
            loss_sum += bwd.loss * static_cast<double>(b.labels.size());
            correct += correct_predictions(fwd.logits, b.labels);
            seen += b.labels.size();
        }
        const Metrics val = evaluate(net.spec, params, split.validation);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char line[256];
        std::snprintf(line, sizeof(line), "%d,%.6f,%.6f,%.6f,%.6f,%.3f\n", epoch + 1,
                      loss_sum / static_cast<double>(seen),
                      static_cast<double>(correct) / static_cast<double>(seen),
                      val.mean_loss, val.accuracy, wall);
        history << line;
        history.flush();
        std::printf("epoch %d %s", epoch + 1, line);
        std::fflush(stdout);
    }

    nn::save_checkpoint(cfg.checkpoint_path, net.spec, params);
    std::ofstream spec_out(cfg.checkpoint_path + ".spec");
    spec_out << net.spec.serialize();

    return {std::move(net.spec), std::move(params), net.model_id};
}

void append_report_rows(const std::string& csv_path, const std::vector<EvalRow>& rows) {
    const bool fresh = !fs::exists(csv_path) || fs::file_size(csv_path) == 0;
    std::ofstream out(csv_path, std::ios::app);
    if (!out) throw std::runtime_error("cannot open '" + csv_path + "'");
    if (fresh) out << kReportHeader << "\n";
    for (const auto& r : rows) {
        char line[320];
        std::snprintf(line, sizeof(line), "%s,%s,%s,%g,%llu,%.6f,%.6f,%zu\n",
                      r.model_id.c_str(), r.test_set_id.c_str(), r.perturbation.c_str(),
                      r.magnitude, static_cast<unsigned long long>(r.seed), r.accuracy,
                      r.mean_loss, r.n);
        out << line;
    }
}

std::vector<EvalRow> parse_report_csv(const std::string& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw std::runtime_error("cannot open '" + csv_path + "'");
    std::vector<EvalRow> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line_no == 1) {
            if (line != kReportHeader)
                throw std::runtime_error(csv_path + ":1: unexpected header");
            continue;
        }
        std::vector<std::string> fields;
        std::istringstream ls(line);
        std::string field;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != 8)
            throw std::runtime_error(csv_path + ":" + std::to_string(line_no) +
                                     ": expected 8 fields, got " + std::to_string(fields.size()));
        EvalRow r;
        r.model_id = fields[0];
        r.test_set_id = fields[1];
        r.perturbation = fields[2];
        try {
            size_t pos = 0;
            r.magnitude = std::stod(fields[3], &pos);
            if (pos != fields[3].size()) throw std::invalid_argument("magnitude");
            r.seed = std::stoull(fields[4]);
            r.accuracy = std::stod(fields[5], &pos);
            if (pos != fields[5].size() || r.accuracy < 0.0 || r.accuracy > 1.0)
                throw std::invalid_argument("accuracy");
            r.mean_loss = std::stod(fields[6]);
            r.n = std::stoull(fields[7]);
        } catch (const std::exception&) {
            throw std::runtime_error(csv_path + ":" + std::to_string(line_no) +
                                     ": malformed numeric field");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<double> default_magnitudes(const std::string& kind) {
    if (kind == "gaussian") return {0.0, 0.05, 0.1, 0.15, 0.2};
    if (kind == "saltpepper") return {0.0, 0.05, 0.1, 0.15, 0.2};
    if (kind == "gamma") return {1.0, 2.0, 3.0, 4.0, 1.0 / 2, 1.0 / 3, 1.0 / 4};
    if (kind == "contrast") return {1.0, 0.8, 0.6, 0.4, 1.2, 1.4, 1.6};
    throw std::invalid_argument("unknown perturbation kind '" + kind + "'");
}

data::Dataset perturb_dataset(const data::Dataset& ds, const std::string& kind,
                              double magnitude, uint64_t seed) {
    data::Dataset out;
    out.labels = ds.labels;
    out.num_classes = ds.num_classes;
    out.name = ds.name + "-" + kind;
    out.images.reserve(ds.size());
    for (size_t i = 0; i < ds.size(); ++i) {
        const uint64_t image_seed = seed * 0x9e3779b97f4a7c15ULL + i;
        const img::ImageTensor& im = ds.images[i];
        if (kind == "gaussian")
            out.images.push_back(img::perturb_gaussian(im, magnitude, image_seed));
        else if (kind == "saltpepper")
            out.images.push_back(img::perturb_salt_pepper(im, magnitude, image_seed));
        else if (kind == "gamma")
            out.images.push_back(img::gamma_correct(im, magnitude));
        else if (kind == "contrast")
            out.images.push_back(img::adjust_contrast(im, magnitude));
        else
            throw std::invalid_argument("unknown perturbation kind '" + kind + "'");
    }
    return out;
}

std::vector<EvalRow> run_robustness(const nn::NetworkSpec& spec, const nn::Params& params,
                                    const std::string& model_id, const data::Dataset& test,
                                    const std::vector<std::string>& kinds,
                                    const std::vector<uint64_t>& seeds) {
    std::vector<EvalRow> rows;
    for (const std::string& kind : kinds) {
        for (double magnitude : default_magnitudes(kind)) {
            for (uint64_t seed : seeds) {
                const data::Dataset perturbed = perturb_dataset(test, kind, magnitude, seed);
                const Metrics m = evaluate(spec, params, perturbed);
                EvalRow r;
                r.model_id = model_id;
                r.test_set_id = test.name;
                r.perturbation = kind;
                r.magnitude = magnitude;
                r.seed = seed;
                r.accuracy = m.accuracy;
                r.mean_loss = m.mean_loss;
                r.n = m.n;
                rows.push_back(std::move(r));
            }
        }
    }
    std::sort(rows.begin(), rows.end(), [](const EvalRow& a, const EvalRow& b) {
        if (a.perturbation != b.perturbation) return a.perturbation < b.perturbation;
        if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
        return a.seed < b.seed;
    });
    return rows;
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

void write_svg(const std::string& path, const std::string& kind,
               const std::map<std::string, std::map<double, std::pair<double, int>>>& series) {
    const int width = 640, height = 480, margin = 60;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "'");

    double min_mag = 1e300, max_mag = -1e300;
    for (const auto& [model, points] : series)
        for (const auto& [mag, acc] : points) {
            min_mag = std::min(min_mag, mag);
            max_mag = std::max(max_mag, mag);
        }
    if (max_mag <= min_mag) max_mag = min_mag + 1.0;

    auto px = [&](double mag) {
        return margin + (mag - min_mag) / (max_mag - min_mag) * (width - 2 * margin);
    };
    auto py = [&](double acc) { return height - margin - acc * (height - 2 * margin); };

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
        << "\" height=\"" << height << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\""
        << width - margin << "\" y2=\"" << height - margin << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin
        << "\" y2=\"" << height - margin << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"" << height - 15
        << "\" text-anchor=\"middle\">" << kind << " magnitude</text>\n";
    out << "<text x=\"15\" y=\"" << height / 2 << "\" transform=\"rotate(-90 15 "
        << height / 2 << ")\" text-anchor=\"middle\">accuracy</text>\n";

    int color = 0;
    int legend_y = margin;
    for (const auto& [model, points] : series) {
        const char* stroke = kPalette[color % 6];
        out << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"2\" points=\"";
        for (const auto& [mag, acc] : points)
            out << px(mag) << "," << py(acc.first / acc.second) << " ";
        out << "\"/>\n";
        out << "<text x=\"" << width - margin + 5 << "\" y=\"" << legend_y << "\" fill=\""
            << stroke << "\" font-size=\"12\">" << model << "</text>\n";
        legend_y += 16;
        ++color;
    }
    out << "</svg>\n";
}

}  // namespace

void write_report(const std::vector<EvalRow>& rows, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream summary(out_dir + "/summary.md");
    if (!summary) throw std::runtime_error("cannot open summary in '" + out_dir + "'");
    summary << "# Evaluation summary\n\n";
    if (rows.empty()) return;

    summary << "| model | test set | perturbation | magnitude | seed | accuracy | mean loss | n |\n";
    summary << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        char line[320];
        std::snprintf(line, sizeof(line), "| %s | %s | %s | %g | %llu | %.4f | %.4f | %zu |\n",
                      r.model_id.c_str(), r.test_set_id.c_str(), r.perturbation.c_str(),
                      r.magnitude, static_cast<unsigned long long>(r.seed), r.accuracy,
                      r.mean_loss, r.n);
        summary << line;
    }

    // kind -> model -> magnitude -> (accuracy sum over seeds, count)
    std::map<std::string, std::map<std::string, std::map<double, std::pair<double, int>>>> grouped;
    for (const auto& r : rows) {
        auto& cell = grouped[r.perturbation][r.model_id][r.magnitude];
        cell.first += r.accuracy;
        cell.second += 1;
    }
    for (const auto& [kind, series] : grouped)
        write_svg(out_dir + "/" + kind + ".svg", kind, series);
}

}  // namespace oocs::harness
