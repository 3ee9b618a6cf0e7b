// Command-line front end: kernel generation, saliency filtering, training,
// evaluation, robustness sweeps, and report rendering.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "oocs/data.hpp"
#include "oocs/dog_kernels.hpp"
#include "oocs/harness.hpp"
#include "oocs/imageops.hpp"
#include "oocs/nn.hpp"

namespace fs = std::filesystem;
using namespace oocs;

namespace {

double parse_gamma(const std::string& text, int& num, int& den) {
    const auto slash = text.find('/');
    if (slash != std::string::npos) {
        num = std::stoi(text.substr(0, slash));
        den = std::stoi(text.substr(slash + 1));
        if (den == 0) throw CLI::ValidationError("--gamma", "zero denominator");
        return static_cast<double>(num) / den;
    }
    const double value = std::stod(text);
    std::tie(num, den) = dog::rational_approx(value);
    return value;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

struct CheckpointedModel {
    nn::NetworkSpec spec;
    nn::Params params;
    std::string model_id;
};

CheckpointedModel load_model(const std::string& checkpoint, const std::string& model_id) {
    std::ifstream spec_in(checkpoint + ".spec");
    if (!spec_in)
        throw std::runtime_error("cannot open network spec '" + checkpoint + ".spec'");
    std::stringstream buf;
    buf << spec_in.rdbuf();
    CheckpointedModel m;
    m.spec = nn::NetworkSpec::parse(buf.str());
    m.params = nn::load_checkpoint(checkpoint, m.spec);
    m.model_id = model_id.empty() ? fs::path(checkpoint).stem().string() : model_id;
    return m;
}

data::Dataset load_test_set(const std::string& data_dir, const std::string& which) {
    const std::string dir = harness::resolve_data_dir(data_dir);
    data::Dataset test = data::load_mnist_idx(dir + "/t10k-images-idx3-ubyte",
                                              dir + "/t10k-labels-idx1-ubyte");
    test.name = "original";
    if (which == "inverted") {
        test = data::make_inverted(test);
        test.name = "inverted";
    } else if (which != "original") {
        throw CLI::ValidationError("--test-set", "must be 'original' or 'inverted'");
    }
    return test;
}

int run(int argc, char** argv) {
    CLI::App app{"On-off center-surround kernels and networks"};
    app.require_subcommand(1);

    // gen-kernel
    auto* gen = app.add_subcommand("gen-kernel", "write a kernel in the text format");
    int gen_size = 5;
    std::string gen_gamma = "2/3", gen_polarity = "on", gen_out;
    gen->add_option("--size", gen_size, "odd kernel size >= 3");
    gen->add_option("--gamma", gen_gamma, "center-surround ratio, fraction or decimal");
    gen->add_option("--polarity", gen_polarity, "on|off");
    gen->add_option("--out", gen_out, "output path (default stdout)");
    gen->callback([&] {
        int num = 0, den = 1;
        const double gamma = parse_gamma(gen_gamma, num, den);
        const dog::Polarity polarity = dog::polarity_from_string(gen_polarity);
        const dog::KernelMatrix kernel = dog::build_oocs_kernel(gen_size, gamma, polarity);
        if (gen_out.empty()) {
            dog::write_kernel_text(std::cout, kernel, num, den, polarity);
        } else {
            std::ofstream out(gen_out);
            if (!out) throw std::runtime_error("cannot open '" + gen_out + "'");
            dog::write_kernel_text(out, kernel, num, den, polarity);
        }
        const dog::DogParams p = dog::DogParams::make(gen_size, gamma, polarity);
        const dog::BalanceReport balance =
            dog::continuous_balance_check(p.sigma, gamma, 8.0 * p.sigma, p.sigma / 20.0);
        std::fprintf(stderr,
                     "discrete: pos %.12f (%d entries) neg %.12f (%d entries)\n"
                     "continuous: pos %.6f neg %.6f total %.3e\n",
                     kernel.positive_sum, kernel.positive_count, kernel.negative_sum,
                     kernel.negative_count, balance.positive_mass, balance.negative_mass,
                     balance.total);
    });

    // filter
    auto* filter = app.add_subcommand("filter", "write on/off/sum saliency maps of a PGM image");
    std::string flt_input, flt_gamma = "1/2", flt_prefix = "out";
    int flt_size = 3;
    filter->add_option("--input", flt_input, "input PGM (P5)")->required();
    filter->add_option("--size", flt_size, "kernel size");
    filter->add_option("--gamma", flt_gamma, "center-surround ratio");
    filter->add_option("--out-prefix", flt_prefix, "output path prefix");
    filter->callback([&] {
        int num = 0, den = 1;
        const double gamma = parse_gamma(flt_gamma, num, den);
        const img::ImageTensor image = img::load_pgm(flt_input);
        const dog::DogParams p = dog::DogParams::make(flt_size, gamma, dog::Polarity::On);
        const img::ResponsePair resp = img::on_off_responses(image, p);
        img::ImageTensor sum(resp.on.height, resp.on.width, 1);
        for (size_t i = 0; i < sum.size(); ++i)
            sum.data[i] = std::max(0.0, resp.on.data[i]) + std::max(0.0, resp.off.data[i]);
        img::export_pgm(resp.on, flt_prefix + "-on.pgm");
        img::export_pgm(resp.off, flt_prefix + "-off.pgm");
        img::export_pgm(sum, flt_prefix + "-sum.pgm");
    });

    // train
    auto* train = app.add_subcommand("train", "train a network on MNIST");
    harness::TrainConfig cfg;
    std::string train_gamma = "1/2";
    train->add_option("--network", cfg.network, "base|oocs|oocs-flat|oocs-3x3");
    train->add_option("--epochs", cfg.epochs, "training epochs");
    train->add_option("--batch-size", cfg.batch_size, "mini-batch size");
    train->add_option("--learning-rate", cfg.learning_rate, "Adam learning rate");
    train->add_option("--seed", cfg.seed, "RNG seed")->required();
    train->add_option("--kernel-size", cfg.kernel_size, "DoG kernel size");
    train->add_option("--gamma", train_gamma, "DoG center-surround ratio");
    train->add_option("--insertion", cfg.insertion, "residual insertion node");
    train->add_option("--checkpoint", cfg.checkpoint_path, "checkpoint output path");
    train->add_option("--history", cfg.history_path, "history CSV output path");
    train->add_option("--data-dir", cfg.data_dir, "MNIST IDX directory (or OOCS_DATA_DIR)");
    train->add_option("--train-subset", cfg.train_subset, "cap on training samples (0 = all)");
    train->callback([&] {
        int num = 0, den = 1;
        cfg.gamma = parse_gamma(train_gamma, num, den);
        harness::run_train(cfg);
    });

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a test set");
    std::string eval_ckpt, eval_set = "original", eval_report = "report.csv";
    std::string eval_data_dir, eval_model_id;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--test-set", eval_set, "original|inverted");
    eval->add_option("--report", eval_report, "report CSV to append to");
    eval->add_option("--data-dir", eval_data_dir, "MNIST IDX directory");
    eval->add_option("--model-id", eval_model_id, "model id for the report");
    eval->callback([&] {
        const CheckpointedModel m = load_model(eval_ckpt, eval_model_id);
        const data::Dataset test = load_test_set(eval_data_dir, eval_set);
        const harness::Metrics metrics = harness::evaluate(m.spec, m.params, test);
        harness::EvalRow row{m.model_id, test.name, "none", 0.0, 0,
                             metrics.accuracy, metrics.mean_loss, metrics.n};
        harness::append_report_rows(eval_report, {row});
        std::printf("%s %s accuracy %.4f mean_loss %.4f n %zu\n", m.model_id.c_str(),
                    test.name.c_str(), metrics.accuracy, metrics.mean_loss, metrics.n);
    });

    // robustness
    auto* robust = app.add_subcommand("robustness", "perturbation grid evaluation");
    std::string rob_ckpt, rob_kinds = "gaussian,saltpepper,gamma,contrast";
    std::string rob_seeds, rob_report = "report.csv", rob_data_dir, rob_model_id;
    std::string rob_set = "original";
    robust->add_option("--checkpoint", rob_ckpt, "checkpoint path")->required();
    robust->add_option("--kinds", rob_kinds, "comma list: gaussian,saltpepper,gamma,contrast");
    robust->add_option("--seeds", rob_seeds, "comma list of seeds")->required();
    robust->add_option("--report", rob_report, "report CSV to append to");
    robust->add_option("--data-dir", rob_data_dir, "MNIST IDX directory");
    robust->add_option("--model-id", rob_model_id, "model id for the report");
    robust->add_option("--test-set", rob_set, "original|inverted");
    robust->callback([&] {
        const CheckpointedModel m = load_model(rob_ckpt, rob_model_id);
        const data::Dataset test = load_test_set(rob_data_dir, rob_set);
        std::vector<uint64_t> seeds;
        for (const auto& s : split_list(rob_seeds)) seeds.push_back(std::stoull(s));
        if (seeds.empty()) throw CLI::ValidationError("--seeds", "at least one seed required");
        const auto rows = harness::run_robustness(m.spec, m.params, m.model_id, test,
                                                  split_list(rob_kinds), seeds);
        harness::append_report_rows(rob_report, rows);
        std::printf("wrote %zu rows to %s\n", rows.size(), rob_report.c_str());
    });

    // report
    auto* report = app.add_subcommand("report", "render summary tables and SVG plots");
    std::string rep_csv, rep_out = "report";
    report->add_option("--report", rep_csv, "report CSV")->required();
    report->add_option("--out-dir", rep_out, "output directory");
    report->callback([&] {
        const auto rows = harness::parse_report_csv(rep_csv);
        harness::write_report(rows, rep_out);
        std::printf("summary for %zu rows in %s\n", rows.size(), rep_out.c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // usage error
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const data::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
