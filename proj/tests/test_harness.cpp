#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oocs/harness.hpp"

using namespace oocs;
namespace fs = std::filesystem;

namespace {

bool mnist_available() {
    const char* env = std::getenv("OOCS_DATA_DIR");
    return env && fs::exists(fs::path(env) / "train-images-idx3-ubyte");
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// History CSV with the wall-clock column removed, for determinism compares.
std::string strip_wall_column(const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) {
        const auto last_comma = line.rfind(',');
        out += line.substr(0, last_comma);
        out += "\n";
    }
    return out;
}

data::Dataset synthetic_dataset(size_t n) {
    data::Dataset ds;
    ds.name = "synthetic";
    for (size_t i = 0; i < n; ++i) {
        img::ImageTensor im(28, 28, 1, static_cast<double>(i % 7) / 10.0);
        ds.images.push_back(std::move(im));
        ds.labels.push_back(static_cast<int>(i % 10));
    }
    return ds;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / "oocs_harness_test";
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("default base network matches the documented stack") {
    const nn::NetworkSpec base = harness::default_mnist_base();
    CHECK(base.input_h == 28);
    CHECK(base.nodes.size() == 14);
    CHECK(base.find("conv1")->filters == 32);
    CHECK(base.find("conv3")->filters == 64);
    CHECK(base.find("dense1")->units == 128);
    CHECK(base.find("dense2")->units == 10);
    CHECK(base.find("drop1")->rate == 0.5);
    nn::infer_shapes(base);
}

TEST_CASE("build_network variants") {
    harness::TrainConfig cfg;
    cfg.network = "base";
    CHECK(harness::build_network(cfg).model_id == "base");

    cfg.network = "oocs";
    const auto oocs = harness::build_network(cfg);
    CHECK(oocs.model_id == "oocs");
    CHECK(oocs.spec.find("on_response")->flat_kernel == false);
    CHECK(nn::param_count(oocs.spec) ==
          nn::param_count(harness::default_mnist_base()));

    cfg.network = "oocs-flat";
    CHECK(harness::build_network(cfg).spec.find("on_response")->flat_kernel == true);

    cfg.network = "oocs-3x3";
    cfg.kernel_size = 5;  // variant pins the kernel regardless
    const auto pinned = harness::build_network(cfg);
    CHECK(pinned.spec.find("on_response")->dog_kernel_size == 3);

    cfg.network = "bogus";
    CHECK_THROWS_AS(harness::build_network(cfg), std::invalid_argument);
}

TEST_CASE("resolve_data_dir precedence") {
    CHECK(harness::resolve_data_dir("/explicit") == "/explicit");

    const char* saved = std::getenv("OOCS_DATA_DIR");
    setenv("OOCS_DATA_DIR", "/from-env", 1);
    CHECK(harness::resolve_data_dir("") == "/from-env");
    unsetenv("OOCS_DATA_DIR");
    CHECK_THROWS_AS(harness::resolve_data_dir(""), data::DataError);
    if (saved) setenv("OOCS_DATA_DIR", saved, 1);
}

TEST_CASE("train/validation split is deterministic with a 5000-sample holdout") {
    const data::Dataset full = synthetic_dataset(5200);
    const auto split = harness::split_mnist_train(full, 0);
    CHECK(split.train.size() == 200);
    CHECK(split.validation.size() == 5000);

    const auto capped = harness::split_mnist_train(full, 50);
    CHECK(capped.train.size() == 50);
    CHECK(capped.validation.size() == 5000);
    // Same shuffle: the capped train set is a prefix of the full one.
    for (size_t i = 0; i < 50; ++i)
        CHECK(capped.train.labels[i] == split.train.labels[i]);

    const auto again = harness::split_mnist_train(full, 0);
    CHECK(again.train.labels == split.train.labels);
    CHECK(again.validation.labels == split.validation.labels);

    CHECK_THROWS_AS(harness::split_mnist_train(synthetic_dataset(100), 0),
                    std::invalid_argument);
}

TEST_CASE("evaluate with zero weights scores the all-zero-logit baseline") {
    const nn::NetworkSpec base = harness::default_mnist_base();
    const nn::Params zero = nn::zero_like(nn::init_params(base, 0));
    const data::Dataset ds = synthetic_dataset(100);
    const harness::Metrics m = harness::evaluate(base, zero, ds, 32);
    CHECK(m.n == 100);
    // Zero logits: argmax is class 0, labels cycle 0..9 uniformly.
    CHECK(m.accuracy == doctest::Approx(0.1));
    CHECK(m.mean_loss == doctest::Approx(std::log(10.0)).epsilon(1e-9));
}

TEST_CASE("report CSV round trip and schema validation") {
    TempDir tmp;
    const std::string csv = (tmp.path / "report.csv").string();

    std::vector<harness::EvalRow> rows(2);
    rows[0] = {"base", "original", "gaussian", 0.05, 3, 0.912345, 0.3, 10000};
    rows[1] = {"oocs", "inverted", "none", 0.0, 0, 1.0, 0.01, 10000};
    harness::append_report_rows(csv, rows);
    harness::append_report_rows(csv, {rows[0]});  // appends without a second header

    const auto parsed = harness::parse_report_csv(csv);
    REQUIRE(parsed.size() == 3);
    CHECK(parsed[0].model_id == "base");
    CHECK(parsed[0].magnitude == doctest::Approx(0.05));
    CHECK(parsed[0].accuracy == doctest::Approx(0.912345));
    CHECK(parsed[1].perturbation == "none");
    CHECK(parsed[2].seed == 3);

    const std::string raw = read_file(csv);
    CHECK(raw.rfind(std::string(harness::kReportHeader) + "\n", 0) == 0);
    CHECK(raw.find("model_id", 10) == std::string::npos);  // header appears once

    // Schema violations carry the line number.
    const std::string bad1 = (tmp.path / "bad1.csv").string();
    std::ofstream(bad1) << "wrong,header\n";
    CHECK_THROWS_WITH_AS(harness::parse_report_csv(bad1), doctest::Contains(":1:"),
                         std::runtime_error);

    const std::string bad2 = (tmp.path / "bad2.csv").string();
    std::ofstream(bad2) << harness::kReportHeader << "\nbase,orig,none,0,0,0.5,0.1\n";
    CHECK_THROWS_WITH_AS(harness::parse_report_csv(bad2), doctest::Contains(":2:"),
                         std::runtime_error);

    const std::string bad3 = (tmp.path / "bad3.csv").string();
    std::ofstream(bad3) << harness::kReportHeader << "\nbase,orig,none,0,0,1.5,0.1,10\n";
    CHECK_THROWS_AS(harness::parse_report_csv(bad3), std::runtime_error);
}

TEST_CASE("default magnitude grids start with the identity") {
    CHECK(harness::default_magnitudes("gaussian")[0] == 0.0);
    CHECK(harness::default_magnitudes("saltpepper")[0] == 0.0);
    CHECK(harness::default_magnitudes("gamma")[0] == 1.0);
    CHECK(harness::default_magnitudes("contrast")[0] == 1.0);
    CHECK_THROWS_AS(harness::default_magnitudes("sharpen"), std::invalid_argument);
}

TEST_CASE("identity-magnitude perturbations leave images bit-exact") {
    const data::Dataset ds = synthetic_dataset(5);
    for (const std::string kind : {"gaussian", "saltpepper"}) {
        const data::Dataset p = harness::perturb_dataset(ds, kind, 0.0, 42);
        for (size_t i = 0; i < ds.size(); ++i)
            CHECK(p.images[i].data == ds.images[i].data);
    }
    for (const std::string kind : {"gamma", "contrast"}) {
        const data::Dataset p = harness::perturb_dataset(ds, kind, 1.0, 42);
        for (size_t i = 0; i < ds.size(); ++i)
            CHECK(p.images[i].data == ds.images[i].data);
    }
    const data::Dataset noisy = harness::perturb_dataset(ds, "gaussian", 0.1, 42);
    CHECK(noisy.name == "synthetic-gaussian");
    CHECK(noisy.images[0].data != ds.images[0].data);
    // Distinct images draw from distinct streams.
    CHECK(noisy.images[0].data != noisy.images[1].data);
}

TEST_CASE("write_report emits a summary table and one SVG per kind") {
    TempDir tmp;
    std::vector<harness::EvalRow> rows(4);
    rows[0] = {"base", "original", "gaussian", 0.0, 1, 0.99, 0.1, 100};
    rows[1] = {"base", "original", "gaussian", 0.1, 1, 0.90, 0.3, 100};
    rows[2] = {"oocs", "original", "gaussian", 0.1, 1, 0.95, 0.2, 100};
    rows[3] = {"base", "original", "contrast", 0.8, 1, 0.97, 0.15, 100};
    const std::string out_dir = (tmp.path / "rpt").string();
    harness::write_report(rows, out_dir);

    const std::string summary = read_file(fs::path(out_dir) / "summary.md");
    CHECK(summary.find("| base | original | gaussian | 0.1 |") != std::string::npos);
    CHECK(fs::exists(fs::path(out_dir) / "gaussian.svg"));
    CHECK(fs::exists(fs::path(out_dir) / "contrast.svg"));
    CHECK_FALSE(fs::exists(fs::path(out_dir) / "saltpepper.svg"));

    const std::string svg = read_file(fs::path(out_dir) / "gaussian.svg");
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("<polyline") != std::string::npos);
    // One polyline per model.
    size_t count = 0;
    for (size_t pos = 0; (pos = svg.find("<polyline", pos)) != std::string::npos; ++pos)
        ++count;
    CHECK(count == 2);
}

TEST_CASE("short training run: above chance, deterministic modulo wall clock") {
    if (!mnist_available()) {
        MESSAGE("MNIST files not found; skipping the training smoke test");
        return;
    }
    TempDir tmp;
    harness::TrainConfig cfg;
    cfg.network = "base";
    cfg.epochs = 1;
    cfg.train_subset = 1000;
    cfg.seed = 0;
    cfg.checkpoint_path = (tmp.path / "model.ckpt").string();
    cfg.history_path = (tmp.path / "history.csv").string();

    const harness::TrainResult run1 = harness::run_train(cfg);
    const std::string hist1 = read_file(cfg.history_path);
    const std::string ckpt1 = read_file(cfg.checkpoint_path);
    CHECK(hist1.rfind("epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds\n", 0) == 0);

    // One epoch on 1000 samples must beat chance on the training stream.
    std::istringstream hist(hist1);
    std::string header, row;
    std::getline(hist, header);
    std::getline(hist, row);
    std::istringstream fields(row);
    std::string field;
    std::getline(fields, field, ',');  // epoch
    CHECK(field == "1");
    std::getline(fields, field, ',');  // train_loss
    std::getline(fields, field, ',');  // train_acc
    CHECK(std::stod(field) > 0.1);

    // The checkpoint reloads against the saved spec text.
    const nn::NetworkSpec reparsed =
        nn::NetworkSpec::parse(read_file(cfg.checkpoint_path + ".spec"));
    const nn::Params loaded = nn::load_checkpoint(cfg.checkpoint_path, reparsed);
    CHECK(loaded.total_count() == nn::param_count(run1.spec));

    // Re-running the identical config reproduces everything but wall time.
    cfg.checkpoint_path = (tmp.path / "model2.ckpt").string();
    cfg.history_path = (tmp.path / "history2.csv").string();
    harness::run_train(cfg);
    CHECK(strip_wall_column(read_file(cfg.history_path)) == strip_wall_column(hist1));
    CHECK(read_file(cfg.checkpoint_path) == ckpt1);
}
