#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oocs/nn.hpp"

using namespace oocs;
using nn::LayerKind;
using nn::LayerSpec;
using nn::NetworkSpec;
using nn::Tensor;

namespace {

LayerSpec node(const std::string& name, LayerKind kind, std::vector<std::string> inputs) {
    LayerSpec n;
    n.name = name;
    n.kind = kind;
    n.inputs = std::move(inputs);
    return n;
}

// 8x8 toy network exercising every layer kind, including both residual
// source styles and a concat merge.
NetworkSpec every_layer_net() {
    NetworkSpec spec;
    spec.input_h = spec.input_w = 8;
    spec.input_c = 1;

    LayerSpec conv_a = node("conv_a", LayerKind::Conv2D, {"input"});
    conv_a.filters = 2;
    LayerSpec relu_a = node("relu_a", LayerKind::ReLU, {"conv_a"});
    LayerSpec res_a = node("res_a", LayerKind::FixedDogResidual, {"relu_a"});
    res_a.polarity = dog::Polarity::On;
    res_a.rect = "abs";
    res_a.gain = 2.0;
    LayerSpec conv_b = node("conv_b", LayerKind::Conv2D, {"input"});
    conv_b.filters = 2;
    LayerSpec res_b = node("res_b", LayerKind::FixedDogResidual, {"conv_b"});
    res_b.polarity = dog::Polarity::Off;
    res_b.source = "conv_b";  // response flows through a trainable branch
    res_b.rect = "relu";      // and through the rectification mask
    LayerSpec cat = node("cat", LayerKind::Concat, {"res_a", "res_b"});
    LayerSpec pool = node("pool", LayerKind::MaxPool2x2, {"cat"});
    LayerSpec drop = node("drop", LayerKind::Dropout, {"pool"});
    drop.rate = 0.5;
    LayerSpec flat = node("flat", LayerKind::Flatten, {"drop"});
    LayerSpec fc = node("fc", LayerKind::Dense, {"flat"});
    fc.units = 3;
    LayerSpec loss = node("loss", LayerKind::SoftmaxCE, {"fc"});

    spec.nodes = {conv_a, relu_a, res_a, conv_b, res_b, cat, pool, drop, flat, fc, loss};
    return spec;
}

Tensor random_batch(int n, int h, int w, int c, uint64_t seed) {
    Tensor t(n, h, w, c);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (double& v : t.v) v = dist(rng);
    return t;
}

}  // namespace

TEST_CASE("shape inference over the mixed graph") {
    const NetworkSpec spec = every_layer_net();
    const auto shapes = nn::infer_shapes(spec);
    CHECK(shapes[spec.index_of("conv_a")] == nn::Shape{8, 8, 2, false});
    CHECK(shapes[spec.index_of("cat")] == nn::Shape{8, 8, 4, false});
    CHECK(shapes[spec.index_of("pool")] == nn::Shape{4, 4, 4, false});
    CHECK(shapes[spec.index_of("flat")] == nn::Shape{1, 1, 64, true});
    CHECK(shapes[spec.index_of("fc")] == nn::Shape{1, 1, 3, true});
}

TEST_CASE("shape inference rejects malformed graphs, naming the node") {
    NetworkSpec spec = every_layer_net();
    spec.nodes[0].inputs = {"nonexistent"};
    CHECK_THROWS_WITH_AS(nn::infer_shapes(spec), doctest::Contains("conv_a"),
                         std::runtime_error);

    NetworkSpec dense_on_spatial = every_layer_net();
    dense_on_spatial.nodes[spec.index_of("fc")].inputs = {"pool"};
    CHECK_THROWS_AS(nn::infer_shapes(dense_on_spatial), std::runtime_error);

    NetworkSpec bad_residual = every_layer_net();
    bad_residual.nodes[spec.index_of("res_a")].downsample = 2;  // source no longer matches
    CHECK_THROWS_AS(nn::infer_shapes(bad_residual), std::runtime_error);
}

TEST_CASE("param_count closed forms") {
    // Lone dense 128 -> 10 on a flat input.
    NetworkSpec dense_net;
    dense_net.input_h = dense_net.input_w = 1;
    dense_net.input_c = 128;
    LayerSpec flat = node("flat", LayerKind::Flatten, {"input"});
    LayerSpec fc = node("fc", LayerKind::Dense, {"flat"});
    fc.units = 10;
    LayerSpec loss = node("loss", LayerKind::SoftmaxCE, {"fc"});
    dense_net.nodes = {flat, fc, loss};
    CHECK(nn::param_count(dense_net) == 128 * 10 + 10);  // 1290

    // Lone 3x3 conv, 1 -> 32 channels.
    NetworkSpec conv_net;
    conv_net.input_h = conv_net.input_w = 8;
    conv_net.input_c = 1;
    LayerSpec conv = node("conv", LayerKind::Conv2D, {"input"});
    conv.filters = 32;
    LayerSpec f2 = node("flat", LayerKind::Flatten, {"conv"});
    LayerSpec fc2 = node("fc", LayerKind::Dense, {"flat"});
    fc2.units = 1;
    LayerSpec l2 = node("loss", LayerKind::SoftmaxCE, {"fc"});
    conv_net.nodes = {conv, f2, fc2, l2};
    CHECK(nn::param_count(conv_net) == (9 * 32 + 32) + (8 * 8 * 32 + 1));

    // The mixed graph: two convs of 20 params plus dense 64*3+3.
    CHECK(nn::param_count(every_layer_net()) == 20 + 20 + 195);
    const nn::Params p = nn::init_params(every_layer_net(), 1);
    CHECK(p.total_count() == nn::param_count(every_layer_net()));
}

TEST_CASE("he_init statistics and determinism") {
    const int fan_in = 9;
    const auto a = nn::he_init(20000, fan_in, 7);
    const auto b = nn::he_init(20000, fan_in, 7);
    const auto c = nn::he_init(20000, fan_in, 8);
    CHECK(a == b);
    CHECK(a != c);
    double mean = 0.0, var = 0.0;
    for (double v : a) mean += v;
    mean /= static_cast<double>(a.size());
    for (double v : a) var += (v - mean) * (v - mean);
    var /= static_cast<double>(a.size());
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::sqrt(var) == doctest::Approx(std::sqrt(2.0 / fan_in)).epsilon(0.05));
}

TEST_CASE("init_params keys off node names, so renames change weights") {
    NetworkSpec spec = every_layer_net();
    const nn::Params p1 = nn::init_params(spec, 5);
    spec.nodes[0].name = "conv_renamed";
    spec.nodes[1].inputs = {"conv_renamed"};
    const nn::Params p2 = nn::init_params(spec, 5);
    CHECK(p1.blocks[0].w != p2.blocks[0].w);
    CHECK(p1.blocks[3].w == p2.blocks[3].w);  // untouched node keeps its draw
    for (double bias : p1.blocks[0].b) CHECK(bias == 0.0);
}

TEST_CASE("max pool breaks ties toward the first index") {
    NetworkSpec spec;
    spec.input_h = spec.input_w = 2;
    spec.input_c = 1;
    LayerSpec pool = node("pool", LayerKind::MaxPool2x2, {"input"});
    LayerSpec flat = node("flat", LayerKind::Flatten, {"pool"});
    LayerSpec fc = node("fc", LayerKind::Dense, {"flat"});
    fc.units = 2;
    LayerSpec loss = node("loss", LayerKind::SoftmaxCE, {"fc"});
    spec.nodes = {pool, flat, fc, loss};

    const nn::Params params = nn::init_params(spec, 1);
    Tensor flat_batch(1, 2, 2, 1);
    for (double& v : flat_batch.v) v = 0.7;
    const auto fwd = nn::forward(spec, params, flat_batch, nn::RunMode::Eval, 0);
    CHECK(fwd.cache.pool_argmax[0][0] == 0);

    Tensor peak = flat_batch;
    peak.at(0, 1, 0, 0) = 0.9;
    const auto fwd2 = nn::forward(spec, params, peak, nn::RunMode::Eval, 0);
    CHECK(fwd2.cache.pool_argmax[0][0] == 2);  // flat index of (y=1, x=0)
}

TEST_CASE("dropout: eval identity, train masks and rescales deterministically") {
    const NetworkSpec spec = every_layer_net();
    const nn::Params params = nn::init_params(spec, 3);
    const Tensor batch = random_batch(2, 8, 8, 1, 9);

    const auto ev = nn::forward(spec, params, batch, nn::RunMode::Eval, 11);
    const int drop_idx = spec.index_of("drop");
    const int pool_idx = spec.index_of("pool");
    CHECK(ev.cache.acts[drop_idx].v == ev.cache.acts[pool_idx].v);

    const auto tr1 = nn::forward(spec, params, batch, nn::RunMode::Train, 11);
    const auto tr2 = nn::forward(spec, params, batch, nn::RunMode::Train, 11);
    const auto tr3 = nn::forward(spec, params, batch, nn::RunMode::Train, 12);
    CHECK((tr1.logits - tr2.logits).norm() == 0.0);
    CHECK((tr1.logits - tr3.logits).norm() > 0.0);

    int zeroed = 0, scaled = 0;
    const auto& in = tr1.cache.acts[pool_idx].v;
    const auto& out = tr1.cache.acts[drop_idx].v;
    for (size_t i = 0; i < out.size(); ++i) {
        if (out[i] == 0.0 && in[i] != 0.0) {
            ++zeroed;
        } else if (in[i] != 0.0) {
            CHECK(out[i] == doctest::Approx(2.0 * in[i]).epsilon(1e-15));
            ++scaled;
        }
    }
    CHECK(zeroed > 0);
    CHECK(scaled > 0);
}

TEST_CASE("flatten preserves the row-major (y, x, c) order") {
    NetworkSpec spec;
    spec.input_h = 2;
    spec.input_w = 2;
    spec.input_c = 2;
    LayerSpec flat = node("flat", LayerKind::Flatten, {"input"});
    LayerSpec fc = node("fc", LayerKind::Dense, {"flat"});
    fc.units = 1;
    LayerSpec loss = node("loss", LayerKind::SoftmaxCE, {"fc"});
    spec.nodes = {flat, fc, loss};

    Tensor batch(1, 2, 2, 2);
    for (size_t i = 0; i < batch.v.size(); ++i) batch.v[i] = static_cast<double>(i);
    const nn::Params params = nn::init_params(spec, 2);
    const auto fwd = nn::forward(spec, params, batch, nn::RunMode::Eval, 0);
    const auto& fv = fwd.cache.acts[0].v;
    for (size_t i = 0; i < fv.size(); ++i) CHECK(fv[i] == static_cast<double>(i));
}

TEST_CASE("softmax and cross_entropy basics") {
    Eigen::MatrixXd logits(2, 3);
    logits << 1.0, 1.0, 1.0, 1000.0, 0.0, 0.0;
    const Eigen::MatrixXd p = nn::softmax(logits);
    CHECK(p(0, 0) == doctest::Approx(1.0 / 3.0));
    CHECK(p.row(0).sum() == doctest::Approx(1.0));
    CHECK(p(1, 0) == doctest::Approx(1.0));  // large logits stay finite
    CHECK(nn::cross_entropy(logits, {0, 0}) ==
          doctest::Approx(0.5 * std::log(3.0)).epsilon(1e-9));
    CHECK_THROWS_AS(nn::cross_entropy(logits, {0}), std::invalid_argument);
}

TEST_CASE("backward loss matches cross_entropy on the forward logits") {
    const NetworkSpec spec = every_layer_net();
    const nn::Params params = nn::init_params(spec, 4);
    const Tensor batch = random_batch(3, 8, 8, 1, 21);
    const std::vector<int> labels = {0, 2, 1};
    const auto fwd = nn::forward(spec, params, batch, nn::RunMode::Eval, 0);
    const auto bwd = nn::backward(spec, params, fwd.cache, labels);
    CHECK(bwd.loss == doctest::Approx(nn::cross_entropy(fwd.logits, labels)).epsilon(1e-12));
}

TEST_CASE("finite differences confirm the analytic gradients") {
    const NetworkSpec spec = every_layer_net();
    const nn::Params params = nn::init_params(spec, 6);
    const Tensor batch = random_batch(3, 8, 8, 1, 13);
    const std::vector<int> labels = {1, 0, 2};
    const double err = nn::finite_diff_check(spec, params, batch, labels, 1e-5, 120, 17);
    CHECK(err < 1e-4);
}

TEST_CASE("adam: determinism, zero-gradient fixpoint, quadratic descent") {
    const NetworkSpec spec = every_layer_net();
    nn::Params p1 = nn::init_params(spec, 8);
    nn::Params p2 = p1;
    nn::AdamConfig cfg;
    nn::AdamState s1 = nn::AdamState::make(p1, cfg);
    nn::AdamState s2 = nn::AdamState::make(p2, cfg);

    const Tensor batch = random_batch(2, 8, 8, 1, 31);
    const std::vector<int> labels = {0, 1};
    for (int step = 0; step < 3; ++step) {
        const auto f1 = nn::forward(spec, p1, batch, nn::RunMode::Train, 100 + step);
        nn::adam_step(p1, nn::backward(spec, p1, f1.cache, labels).grads, s1);
        const auto f2 = nn::forward(spec, p2, batch, nn::RunMode::Train, 100 + step);
        nn::adam_step(p2, nn::backward(spec, p2, f2.cache, labels).grads, s2);
    }
    for (size_t i = 0; i < p1.blocks.size(); ++i) {
        CHECK(p1.blocks[i].w == p2.blocks[i].w);
        CHECK(p1.blocks[i].b == p2.blocks[i].b);
    }

    // From a fresh state, zero gradients leave the parameters untouched.
    nn::Params fresh = nn::init_params(spec, 9);
    const nn::Params frozen = fresh;
    nn::AdamState fresh_state = nn::AdamState::make(fresh, cfg);
    nn::adam_step(fresh, nn::zero_like(fresh), fresh_state);
    for (size_t i = 0; i < fresh.blocks.size(); ++i)
        CHECK(fresh.blocks[i].w == frozen.blocks[i].w);

    // Scalar quadratic (x - 3)^2 through the same update rule.
    nn::Params scalar;
    scalar.blocks.resize(1);
    scalar.blocks[0].w = {0.0};
    nn::AdamConfig fast;
    fast.learning_rate = 0.1;
    nn::AdamState st = nn::AdamState::make(scalar, fast);
    for (int i = 0; i < 500; ++i) {
        nn::Params g;
        g.blocks.resize(1);
        g.blocks[0].w = {2.0 * (scalar.blocks[0].w[0] - 3.0)};
        nn::adam_step(scalar, g, st);
    }
    CHECK(scalar.blocks[0].w[0] == doctest::Approx(3.0).epsilon(1e-3));
}

TEST_CASE("rectified responses swap under inversion; the abs response is invariant") {
    NetworkSpec spec;
    spec.input_h = spec.input_w = 8;
    spec.input_c = 1;
    LayerSpec on = node("on", LayerKind::FixedDogResidual, {"input"});
    on.polarity = dog::Polarity::On;
    on.rect = "relu";
    on.response_only = true;
    LayerSpec off = node("off", LayerKind::FixedDogResidual, {"input"});
    off.polarity = dog::Polarity::Off;
    off.rect = "relu";
    off.response_only = true;
    LayerSpec sal = node("sal", LayerKind::FixedDogResidual, {"input"});
    sal.polarity = dog::Polarity::On;
    sal.rect = "abs";
    sal.response_only = true;
    sal.gain = 4.0;
    LayerSpec cat = node("cat", LayerKind::Concat, {"on", "off"});
    LayerSpec flat = node("flat", LayerKind::Flatten, {"cat"});
    LayerSpec fc = node("fc", LayerKind::Dense, {"flat"});
    fc.units = 2;
    LayerSpec loss = node("loss", LayerKind::SoftmaxCE, {"fc"});
    spec.nodes = {on, off, sal, cat, flat, fc, loss};

    const nn::Params params = nn::init_params(spec, 3);
    const Tensor batch = random_batch(2, 8, 8, 1, 41);
    Tensor inverted = batch;
    for (double& v : inverted.v) v = 1.0 - v;

    const auto fb = nn::forward(spec, params, batch, nn::RunMode::Eval, 0);
    const auto fi = nn::forward(spec, params, inverted, nn::RunMode::Eval, 0);
    const int on_i = spec.index_of("on");
    const int off_i = spec.index_of("off");
    const int sal_i = spec.index_of("sal");
    for (size_t j = 0; j < fb.cache.acts[on_i].v.size(); ++j) {
        // relu(on(1-x)) = relu(-on(x)) = relu(off(x)); |r| does not move.
        CHECK(fi.cache.acts[on_i].v[j] ==
              doctest::Approx(fb.cache.acts[off_i].v[j]).epsilon(1e-12));
        CHECK(fi.cache.acts[sal_i].v[j] ==
              doctest::Approx(fb.cache.acts[sal_i].v[j]).epsilon(1e-12));
        // The abs response is the sum of the rectified halves, scaled by gain.
        CHECK(fb.cache.acts[sal_i].v[j] ==
              doctest::Approx(4.0 * (fb.cache.acts[on_i].v[j] + fb.cache.acts[off_i].v[j]))
                  .epsilon(1e-12));
    }
}

TEST_CASE("network spec text round trip and hashing") {
    const NetworkSpec spec = every_layer_net();
    const std::string text = spec.serialize();
    CHECK(text.rfind("oocs-net-v1\n", 0) == 0);
    const NetworkSpec parsed = NetworkSpec::parse(text);
    CHECK(parsed.serialize() == text);
    CHECK(parsed.hash() == spec.hash());
    CHECK(parsed.nodes.size() == spec.nodes.size());
    const LayerSpec* res = parsed.find("res_b");
    REQUIRE(res != nullptr);
    CHECK(res->polarity == dog::Polarity::Off);
    CHECK(res->source == "conv_b");
    CHECK(res->dog_kernel_size == 3);

    CHECK_THROWS_AS(NetworkSpec::parse("bogus\n"), std::runtime_error);
    CHECK_THROWS_AS(NetworkSpec::parse("oocs-net-v1\n"), std::runtime_error);
    CHECK_THROWS_AS(NetworkSpec::parse("oocs-net-v1\ninput 8 8 1\nfoo relu\n"),
                    std::runtime_error);
}

TEST_CASE("checkpoint round trip and mismatch detection") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "oocs_test_ckpt.bin";
    const NetworkSpec spec = every_layer_net();
    const nn::Params params = nn::init_params(spec, 12);
    nn::save_checkpoint(path.string(), spec, params);

    const nn::Params loaded = nn::load_checkpoint(path.string(), spec);
    REQUIRE(loaded.blocks.size() == params.blocks.size());
    for (size_t i = 0; i < params.blocks.size(); ++i) {
        REQUIRE(loaded.blocks[i].w.size() == params.blocks[i].w.size());
        for (size_t j = 0; j < params.blocks[i].w.size(); ++j)
            CHECK(loaded.blocks[i].w[j] ==
                  doctest::Approx(params.blocks[i].w[j]).epsilon(1e-6));
    }

    NetworkSpec other = spec;
    other.nodes[0].filters = 4;
    CHECK_THROWS_AS(nn::load_checkpoint(path.string(), other), std::runtime_error);
    CHECK_THROWS_AS(nn::load_checkpoint((path.string() + ".missing"), spec),
                    std::runtime_error);
    fs::remove(path);
}
