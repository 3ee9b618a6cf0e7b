#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oocs/dog_kernels.hpp"
#include "oocs/imageops.hpp"

namespace oocs::nn {

enum class LayerKind {
    Conv2D,         // 3x3, stride 1, Same padding
    MaxPool2x2,     // stride 2, first-index tie break
    Dense,
    ReLU,
    SoftmaxCE,
    Dropout,
    Concat,
    FixedDogResidual,
    Flatten,
};

const char* to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

enum class RunMode { Train, Eval };

/// Where a FixedDogResidual node reads the image it filters.
inline constexpr const char* kNetworkInput = "@input";

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::ReLU;
    std::vector<std::string> inputs;
    std::string pathway = "trunk";

    int filters = 0;        // Conv2D
    int units = 0;          // Dense
    double rate = 0.0;      // Dropout

    // FixedDogResidual
    int dog_kernel_size = 3;
    double dog_gamma = 0.5;
    dog::Polarity polarity = dog::Polarity::On;
    int downsample = 1;
    std::string source = kNetworkInput;  // kNetworkInput or a node name
    bool flat_kernel = false;            // uniform 1/n_c, -1/n_s weights
    std::string rect = "none";           // response rectification: none | relu | abs
    bool response_only = false;          // emit the response map, ignore the chain input
    double gain = 1.0;                   // response scale factor
};

struct NetworkSpec {
    int input_h = 0;
    int input_w = 0;
    int input_c = 0;
    std::vector<LayerSpec> nodes;  // declaration order is topological

    const LayerSpec* find(const std::string& name) const;
    int index_of(const std::string& name) const;  // -1 if absent

    std::string serialize() const;
    static NetworkSpec parse(const std::string& text);
    uint64_t hash() const;  // FNV-1a over the serialized form
};

struct Shape {
    int h = 0, w = 0, c = 0;
    bool flat = false;
    int dim() const { return flat ? c : h * w * c; }
    bool operator==(const Shape&) const = default;
};

/// Shapes per node, aligned with spec.nodes; throws on inconsistency,
/// naming the offending node.
std::vector<Shape> infer_shapes(const NetworkSpec& spec);

struct ParamBlock {
    std::vector<double> w;
    std::vector<double> b;
    size_t count() const { return w.size() + b.size(); }
};

struct Params {
    std::vector<ParamBlock> blocks;  // aligned with spec.nodes
    size_t total_count() const;
};

size_t param_count(const NetworkSpec& spec);

/// Zero-mean Gaussian entries with std sqrt(2 / fan_in), deterministic in seed.
std::vector<double> he_init(size_t count, int fan_in, uint64_t seed);

/// He-initialized weights, zero biases; per-node seeds derived from `seed`
/// and the node name.
Params init_params(const NetworkSpec& spec, uint64_t seed);
Params zero_like(const Params& params);

/// Batch activation tensor, row-major (n, y, x, c); flat tensors use h=w=1.
struct Tensor {
    int n = 0, h = 0, w = 0, c = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int n_, int h_, int w_, int c_)
        : n(n_), h(h_), w(w_), c(c_),
          v(static_cast<size_t>(n_) * h_ * w_ * c_, 0.0) {}
    double& at(int in, int iy, int ix, int ic) {
        return v[((static_cast<size_t>(in) * h + iy) * w + ix) * c + ic];
    }
    double at(int in, int iy, int ix, int ic) const {
        return v[((static_cast<size_t>(in) * h + iy) * w + ix) * c + ic];
    }
    size_t per_sample() const { return static_cast<size_t>(h) * w * c; }
};

Tensor pack_batch(const std::vector<const img::ImageTensor*>& images);

struct ForwardCache {
    RunMode mode = RunMode::Eval;
    uint64_t seed = 0;
    Tensor input;
    std::vector<Tensor> acts;                       // per node
    std::vector<std::vector<int>> pool_argmax;      // per node (MaxPool only)
    std::vector<std::vector<double>> dropout_mask;  // per node (Dropout only)
    std::vector<Tensor> dog_response;               // per node, pre-rectification
};

struct ForwardResult {
    Eigen::MatrixXd logits;  // n x classes
    ForwardCache cache;
};

ForwardResult forward(const NetworkSpec& spec, const Params& params,
                      const Tensor& batch, RunMode mode, uint64_t seed);

struct BackwardResult {
    double loss = 0.0;
    Params grads;
};

/// Mean cross-entropy loss and exact gradients for the forward call that
/// produced `cache`.
BackwardResult backward(const NetworkSpec& spec, const Params& params,
                        const ForwardCache& cache, const std::vector<int>& labels);

double cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels);
Eigen::MatrixXd softmax(const Eigen::MatrixXd& logits);

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    long step = 0;
    Params m;
    Params v;
    AdamConfig hyper;

    static AdamState make(const Params& params, const AdamConfig& hyper);
};

void adam_step(Params& params, const Params& grads, AdamState& state);

/// Central-difference check of `backward` on randomly sampled coordinates.
/// Returns the max relative error with denominator max(|a|, |n|, 1e-8).
double finite_diff_check(const NetworkSpec& spec, const Params& params,
                         const Tensor& batch, const std::vector<int>& labels,
                         double epsilon, int samples, uint64_t seed);

/// Binary checkpoint: header (magic, version, spec hash), then per-node
/// arrays in declaration order as little-endian float32.
void save_checkpoint(const std::string& path, const NetworkSpec& spec, const Params& params);
Params load_checkpoint(const std::string& path, const NetworkSpec& spec);

uint64_t fnv1a(const std::string& text);

}  // namespace oocs::nn
