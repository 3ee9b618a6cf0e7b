#include "oocs/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace oocs::nn {

namespace {
// Training allocates and frees the same multi-megabyte activation and gradient
// buffers every batch.  With glibc's default thresholds each of those blocks is
// returned to the kernel on free and re-faulted on the next allocation, which
// costs more than the arithmetic of several layers.  Keeping large blocks on
// the heap free list makes the allocations cheap and steady-state.
struct MallocTuning {
    MallocTuning() {
#ifdef __GLIBC__
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    }
} const g_malloc_tuning;
}  // namespace

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2D: return "conv3x3";
        case LayerKind::MaxPool2x2: return "maxpool2x2";
        case LayerKind::Dense: return "dense";
        case LayerKind::ReLU: return "relu";
        case LayerKind::SoftmaxCE: return "softmax_ce";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::Concat: return "concat";
        case LayerKind::FixedDogResidual: return "dog_residual";
        case LayerKind::Flatten: return "flatten";
    }
    return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "conv3x3") return LayerKind::Conv2D;
    if (s == "maxpool2x2") return LayerKind::MaxPool2x2;
    if (s == "dense") return LayerKind::Dense;
    if (s == "relu") return LayerKind::ReLU;
    if (s == "softmax_ce") return LayerKind::SoftmaxCE;
    if (s == "dropout") return LayerKind::Dropout;
    if (s == "concat") return LayerKind::Concat;
    if (s == "dog_residual") return LayerKind::FixedDogResidual;
    if (s == "flatten") return LayerKind::Flatten;
    throw std::runtime_error("unknown layer kind '" + s + "'");
}

uint64_t fnv1a(const std::string& text) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

const LayerSpec* NetworkSpec::find(const std::string& name) const {
    for (const auto& n : nodes)
        if (n.name == name) return &n;
    return nullptr;
}

int NetworkSpec::index_of(const std::string& name) const {
    for (size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i].name == name) return static_cast<int>(i);
    return -1;
}

std::string NetworkSpec::serialize() const {
    std::ostringstream out;
    out.precision(17);
    out << "oocs-net-v1\n";
    out << "input " << input_h << " " << input_w << " " << input_c << "\n";
    for (const auto& n : nodes) {
        out << n.name << " " << to_string(n.kind);
        switch (n.kind) {
            case LayerKind::Conv2D: out << " filters=" << n.filters; break;
            case LayerKind::Dense: out << " units=" << n.units; break;
            case LayerKind::Dropout: out << " rate=" << n.rate; break;
            case LayerKind::FixedDogResidual:
                out << " kernel=" << n.dog_kernel_size << " gamma=" << n.dog_gamma
                    << " polarity=" << dog::to_string(n.polarity)
                    << " downsample=" << n.downsample << " source=" << n.source
                    << " weights=" << (n.flat_kernel ? "flat" : "dog")
                    << " rect=" << n.rect
                    << " output=" << (n.response_only ? "response" : "residual")
                    << " gain=" << n.gain;
                break;
            default: break;
        }
        out << " inputs=";
        for (size_t i = 0; i < n.inputs.size(); ++i)
            out << (i ? "," : "") << n.inputs[i];
        if (n.pathway != "trunk") out << " pathway=" << n.pathway;
        out << "\n";
    }
    return out.str();
}

NetworkSpec NetworkSpec::parse(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "oocs-net-v1")
        throw std::runtime_error("network spec: missing 'oocs-net-v1' header");

    NetworkSpec spec;
    bool saw_input = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string first;
        ls >> first;
        if (first == "input") {
            ls >> spec.input_h >> spec.input_w >> spec.input_c;
            if (!ls || spec.input_h < 1 || spec.input_w < 1 || spec.input_c < 1)
                throw std::runtime_error("network spec: bad input line");
            saw_input = true;
            continue;
        }
        if (!saw_input) throw std::runtime_error("network spec: node before input line");
        LayerSpec node;
        node.name = first;
        std::string kind;
        ls >> kind;
        node.kind = layer_kind_from_string(kind);
        std::string attr;
        bool saw_inputs = false;
        while (ls >> attr) {
            const auto eq = attr.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("network spec: bad attribute '" + attr + "'");
            const std::string key = attr.substr(0, eq);
            const std::string value = attr.substr(eq + 1);
            if (key == "filters") node.filters = std::stoi(value);
            else if (key == "units") node.units = std::stoi(value);
            else if (key == "rate") node.rate = std::stod(value);
            else if (key == "kernel") node.dog_kernel_size = std::stoi(value);
            else if (key == "gamma") node.dog_gamma = std::stod(value);
            else if (key == "polarity") node.polarity = dog::polarity_from_string(value);
            else if (key == "downsample") node.downsample = std::stoi(value);
            else if (key == "source") node.source = value;
            else if (key == "weights") node.flat_kernel = (value == "flat");
            else if (key == "rect") node.rect = value;
            else if (key == "output") node.response_only = (value == "response");
            else if (key == "gain") node.gain = std::stod(value);
            else if (key == "pathway") node.pathway = value;
            else if (key == "inputs") {
                saw_inputs = true;
                std::istringstream vs(value);
                std::string name;
                while (std::getline(vs, name, ','))
                    if (!name.empty()) node.inputs.push_back(name);
            } else {
                throw std::runtime_error("network spec: unknown attribute '" + key + "'");
            }
        }
        if (!saw_inputs || node.inputs.empty())
            throw std::runtime_error("network spec: node '" + node.name + "' has no inputs");
        spec.nodes.push_back(std::move(node));
    }
    if (!saw_input || spec.nodes.empty())
        throw std::runtime_error("network spec: empty specification");
    return spec;
}

uint64_t NetworkSpec::hash() const { return fnv1a(serialize()); }

std::vector<Shape> infer_shapes(const NetworkSpec& spec) {
    std::vector<Shape> shapes(spec.nodes.size());
    const Shape input_shape{spec.input_h, spec.input_w, spec.input_c, false};

    auto shape_of = [&](const std::string& name, const std::string& user) -> const Shape& {
        if (name == "input") return input_shape;
        const int idx = spec.index_of(name);
        if (idx < 0)
            throw std::runtime_error("node '" + user + "' references unknown input '" + name + "'");
        return shapes[idx];
    };

    for (size_t i = 0; i < spec.nodes.size(); ++i) {
        const LayerSpec& n = spec.nodes[i];
        for (const auto& in_name : n.inputs) {
            const int idx = spec.index_of(in_name);
            if (in_name != "input" && (idx < 0 || idx >= static_cast<int>(i)))
                throw std::runtime_error("node '" + n.name + "': input '" + in_name +
                                         "' not declared earlier");
        }
        auto require_arity = [&](size_t k) {
            if (n.inputs.size() != k)
                throw std::runtime_error("node '" + n.name + "': expected " +
                                         std::to_string(k) + " input(s)");
        };
        switch (n.kind) {
            case LayerKind::Conv2D: {
                require_arity(1);
                const Shape& in = shape_of(n.inputs[0], n.name);
                if (in.flat) throw std::runtime_error("node '" + n.name + "': conv on flat input");
                if (n.filters < 1) throw std::runtime_error("node '" + n.name + "': filters must be >= 1");
                shapes[i] = {in.h, in.w, n.filters, false};
                break;
            }
            case LayerKind::MaxPool2x2: {
                require_arity(1);
                const Shape& in = shape_of(n.inputs[0], n.name);
                if (in.flat || in.h < 2 || in.w < 2)
                    throw std::runtime_error("node '" + n.name + "': pool needs spatial input >= 2x2");
                shapes[i] = {in.h / 2, in.w / 2, in.c, false};
                break;
            }
            case LayerKind::Dense: {
                require_arity(1);
                const Shape& in = shape_of(n.inputs[0], n.name);
                if (!in.flat) throw std::runtime_error("node '" + n.name + "': dense needs a flat input");
                if (n.units < 1) throw std::runtime_error("node '" + n.name + "': units must be >= 1");
                shapes[i] = {1, 1, n.units, true};
                break;
            }
            case LayerKind::ReLU:
            case LayerKind::SoftmaxCE: {
                require_arity(1);
                shapes[i] = shape_of(n.inputs[0], n.name);
                break;
            }
            case LayerKind::Dropout: {
                require_arity(1);
                if (n.rate < 0.0 || n.rate >= 1.0)
                    throw std::runtime_error("node '" + n.name + "': dropout rate must be in [0,1)");
                shapes[i] = shape_of(n.inputs[0], n.name);
                break;
            }
            case LayerKind::Concat: {
                require_arity(2);
                const Shape& a = shape_of(n.inputs[0], n.name);
                const Shape& b = shape_of(n.inputs[1], n.name);
                if (a.flat || b.flat || a.h != b.h || a.w != b.w)
                    throw std::runtime_error("node '" + n.name + "': concat inputs must share spatial dims");
                shapes[i] = {a.h, a.w, a.c + b.c, false};
                break;
            }
            case LayerKind::FixedDogResidual: {
                require_arity(1);
                const Shape& in = shape_of(n.inputs[0], n.name);
                if (in.flat) throw std::runtime_error("node '" + n.name + "': residual on flat input");
                if (n.downsample < 1)
                    throw std::runtime_error("node '" + n.name + "': downsample must be >= 1");
                const Shape& src = (n.source == kNetworkInput)
                                       ? input_shape
                                       : shape_of(n.source, n.name);
                if (src.flat)
                    throw std::runtime_error("node '" + n.name + "': response source must be spatial");
                if (src.h != in.h * n.downsample || src.w != in.w * n.downsample)
                    throw std::runtime_error("node '" + n.name +
                                             "': source size does not match downsample factor");
                if (n.rect != "none" && n.rect != "relu" && n.rect != "abs")
                    throw std::runtime_error("node '" + n.name + "': rect must be none, relu, or abs");
                if (!(n.gain > 0.0))
                    throw std::runtime_error("node '" + n.name + "': gain must be positive");
                shapes[i] = in;
                break;
            }
            case LayerKind::Flatten: {
                require_arity(1);
                const Shape& in = shape_of(n.inputs[0], n.name);
                shapes[i] = {1, 1, in.dim(), true};
                break;
            }
        }
    }
    return shapes;
}

size_t Params::total_count() const {
    size_t total = 0;
    for (const auto& b : blocks) total += b.count();
    return total;
}

size_t param_count(const NetworkSpec& spec) {
    const std::vector<Shape> shapes = infer_shapes(spec);
    const Shape input_shape{spec.input_h, spec.input_w, spec.input_c, false};
    size_t total = 0;
    for (size_t i = 0; i < spec.nodes.size(); ++i) {
        const LayerSpec& n = spec.nodes[i];
        const Shape in = (n.inputs[0] == "input") ? input_shape
                                                  : shapes[spec.index_of(n.inputs[0])];
        if (n.kind == LayerKind::Conv2D)
            total += static_cast<size_t>(9) * in.c * n.filters + n.filters;
        else if (n.kind == LayerKind::Dense)
            total += static_cast<size_t>(in.dim()) * n.units + n.units;
    }
    return total;
}

std::vector<double> he_init(size_t count, int fan_in, uint64_t seed) {
    if (fan_in < 1) throw std::invalid_argument("fan_in must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    std::vector<double> out(count);
    for (double& v : out) v = dist(rng);
    return out;
}

Params init_params(const NetworkSpec& spec, uint64_t seed) {
    const std::vector<Shape> shapes = infer_shapes(spec);
    const Shape input_shape{spec.input_h, spec.input_w, spec.input_c, false};
    Params params;
    params.blocks.resize(spec.nodes.size());
    for (size_t i = 0; i < spec.nodes.size(); ++i) {
        const LayerSpec& n = spec.nodes[i];
        const Shape in = (n.inputs[0] == "input") ? input_shape
                                                  : shapes[spec.index_of(n.inputs[0])];
        const uint64_t node_seed = seed * 0x9e3779b97f4a7c15ULL ^ fnv1a(n.name);
        if (n.kind == LayerKind::Conv2D) {
            const int fan_in = 9 * in.c;
            params.blocks[i].w = he_init(static_cast<size_t>(fan_in) * n.filters, fan_in, node_seed);
            params.blocks[i].b.assign(n.filters, 0.0);
        } else if (n.kind == LayerKind::Dense) {
            const int fan_in = in.dim();
            params.blocks[i].w = he_init(static_cast<size_t>(fan_in) * n.units, fan_in, node_seed);
            params.blocks[i].b.assign(n.units, 0.0);
        }
    }
    return params;
}

Params zero_like(const Params& params) {
    Params out;
    out.blocks.resize(params.blocks.size());
    for (size_t i = 0; i < params.blocks.size(); ++i) {
        out.blocks[i].w.assign(params.blocks[i].w.size(), 0.0);
        out.blocks[i].b.assign(params.blocks[i].b.size(), 0.0);
    }
    return out;
}

Tensor pack_batch(const std::vector<const img::ImageTensor*>& images) {
    if (images.empty()) throw std::invalid_argument("empty batch");
    const img::ImageTensor& first = *images[0];
    Tensor t(static_cast<int>(images.size()), first.height, first.width, first.channels);
    for (size_t s = 0; s < images.size(); ++s) {
        const img::ImageTensor& im = *images[s];
        if (im.height != first.height || im.width != first.width || im.channels != first.channels)
            throw std::invalid_argument("batch images disagree in shape");
        std::copy(im.data.begin(), im.data.end(), t.v.begin() + s * t.per_sample());
    }
    return t;
}

// ---------------------------------------------------------------------------
// Forward / backward machinery

namespace {

// im2col for a single sample: rows (h*w), cols (9*c), zero padded,
// patch columns ordered (dy, dx, c).
void im2col_sample(const Tensor& in, int sample, RowMat& m) {
    const int h = in.h, w = in.w, c = in.c;
    m.setZero(h * w, 9 * c);
    const double* base = in.v.data() + static_cast<size_t>(sample) * in.per_sample();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int row = y * w + x;
            for (int dy = -1; dy <= 1; ++dy) {
                const int sy = y + dy;
                if (sy < 0 || sy >= h) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    const int sx = x + dx;
                    if (sx < 0 || sx >= w) continue;
                    const int patch = (dy + 1) * 3 + (dx + 1);
                    const double* src = base + (static_cast<size_t>(sy) * w + sx) * c;
                    for (int ch = 0; ch < c; ++ch)
                        m(row, patch * c + ch) = src[ch];
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add patch gradients back to the input.
void col2im_sample(const RowMat& m, Tensor& grad_in, int sample) {
    const int h = grad_in.h, w = grad_in.w, c = grad_in.c;
    double* base = grad_in.v.data() + static_cast<size_t>(sample) * grad_in.per_sample();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int row = y * w + x;
            for (int dy = -1; dy <= 1; ++dy) {
                const int sy = y + dy;
                if (sy < 0 || sy >= h) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    const int sx = x + dx;
                    if (sx < 0 || sx >= w) continue;
                    const int patch = (dy + 1) * 3 + (dx + 1);
                    double* dst = base + (static_cast<size_t>(sy) * w + sx) * c;
                    for (int ch = 0; ch < c; ++ch)
                        dst[ch] += m(row, patch * c + ch);
                }
            }
        }
    }
}

uint64_t dropout_seed(uint64_t run_seed, const std::string& node_name) {
    return run_seed * 0x9e3779b97f4a7c15ULL ^ fnv1a(node_name) ^ 0xd6e8feb86659fd93ULL;
}

// Channel-average of a spatial tensor: (n,h,w,c) -> (n,h,w,1).
Tensor channel_mean(const Tensor& t) {
    Tensor out(t.n, t.h, t.w, 1);
    const double inv = 1.0 / t.c;
    for (int s = 0; s < t.n; ++s)
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x) {
                double acc = 0.0;
                for (int ch = 0; ch < t.c; ++ch) acc += t.at(s, y, x, ch);
                out.at(s, y, x, 0) = acc * inv;
            }
    return out;
}

// Same-size cross-correlation of a single-channel batch with a kernel, using
// replicate (edge-clamp) padding.  With a balanced kernel this keeps the
// response odd under intensity inversion everywhere, including the border:
// zero padding would instead manufacture a spurious edge frame on any image
// whose background is not black.
Tensor correlate_same(const Tensor& in, const dog::KernelMatrix& kernel) {
    const int half = kernel.size / 2;
    const int h = in.h, w = in.w;
    Tensor out(in.n, h, w, 1);
    for (int s = 0; s < in.n; ++s) {
        const double* src = in.v.data() + static_cast<size_t>(s) * in.per_sample();
        double* dst = out.v.data() + static_cast<size_t>(s) * out.per_sample();
        // Border pixels clamp their source coordinates; the interior skips the
        // clamping.  Both paths visit the taps in the same order, so the sums
        // are bitwise identical to a uniformly clamped loop.
        auto clamped = [&](int y, int x) {
            double acc = 0.0;
            for (int dy = -half; dy <= half; ++dy) {
                const int sy = std::clamp(y + dy, 0, h - 1);
                for (int dx = -half; dx <= half; ++dx) {
                    const int sx = std::clamp(x + dx, 0, w - 1);
                    acc += src[sy * w + sx] * kernel.at(dy + half, dx + half);
                }
            }
            return acc;
        };
        for (int y = 0; y < h; ++y) {
            const bool y_edge = y < half || y >= h - half;
            for (int x = 0; x < w; ++x) {
                if (y_edge || x < half || x >= w - half) {
                    dst[y * w + x] = clamped(y, x);
                    continue;
                }
                double acc = 0.0;
                for (int dy = -half; dy <= half; ++dy) {
                    const double* row = src + (y + dy) * w + (x - half);
                    for (int k = 0; k < kernel.size; ++k)
                        acc += row[k] * kernel.at(dy + half, k);
                }
                dst[y * w + x] = acc;
            }
        }
    }
    return out;
}

// Exact adjoint of correlate_same: scatters each output gradient back to the
// clamped source positions it read from.
Tensor correlate_same_adjoint(const Tensor& g_out, const dog::KernelMatrix& kernel) {
    const int half = kernel.size / 2;
    Tensor g_in(g_out.n, g_out.h, g_out.w, 1);
    for (int s = 0; s < g_out.n; ++s)
        for (int y = 0; y < g_out.h; ++y)
            for (int x = 0; x < g_out.w; ++x) {
                const double g = g_out.at(s, y, x, 0);
                for (int dy = -half; dy <= half; ++dy) {
                    const int sy = std::clamp(y + dy, 0, g_out.h - 1);
                    for (int dx = -half; dx <= half; ++dx) {
                        const int sx = std::clamp(x + dx, 0, g_out.w - 1);
                        g_in.at(s, sy, sx, 0) += g * kernel.at(dy + half, dx + half);
                    }
                }
            }
    return g_in;
}

Tensor average_pool(const Tensor& in, int factor) {
    if (factor == 1) return in;
    Tensor out(in.n, in.h / factor, in.w / factor, in.c);
    const double inv = 1.0 / (factor * factor);
    for (int s = 0; s < in.n; ++s)
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x)
                for (int ch = 0; ch < in.c; ++ch) {
                    double acc = 0.0;
                    for (int fy = 0; fy < factor; ++fy)
                        for (int fx = 0; fx < factor; ++fx)
                            acc += in.at(s, y * factor + fy, x * factor + fx, ch);
                    out.at(s, y, x, ch) = acc * inv;
                }
    return out;
}

dog::KernelMatrix residual_kernel(const LayerSpec& n) {
    dog::KernelMatrix k =
        n.flat_kernel
            ? dog::build_flat_kernel(n.dog_kernel_size, n.dog_gamma, n.polarity)
            : dog::build_oocs_kernel(n.dog_kernel_size, n.dog_gamma, n.polarity);
    if (n.gain != 1.0)
        for (double& w : k.weights) w *= n.gain;
    return k;
}

}  // namespace

ForwardResult forward(const NetworkSpec& spec, const Params& params,
                      const Tensor& batch, RunMode mode, uint64_t seed) {
    if (batch.h != spec.input_h || batch.w != spec.input_w || batch.c != spec.input_c)
        throw std::runtime_error("batch shape does not match network input");
    const std::vector<Shape> shapes = infer_shapes(spec);

    ForwardCache cache;
    cache.mode = mode;
    cache.seed = seed;
    cache.input = batch;
    cache.acts.resize(spec.nodes.size());
    cache.pool_argmax.resize(spec.nodes.size());
    cache.dropout_mask.resize(spec.nodes.size());
    cache.dog_response.resize(spec.nodes.size());

    auto act_of = [&](const std::string& name) -> const Tensor& {
        if (name == "input" || name == kNetworkInput) return cache.input;
        return cache.acts[spec.index_of(name)];
    };

    RowMat cols;  // conv scratch, reused across samples
    for (size_t i = 0; i < spec.nodes.size(); ++i) {
        const LayerSpec& n = spec.nodes[i];
        const Tensor& in = act_of(n.inputs[0]);
        switch (n.kind) {
            case LayerKind::Conv2D: {
                const int f = n.filters;
                Tensor out(in.n, in.h, in.w, f);
                ConstMapMat wmat(params.blocks[i].w.data(), 9 * in.c, f);
                ConstMapMat bias(params.blocks[i].b.data(), 1, f);
                for (int s = 0; s < in.n; ++s) {
                    im2col_sample(in, s, cols);
                    MapMat o(out.v.data() + static_cast<size_t>(s) * out.per_sample(),
                             in.h * in.w, f);
                    o.noalias() = cols * wmat;
                    o.rowwise() += bias.row(0);
                }
                cache.acts[i] = std::move(out);
                break;
            }
            case LayerKind::MaxPool2x2: {
                Tensor out(in.n, in.h / 2, in.w / 2, in.c);
                auto& argmax = cache.pool_argmax[i];
                argmax.resize(out.v.size());
                size_t o = 0;
                for (int s = 0; s < in.n; ++s)
                    for (int y = 0; y < out.h; ++y)
                        for (int x = 0; x < out.w; ++x)
                            for (int ch = 0; ch < in.c; ++ch, ++o) {
                                double best = -std::numeric_limits<double>::infinity();
                                int best_idx = -1;
                                for (int fy = 0; fy < 2; ++fy)
                                    for (int fx = 0; fx < 2; ++fx) {
                                        const int sy = y * 2 + fy, sx = x * 2 + fx;
                                        const size_t idx =
                                            ((static_cast<size_t>(s) * in.h + sy) * in.w + sx) * in.c + ch;
                                        if (in.v[idx] > best) {  // strict: first index wins ties
                                            best = in.v[idx];
                                            best_idx = static_cast<int>(idx);
                                        }
                                    }
                                out.v[o] = best;
                                argmax[o] = best_idx;
                            }
                cache.acts[i] = std::move(out);
                break;
            }
            case LayerKind::Dense: {
                const int d = static_cast<int>(in.per_sample());
                Tensor out(in.n, 1, 1, n.units);
                ConstMapMat x(in.v.data(), in.n, d);
                ConstMapMat wmat(params.blocks[i].w.data(), d, n.units);
                ConstMapMat bias(params.blocks[i].b.data(), 1, n.units);
                MapMat o(out.v.data(), in.n, n.units);
                o.noalias() = x * wmat;
                o.rowwise() += bias.row(0);
                cache.acts[i] = std::move(out);
                break;
            }
            case LayerKind::ReLU: {
                Tensor out = in;
                for (double& v : out.v) v = std::max(0.0, v);
                cache.acts[i] = std::move(out);
                break;
            }
            case LayerKind::SoftmaxCE: {
                cache.acts[i] = in;  // logits pass through; loss applied in backward
                break;
            }
            case LayerKind::Dropout: {
                if (mode == RunMode::Eval) {
                    cache.acts[i] = in;
                    break;
                }
                auto& mask = cache.dropout_mask[i];
                mask.resize(in.v.size());
                std::mt19937_64 rng(dropout_seed(seed, n.name));
                std::uniform_real_distribution<double> uni(0.0, 1.0);
                const double scale = 1.0 / (1.0 - n.rate);
                for (double& m : mask) m = (uni(rng) < n.rate) ? 0.0 : scale;
                Tensor out = in;
                for (size_t j = 0; j < out.v.size(); ++j) out.v[j] *= mask[j];
                cache.acts[i] = std::move(out);
                break;
            }
            case LayerKind::Concat: {
                const Tensor& b = act_of(n.inputs[1]);
                if (b.n != in.n || b.h != in.h || b.w != in.w)
                    throw std::runtime_error("node '" + n.name + "': concat shape mismatch");
                Tensor out(in.n, in.h, in.w, in.c + b.c);
                for (int s = 0; s < in.n; ++s)
                    for (int y = 0; y < in.h; ++y)
                        for (int x = 0; x < in.w; ++x) {
                            for (int ch = 0; ch < in.c; ++ch)
                                out.at(s, y, x, ch) = in.at(s, y, x, ch);
                            for (int ch = 0; ch < b.c; ++ch)
                                out.at(s, y, x, in.c + ch) = b.at(s, y, x, ch);
                        }
                cache.acts[i] = std::move(out);
                break;
            }
            case LayerKind::FixedDogResidual: {
                const Tensor& src = act_of(n.source);
                const dog::KernelMatrix kernel = residual_kernel(n);
                Tensor resp =
                    average_pool(correlate_same(channel_mean(src), kernel), n.downsample);
                if (resp.h != in.h || resp.w != in.w)
                    throw std::runtime_error("node '" + n.name + "': response shape mismatch");
                cache.dog_response[i] = resp;  // pre-rectification, for backward
                if (n.rect == "relu")
                    for (double& v : resp.v) v = std::max(0.0, v);
                else if (n.rect == "abs")
                    for (double& v : resp.v) v = std::abs(v);
                Tensor out = n.response_only ? Tensor(in.n, in.h, in.w, in.c) : in;
                for (int s = 0; s < in.n; ++s)
                    for (int y = 0; y < in.h; ++y)
                        for (int x = 0; x < in.w; ++x) {
                            const double r = resp.at(s, y, x, 0);
                            for (int ch = 0; ch < in.c; ++ch) out.at(s, y, x, ch) += r;
                        }
                cache.acts[i] = std::move(out);
                break;
            }
            case LayerKind::Flatten: {
                Tensor out(in.n, 1, 1, static_cast<int>(in.per_sample()));
                out.v = in.v;  // row-major (y,x,c) already contiguous per sample
                cache.acts[i] = std::move(out);
                break;
            }
        }
        (void)shapes;
    }

    const Tensor& last = cache.acts.back();
    if (spec.nodes.back().kind != LayerKind::SoftmaxCE)
        throw std::runtime_error("last node must be softmax_ce");
    Eigen::MatrixXd logits(last.n, last.c);
    for (int s = 0; s < last.n; ++s)
        for (int ch = 0; ch < last.c; ++ch) logits(s, ch) = last.at(s, 0, 0, ch);

    ForwardResult result;
    result.logits = std::move(logits);
    result.cache = std::move(cache);
    return result;
}

Eigen::MatrixXd softmax(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd p = logits;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

double cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
    if (static_cast<size_t>(logits.rows()) != labels.size())
        throw std::invalid_argument("labels do not match batch size");
    const Eigen::MatrixXd p = softmax(logits);
    double loss = 0.0;
    for (Eigen::Index r = 0; r < p.rows(); ++r)
        loss -= std::log(std::max(p(r, labels[r]), 1e-300));
    return loss / static_cast<double>(p.rows());
}

BackwardResult backward(const NetworkSpec& spec, const Params& params,
                        const ForwardCache& cache, const std::vector<int>& labels) {
    if (cache.acts.size() != spec.nodes.size())
        throw std::runtime_error("stale cache: node count mismatch");
    const Tensor& last = cache.acts.back();
    if (static_cast<size_t>(last.n) != labels.size())
        throw std::runtime_error("stale cache: batch size does not match labels");

    auto act_of = [&](const std::string& name) -> const Tensor& {
        if (name == "input" || name == kNetworkInput) return cache.input;
        return cache.acts[spec.index_of(name)];
    };

    BackwardResult result;
    result.grads = zero_like(params);

    // Per-node output gradients, accumulated as consumers are processed.
    std::vector<Tensor> grad(spec.nodes.size());
    auto grad_slot = [&](const std::string& name) -> Tensor* {
        if (name == "input") return nullptr;  // gradients wrt the image are discarded
        const int idx = spec.index_of(name);
        Tensor& g = grad[idx];
        if (g.v.empty()) {
            const Tensor& a = cache.acts[idx];
            g = Tensor(a.n, a.h, a.w, a.c);
        }
        return &g;
    };

    // Seed: softmax cross-entropy at the final node.
    {
        Eigen::MatrixXd logits(last.n, last.c);
        for (int s = 0; s < last.n; ++s)
            for (int ch = 0; ch < last.c; ++ch) logits(s, ch) = last.at(s, 0, 0, ch);
        const Eigen::MatrixXd p = softmax(logits);
        double loss = 0.0;
        for (Eigen::Index r = 0; r < p.rows(); ++r)
            loss -= std::log(std::max(p(r, labels[r]), 1e-300));
        result.loss = loss / static_cast<double>(p.rows());

        Tensor& g = grad.back().v.empty()
                        ? (grad.back() = Tensor(last.n, 1, 1, last.c))
                        : grad.back();
        const double inv_n = 1.0 / static_cast<double>(last.n);
        for (int s = 0; s < last.n; ++s)
            for (int ch = 0; ch < last.c; ++ch)
                g.at(s, 0, 0, ch) = (p(s, ch) - (labels[s] == ch ? 1.0 : 0.0)) * inv_n;
    }

    RowMat cols;
    for (int i = static_cast<int>(spec.nodes.size()) - 1; i >= 0; --i) {
        const LayerSpec& n = spec.nodes[i];
        Tensor& g = grad[i];
        if (g.v.empty()) continue;  // dead branch
        const Tensor& in = act_of(n.inputs[0]);
        Tensor* g_in = grad_slot(n.inputs[0]);
        switch (n.kind) {
            case LayerKind::Conv2D: {
                const int f = n.filters;
                ConstMapMat wmat(params.blocks[i].w.data(), 9 * in.c, f);
                MapMat gw(result.grads.blocks[i].w.data(), 9 * in.c, f);
                MapMat gb(result.grads.blocks[i].b.data(), 1, f);
                RowMat gcols(in.h * in.w, 9 * in.c);
                for (int s = 0; s < in.n; ++s) {
                    ConstMapMat go(g.v.data() + static_cast<size_t>(s) * g.per_sample(),
                                   in.h * in.w, f);
                    im2col_sample(in, s, cols);
                    gw.noalias() += cols.transpose() * go;
                    gb.row(0) += go.colwise().sum();
                    if (g_in) {
                        gcols.noalias() = go * wmat.transpose();
                        col2im_sample(gcols, *g_in, s);
                    }
                }
                break;
            }
            case LayerKind::MaxPool2x2: {
                if (!g_in) break;
                const auto& argmax = cache.pool_argmax[i];
                for (size_t o = 0; o < g.v.size(); ++o)
                    g_in->v[argmax[o]] += g.v[o];
                break;
            }
            case LayerKind::Dense: {
                const int d = static_cast<int>(in.per_sample());
                ConstMapMat x(in.v.data(), in.n, d);
                ConstMapMat wmat(params.blocks[i].w.data(), d, n.units);
                ConstMapMat go(g.v.data(), in.n, n.units);
                MapMat gw(result.grads.blocks[i].w.data(), d, n.units);
                MapMat gb(result.grads.blocks[i].b.data(), 1, n.units);
                gw.noalias() += x.transpose() * go;
                gb.row(0) += go.colwise().sum();
                if (g_in) {
                    MapMat gx(g_in->v.data(), in.n, d);
                    gx.noalias() += go * wmat.transpose();
                }
                break;
            }
            case LayerKind::ReLU: {
                if (!g_in) break;
                const Tensor& out = cache.acts[i];
                for (size_t j = 0; j < g.v.size(); ++j)
                    if (out.v[j] > 0.0) g_in->v[j] += g.v[j];
                break;
            }
            case LayerKind::SoftmaxCE: {
                if (!g_in) break;
                for (size_t j = 0; j < g.v.size(); ++j) g_in->v[j] += g.v[j];
                break;
            }
            case LayerKind::Dropout: {
                if (!g_in) break;
                if (cache.mode == RunMode::Eval) {
                    for (size_t j = 0; j < g.v.size(); ++j) g_in->v[j] += g.v[j];
                } else {
                    const auto& mask = cache.dropout_mask[i];
                    for (size_t j = 0; j < g.v.size(); ++j) g_in->v[j] += g.v[j] * mask[j];
                }
                break;
            }
            case LayerKind::Concat: {
                const Tensor& b = act_of(n.inputs[1]);
                Tensor* g_b = grad_slot(n.inputs[1]);
                for (int s = 0; s < g.n; ++s)
                    for (int y = 0; y < g.h; ++y)
                        for (int x = 0; x < g.w; ++x) {
                            if (g_in)
                                for (int ch = 0; ch < in.c; ++ch)
                                    g_in->at(s, y, x, ch) += g.at(s, y, x, ch);
                            if (g_b)
                                for (int ch = 0; ch < b.c; ++ch)
                                    g_b->at(s, y, x, ch) += g.at(s, y, x, in.c + ch);
                        }
                break;
            }
            case LayerKind::FixedDogResidual: {
                // Chain branch: identity (absent when the node emits the
                // response alone, since the chain input's values are unused).
                if (!n.response_only && g_in)
                    for (size_t j = 0; j < g.v.size(); ++j) g_in->v[j] += g.v[j];
                // Response branch: back through broadcast-add, rectification,
                // average pool, the fixed convolution, and the channel average.
                Tensor* g_src = (n.source == kNetworkInput) ? nullptr : grad_slot(n.source);
                if (g_src) {
                    const Tensor& src = act_of(n.source);
                    const Tensor& pre = cache.dog_response[i];
                    Tensor g_pooled(g.n, g.h, g.w, 1);
                    for (int s = 0; s < g.n; ++s)
                        for (int y = 0; y < g.h; ++y)
                            for (int x = 0; x < g.w; ++x) {
                                double acc = 0.0;
                                for (int ch = 0; ch < g.c; ++ch) acc += g.at(s, y, x, ch);
                                const double r = pre.at(s, y, x, 0);
                                if (n.rect == "relu") acc *= (r > 0.0) ? 1.0 : 0.0;
                                else if (n.rect == "abs") acc *= (r > 0.0) ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
                                g_pooled.at(s, y, x, 0) = acc;
                            }
                    Tensor g_resp(src.n, src.h, src.w, 1);
                    const int f = n.downsample;
                    const double inv_ff = 1.0 / (f * f);
                    for (int s = 0; s < g.n; ++s)
                        for (int y = 0; y < src.h; ++y)
                            for (int x = 0; x < src.w; ++x)
                                g_resp.at(s, y, x, 0) =
                                    g_pooled.at(s, y / f, x / f, 0) * inv_ff;
                    const dog::KernelMatrix kernel = residual_kernel(n);
                    const Tensor g_avg = correlate_same_adjoint(g_resp, kernel);
                    const double inv_c = 1.0 / src.c;
                    for (int s = 0; s < src.n; ++s)
                        for (int y = 0; y < src.h; ++y)
                            for (int x = 0; x < src.w; ++x) {
                                const double v = g_avg.at(s, y, x, 0) * inv_c;
                                for (int ch = 0; ch < src.c; ++ch)
                                    g_src->at(s, y, x, ch) += v;
                            }
                }
                break;
            }
            case LayerKind::Flatten: {
                if (!g_in) break;
                for (size_t j = 0; j < g.v.size(); ++j) g_in->v[j] += g.v[j];
                break;
            }
        }
    }
    return result;
}

AdamState AdamState::make(const Params& params, const AdamConfig& hyper) {
    AdamState state;
    state.m = zero_like(params);
    state.v = zero_like(params);
    state.hyper = hyper;
    return state;
}

void adam_step(Params& params, const Params& grads, AdamState& state) {
    if (params.blocks.size() != grads.blocks.size())
        throw std::invalid_argument("adam: incongruent parameter and gradient shapes");
    state.step += 1;
    const AdamConfig& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    auto update = [&](std::vector<double>& p, const std::vector<double>& g,
                      std::vector<double>& m, std::vector<double>& v) {
        if (p.size() != g.size()) throw std::invalid_argument("adam: array size mismatch");
        for (size_t i = 0; i < p.size(); ++i) {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            p[i] -= h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
        }
    };
    for (size_t i = 0; i < params.blocks.size(); ++i) {
        update(params.blocks[i].w, grads.blocks[i].w, state.m.blocks[i].w, state.v.blocks[i].w);
        update(params.blocks[i].b, grads.blocks[i].b, state.m.blocks[i].b, state.v.blocks[i].b);
    }
}

double finite_diff_check(const NetworkSpec& spec, const Params& params,
                         const Tensor& batch, const std::vector<int>& labels,
                         double epsilon, int samples, uint64_t seed) {
    const uint64_t forward_seed = seed ^ 0xabcdef12345ULL;
    const ForwardResult fwd = forward(spec, params, batch, RunMode::Train, forward_seed);
    const BackwardResult analytic = backward(spec, params, fwd.cache, labels);

    // Flat list of (block, is_bias, offset) coordinates.
    struct Coord { size_t block; bool bias; size_t offset; };
    std::vector<Coord> coords;
    for (size_t bi = 0; bi < params.blocks.size(); ++bi) {
        for (size_t j = 0; j < params.blocks[bi].w.size(); ++j)
            coords.push_back({bi, false, j});
        for (size_t j = 0; j < params.blocks[bi].b.size(); ++j)
            coords.push_back({bi, true, j});
    }
    if (coords.empty()) return 0.0;

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<size_t> pick(0, coords.size() - 1);

    Params perturbed = params;
    auto loss_at = [&]() {
        const ForwardResult r = forward(spec, perturbed, batch, RunMode::Train, forward_seed);
        return cross_entropy(r.logits, labels);
    };

    double max_rel_err = 0.0;
    for (int s = 0; s < samples; ++s) {
        const Coord c = coords[pick(rng)];
        auto& arr = c.bias ? perturbed.blocks[c.block].b : perturbed.blocks[c.block].w;
        const auto& garr =
            c.bias ? analytic.grads.blocks[c.block].b : analytic.grads.blocks[c.block].w;
        const double orig = arr[c.offset];
        arr[c.offset] = orig + epsilon;
        const double lp = loss_at();
        arr[c.offset] = orig - epsilon;
        const double lm = loss_at();
        arr[c.offset] = orig;
        const double numeric = (lp - lm) / (2.0 * epsilon);
        const double a = garr[c.offset];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel_err = std::max(max_rel_err, std::abs(a - numeric) / denom);
    }
    return max_rel_err;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {
constexpr uint64_t kCheckpointMagic = 0x4f4f43534e455431ULL;  // "OOCSNET1"
constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    return value;
}

void write_f32_array(std::ostream& out, const std::vector<double>& arr) {
    write_pod<uint64_t>(out, arr.size());
    std::vector<float> f(arr.size());
    for (size_t i = 0; i < arr.size(); ++i) f[i] = static_cast<float>(arr[i]);
    out.write(reinterpret_cast<const char*>(f.data()),
              static_cast<std::streamsize>(f.size() * sizeof(float)));
}

std::vector<double> read_f32_array(std::istream& in) {
    const uint64_t len = read_pod<uint64_t>(in);
    std::vector<float> f(len);
    in.read(reinterpret_cast<char*>(f.data()),
            static_cast<std::streamsize>(len * sizeof(float)));
    std::vector<double> out(len);
    for (size_t i = 0; i < len; ++i) out[i] = f[i];
    return out;
}
}  // namespace

void save_checkpoint(const std::string& path, const NetworkSpec& spec, const Params& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_pod(out, kCheckpointMagic);
    write_pod(out, kCheckpointVersion);
    write_pod<uint64_t>(out, spec.hash());
    write_pod<uint32_t>(out, static_cast<uint32_t>(params.blocks.size()));
    for (const auto& block : params.blocks) {
        write_f32_array(out, block.w);
        write_f32_array(out, block.b);
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

Params load_checkpoint(const std::string& path, const NetworkSpec& spec) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    if (read_pod<uint64_t>(in) != kCheckpointMagic)
        throw std::runtime_error("'" + path + "' is not an oocs checkpoint");
    if (read_pod<uint32_t>(in) != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version in '" + path + "'");
    if (read_pod<uint64_t>(in) != spec.hash())
        throw std::runtime_error("checkpoint '" + path + "' does not match the network spec");
    const uint32_t blocks = read_pod<uint32_t>(in);
    if (blocks != spec.nodes.size())
        throw std::runtime_error("checkpoint '" + path + "' has wrong block count");
    Params params;
    params.blocks.resize(blocks);
    for (auto& block : params.blocks) {
        block.w = read_f32_array(in);
        block.b = read_f32_array(in);
    }
    if (!in) throw std::runtime_error("truncated checkpoint '" + path + "'");
    return params;
}

}  // namespace oocs::nn
