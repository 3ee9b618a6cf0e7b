#include "oocs/oocs_builder.hpp"

#include <cmath>
#include <stdexcept>

namespace oocs::builder {

using nn::LayerKind;
using nn::LayerSpec;
using nn::NetworkSpec;

nn::NetworkSpec build_oocs_network(const nn::NetworkSpec& base, const OocsConfig& cfg) {
    const int start = base.index_of(cfg.split_start);
    const int end = base.index_of(cfg.split_end);
    const int insertion = base.index_of(cfg.insertion_node);
    if (start < 0) throw std::invalid_argument("unknown split_start '" + cfg.split_start + "'");
    if (end < 0) throw std::invalid_argument("unknown split_end '" + cfg.split_end + "'");
    if (insertion < start || insertion > end)
        throw std::invalid_argument("insertion_node must lie inside the split range");
    if (end < start) throw std::invalid_argument("split_end precedes split_start");

    // The range must be a pure chain of Conv2D/ReLU/MaxPool nodes.
    for (int i = start; i <= end; ++i) {
        const LayerSpec& n = base.nodes[i];
        const LayerKind k = n.kind;
        if (k != LayerKind::Conv2D && k != LayerKind::ReLU && k != LayerKind::MaxPool2x2)
            throw std::invalid_argument("split range may contain only conv/relu/pool nodes, found '" +
                                        n.name + "'");
        if (n.inputs.size() != 1)
            throw std::invalid_argument("split range is not a chain at '" + n.name + "'");
        if (i > start && n.inputs[0] != base.nodes[i - 1].name)
            throw std::invalid_argument("split range is not contiguous at '" + n.name + "'");
        if (k == LayerKind::Conv2D && n.filters % 2 != 0)
            throw std::invalid_argument("conv '" + n.name + "' has an odd filter count");
    }
    // Nothing outside the range may consume an interior node.
    for (size_t i = 0; i < base.nodes.size(); ++i) {
        if (static_cast<int>(i) >= start && static_cast<int>(i) <= end) continue;
        for (const auto& in_name : base.nodes[i].inputs) {
            const int idx = base.index_of(in_name);
            if (idx >= start && idx < end)
                throw std::invalid_argument("node '" + base.nodes[i].name +
                                            "' reaches into the split range");
        }
    }

    const std::vector<nn::Shape> shapes = nn::infer_shapes(base);
    const std::string entry = base.nodes[start].inputs[0];

    // Downsample factor of the residual response: source resolution over the
    // insertion activation's resolution.
    const int src_h = (cfg.response_source == ResponseSource::NetworkInput)
                          ? base.input_h
                          : (entry == "input" ? base.input_h : shapes[base.index_of(entry)].h);
    const int ins_h = shapes[insertion].h;
    if (src_h % ins_h != 0)
        throw std::invalid_argument("response source resolution is not a multiple of the insertion resolution");
    const int downsample = src_h / ins_h;
    const std::string source =
        (cfg.response_source == ResponseSource::NetworkInput) ? nn::kNetworkInput : entry;

    NetworkSpec out;
    out.input_h = base.input_h;
    out.input_w = base.input_w;
    out.input_c = base.input_c;

    const std::string concat_name = "oocs_concat";
    const std::string saliency_name = "oocs_saliency";
    for (const auto& reserved : {concat_name, saliency_name})
        if (base.find(reserved))
            throw std::invalid_argument("base network already contains '" + reserved + "'");

    for (int i = 0; i < start; ++i) out.nodes.push_back(base.nodes[i]);

    // Polarity-free saliency |response|, shared by both pathways.  Broadcast
    // over the entry activation's channels, it feeds the pathway convolutions
    // in place of the entry itself, so their weight shapes are unchanged.
    const int entry_h = (entry == "input") ? base.input_h : shapes[base.index_of(entry)].h;
    if (src_h % entry_h != 0)
        throw std::invalid_argument("response source resolution is not a multiple of the entry resolution");
    LayerSpec sal;
    sal.name = saliency_name;
    sal.kind = LayerKind::FixedDogResidual;
    sal.inputs = {entry};
    sal.dog_kernel_size = cfg.saliency_kernel_size;
    sal.dog_gamma = cfg.saliency_gamma;
    sal.polarity = dog::Polarity::On;
    sal.downsample = src_h / entry_h;
    sal.source = source;
    sal.flat_kernel = cfg.flat_kernel;
    sal.rect = "abs";
    sal.response_only = true;
    sal.gain = cfg.saliency_gain;
    out.nodes.push_back(sal);

    std::string on_tail, off_tail;
    for (const char* prefix : {"on_", "off_"}) {
        const bool is_on = prefix[1] == 'n';
        std::string prev = saliency_name;
        for (int i = start; i <= end; ++i) {
            LayerSpec copy = base.nodes[i];
            copy.name = prefix + copy.name;
            copy.inputs = {prev};
            copy.pathway = is_on ? "on" : "off";
            if (copy.kind == LayerKind::Conv2D) copy.filters /= 2;
            out.nodes.push_back(copy);
            prev = copy.name;
            if (i == insertion) {
                LayerSpec resid;
                resid.name = is_on ? "on_response" : "off_response";
                resid.kind = LayerKind::FixedDogResidual;
                resid.inputs = {prev};
                resid.pathway = copy.pathway;
                resid.dog_kernel_size = cfg.dog_kernel_size;
                resid.dog_gamma = cfg.dog_gamma;
                resid.polarity = is_on ? dog::Polarity::On : dog::Polarity::Off;
                resid.downsample = downsample;
                resid.source = source;
                resid.flat_kernel = cfg.flat_kernel;
                resid.rect = "relu";
                out.nodes.push_back(resid);
                prev = resid.name;
            }
        }
        (is_on ? on_tail : off_tail) = prev;
    }

    LayerSpec concat;
    concat.name = concat_name;
    concat.kind = LayerKind::Concat;
    concat.inputs = {on_tail, off_tail};
    out.nodes.push_back(concat);

    for (size_t i = end + 1; i < base.nodes.size(); ++i) {
        LayerSpec copy = base.nodes[i];
        for (auto& in_name : copy.inputs)
            if (in_name == cfg.split_end) in_name = concat_name;
        out.nodes.push_back(copy);
    }

    nn::infer_shapes(out);  // surface any bookkeeping error now
    return out;
}

EquivalenceReport validate_equivalence(const nn::NetworkSpec& base,
                                       const nn::NetworkSpec& oocs) {
    EquivalenceReport report;
    auto fail = [&](const std::string& msg) {
        report.ok = false;
        report.failures.push_back(msg);
    };

    try {
        const size_t base_count = nn::param_count(base);
        const size_t oocs_count = nn::param_count(oocs);
        if (base_count != oocs_count)
            fail("parameter counts differ: base " + std::to_string(base_count) +
                 " vs oocs " + std::to_string(oocs_count));

        if (base.input_h != oocs.input_h || base.input_w != oocs.input_w ||
            base.input_c != oocs.input_c)
            fail("input shapes differ");

        const auto base_shapes = nn::infer_shapes(base);
        const auto oocs_shapes = nn::infer_shapes(oocs);
        if (!(base_shapes.back() == oocs_shapes.back()))
            fail("output shapes differ");

        const LayerSpec* on_node = nullptr;
        const LayerSpec* off_node = nullptr;
        int residuals = 0;
        for (const auto& n : oocs.nodes) {
            if (n.kind != LayerKind::FixedDogResidual || n.response_only) continue;
            ++residuals;
            if (n.polarity == dog::Polarity::On) on_node = &n;
            else off_node = &n;
        }
        if (residuals != 2 || !on_node || !off_node) {
            fail("expected exactly one On and one Off residual node, found " +
                 std::to_string(residuals));
        } else if (on_node->dog_kernel_size != off_node->dog_kernel_size ||
                   on_node->dog_gamma != off_node->dog_gamma ||
                   on_node->flat_kernel != off_node->flat_kernel ||
                   on_node->rect != off_node->rect || on_node->gain != off_node->gain) {
            fail("on/off residual nodes use different kernel parameters");
        } else {
            auto build = [](const LayerSpec& n) {
                return n.flat_kernel
                           ? dog::build_flat_kernel(n.dog_kernel_size, n.dog_gamma, n.polarity)
                           : dog::build_oocs_kernel(n.dog_kernel_size, n.dog_gamma, n.polarity);
            };
            const dog::KernelMatrix on_k = build(*on_node);
            const dog::KernelMatrix off_k = build(*off_node);
            for (size_t i = 0; i < on_k.weights.size(); ++i)
                if (on_k.weights[i] != -off_k.weights[i]) {
                    fail("on/off kernels are not entrywise negations");
                    break;
                }
        }
    } catch (const std::exception& e) {
        fail(std::string("shape resolution failed: ") + e.what());
    }
    return report;
}

}  // namespace oocs::builder
