#pragma once

#include <string>
#include <vector>

#include "oocs/nn.hpp"

namespace oocs::builder {

enum class ResponseSource { NetworkInput, PathwayInput };

struct OocsConfig {
    std::string split_start;   // first node of the split chain
    std::string split_end;     // last node before the concatenation
    int dog_kernel_size = 3;
    double dog_gamma = 0.5;
    std::string insertion_node;  // node within the range after which the residual is added
    ResponseSource response_source = ResponseSource::NetworkInput;
    bool flat_kernel = false;
    // The polarity-free saliency map feeding the pathway convolutions. A wider
    // kernel than the residuals keeps stroke bodies, not just their edges, and
    // the gain compensates for the smaller dynamic range of a response map.
    int saliency_kernel_size = 5;
    double saliency_gamma = 2.0 / 3.0;
    double saliency_gain = 4.0;
};

/// Split the chain [split_start, split_end] into on/off pathways with half the
/// filters each, attach a fixed On/Off residual after the pathway copy of
/// insertion_node, and concatenate the pathway outputs channelwise.
///
/// The pathway convolutions read a shared saliency map |response| instead of
/// the original chain entry: the absolute center-surround response is even
/// under intensity inversion, while the rectified On/Off residuals trade
/// places, so the rewritten network sees an inverted image as the same
/// saliency with the polarity channels swapped.
nn::NetworkSpec build_oocs_network(const nn::NetworkSpec& base, const OocsConfig& cfg);

struct EquivalenceReport {
    bool ok = true;
    std::vector<std::string> failures;
};

/// Checks parameter counts, input/output shapes, and that exactly one On and
/// one Off residual node exist with entrywise-negated kernels.
EquivalenceReport validate_equivalence(const nn::NetworkSpec& base,
                                       const nn::NetworkSpec& oocs);

}  // namespace oocs::builder
