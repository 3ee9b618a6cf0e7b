#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oocs/dog_kernels.hpp"

namespace oocs::img {

/// H x W x C image, row-major, channel-last, intensities nominally in [0,1].
struct ImageTensor {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<double> data;

    ImageTensor() = default;
    ImageTensor(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c),
          data(static_cast<size_t>(h) * w * c, fill) {}

    double& at(int y, int x, int c = 0) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c = 0) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    size_t size() const { return data.size(); }
};

struct ResponsePair {
    ImageTensor on;
    ImageTensor off;
};

enum class Padding { Same, Valid };

/// Cross-correlation of a single-channel image with a kernel. Same padding
/// pads with zeros and preserves the spatial size at stride 1.
ImageTensor convolve2d(const ImageTensor& image, const dog::KernelMatrix& kernel,
                       Padding padding, int stride = 1);

/// On and off responses of an image: each channel convolved with the on/off
/// kernels (Same padding, stride 1), channels averaged into one response map.
ResponsePair on_off_responses(const ImageTensor& image, const dog::DogParams& params);

ImageTensor perturb_gaussian(const ImageTensor& image, double sigma, uint64_t seed);
ImageTensor perturb_salt_pepper(const ImageTensor& image, double p, uint64_t seed);
ImageTensor gamma_correct(const ImageTensor& image, double g);
ImageTensor adjust_contrast(const ImageTensor& image, double factor);
ImageTensor invert(const ImageTensor& image);

/// Binary PGM (P5), 8-bit, [min,max] rescaled to [0,255]; constant images
/// map to 128.
void export_pgm(const ImageTensor& image, const std::string& path);
ImageTensor load_pgm(const std::string& path);

}  // namespace oocs::img
