#include "oocs/imageops.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace oocs::img {

static double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

ImageTensor convolve2d(const ImageTensor& image, const dog::KernelMatrix& kernel,
                       Padding padding, int stride) {
    if (image.channels != 1)
        throw std::invalid_argument("convolve2d expects a single-channel image");
    if (stride < 1) throw std::invalid_argument("stride must be >= 1");
    const int k = kernel.size;
    const int half = k / 2;

    int out_h, out_w;
    if (padding == Padding::Same) {
        out_h = (image.height + stride - 1) / stride;
        out_w = (image.width + stride - 1) / stride;
    } else {
        if (image.height < k || image.width < k)
            throw std::invalid_argument("kernel larger than image in Valid mode");
        out_h = (image.height - k) / stride + 1;
        out_w = (image.width - k) / stride + 1;
    }

    ImageTensor out(out_h, out_w, 1);
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
            // Center of the receptive field in image coordinates.
            const int cy = (padding == Padding::Same) ? oy * stride : oy * stride + half;
            const int cx = (padding == Padding::Same) ? ox * stride : ox * stride + half;
            double acc = 0.0;
            for (int dy = -half; dy <= half; ++dy) {
                const int y = cy + dy;
                if (y < 0 || y >= image.height) continue;
                for (int dx = -half; dx <= half; ++dx) {
                    const int x = cx + dx;
                    if (x < 0 || x >= image.width) continue;
                    acc += image.at(y, x) * kernel.at(dy + half, dx + half);
                }
            }
            out.at(oy, ox) = acc;
        }
    }
    return out;
}

ResponsePair on_off_responses(const ImageTensor& image, const dog::DogParams& params) {
    if (image.height == 0 || image.width == 0)
        throw std::invalid_argument("empty image");
    const dog::KernelMatrix on_kernel =
        dog::build_oocs_kernel(params.kernel_size, params.gamma, dog::Polarity::On);

    ImageTensor on(image.height, image.width, 1);
    ImageTensor channel(image.height, image.width, 1);
    for (int c = 0; c < image.channels; ++c) {
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x)
                channel.at(y, x) = image.at(y, x, c);
        const ImageTensor resp = convolve2d(channel, on_kernel, Padding::Same, 1);
        for (size_t i = 0; i < on.size(); ++i) on.data[i] += resp.data[i];
    }
    const double inv_c = 1.0 / image.channels;
    for (double& v : on.data) v *= inv_c;

    ResponsePair pair;
    pair.off = on;
    for (double& v : pair.off.data) v = -v;
    pair.on = std::move(on);
    return pair;
}

ImageTensor perturb_gaussian(const ImageTensor& image, double sigma, uint64_t seed) {
    if (sigma < 0.0) throw std::invalid_argument("noise sigma must be >= 0");
    if (sigma == 0.0) return image;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    ImageTensor out = image;
    for (double& v : out.data) v = clamp01(v + noise(rng));
    return out;
}

ImageTensor perturb_salt_pepper(const ImageTensor& image, double p, uint64_t seed) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("corruption probability must be in [0,1]");
    if (p == 0.0) return image;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    ImageTensor out = image;
    // Each pixel corrupted with probability p, salt and pepper equally likely.
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const double u = uni(rng);
            if (u < p) {
                const double v = (u < p * 0.5) ? 0.0 : 1.0;
                for (int c = 0; c < out.channels; ++c) out.at(y, x, c) = v;
            }
        }
    }
    return out;
}

ImageTensor gamma_correct(const ImageTensor& image, double g) {
    if (!(g > 0.0)) throw std::invalid_argument("gamma exponent must be positive");
    ImageTensor out = image;
    for (double& v : out.data) v = std::pow(v, g);
    return out;
}

ImageTensor adjust_contrast(const ImageTensor& image, double factor) {
    if (!(factor > 0.0)) throw std::invalid_argument("contrast factor must be positive");
    double mean = 0.0;
    for (double v : image.data) mean += v;
    mean /= static_cast<double>(image.size());
    ImageTensor out = image;
    for (double& v : out.data) v = clamp01(mean + factor * (v - mean));
    return out;
}

ImageTensor invert(const ImageTensor& image) {
    ImageTensor out = image;
    for (double& v : out.data) v = 1.0 - v;
    return out;
}

void export_pgm(const ImageTensor& image, const std::string& path) {
    if (image.channels != 1)
        throw std::invalid_argument("export_pgm expects a single-channel image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");

    const auto [lo_it, hi_it] = std::minmax_element(image.data.begin(), image.data.end());
    const double lo = *lo_it, hi = *hi_it;
    out << "P5\n" << image.width << " " << image.height << "\n255\n";
    std::vector<unsigned char> bytes(image.size());
    for (size_t i = 0; i < image.size(); ++i) {
        if (hi == lo) {
            bytes[i] = 128;
        } else {
            bytes[i] = static_cast<unsigned char>(
                std::lround(255.0 * (image.data[i] - lo) / (hi - lo)));
        }
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

ImageTensor load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error("'" + path + "' is not a binary PGM");
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw std::runtime_error("bad PGM header in '" + path + "'");
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw std::runtime_error("truncated PGM '" + path + "'");
    ImageTensor img(h, w, 1);
    for (size_t i = 0; i < bytes.size(); ++i)
        img.data[i] = static_cast<double>(bytes[i]) / maxval;
    return img;
}

}  // namespace oocs::img
