#include "oocs/data.hpp"

#include <cmath>
#include <fstream>
#include <random>

namespace oocs::data {

namespace {

uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError(DataErrorCode::Truncated, "truncated header in '" + path + "'");
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | b[3];
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img_in(images_path, std::ios::binary);
    if (!img_in) throw DataError(DataErrorCode::Io, "cannot open '" + images_path + "'");
    std::ifstream lbl_in(labels_path, std::ios::binary);
    if (!lbl_in) throw DataError(DataErrorCode::Io, "cannot open '" + labels_path + "'");

    const uint32_t img_magic = read_be32(img_in, images_path);
    if (img_magic != 0x00000803)
        throw DataError(DataErrorCode::MagicMismatch,
                        "bad image magic in '" + images_path + "'");
    const uint32_t n_images = read_be32(img_in, images_path);
    const uint32_t rows = read_be32(img_in, images_path);
    const uint32_t cols = read_be32(img_in, images_path);
    if (rows != 28 || cols != 28)
        throw DataError(DataErrorCode::CountMismatch,
                        "expected 28x28 images in '" + images_path + "'");

    const uint32_t lbl_magic = read_be32(lbl_in, labels_path);
    if (lbl_magic != 0x00000801)
        throw DataError(DataErrorCode::MagicMismatch,
                        "bad label magic in '" + labels_path + "'");
    const uint32_t n_labels = read_be32(lbl_in, labels_path);
    if (n_images != n_labels)
        throw DataError(DataErrorCode::CountMismatch,
                        "image/label count mismatch: " + std::to_string(n_images) +
                            " vs " + std::to_string(n_labels));

    Dataset ds;
    ds.num_classes = 10;
    ds.name = "mnist";
    ds.images.reserve(n_images);
    ds.labels.reserve(n_images);

    std::vector<unsigned char> pixel_buf(28 * 28);
    for (uint32_t i = 0; i < n_images; ++i) {
        img_in.read(reinterpret_cast<char*>(pixel_buf.data()), 28 * 28);
        if (!img_in)
            throw DataError(DataErrorCode::Truncated,
                            "truncated image data in '" + images_path + "'");
        img::ImageTensor img(28, 28, 1);
        for (size_t p = 0; p < pixel_buf.size(); ++p)
            img.data[p] = pixel_buf[p] / 255.0;
        ds.images.push_back(std::move(img));

        char lbl;
        lbl_in.read(&lbl, 1);
        if (!lbl_in)
            throw DataError(DataErrorCode::Truncated,
                            "truncated label data in '" + labels_path + "'");
        const int label = static_cast<unsigned char>(lbl);
        if (label >= ds.num_classes)
            throw DataError(DataErrorCode::LabelOutOfRange,
                            "label " + std::to_string(label) + " out of range");
        ds.labels.push_back(label);
    }
    return ds;
}

Dataset make_inverted(const Dataset& ds) {
    Dataset out;
    out.labels = ds.labels;
    out.num_classes = ds.num_classes;
    out.name = ds.name + "-inverted";
    out.images.reserve(ds.images.size());
    for (const auto& image : ds.images) out.images.push_back(img::invert(image));
    return out;
}

img::ImageTensor synth_spot(int size, SpotShape shape, SpotPolarity polarity,
                            int row, int col, double disk_radius) {
    constexpr int kMargin = 2;  // half-width of the 5x5 kernels
    const double bg = (polarity == SpotPolarity::BrightOnDark) ? 0.0 : 1.0;
    const double fg = 1.0 - bg;

    const int extent = (shape == SpotShape::Block3x3)
                           ? 1
                           : static_cast<int>(std::floor(disk_radius));
    if (row - extent < kMargin || col - extent < kMargin ||
        row + extent >= size - kMargin || col + extent >= size - kMargin)
        throw std::invalid_argument("spot does not fit inside the image with kernel margin");

    img::ImageTensor image(size, size, 1, bg);
    if (shape == SpotShape::Block3x3) {
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
                image.at(row + dy, col + dx) = fg;
    } else {
        for (int dy = -extent; dy <= extent; ++dy)
            for (int dx = -extent; dx <= extent; ++dx)
                if (dy * dy + dx * dx <= disk_radius * disk_radius)
                    image.at(row + dy, col + dx) = fg;
    }
    return image;
}

std::vector<size_t> shuffled_indices(size_t n, uint64_t seed) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    for (size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<size_t> pick(0, i - 1);
        std::swap(idx[i - 1], idx[pick(rng)]);
    }
    return idx;
}

std::vector<Batch> batches(const Dataset& ds, const BatchPlan& plan) {
    if (plan.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    const std::vector<size_t> order = shuffled_indices(ds.size(), plan.shuffle_seed);
    std::vector<Batch> out;
    for (size_t start = 0; start < order.size(); start += plan.batch_size) {
        const size_t end = std::min(order.size(), start + plan.batch_size);
        if (plan.drop_last && end - start < static_cast<size_t>(plan.batch_size)) break;
        Batch b;
        for (size_t i = start; i < end; ++i) {
            b.images.push_back(&ds.images[order[i]]);
            b.labels.push_back(ds.labels[order[i]]);
        }
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace oocs::data
