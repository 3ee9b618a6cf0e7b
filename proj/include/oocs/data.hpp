#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "oocs/imageops.hpp"

namespace oocs::data {

enum class DataErrorCode {
    Io,
    MagicMismatch,
    Truncated,
    CountMismatch,
    LabelOutOfRange,
};

class DataError : public std::runtime_error {
public:
    DataError(DataErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    DataErrorCode code() const { return code_; }

private:
    DataErrorCode code_;
};

struct Dataset {
    std::vector<img::ImageTensor> images;
    std::vector<int> labels;
    int num_classes = 10;
    std::string name;

    size_t size() const { return images.size(); }
};

struct BatchPlan {
    int batch_size = 64;
    uint64_t shuffle_seed = 0;
    bool drop_last = false;
};

struct Batch {
    std::vector<const img::ImageTensor*> images;
    std::vector<int> labels;
};

/// IDX reader for the MNIST distribution: big-endian magic 0x803 (images,
/// N x 28 x 28) and 0x801 (labels), bytes scaled to [0,1] by /255.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

/// Every image replaced by 1 - x; labels unchanged, name suffixed "-inverted".
Dataset make_inverted(const Dataset& ds);

enum class SpotShape { Block3x3, Disk };
enum class SpotPolarity { BrightOnDark, DarkOnBright };

/// Square test image with a small spot at `(row, col)`. The spot must keep a
/// 2-pixel margin from the border so a 5x5 kernel fits around it.
img::ImageTensor synth_spot(int size, SpotShape shape, SpotPolarity polarity,
                            int row, int col, double disk_radius = 1.5);

/// Seeded Fisher-Yates shuffle, then contiguous batches.
std::vector<Batch> batches(const Dataset& ds, const BatchPlan& plan);

/// The permutation used by `batches` for the same seed.
std::vector<size_t> shuffled_indices(size_t n, uint64_t seed);

}  // namespace oocs::data
