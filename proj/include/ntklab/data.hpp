#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntklab/common.hpp"
#include "ntklab/dynamics.hpp"

namespace ntklab {

struct RawDataset {
    std::vector<std::uint8_t> pixels;  // n * dim, pre-normalization
    std::vector<int> class_ids;        // n, dataset classes (0..9)
    int n = 0;
    int dim = 0;               // 784 (MNIST) or 3072 (CIFAR-10, channel-major)
    std::string split;         // caller-assigned tag ("train"/"test")
    std::uint64_t checksum = 0;
};

enum class TaskKind { mnist_odd_even, cifar_animal_vehicle, mnist_10, cifar_10 };

TaskKind task_kind_from_string(const std::string& s);
std::string to_string(TaskKind);
bool task_is_binary(TaskKind);

struct Normalization {
    double scale = 1.0 / 255.0;
    double shift = 0.0;  // subtracted after scaling
    bool unit_sphere = false;

    double apply(std::uint8_t p) const { return static_cast<double>(p) * scale - shift; }
    std::string describe() const;
};

struct TaskSpec {
    TaskKind kind = TaskKind::mnist_odd_even;
    int n_per_class = 10;  // per side for binary tasks, per digit class otherwise
    std::uint64_t seed = 0;
    bool unit_sphere = false;
    double negative_label = -1.0;

    void validate() const;
};

// IDX files, raw or gzipped (sniffed); big-endian magics 0x803 / 0x801.
RawDataset load_mnist(const std::string& images_path, const std::string& labels_path);

// CIFAR-10 binary batches: 3073-byte records, 1 label + 3072 channel-major pixels.
RawDataset load_cifar10(const std::vector<std::string>& batch_paths);

// scale to [0,1] and subtract the global mean scalar of this split.
Normalization default_normalization(const RawDataset& raw);

// Class-balanced seeded subset with the binary side mapping (odd digits vs
// even; CIFAR animals vs vehicles), normalized pixels, encoded labels.
LabeledDataset make_task(const RawDataset& raw, const TaskSpec& spec, const Normalization& norm);

// Lossless raster grid (PGM for 784, PPM for 3072) with the layout recorded
// in a header comment; de-normalizes via `norm`, clamped to [0, 255].
void export_grid(const Mat& images, int cols, const Normalization& norm, const std::string& path);

// Inverse of export_grid (re-normalizes); for round-trip checks and reports.
Mat import_grid(const std::string& path, const Normalization& norm);

void save_dataset_cache(const std::string& path, const LabeledDataset& data);
LabeledDataset load_dataset_cache(const std::string& path);

}  // namespace ntklab
