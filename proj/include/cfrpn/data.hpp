#pragma once

// Datasets, CIFAR-10 and raw-tensor ingestion, the synthetic shapes generator,
// augmentation, normalization and batching. Pixels are float in [0, 1] until a
// Normalizer is applied to a batch.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cfrpn/rng.hpp"
#include "cfrpn/tensor.hpp"

namespace cfrpn {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LabeledImage {
    Tensor<float> pixels;  // [1, C, H, W]
    int label = 0;
};

struct Dataset {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t num_classes = 10;
    std::vector<float> pixels;  // sample-major [N, C, H, W]
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t image_size() const noexcept { return channels * height * width; }
    std::span<const float> image(std::size_t i) const { return {pixels.data() + i * image_size(), image_size()}; }
    std::span<float> image(std::size_t i) { return {pixels.data() + i * image_size(), image_size()}; }
    LabeledImage at(std::size_t i) const;

    /// Throws DataError if sizes disagree or a label is out of range.
    void validate() const;
    std::vector<std::size_t> class_counts() const;
    Dataset subset(std::span<const std::size_t> indices) const;
    /// The first `count` samples.
    Dataset head(std::size_t count) const;
};

// -- CIFAR-10 binary --------------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;
inline constexpr std::size_t kCifarFileBytes = kCifarRecordBytes * kCifarRecordsPerFile;

/// Parses one batch file. `source` names the input in error messages.
Dataset parse_cifar10_batch(std::span<const std::uint8_t> bytes, const std::string& source = "cifar10 batch");

/// Re-serializes sample i as a 3,073-byte record.
std::vector<std::uint8_t> encode_cifar10_record(const Dataset& data, std::size_t i);

struct CifarSplits {
    Dataset train;
    Dataset test;
};

/// Reads data_batch_1..5.bin and test_batch.bin from `directory`.
CifarSplits load_cifar10(const std::filesystem::path& directory);

// -- raw tensors --------------------------------------------------------------------

enum class RawDtype : std::uint32_t { u8 = 0, f32 = 1 };

/// Writes the image file and label file of the raw import format (see docs/formats.md).
void write_raw_dataset(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels,
                       RawDtype dtype = RawDtype::f32);
Dataset read_raw_dataset(const std::filesystem::path& images, const std::filesystem::path& labels);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// -- synthetic shapes -----------------------------------------------------------------

/// Classes: 0 filled square, 1 circle, 2 cross.
struct SynthOptions {
    std::size_t image_size = 32;
    /// Max offset of the shape centre from the image centre, in pixels.
    double position_jitter = 2.0;
    double min_half_extent = 6.0;
    double max_half_extent = 10.0;
    double noise_stddev = 0.08;
};

/// Balanced to within one sample per class, in a seeded random order.
Dataset synth_shapes(std::size_t count, std::uint64_t seed, const SynthOptions& options = {});

// -- augmentation ---------------------------------------------------------------------

struct AugmentPolicy {
    double horizontal_flip = 0.0;
    double vertical_flip = 0.0;
    double rotation_degrees = 0.0;
    std::size_t pad_crop = 0;

    bool identity() const noexcept;
    void validate() const;
};

/// One image [C, H, W]; all helpers write to `out`, which must not alias `in`.
void flip_horizontal(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, std::span<float> out);
void flip_vertical(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, std::span<float> out);
/// Counter-clockwise rotation about the image centre; bilinear, zero outside.
void rotate(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, double degrees,
            std::span<float> out);
/// Reflect-pad by `pad` then crop the window whose top-left corner is (dy, dx) in padded coordinates.
void pad_crop(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, std::size_t pad,
              std::size_t dy, std::size_t dx, std::span<float> out);

/// Applies the policy in the order pad-crop, horizontal flip, vertical flip, rotation.
void augment(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, const AugmentPolicy& policy,
             SeededRng& rng, std::span<float> out);

// -- normalization, splitting, batching -------------------------------------------

struct Normalizer {
    std::vector<float> mean;
    std::vector<float> stddev;

    /// Per-channel statistics of `train`.
    static Normalizer fit(const Dataset& train);
    void apply(std::span<float> image) const;
    bool empty() const noexcept { return mean.empty(); }
};

struct TrainValSplit {
    Dataset train;
    Dataset val;
};

/// Seeded random split with `val_count` validation samples.
TrainValSplit split_train_val(const Dataset& data, std::size_t val_count, std::uint64_t seed);

/// Seeded permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

struct Batch {
    Tensor<float> images;  // [B, C, H, W]
    std::vector<int> labels;
    /// Dataset indices of the samples.
    std::vector<std::size_t> ids;
};

struct BatchOptions {
    std::size_t batch_size = 128;
    bool shuffle = true;
    std::uint64_t seed = 0;
    std::uint64_t epoch = 0;
    /// Augmentation is applied only when `training` is set.
    bool training = false;
    AugmentPolicy augment;
    const Normalizer* normalizer = nullptr;
};

/// One epoch's batches. Each batch is a pure function of (dataset, options, index), so
/// batches may be built in any order or ahead of time with identical results.
class BatchSequence {
public:
    BatchSequence(const Dataset& data, const BatchOptions& options);

    std::size_t size() const noexcept;
    Batch operator[](std::size_t b) const;
    const std::vector<std::size_t>& order() const noexcept { return order_; }

private:
    const Dataset* data_;
    BatchOptions options_;
    std::vector<std::size_t> order_;
};

}  // namespace cfrpn
