#include "cfrpn/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "byteio.hpp"

namespace cfrpn {

LabeledImage Dataset::at(std::size_t i) const {
    if (i >= size()) throw std::out_of_range("dataset: index " + std::to_string(i) + " out of range");
    const auto px = image(i);
    return {Tensor<float>(Shape{1, channels, height, width}, std::vector<float>(px.begin(), px.end())), labels[i]};
}

void Dataset::validate() const {
    if (pixels.size() != labels.size() * image_size()) {
        throw DataError("dataset: " + std::to_string(pixels.size()) + " pixel values for " +
                        std::to_string(labels.size()) + " images of " + std::to_string(image_size()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
            throw DataError("dataset: label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                            " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
    return counts;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out{channels, height, width, num_classes, {}, {}};
    out.pixels.reserve(indices.size() * image_size());
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        const auto px = image(i);
        out.pixels.insert(out.pixels.end(), px.begin(), px.end());
        out.labels.push_back(labels.at(i));
    }
    return out;
}

Dataset Dataset::head(std::size_t count) const {
    std::vector<std::size_t> idx(std::min(count, size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return subset(idx);
}

// -- CIFAR-10 -------------------------------------------------------------------------

Dataset parse_cifar10_batch(std::span<const std::uint8_t> bytes, const std::string& source) {
    if (bytes.size() != kCifarFileBytes) {
        throw DataError(source + ": expected " + std::to_string(kCifarFileBytes) + " bytes, got " +
                        std::to_string(bytes.size()));
    }
    Dataset d;
    d.pixels.resize(kCifarRecordsPerFile * d.image_size());
    d.labels.resize(kCifarRecordsPerFile);
    for (std::size_t r = 0; r < kCifarRecordsPerFile; ++r) {
        const std::size_t offset = r * kCifarRecordBytes;
        const std::uint8_t label = bytes[offset];
        if (label > 9) {
            throw DataError(source + ": label byte " + std::to_string(label) + " at offset " + std::to_string(offset) +
                            " (record " + std::to_string(r) + ")");
        }
        d.labels[r] = label;
        float* px = d.pixels.data() + r * d.image_size();
        for (std::size_t j = 0; j < d.image_size(); ++j) px[j] = static_cast<float>(bytes[offset + 1 + j]) / 255.0f;
    }
    return d;
}

std::vector<std::uint8_t> encode_cifar10_record(const Dataset& data, std::size_t i) {
    if (data.channels != 3 || data.height != 32 || data.width != 32) {
        throw DataError("cifar10: records are 3x32x32, dataset is " + std::to_string(data.channels) + "x" +
                        std::to_string(data.height) + "x" + std::to_string(data.width));
    }
    std::vector<std::uint8_t> out(kCifarRecordBytes);
    out[0] = static_cast<std::uint8_t>(data.labels.at(i));
    const auto px = data.image(i);
    for (std::size_t j = 0; j < px.size(); ++j) {
        const float v = std::clamp(px[j], 0.0f, 1.0f);
        out[1 + j] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto len = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> bytes(len);
    if (len > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(len))) {
        throw DataError("short read on " + path.string());
    }
    return bytes;
}

namespace {

void append(Dataset& into, const Dataset& from) {
    into.pixels.insert(into.pixels.end(), from.pixels.begin(), from.pixels.end());
    into.labels.insert(into.labels.end(), from.labels.begin(), from.labels.end());
}

}  // namespace

CifarSplits load_cifar10(const std::filesystem::path& directory) {
    CifarSplits s;
    for (int b = 1; b <= 5; ++b) {
        const auto path = directory / ("data_batch_" + std::to_string(b) + ".bin");
        append(s.train, parse_cifar10_batch(read_file(path), path.string()));
    }
    const auto path = directory / "test_batch.bin";
    s.test = parse_cifar10_batch(read_file(path), path.string());
    return s;
}

// -- raw tensors ----------------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kImageMagic{'C', 'F', 'R', 'T'};
constexpr std::array<char, 4> kLabelMagic{'C', 'F', 'R', 'L'};
constexpr std::uint32_t kRawVersion = 1;

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed on " + path.string());
}

}  // namespace

void write_raw_dataset(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels,
                       RawDtype dtype) {
    data.validate();
    io::Writer w;
    w.magic(kImageMagic);
    w.u32(kRawVersion);
    w.u32(static_cast<std::uint32_t>(dtype));
    w.u64(data.size());
    w.u64(data.channels);
    w.u64(data.height);
    w.u64(data.width);
    for (float v : data.pixels) {
        if (dtype == RawDtype::u8) {
            w.u8(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
        } else {
            w.f32(v);
        }
    }
    write_bytes(images, w.bytes());

    io::Writer l;
    l.magic(kLabelMagic);
    l.u32(kRawVersion);
    l.u64(data.size());
    l.u32(static_cast<std::uint32_t>(data.num_classes));
    for (int label : data.labels) l.u32(static_cast<std::uint32_t>(label));
    write_bytes(labels, l.bytes());
}

Dataset read_raw_dataset(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto ib = read_file(images);
    io::Reader r(ib, images.string());
    r.expect_magic(kImageMagic);
    if (const auto v = r.u32(); v != kRawVersion) {
        throw DataError(images.string() + ": unsupported raw format version " + std::to_string(v));
    }
    const auto dtype = r.u32();
    if (dtype > 1) throw DataError(images.string() + ": unknown dtype tag " + std::to_string(dtype));
    Dataset d;
    const auto n = r.u64();
    d.channels = r.u64();
    d.height = r.u64();
    d.width = r.u64();
    const std::size_t count = n * d.image_size();
    r.require(count * (dtype == 0 ? 1 : 4));
    d.pixels.resize(count);
    for (std::size_t i = 0; i < count; ++i) d.pixels[i] = dtype == 0 ? static_cast<float>(r.u8()) / 255.0f : r.f32();
    r.expect_end();

    const auto lb = read_file(labels);
    io::Reader lr(lb, labels.string());
    lr.expect_magic(kLabelMagic);
    if (const auto v = lr.u32(); v != kRawVersion) {
        throw DataError(labels.string() + ": unsupported raw format version " + std::to_string(v));
    }
    const auto ln = lr.u64();
    if (ln != n) {
        throw DataError(labels.string() + ": " + std::to_string(ln) + " labels for " + std::to_string(n) + " images");
    }
    d.num_classes = lr.u32();
    lr.require(n * 4);
    d.labels.resize(n);
    for (auto& l : d.labels) l = static_cast<int>(lr.u32());
    lr.expect_end();
    d.validate();
    return d;
}

// -- synthetic shapes -------------------------------------------------------------

namespace {

bool inside(int cls, double dx, double dy, double r) {
    switch (cls) {
        case 0: return std::abs(dx) <= r && std::abs(dy) <= r;
        case 1: return dx * dx + dy * dy <= r * r;
        default: {
            const double t = r / 3.0;
            return (std::abs(dx) <= r && std::abs(dy) <= t) || (std::abs(dy) <= r && std::abs(dx) <= t);
        }
    }
}

}  // namespace

Dataset synth_shapes(std::size_t count, std::uint64_t seed, const SynthOptions& options) {
    const std::size_t S = options.image_size;
    Dataset d{3, S, S, 3, std::vector<float>(count * 3 * S * S), std::vector<int>(count)};
    std::vector<int> classes(count);
    for (std::size_t i = 0; i < count; ++i) classes[i] = static_cast<int>(i % 3);
    const auto order = shuffled_indices(count, derive_seed(seed, {0x5a11}));
    const double centre = static_cast<double>(S) / 2.0;
    // 2x2 supersampling gives soft edges
    constexpr std::array<double, 2> sub{0.25, 0.75};
    for (std::size_t i = 0; i < count; ++i) {
        const int cls = classes[order[i]];
        d.labels[i] = cls;
        SeededRng rng(derive_seed(seed, {i}));
        const double cx = centre + rng.uniform(-options.position_jitter, options.position_jitter);
        const double cy = centre + rng.uniform(-options.position_jitter, options.position_jitter);
        const double r = rng.uniform(options.min_half_extent, options.max_half_extent);
        std::array<double, 3> fg{};
        std::array<double, 3> bg{};
        for (auto& v : fg) v = rng.uniform(0.55, 1.0);
        for (auto& v : bg) v = rng.uniform(0.0, 0.35);
        float* px = d.image(i).data();
        for (std::size_t y = 0; y < S; ++y) {
            for (std::size_t x = 0; x < S; ++x) {
                double cover = 0.0;
                for (double sy : sub) {
                    for (double sx : sub) {
                        if (inside(cls, static_cast<double>(x) + sx - cx, static_cast<double>(y) + sy - cy, r)) cover += 0.25;
                    }
                }
                for (std::size_t c = 0; c < 3; ++c) {
                    const double v = bg[c] + cover * (fg[c] - bg[c]) + rng.normal(0.0, options.noise_stddev);
                    px[(c * S + y) * S + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }
    return d;
}

// -- augmentation -------------------------------------------------------------------

bool AugmentPolicy::identity() const noexcept {
    return horizontal_flip == 0.0 && vertical_flip == 0.0 && rotation_degrees == 0.0 && pad_crop == 0;
}

void AugmentPolicy::validate() const {
    const auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(horizontal_flip) || !prob(vertical_flip)) {
        throw std::invalid_argument("augment: flip probabilities must lie in [0, 1]");
    }
    if (!(rotation_degrees >= 0.0 && rotation_degrees <= 180.0)) {
        throw std::invalid_argument("augment: rotation must lie in [0, 180] degrees");
    }
}

namespace {

void require_sizes(std::span<const float> in, std::span<float> out, std::size_t n) {
    if (in.size() != n || out.size() != n) throw ShapeError("augment: image buffer size mismatch");
}

std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    if (m == 1) return 0;
    const std::ptrdiff_t period = 2 * (m - 1);
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < m ? i : period - i);
}

}  // namespace

void flip_horizontal(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, std::span<float> out) {
    require_sizes(in, out, C * H * W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            const float* src = in.data() + (c * H + y) * W;
            float* dst = out.data() + (c * H + y) * W;
            for (std::size_t x = 0; x < W; ++x) dst[x] = src[W - 1 - x];
        }
    }
}

void flip_vertical(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, std::span<float> out) {
    require_sizes(in, out, C * H * W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            std::copy_n(in.data() + (c * H + H - 1 - y) * W, W, out.data() + (c * H + y) * W);
        }
    }
}

void rotate(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, double degrees,
            std::span<float> out) {
    require_sizes(in, out, C * H * W);
    const double a = degrees * std::numbers::pi / 180.0;
    const double ca = std::cos(a);
    const double sa = std::sin(a);
    const double cy = (static_cast<double>(H) - 1.0) / 2.0;
    const double cx = (static_cast<double>(W) - 1.0) / 2.0;
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            // inverse map: the source point that lands on (x, y)
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double sx = ca * dx - sa * dy + cx;
            const double sy = sa * dx + ca * dy + cy;
            const double fx = std::floor(sx);
            const double fy = std::floor(sy);
            const double wx = sx - fx;
            const double wy = sy - fy;
            const auto x0 = static_cast<std::ptrdiff_t>(fx);
            const auto y0 = static_cast<std::ptrdiff_t>(fy);
            for (std::size_t c = 0; c < C; ++c) {
                const float* plane = in.data() + c * H * W;
                const auto px = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
                    if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(H) || xx >= static_cast<std::ptrdiff_t>(W)) {
                        return 0.0;
                    }
                    return plane[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)];
                };
                double v = (1 - wy) * (1 - wx) * px(y0, x0);
                if (wx != 0.0) v += (1 - wy) * wx * px(y0, x0 + 1);
                if (wy != 0.0) v += wy * (1 - wx) * px(y0 + 1, x0);
                if (wx != 0.0 && wy != 0.0) v += wy * wx * px(y0 + 1, x0 + 1);
                out[(c * H + y) * W + x] = static_cast<float>(v);
            }
        }
    }
}

void pad_crop(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, std::size_t pad,
              std::size_t dy, std::size_t dx, std::span<float> out) {
    require_sizes(in, out, C * H * W);
    if (dy > 2 * pad || dx > 2 * pad) throw std::invalid_argument("pad_crop: crop offset outside padded image");
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad), H);
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t sx =
                    reflect(static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pad), W);
                out[(c * H + y) * W + x] = in[(c * H + sy) * W + sx];
            }
        }
    }
}

void augment(std::span<const float> in, std::size_t C, std::size_t H, std::size_t W, const AugmentPolicy& policy,
             SeededRng& rng, std::span<float> out) {
    require_sizes(in, out, C * H * W);
    std::vector<float> a(in.begin(), in.end());
    std::vector<float> b(a.size());
    if (policy.pad_crop > 0) {
        const auto span = 2 * policy.pad_crop + 1;
        const auto dy = static_cast<std::size_t>(rng.below(span));
        const auto dx = static_cast<std::size_t>(rng.below(span));
        pad_crop(a, C, H, W, policy.pad_crop, dy, dx, b);
        a.swap(b);
    }
    if (policy.horizontal_flip > 0.0 && rng.uniform() < policy.horizontal_flip) {
        flip_horizontal(a, C, H, W, b);
        a.swap(b);
    }
    if (policy.vertical_flip > 0.0 && rng.uniform() < policy.vertical_flip) {
        flip_vertical(a, C, H, W, b);
        a.swap(b);
    }
    if (policy.rotation_degrees > 0.0) {
        rotate(a, C, H, W, rng.uniform(-policy.rotation_degrees, policy.rotation_degrees), b);
        a.swap(b);
    }
    std::copy(a.begin(), a.end(), out.begin());
}

// -- normalization, splitting, batching -------------------------------------------

Normalizer Normalizer::fit(const Dataset& train) {
    if (train.size() == 0) throw DataError("normalizer: empty training set");
    Normalizer n;
    const std::size_t P = train.height * train.width;
    for (std::size_t c = 0; c < train.channels; ++c) {
        double sum = 0.0;
        double sq = 0.0;
        for (std::size_t i = 0; i < train.size(); ++i) {
            const float* px = train.image(i).data() + c * P;
            for (std::size_t p = 0; p < P; ++p) {
                sum += px[p];
                sq += static_cast<double>(px[p]) * px[p];
            }
        }
        const double count = static_cast<double>(train.size() * P);
        const double mean = sum / count;
        const double var = std::max(0.0, sq / count - mean * mean);
        n.mean.push_back(static_cast<float>(mean));
        n.stddev.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-6)));
    }
    return n;
}

void Normalizer::apply(std::span<float> image) const {
    if (mean.empty()) return;
    const std::size_t P = image.size() / mean.size();
    for (std::size_t c = 0; c < mean.size(); ++c) {
        float* px = image.data() + c * P;
        const float inv = 1.0f / stddev[c];
        for (std::size_t p = 0; p < P; ++p) px[p] = (px[p] - mean[c]) * inv;
    }
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Fisher-Yates with our own draw so the permutation does not depend on the library's shuffle
    SeededRng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

TrainValSplit split_train_val(const Dataset& data, std::size_t val_count, std::uint64_t seed) {
    if (val_count > data.size()) throw std::invalid_argument("split: validation count exceeds dataset size");
    const auto idx = shuffled_indices(data.size(), seed);
    std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(val_count));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(val_count), idx.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    return {data.subset(train), data.subset(val)};
}

BatchSequence::BatchSequence(const Dataset& data, const BatchOptions& options) : data_(&data), options_(options) {
    if (options.batch_size == 0) throw std::invalid_argument("batches: batch size must be >= 1");
    options_.augment.validate();
    if (options.shuffle) {
        order_ = shuffled_indices(data.size(), derive_seed(options.seed, {0x5f1e, options.epoch}));
    } else {
        order_.resize(data.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
    }
}

std::size_t BatchSequence::size() const noexcept {
    return (order_.size() + options_.batch_size - 1) / options_.batch_size;
}

Batch BatchSequence::operator[](std::size_t b) const {
    if (b >= size()) throw std::out_of_range("batches: batch " + std::to_string(b) + " out of range");
    const std::size_t lo = b * options_.batch_size;
    const std::size_t hi = std::min(order_.size(), lo + options_.batch_size);
    const Dataset& d = *data_;
    Batch batch;
    batch.images = Tensor<float>(Shape{hi - lo, d.channels, d.height, d.width});
    const bool augment = options_.training && !options_.augment.identity();
    for (std::size_t i = lo; i < hi; ++i) {
        const std::size_t id = order_[i];
        auto dst = batch.images.sample(i - lo);
        if (augment) {
            SeededRng rng(derive_seed(options_.seed, {0xa06, options_.epoch, id}));
            ::cfrpn::augment(d.image(id), d.channels, d.height, d.width, options_.augment, rng, dst);
        } else {
            std::copy_n(d.image(id).data(), d.image_size(), dst.data());
        }
        if (options_.normalizer) options_.normalizer->apply(dst);
        batch.labels.push_back(d.labels[id]);
        batch.ids.push_back(id);
    }
    return batch;
}

}  // namespace cfrpn
