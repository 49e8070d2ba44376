#include "cfrpn/model.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace cfrpn {

const char* mode_name(Mode m) noexcept {
    switch (m) {
        case Mode::baseline: return "baseline";
        case Mode::cfrpn: return "cfrpn";
        case Mode::fixed_unroll: return "fixed_unroll";
    }
    return "unknown";
}

Mode parse_mode(const std::string& s) {
    if (s == "baseline") return Mode::baseline;
    if (s == "cfrpn") return Mode::cfrpn;
    if (s == "fixed_unroll" || s == "rcnn") return Mode::fixed_unroll;
    throw std::invalid_argument("unknown architecture mode '" + s + "' (expected baseline, cfrpn, fixed_unroll)");
}

ArchitectureConfig ArchitectureConfig::uniform(Mode mode, std::size_t width) {
    ArchitectureConfig c;
    c.mode = mode;
    c.widths.fill(width);
    return c;
}

bool ArchitectureConfig::stage_recursive(std::size_t stage) const noexcept {
    if (mode == Mode::baseline) return false;
    return stage > 0 || first_stage_recursive;
}

std::pair<std::size_t, std::size_t> ArchitectureConfig::head_extent() const {
    std::size_t h = in_height;
    std::size_t w = in_width;
    for (std::size_t s = 0; s < kStages; ++s) {
        // same-padded convolutions keep the extent; only pooling shrinks it
        h = pool.out_h(h);
        w = pool.out_w(w);
    }
    return {h, w};
}

void ArchitectureConfig::validate() const {
    for (std::size_t s = 0; s < kStages; ++s) {
        if (widths[s] == 0) throw std::invalid_argument("architecture: stage " + std::to_string(s + 1) + " has zero width");
        if (kernel_sizes[s] == 0 || kernel_sizes[s] % 2 == 0) {
            throw std::invalid_argument("architecture: stage " + std::to_string(s + 1) +
                                        " kernel must be odd for same padding");
        }
    }
    if (num_classes < 2) throw std::invalid_argument("architecture: need at least two classes");
    if (in_channels == 0 || in_height == 0 || in_width == 0) throw std::invalid_argument("architecture: empty input shape");
    if (mode == Mode::fixed_unroll && unroll_depth < 1) throw std::invalid_argument("architecture: unroll depth must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw std::invalid_argument("architecture: dropout rate must lie in [0, 1)");
    lrn.validate();
    convergence.validate();
    (void)head_extent();
}

std::size_t count_parameters(const ArchitectureConfig& config) {
    config.validate();
    std::size_t total = 0;
    std::size_t c_in = config.in_channels;
    for (std::size_t s = 0; s < kStages; ++s) {
        const std::size_t width = config.widths[s];
        const std::size_t k = config.kernel_sizes[s];
        const std::size_t c_eff = c_in + (config.stage_recursive(s) ? width : 0);
        total += k * k * c_eff * width + width;
        c_in = width;
    }
    const auto [h, w] = config.head_extent();
    const std::size_t features = c_in * h * w;
    total += features * config.num_classes + config.num_classes;
    return total;
}

std::size_t match_width(std::size_t baseline_width, const ArchitectureConfig& templ) {
    if (baseline_width < 2) throw std::invalid_argument("match_width: baseline width must be >= 2");
    ArchitectureConfig base = templ;
    base.mode = Mode::baseline;
    base.widths.fill(baseline_width);
    const auto target = static_cast<long long>(count_parameters(base));
    std::size_t best = 1;
    long long best_gap = -1;
    for (std::size_t m = 1; m <= baseline_width; ++m) {
        ArchitectureConfig c = templ;
        c.mode = Mode::cfrpn;
        c.widths.fill(m);
        const long long gap = std::llabs(static_cast<long long>(count_parameters(c)) - target);
        if (best_gap < 0 || gap < best_gap) {
            best_gap = gap;
            best = m;
        }
    }
    return best;
}

template <typename T>
Model<T> Model<T>::build(const ArchitectureConfig& config, std::uint64_t seed) {
    config.validate();
    Model<T> m;
    m.config_ = config;
    std::size_t c_in = config.in_channels;
    for (std::size_t s = 0; s < kStages; ++s) {
        SeededRng rng(derive_seed(seed, {s}));
        const std::string name = "stage" + std::to_string(s + 1);
        const std::size_t width = config.widths[s];
        Stage& stage = m.stages_[s];
        if (config.stage_recursive(s)) {
            ConvergenceConfig conv = config.convergence;
            if (config.mode == Mode::fixed_unroll) conv = ConvergenceConfig{0.0, config.unroll_depth, false, false};
            stage.conv = make_cfrpn_layer(m.params_, name + ".cfrpn", c_in, width, config.kernel_sizes[s], config.lrn,
                                          conv, rng);
        } else {
            stage.conv = make_conv_layer(m.params_, name + ".conv", c_in, width, config.kernel_sizes[s], rng);
            if (config.lrn_on_plain) stage.plain_lrn = config.lrn;
        }
        stage.pool = config.pool;
        stage.dropout_rate = s + 1 < kStages ? config.dropout_rate : 0.0;
        stage.dropout_in_recursion = config.dropout_in_recursion && config.stage_recursive(s);
        c_in = width;
    }
    const auto [h, w] = config.head_extent();
    SeededRng rng(derive_seed(seed, {kStages}));
    // fan-in scaled without the ReLU factor of two
    m.head_ = make_linear_layer(m.params_, "head", c_in * h * w, config.num_classes, rng, InitPolicy{std::sqrt(0.5)});
    return m;
}

template <typename T>
typename Model<T>::Forward Model<T>::forward(Tape<T>& tape, NodeId input, const ForwardOptions& options) const {
    const Shape& s = tape.value(input).shape();
    if (s.c != config_.in_channels || s.h != config_.in_height || s.w != config_.in_width) {
        throw ShapeError("model: input " + s.str() + " does not match configured [N," +
                         std::to_string(config_.in_channels) + "," + std::to_string(config_.in_height) + "," +
                         std::to_string(config_.in_width) + "]");
    }
    std::vector<std::uint64_t> fallback;
    std::span<const std::uint64_t> seeds = options.sample_seeds;
    if (seeds.empty()) {
        fallback.assign(s.n, 0);
        seeds = fallback;
    } else if (seeds.size() != s.n) {
        throw std::invalid_argument("model: one sample seed per batch element required");
    }
    Forward out{input, {}};
    NodeId x = input;
    for (std::size_t i = 0; i < kStages; ++i) {
        StageMode mode;
        mode.training = options.training;
        mode.sample_seeds = seeds;
        if (options.frozen && (*options.frozen)[i]) mode.frozen = &*(*options.frozen)[i];
        StageOutput r = forward_stage(tape, params_, stages_[i], i, x, mode);
        out.traces.stages[i] = std::move(r.trace);
        x = r.output;
    }
    out.logits = apply_linear(tape, params_, head_, x);
    return out;
}

template class Model<float>;
template class Model<double>;

}  // namespace cfrpn
