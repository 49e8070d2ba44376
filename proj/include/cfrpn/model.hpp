#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cfrpn/layers.hpp"

namespace cfrpn {

enum class Mode { baseline, cfrpn, fixed_unroll };

const char* mode_name(Mode m) noexcept;
Mode parse_mode(const std::string& s);

inline constexpr std::size_t kStages = 4;

/// Four conv stages, each followed by max pooling, then one linear classifier.
struct ArchitectureConfig {
    Mode mode = Mode::cfrpn;
    /// Iterations per recursive stage in fixed_unroll mode.
    std::size_t unroll_depth = 3;
    std::array<std::size_t, kStages> widths{96, 96, 96, 96};
    std::array<std::size_t, kStages> kernel_sizes{5, 3, 3, 3};
    PoolSpec pool{3, 3, 2, 1};
    bool first_stage_recursive = false;
    std::size_t num_classes = 10;
    std::size_t in_channels = 3;
    std::size_t in_height = 32;
    std::size_t in_width = 32;
    LrnSpec lrn{};
    /// LRN after relu on plain conv stages too, so a plain stage matches one recursive iteration.
    bool lrn_on_plain = true;
    ConvergenceConfig convergence{};
    double dropout_rate = 0.5;
    bool dropout_in_recursion = false;

    static ArchitectureConfig uniform(Mode mode, std::size_t width);

    bool stage_recursive(std::size_t stage) const noexcept;
    /// Spatial extents seen by the classifier head.
    std::pair<std::size_t, std::size_t> head_extent() const;
    void validate() const;
};

std::size_t count_parameters(const ArchitectureConfig& config);

/// Smallest-gap C-FRPN width for a baseline width n, searching m in [1, n]; ties go to
/// the smaller m. `templ` supplies everything but mode and widths.
std::size_t match_width(std::size_t baseline_width, const ArchitectureConfig& templ = {});

/// Per-stage depth traces are present only for recursive stages.
struct ForwardTraces {
    std::array<std::optional<IterationTrace>, kStages> stages;
};

struct ForwardOptions {
    bool training = false;
    /// One seed per sample (required when training with dropout).
    std::vector<std::uint64_t> sample_seeds;
    /// Optional per-stage frozen depths.
    const std::array<std::optional<FrozenDepths>, kStages>* frozen = nullptr;
};

template <typename T>
class Model {
public:
    struct Forward {
        NodeId logits;
        ForwardTraces traces;
    };

    static Model build(const ArchitectureConfig& config, std::uint64_t seed);

    const ArchitectureConfig& config() const noexcept { return config_; }
    ParamStore<T>& params() noexcept { return params_; }
    const ParamStore<T>& params() const noexcept { return params_; }
    const std::array<Stage, kStages>& stages() const noexcept { return stages_; }
    const LinearLayer& head() const noexcept { return head_; }

    Forward forward(Tape<T>& tape, NodeId input, const ForwardOptions& options = {}) const;

    template <typename U>
    Model<U> cast() const {
        Model<U> m;
        m.config_ = config_;
        m.params_ = params_.template cast<U>();
        m.stages_ = stages_;
        m.head_ = head_;
        return m;
    }

private:
    template <typename>
    friend class Model;

    ArchitectureConfig config_;
    ParamStore<T> params_;
    std::array<Stage, kStages> stages_;
    LinearLayer head_;
};

}  // namespace cfrpn
