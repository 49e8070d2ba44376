#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cfrpn/tape.hpp"

namespace cfrpn {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;
    /// Decay the parameter directly instead of adding decay * parameter to the gradient.
    bool decoupled = false;

    void validate() const;
};

/// Bias-corrected Adam. Parameters whose `decay` flag is false are never decayed.
template <typename T>
class Adam {
public:
    Adam() = default;
    explicit Adam(const AdamConfig& config) : config_(config) { config_.validate(); }

    /// One update. Parameters without an entry in `grads` see a zero gradient. Every
    /// gradient is checked before anything is modified, so a NumericError leaves both the
    /// parameters and the moments untouched.
    void step(ParamStore<T>& params, const GradientMap<T>& grads);

    const AdamConfig& config() const noexcept { return config_; }
    std::uint64_t steps() const noexcept { return t_; }
    const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

    /// Reinstates saved state, e.g. from a checkpoint.
    void restore(const AdamConfig& config, std::uint64_t steps, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v);

private:
    void ensure_state(const ParamStore<T>& params);

    AdamConfig config_;
    std::uint64_t t_ = 0;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
};

}  // namespace cfrpn
