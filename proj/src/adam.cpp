#include "cfrpn/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cfrpn {

void AdamConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("adam: learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("adam: beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("adam: beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("adam: eps must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("adam: weight decay must be non-negative");
}

template <typename T>
void Adam<T>::ensure_state(const ParamStore<T>& params) {
    if (m_.empty() && t_ == 0) {
        for (const auto& p : params) {
            m_.emplace_back(p.value.shape());
            v_.emplace_back(p.value.shape());
        }
    }
    if (m_.size() != params.size()) {
        throw std::invalid_argument("adam: optimizer state covers " + std::to_string(m_.size()) +
                                    " parameters, store has " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < m_.size(); ++i) {
        const auto& p = params[ParamId{i}];
        if (m_[i].shape() != p.value.shape() || v_[i].shape() != p.value.shape()) {
            throw ShapeError("adam: moment shape mismatch for " + p.name);
        }
    }
}

template <typename T>
void Adam<T>::step(ParamStore<T>& params, const GradientMap<T>& grads) {
    ensure_state(params);
    for (const auto& [id, g] : grads) {
        if (index(id) >= params.size()) throw std::invalid_argument("adam: gradient for unknown parameter");
        const auto& p = params[id];
        if (g.shape() != p.value.shape()) {
            throw ShapeError("adam: gradient " + g.shape().str() + " does not match parameter " + p.name + " " +
                             p.value.shape().str());
        }
        if (!g.all_finite()) throw NumericError("adam: non-finite gradient for parameter " + p.name);
    }

    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(config_.beta1);
    const T b2 = static_cast<T>(config_.beta2);
    const T lr = static_cast<T>(config_.lr);
    const T eps = static_cast<T>(config_.eps);
    const T wd = static_cast<T>(config_.weight_decay);
    const T inv_c1 = static_cast<T>(1.0 / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[ParamId{i}];
        const auto it = grads.find(ParamId{i});
        const T* g = it == grads.end() ? nullptr : it->second.data().data();
        const bool decay = p.decay && config_.weight_decay > 0.0;
        T* w = p.value.data().data();
        T* m = m_[i].data().data();
        T* v = v_[i].data().data();
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            T gj = g ? g[j] : T(0);
            if (decay && !config_.decoupled) gj += wd * w[j];
            m[j] = b1 * m[j] + (T(1) - b1) * gj;
            v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
            const T mhat = m[j] * inv_c1;
            const T vhat = v[j] * inv_c2;
            T update = mhat / (std::sqrt(vhat) + eps);
            if (decay && config_.decoupled) update += wd * w[j];
            w[j] -= lr * update;
        }
    }
}

template <typename T>
void Adam<T>::restore(const AdamConfig& config, std::uint64_t steps, std::vector<Tensor<T>> m,
                      std::vector<Tensor<T>> v) {
    config.validate();
    if (m.size() != v.size()) throw std::invalid_argument("adam: moment tables differ in length");
    config_ = config;
    t_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
}

template class Adam<float>;
template class Adam<double>;

}  // namespace cfrpn
