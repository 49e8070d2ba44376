#pragma once

// Reverse-mode differentiation over a dynamically recorded tape. Nodes are appended in
// evaluation order, so the sequence is topological by construction. A parameter bound
// several times to one tape resolves to a single leaf, which makes gradients of shared
// weights (e.g. across unrolled iterations) sum automatically.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfrpn/tensor.hpp"

namespace cfrpn {

enum class NodeId : std::size_t {};
enum class ParamId : std::size_t {};

constexpr std::size_t index(NodeId id) noexcept { return static_cast<std::size_t>(id); }
constexpr std::size_t index(ParamId id) noexcept { return static_cast<std::size_t>(id); }

enum class OpKind {
    constant,
    parameter,
    conv2d,
    maxpool,
    relu,
    sigmoid,
    lrn,
    dropout,
    concat,
    linear,
    softmax_xent,
    add,
    scale,
    sum,
    gather,
    scatter,
};

const char* op_name(OpKind kind) noexcept;

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    bool decay = true;  // biases are excluded from weight decay
};

/// Named trainable tensors; every name is registered exactly once.
template <typename T>
class ParamStore {
public:
    ParamId add(std::string name, Tensor<T> value, bool decay = true);

    Parameter<T>& operator[](ParamId id) { return params_.at(index(id)); }
    const Parameter<T>& operator[](ParamId id) const { return params_.at(index(id)); }

    std::size_t size() const noexcept { return params_.size(); }
    std::optional<ParamId> find(const std::string& name) const;
    std::size_t element_count() const noexcept;

    auto begin() const noexcept { return params_.begin(); }
    auto end() const noexcept { return params_.end(); }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& p : params_) out.add(p.name, p.value.template cast<U>(), p.decay);
        return out;
    }

    friend bool operator==(const ParamStore& a, const ParamStore& b) {
        if (a.params_.size() != b.params_.size()) return false;
        for (std::size_t i = 0; i < a.params_.size(); ++i) {
            const auto& x = a.params_[i];
            const auto& y = b.params_[i];
            if (x.name != y.name || x.decay != y.decay || !(x.value == y.value)) return false;
        }
        return true;
    }

private:
    std::vector<Parameter<T>> params_;
};

template <typename T>
using GradientMap = std::map<ParamId, Tensor<T>>;

template <typename T>
class Tape {
public:
    /// Vector-Jacobian product for one node: one gradient per input. Entries whose
    /// `needs` flag is false may be left empty.
    using Backward = std::function<std::vector<Tensor<T>>(const Tape& tape, std::span<const NodeId> inputs,
                                                          const Tensor<T>& grad_out,
                                                          std::span<const bool> needs)>;

    struct Node {
        OpKind kind;
        std::vector<NodeId> inputs;
        Tensor<T> value;
        Backward backward;
        std::optional<ParamId> param;
        bool requires_grad = false;
    };

    NodeId constant(Tensor<T> value);
    NodeId parameter(ParamId id, const Tensor<T>& value);
    NodeId record(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value, Backward backward);

    const Tensor<T>& value(NodeId id) const { return nodes_.at(index(id)).value; }
    const Node& node(NodeId id) const { return nodes_.at(index(id)); }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool requires_grad(NodeId id) const { return nodes_.at(index(id)).requires_grad; }

    /// Gradients of a scalar node w.r.t. every parameter on its ancestor path.
    GradientMap<T> backward(NodeId loss, T seed = T(1)) const;

    /// General vector-Jacobian product with an explicit output gradient.
    GradientMap<T> backward_with(NodeId output, const Tensor<T>& seed) const;

private:
    std::vector<Node> nodes_;
    std::map<ParamId, NodeId> param_nodes_;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

/// Builds a tape from the given parameters and returns the scalar loss node. Must be
/// deterministic: any randomness (dropout masks) is re-seeded identically on each call.
using TapeFunction = std::function<NodeId(Tape<double>&, const ParamStore<double>&)>;

/// max over parameter elements of |analytic - central difference| / max(1, |central difference|).
GradCheckReport grad_check(const TapeFunction& f, const ParamStore<double>& params, double h = 1e-5);

}  // namespace cfrpn
