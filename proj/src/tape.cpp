#include "cfrpn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <stdexcept>

namespace cfrpn {

const char* op_name(OpKind kind) noexcept {
    switch (kind) {
        case OpKind::constant: return "constant";
        case OpKind::parameter: return "parameter";
        case OpKind::conv2d: return "conv2d";
        case OpKind::maxpool: return "maxpool";
        case OpKind::relu: return "relu";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::lrn: return "lrn";
        case OpKind::dropout: return "dropout";
        case OpKind::concat: return "concat";
        case OpKind::linear: return "linear";
        case OpKind::softmax_xent: return "softmax_xent";
        case OpKind::add: return "add";
        case OpKind::scale: return "scale";
        case OpKind::sum: return "sum";
        case OpKind::gather: return "gather";
        case OpKind::scatter: return "scatter";
    }
    return "unknown";
}

template <typename T>
ParamId ParamStore<T>::add(std::string name, Tensor<T> value, bool decay) {
    if (find(name)) throw std::invalid_argument("parameter '" + name + "' registered twice");
    params_.push_back(Parameter<T>{std::move(name), std::move(value), decay});
    return ParamId{params_.size() - 1};
}

template <typename T>
std::optional<ParamId> ParamStore<T>::find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name == name) return ParamId{i};
    }
    return std::nullopt;
}

template <typename T>
std::size_t ParamStore<T>::element_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

template <typename T>
NodeId Tape<T>::constant(Tensor<T> value) {
    nodes_.push_back(Node{OpKind::constant, {}, std::move(value), {}, std::nullopt, false});
    return NodeId{nodes_.size() - 1};
}

template <typename T>
NodeId Tape<T>::parameter(ParamId id, const Tensor<T>& value) {
    if (auto it = param_nodes_.find(id); it != param_nodes_.end()) return it->second;
    nodes_.push_back(Node{OpKind::parameter, {}, value, {}, id, true});
    const NodeId node{nodes_.size() - 1};
    param_nodes_.emplace(id, node);
    return node;
}

template <typename T>
NodeId Tape<T>::record(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value, Backward backward) {
    bool rg = false;
    for (NodeId in : inputs) {
        if (index(in) >= nodes_.size()) throw std::logic_error("tape: input recorded after its consumer");
        rg = rg || nodes_[index(in)].requires_grad;
    }
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), std::move(backward), std::nullopt, rg});
    return NodeId{nodes_.size() - 1};
}

namespace {

template <typename T>
void accumulate(Tensor<T>& into, Tensor<T>&& g) {
    if (into.empty()) {
        into = std::move(g);
        return;
    }
    if (into.shape() != g.shape()) throw ShapeError("tape: gradient shape mismatch during accumulation");
    auto dst = into.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
GradientMap<T> Tape<T>::backward(NodeId loss, T seed) const {
    if (value(loss).size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + value(loss).shape().str());
    }
    return backward_with(loss, Tensor<T>(value(loss).shape(), seed));
}

template <typename T>
GradientMap<T> Tape<T>::backward_with(NodeId output, const Tensor<T>& seed) const {
    if (seed.shape() != value(output).shape()) throw ShapeError("backward: seed shape mismatch");
    GradientMap<T> result;
    std::vector<Tensor<T>> grads(index(output) + 1);
    grads[index(output)] = seed;
    for (std::size_t i = index(output) + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        if (grads[i].empty() || !node.requires_grad) {
            grads[i] = Tensor<T>();
            continue;
        }
        if (node.param) {
            accumulate(result[*node.param], std::move(grads[i]));
            grads[i] = Tensor<T>();
            continue;
        }
        const std::size_t arity = node.inputs.size();
        auto needs = std::make_unique<bool[]>(arity);
        for (std::size_t j = 0; j < arity; ++j) needs[j] = nodes_[index(node.inputs[j])].requires_grad;
        auto in_grads = node.backward(*this, node.inputs, grads[i], std::span<const bool>(needs.get(), arity));
        grads[i] = Tensor<T>();
        for (std::size_t j = 0; j < arity; ++j) {
            if (!needs[j] || j >= in_grads.size() || in_grads[j].empty()) continue;
            accumulate(grads[index(node.inputs[j])], std::move(in_grads[j]));
        }
    }
    return result;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Tape<float>;
template class Tape<double>;

namespace {

double evaluate(const TapeFunction& f, const ParamStore<double>& params) {
    Tape<double> tape;
    const NodeId loss = f(tape, params);
    if (tape.value(loss).size() != 1) throw ShapeError("grad_check: loss must be scalar");
    return tape.value(loss)[0];
}

}  // namespace

GradCheckReport grad_check(const TapeFunction& f, const ParamStore<double>& params, double h) {
    Tape<double> tape;
    const NodeId loss = f(tape, params);
    const double base = tape.value(loss)[0];
    const double again = evaluate(f, params);
    if (std::memcmp(&base, &again, sizeof(double)) != 0) {
        throw std::runtime_error("grad_check: tape function is not deterministic");
    }
    const GradientMap<double> analytic = tape.backward(loss);

    GradCheckReport report;
    ParamStore<double> probe = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const ParamId id{p};
        auto values = probe[id].value.data();
        const auto it = analytic.find(id);
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = evaluate(f, probe);
            values[i] = saved - h;
            const double down = evaluate(f, probe);
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double exact = it == analytic.end() ? 0.0 : it->second[i];
            const double rel = std::abs(exact - numeric) / std::max(1.0, std::abs(numeric));
            ++report.checked;
            if (rel > report.max_rel_error || !std::isfinite(rel)) {
                report.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
                report.worst_parameter = params[id].name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

}  // namespace cfrpn
