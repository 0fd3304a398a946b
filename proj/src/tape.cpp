#include "mzu/tape.hpp"

#include <stdexcept>

namespace mzu {

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::param(const ParamStore<T>& store, const std::string& name) {
    const auto key = std::make_pair(&store, name);
    if (auto it = param_ids_.find(key); it != param_ids_.end()) return {this, it->second};
    Node n;
    n.external = &store.get(name);
    n.param_name = name;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    param_ids_.emplace(key, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn<T> backward) {
    Node n;
    n.owned = std::move(value);
    if (recording_) {
        for (std::size_t id : inputs) {
            if (id >= nodes_.size()) throw std::logic_error("tape input refers to a later record");
            n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
        }
        if (n.requires_grad) {
            n.inputs = std::move(inputs);
            n.backward = std::move(backward);
        }
    }
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
}

template <typename T>
void Tape<T>::sweep(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("loss is not recorded on this tape");
    const Tensor<T>& lv = value(loss.id);
    if (lv.size() != 1) throw ShapeError("reverse_sweep", {lv.shape()}, "loss must be a scalar");

    grads_.assign(nodes_.size(), Tensor<T>());
    grads_[loss.id] = Tensor<T>(lv.shape(), T(1));

    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || grads_[i].empty()) continue;
        BackwardArgs<T> args{value(i), grads_[i], {}, {}};
        args.in.reserve(n.inputs.size());
        args.in_grad.reserve(n.inputs.size());
        for (std::size_t id : n.inputs) {
            args.in.push_back(&value(id));
            if (nodes_[id].requires_grad) {
                if (grads_[id].empty()) grads_[id] = Tensor<T>(value(id).shape());
                args.in_grad.push_back(&grads_[id]);
            } else {
                args.in_grad.push_back(nullptr);
            }
        }
        n.backward(args);
    }
}

template <typename T>
GradMap<T> Tape<T>::gradients(Var<T> loss, const ParamStore<T>& store) {
    sweep(loss);
    GradMap<T> out = store.zero_grads();
    for (const auto& [key, id] : param_ids_) {
        if (key.first != &store) continue;
        auto it = out.find(key.second);
        if (it == out.end() || grads_[id].empty()) continue;
        it->second = grads_[id];
    }
    return out;
}

template <typename T>
GradMap<T> Tape<T>::gradients(Var<T> loss) {
    sweep(loss);
    GradMap<T> out;
    for (const auto& [key, id] : param_ids_) {
        out.emplace(key.second, grads_[id].empty() ? Tensor<T>(value(id).shape()) : grads_[id]);
    }
    return out;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace mzu
