#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <map>
#include <utility>
#include <vector>

#include "mzu/param_store.hpp"
#include "mzu/tensor.hpp"

namespace mzu {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    bool valid() const { return tape != nullptr; }
    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
};

// View handed to a primitive's derivative rule during the reverse sweep.
// in_grad(k) is null when input k does not need a gradient.
template <typename T>
struct BackwardArgs {
    const Tensor<T>& out;
    const Tensor<T>& grad;
    std::vector<const Tensor<T>*> in;
    std::vector<Tensor<T>*> in_grad;
};

template <typename T>
using BackwardFn = std::function<void(BackwardArgs<T>&)>;

/// Append-only record of primitive applications. Records are pushed in
/// evaluation order, so every record's inputs precede it and one reverse
/// pass over the vector is a valid topological sweep.
template <typename T>
class Tape {
   public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // When recording is off, values are still computed but no derivative
    // rules are kept (evaluation mode).
    void set_recording(bool on) { recording_ = on; }
    bool recording() const { return recording_; }

    Var<T> constant(Tensor<T> value);
    // Leaf bound to a stored parameter. The same (store, name) always maps to
    // the same leaf on one tape so fan-out gradients accumulate.
    Var<T> param(const ParamStore<T>& store, const std::string& name);

    Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn<T> backward);

    const Tensor<T>& value(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Reverse sweep from a scalar loss. The result has an entry for every
    // parameter of `store`; parameters the loss does not reach map to zeros.
    GradMap<T> gradients(Var<T> loss, const ParamStore<T>& store);
    // Same sweep, restricted to parameters bound on this tape.
    GradMap<T> gradients(Var<T> loss);

    // Gradient of the last sweep with respect to an arbitrary recorded value
    // (empty tensor if the sweep never reached it).
    const Tensor<T>& grad_of(Var<T> v) const { return grads_.at(v.id); }

   private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        std::vector<std::size_t> inputs;
        BackwardFn<T> backward;
        std::string param_name;
        bool requires_grad = false;
    };

    void sweep(Var<T> loss);

    std::deque<Node> nodes_;  // stable references for Var::value()
    std::vector<Tensor<T>> grads_;
    std::map<std::pair<const ParamStore<T>*, std::string>, std::size_t> param_ids_;
    bool recording_ = true;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(id);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace mzu
