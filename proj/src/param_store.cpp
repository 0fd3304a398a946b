#include "mzu/param_store.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mzu {

template <typename T>
Tensor<T>& ParamStore<T>::create(const std::string& name, Tensor<T> init) {
    if (entries_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Entry e;
    e.m = Tensor<T>(init.shape());
    e.v = Tensor<T>(init.shape());
    e.value = std::move(init);
    return entries_.emplace(name, std::move(e)).first->second.value;
}

template <typename T>
Tensor<T>& ParamStore<T>::create_glorot(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor<T> w({fan_in, fan_out});
    for (auto& x : w.values()) x = static_cast<T>((2.0 * uniform01(rng) - 1.0) * a);
    return create(name, std::move(w));
}

template <typename T>
Tensor<T>& ParamStore<T>::create_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    Tensor<T> w(std::move(shape));
    // Box-Muller on our own uniforms keeps initialization portable.
    auto vals = w.values();
    for (std::size_t i = 0; i < vals.size(); i += 2) {
        const double u1 = 1.0 - uniform01(rng);
        const double u2 = uniform01(rng);
        const double r = std::sqrt(-2.0 * std::log(u1));
        vals[i] = static_cast<T>(stddev * r * std::cos(2.0 * std::numbers::pi * u2));
        if (i + 1 < vals.size()) vals[i + 1] = static_cast<T>(stddev * r * std::sin(2.0 * std::numbers::pi * u2));
    }
    return create(name, std::move(w));
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
    return entry(name).value;
}

template <typename T>
Tensor<T>& ParamStore<T>::get_mut(const std::string& name) {
    return entry_mut(name).value;
}

template <typename T>
const typename ParamStore<T>::Entry& ParamStore<T>::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

template <typename T>
typename ParamStore<T>::Entry& ParamStore<T>::entry_mut(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

template <typename T>
void ParamStore<T>::assign(const std::string& name, const Tensor<T>& value) {
    auto& e = entry_mut(name);
    if (e.value.shape() != value.shape()) {
        throw ShapeError("assign", {e.value.shape(), value.shape()}, "parameter " + name + " shape is immutable");
    }
    e.value = value;
}

template <typename T>
std::vector<std::string> ParamStore<T>::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& kv : entries_) out.push_back(kv.first);
    return out;
}

template <typename T>
std::size_t ParamStore<T>::num_scalars() const {
    std::size_t n = 0;
    for (const auto& kv : entries_) n += kv.second.value.size();
    return n;
}

template <typename T>
GradMap<T> ParamStore<T>::zero_grads() const {
    GradMap<T> out;
    for (const auto& [name, e] : entries_) out.emplace(name, Tensor<T>(e.value.shape()));
    return out;
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace mzu
