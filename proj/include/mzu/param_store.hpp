#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mzu/tensor.hpp"

namespace mzu {

using Rng = std::mt19937;

// Uniform in [0, 1) from the top 24 bits of one draw; identical on every
// standard library, unlike std::uniform_real_distribution.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 8) * (1.0 / 16777216.0); }

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Named trainable parameters with Adam moment slots. Names are unique and a
/// parameter's shape is fixed once created.
template <typename T>
class ParamStore {
   public:
    struct Entry {
        Tensor<T> value;
        Tensor<T> m;  // first moment
        Tensor<T> v;  // second moment
        std::uint64_t step = 0;
    };

    Tensor<T>& create(const std::string& name, Tensor<T> init);
    Tensor<T>& create_zeros(const std::string& name, Shape shape) { return create(name, Tensor<T>(std::move(shape))); }
    Tensor<T>& create_filled(const std::string& name, Shape shape, T v) { return create(name, Tensor<T>(std::move(shape), v)); }
    // Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Tensor<T>& create_glorot(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng);
    Tensor<T>& create_normal(const std::string& name, Shape shape, double stddev, Rng& rng);

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    const Tensor<T>& get(const std::string& name) const;
    Tensor<T>& get_mut(const std::string& name);
    const Entry& entry(const std::string& name) const;
    Entry& entry_mut(const std::string& name);

    // Replaces the value; the shape must match the existing one.
    void assign(const std::string& name, const Tensor<T>& value);

    std::vector<std::string> names() const;
    std::size_t size() const { return entries_.size(); }
    std::size_t num_scalars() const;
    const std::map<std::string, Entry>& entries() const { return entries_; }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, e] : entries_) {
            auto& dst = out.entry_mut_or_insert(name);
            dst.value = e.value.template cast<U>();
            dst.m = e.m.template cast<U>();
            dst.v = e.v.template cast<U>();
            dst.step = e.step;
        }
        return out;
    }

    Entry& entry_mut_or_insert(const std::string& name) { return entries_[name]; }

    GradMap<T> zero_grads() const;

   private:
    std::map<std::string, Entry> entries_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace mzu
