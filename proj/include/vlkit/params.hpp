#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vlkit/random.hpp"
#include "vlkit/tensor.hpp"

namespace vlkit {

/// Freezable unit of a model. One-tower models use `encoder` for their shared stack.
enum class ModuleGroup { text_embedding, text_encoder, vision_embedding, vision_encoder, encoder, cross_modal, head };

inline std::string_view group_name(ModuleGroup g) {
    switch (g) {
    case ModuleGroup::text_embedding: return "text_embedding";
    case ModuleGroup::text_encoder: return "text_encoder";
    case ModuleGroup::vision_embedding: return "vision_embedding";
    case ModuleGroup::vision_encoder: return "vision_encoder";
    case ModuleGroup::encoder: return "encoder";
    case ModuleGroup::cross_modal: return "cross_modal";
    case ModuleGroup::head: return "head";
    }
    return "?";
}

inline constexpr ModuleGroup kAllGroups[] = {ModuleGroup::text_embedding, ModuleGroup::text_encoder,
                                             ModuleGroup::vision_embedding, ModuleGroup::vision_encoder,
                                             ModuleGroup::encoder, ModuleGroup::cross_modal, ModuleGroup::head};

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    ModuleGroup group;
    bool decay;  // false for biases and layer-norm parameters

    bool trainable() const { return value.requires_grad(); }
};

/// Name-addressed parameter registry. Names are unique and hierarchical
/// (dot-separated); insertion order is the canonical order.
template <typename T>
class ParameterStore {
public:
    Tensor<T> add(std::string name, Tensor<T> value, ModuleGroup group, bool decay) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter name '" + name + "'");
        value.set_requires_grad(true);
        index_.emplace(name, entries_.size());
        entries_.push_back({std::move(name), value, group, decay});
        return value;
    }

    const Parameter<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries_[it->second];
    }

    std::vector<Parameter<T>>& entries() { return entries_; }
    const std::vector<Parameter<T>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::size_t total_count() const {
        std::size_t n = 0;
        for (const auto& p : entries_) n += p.value.numel();
        return n;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& p : entries_) n += p.trainable() ? p.value.numel() : 0;
        return n;
    }

    void zero_grad() {
        for (auto& p : entries_) p.value.zero_grad();
    }

private:
    std::vector<Parameter<T>> entries_;
    std::map<std::string, std::size_t> index_;
};

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Registers parameters under a name prefix and module group. Initial values
/// are drawn from a stream keyed by (seed, parameter name), so a parameter's
/// initialization does not depend on which other parameters exist.
template <typename T>
class ParamBuilder {
public:
    ParamBuilder(ParameterStore<T>& store, std::uint64_t seed, std::string prefix, ModuleGroup group)
        : store_(&store), seed_(seed), prefix_(std::move(prefix)), group_(group) {}

    ParamBuilder sub(std::string_view name) const {
        return ParamBuilder(*store_, seed_, qualified(name), group_);
    }

    ParamBuilder in_group(ModuleGroup group) const { return ParamBuilder(*store_, seed_, prefix_, group); }

    Tensor<T> normal(std::string_view name, Shape shape, double stddev = 0.02) const {
        auto full = qualified(name);
        KeyedStream stream(seed_, fnv1a(full));
        std::vector<T> values(shape_numel(shape));
        for (auto& v : values) v = static_cast<T>(static_cast<float>(stddev * stream.normal()));
        return store_->add(std::move(full), Tensor<T>(std::move(shape), std::move(values)), group_, true);
    }

    Tensor<T> constant(std::string_view name, Shape shape, T value, bool decay = false) const {
        return store_->add(qualified(name), Tensor<T>(std::move(shape), value), group_, decay);
    }

    Tensor<T> zeros(std::string_view name, Shape shape) const { return constant(name, std::move(shape), T{0}); }
    Tensor<T> ones(std::string_view name, Shape shape) const { return constant(name, std::move(shape), T{1}); }

    const std::string& prefix() const { return prefix_; }
    ModuleGroup group() const { return group_; }

private:
    std::string qualified(std::string_view name) const {
        return prefix_.empty() ? std::string(name) : prefix_ + "." + std::string(name);
    }

    ParameterStore<T>* store_;
    std::uint64_t seed_;
    std::string prefix_;
    ModuleGroup group_;
};

} // namespace vlkit
