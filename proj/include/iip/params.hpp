#pragma once

#include "iip/autograd.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace iip {

using Rng = std::mt19937_64;

/// Independent stream for item `index` of a run seeded with `seed`.
Rng derive_stream(std::uint64_t seed, std::uint64_t index);

enum class ParamKind {
    weight,    // trained, weight decay applies
    no_decay,  // trained, excluded from weight decay (class token, positional embeddings)
    buffer,    // not trained (batchnorm running statistics)
};

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    ParamKind kind = ParamKind::weight;

    bool trainable() const { return kind != ParamKind::buffer; }
};

/// Ordered, named collection of model tensors. Indices returned by add() are
/// stable for the lifetime of the set.
class ParamSet {
public:
    std::size_t add(std::string name, Tensor value, ParamKind kind = ParamKind::weight);

    Parameter& operator[](std::size_t i) { return items_[i]; }
    const Parameter& operator[](std::size_t i) const { return items_[i]; }
    std::size_t size() const { return items_.size(); }
    std::optional<std::size_t> find(const std::string& name) const;

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    /// Number of trainable scalars.
    std::size_t trainable_count() const;
    void zero_grad();

private:
    std::vector<Parameter> items_;
};

/// Leaves for every trainable parameter of a set, recorded on one tape.
class Bound {
public:
    Bound(Tape& tape, ParamSet& params);

    Var operator[](std::size_t i) const;
    /// Substitutes `v` for the leaf of parameter i (used to differentiate
    /// with respect to externally owned values).
    void bind(std::size_t i, Var v);
    Tensor& buffer(std::size_t i) { return params_[i].value; }
    Tape& tape() { return tape_; }
    ParamSet& params() { return params_; }

    /// Adds the tape gradients of all leaves into Parameter::grad.
    void accumulate_grads();

private:
    Tape& tape_;
    ParamSet& params_;
    std::vector<Var> leaves_;
};

struct Affine {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::size_t in = 0;
    std::size_t out = 0;
    bool has_bias = true;
};

/// Weights ~ U(-1/sqrt(in), 1/sqrt(in)), bias zero.
Affine add_affine(ParamSet& set, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                  bool bias = true);
Var apply(Bound& bound, const Affine& layer, Var x);

struct Norm {
    std::size_t gamma = 0;
    std::size_t beta = 0;
};

Norm add_layernorm(ParamSet& set, const std::string& name, std::size_t width);
Var apply(Bound& bound, const Norm& norm, Var x);

struct BatchNorm {
    std::size_t gamma = 0;
    std::size_t beta = 0;
    std::size_t running_mean = 0;
    std::size_t running_var = 0;
};

BatchNorm add_batchnorm(ParamSet& set, const std::string& name, std::size_t width);
Var apply(Bound& bound, const BatchNorm& norm, Var x, bool training);

}  // namespace iip
