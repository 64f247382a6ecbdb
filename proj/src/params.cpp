#include "iip/params.hpp"

#include <cmath>
#include <stdexcept>

namespace iip {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

Rng derive_stream(std::uint64_t seed, std::uint64_t index) { return Rng(splitmix64(seed ^ splitmix64(index))); }

std::size_t ParamSet::add(std::string name, Tensor value, ParamKind kind) {
    if (find(name)) throw std::logic_error("duplicate parameter name " + name);
    Tensor grad(value.shape());
    items_.push_back(Parameter{std::move(name), std::move(value), std::move(grad), kind});
    return items_.size() - 1;
}

std::optional<std::size_t> ParamSet::find(const std::string& name) const {
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].name == name) return i;
    }
    return std::nullopt;
}

std::size_t ParamSet::trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) {
        if (p.trainable()) n += p.value.size();
    }
    return n;
}

void ParamSet::zero_grad() {
    for (auto& p : items_) p.grad.fill(0.0);
}

Bound::Bound(Tape& tape, ParamSet& params) : tape_(tape), params_(params) {
    leaves_.reserve(params.size());
    for (auto& p : params) {
        leaves_.push_back(p.trainable() ? tape.leaf(p.value) : Var{});
    }
}

Var Bound::operator[](std::size_t i) const {
    const Var v = leaves_.at(i);
    if (!v.tape) throw std::logic_error("parameter " + params_[i].name + " is a buffer, not a leaf");
    return v;
}

void Bound::bind(std::size_t i, Var v) {
    if (v.value().shape() != params_[i].value.shape()) {
        throw ShapeError("bind: " + params_[i].name + " has shape " + shape_str(params_[i].value.shape()) +
                         ", got " + shape_str(v.shape()));
    }
    leaves_.at(i) = v;
}

void Bound::accumulate_grads() {
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
        if (!leaves_[i].tape) continue;
        const Tensor& g = tape_.grad(leaves_[i].id);
        Tensor& dst = params_[i].grad;
        for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
    }
}

Affine add_affine(ParamSet& set, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias) {
    std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(static_cast<double>(in)),
                                                1.0 / std::sqrt(static_cast<double>(in)));
    Tensor w({in, out});
    for (double& v : w.values()) v = dist(rng);
    Affine a;
    a.in = in;
    a.out = out;
    a.has_bias = bias;
    a.weight = set.add(name + ".weight", std::move(w));
    if (bias) a.bias = set.add(name + ".bias", Tensor({out}));
    return a;
}

Var apply(Bound& bound, const Affine& layer, Var x) {
    return layer.has_bias ? linear(x, bound[layer.weight], bound[layer.bias]) : linear(x, bound[layer.weight]);
}

Norm add_layernorm(ParamSet& set, const std::string& name, std::size_t width) {
    Norm n;
    n.gamma = set.add(name + ".gamma", Tensor({width}, 1.0));
    n.beta = set.add(name + ".beta", Tensor({width}));
    return n;
}

Var apply(Bound& bound, const Norm& norm, Var x) { return layernorm(x, bound[norm.gamma], bound[norm.beta]); }

BatchNorm add_batchnorm(ParamSet& set, const std::string& name, std::size_t width) {
    BatchNorm n;
    n.gamma = set.add(name + ".gamma", Tensor({width}, 1.0));
    n.beta = set.add(name + ".beta", Tensor({width}));
    n.running_mean = set.add(name + ".running_mean", Tensor({width}), ParamKind::buffer);
    n.running_var = set.add(name + ".running_var", Tensor({width}, 1.0), ParamKind::buffer);
    return n;
}

Var apply(Bound& bound, const BatchNorm& norm, Var x, bool training) {
    return batchnorm(x, bound[norm.gamma], bound[norm.beta],
                     BatchNormStats{bound.buffer(norm.running_mean), bound.buffer(norm.running_var)}, training);
}

}  // namespace iip
