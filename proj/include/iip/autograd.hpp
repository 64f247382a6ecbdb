#pragma once

#include "iip/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace iip {

class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; valid while the
/// tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
};

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order of the computation graph, so backward() is a single
/// reverse sweep that visits every node at most once.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value);
    Var constant(Tensor value);
    Var record(Tensor value, std::span<const Var> parents, BackwardFn backward);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    /// Gradient of node `id`; an all-zero tensor when nothing flowed into it.
    const Tensor& grad(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Gradient buffer for accumulation, allocated on first use.
    Tensor& grad_buffer(std::size_t id);

    /// Seeds d(root)/d(root) = 1 (root must be a scalar) and sweeps.
    void backward(Var root);
    /// Seeds the root gradient explicitly.
    void backward(Var root, const Tensor& seed);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Cost instrumentation. Forward kernels add their multiply-accumulate count
// to the active counter; softmax and normalization kernels add an auxiliary
// count of kElementwiseFlops per element they normalize.

inline constexpr std::uint64_t kElementwiseFlops = 5;

struct CostCounter {
    std::uint64_t madds = 0;
    std::uint64_t aux_flops = 0;
};

/// Installs a thread-local counter for the duration of the scope.
class ScopedCostCounter {
public:
    explicit ScopedCostCounter(CostCounter& counter);
    ~ScopedCostCounter();
    ScopedCostCounter(const ScopedCostCounter&) = delete;
    ScopedCostCounter& operator=(const ScopedCostCounter&) = delete;

private:
    CostCounter* previous_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All inputs are checked for finiteness.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var relu(Var x);
Var sum(Var x);
Var mean(Var x);
/// x[r, :] + v for every row r.
Var add_rowvec(Var x, Var v);
/// x · w + b over the trailing dimension of x.
Var linear(Var x, Var w, Var b);
/// Same as linear without a bias term.
Var linear(Var x, Var w);
Var softmax_lastdim(Var x);
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);

struct BatchNormStats {
    Tensor& running_mean;
    Tensor& running_var;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Normalizes each column (channel) over all rows. In training mode the
/// batch statistics are used and the running statistics are updated; in eval
/// mode the running statistics are used.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats stats, bool training);

/// Mean softmax cross-entropy over the rows of `logits` (a 1-D tensor is one
/// row).
Var cross_entropy(Var logits, std::span<const std::size_t> labels);
Var cross_entropy(Var logits, std::size_t label);

/// Row r of the output is row index[r] of x (rank-2 view), or zeros when
/// index[r] < 0.
Var gather_rows(Var x, std::span<const std::ptrdiff_t> index);
Var concat_rows(std::span<const Var> parts);
Var reshape(Var x, Shape shape);
/// Mean of each consecutive block of `group` rows.
Var group_mean_rows(Var x, std::size_t group);

/// Multi-head scaled dot-product attention over independent groups.
///
/// q holds groups of `q_per_group` rows, k and v groups of `k_per_group`
/// rows; group g of q attends only to group g of k/v. Columns are split into
/// `heads` contiguous slices of width d = C / heads and scores are scaled by
/// 1/sqrt(d). When `maps` is non-null the probabilities are appended to it as
/// one [heads*q_per_group x k_per_group] tensor per group.
///
/// With `key_order_invariant` the forward sums over keys are taken in sorted
/// order, so reordering the keys of a group permutes nothing in the output
/// bits. Slower; meant for few queries over many keys.
Var grouped_attention(Var q, Var k, Var v, std::size_t q_per_group,
                      std::size_t k_per_group, std::size_t heads,
                      std::vector<Tensor>* maps = nullptr, bool key_order_invariant = false);

}  // namespace iip
