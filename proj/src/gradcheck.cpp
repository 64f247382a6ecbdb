#include "iip/gradcheck.hpp"

#include "iip/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace iip {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = dist(rng);
    return t;
}

/// Scalar objective: sum(out * weights) with weights fixed per output shape.
Var contract(Tape& tape, Var out, const Tensor& weights) {
    if (out.value().size() == 1) return sum(out);
    return sum(mul(out, tape.constant(weights)));
}

double evaluate(const GradFn& fn, const std::vector<Tensor>& inputs, Tensor& weights, std::uint64_t seed) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    Var out = fn(tape, leaves);
    if (weights.shape() != out.shape()) {
        Rng rng = derive_stream(seed, 0xc0ffee);
        weights = random_tensor(out.shape(), rng);
    }
    return contract(tape, out, weights).value().item();
}

}  // namespace

GradcheckResult gradcheck(const std::string& name, const GradFn& fn, const std::vector<Tensor>& inputs, double eps,
                          std::size_t max_entries, std::uint64_t seed) {
    Tensor weights;
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> leaves;
        for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
        Var out = fn(tape, leaves);
        Rng rng = derive_stream(seed, 0xc0ffee);
        weights = random_tensor(out.shape(), rng);
        tape.backward(contract(tape, out, weights));
        for (Var l : leaves) analytic.push_back(l.grad());
    }

    GradcheckResult result{name, 0.0, 0};
    Rng pick = derive_stream(seed, 0xbeef);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::vector<std::size_t> coords(inputs[i].size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (max_entries && coords.size() > max_entries) {
            std::shuffle(coords.begin(), coords.end(), pick);
            coords.resize(max_entries);
        }
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        std::vector<Tensor> probe = inputs;
        for (std::size_t j : coords) {
            const double orig = probe[i][j];
            probe[i][j] = orig + eps;
            const double plus = evaluate(fn, probe, weights, seed);
            probe[i][j] = orig - eps;
            const double minus = evaluate(fn, probe, weights, seed);
            probe[i][j] = orig;
            const double numeric = (plus - minus) / (2.0 * eps);
            const double a = analytic[i][j];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        const double denom = std::max(std::sqrt(a2) + std::sqrt(n2), 1e-12);
        result.max_rel_error = std::max(result.max_rel_error, std::sqrt(diff2) / denom);
        result.checked += coords.size();
    }
    return result;
}

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed) {
    Rng rng = derive_stream(seed, 1);
    std::vector<GradcheckResult> out;
    auto check = [&](const std::string& name, const GradFn& fn, const std::vector<Tensor>& inputs,
                     std::size_t max_entries = 0) {
        out.push_back(gradcheck(name, fn, inputs, 1e-5, max_entries, seed));
    };

    check("matmul", [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); },
          {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
    check("softmax_lastdim", [](Tape&, const std::vector<Var>& v) { return softmax_lastdim(v[0]); },
          {random_tensor({5}, rng, -2.0, 2.0)});
    check("linear", [](Tape&, const std::vector<Var>& v) { return linear(v[0], v[1], v[2]); },
          {random_tensor({2, 3}, rng), random_tensor({3, 4}, rng), random_tensor({4}, rng)});
    check("relu", [](Tape&, const std::vector<Var>& v) { return relu(v[0]); },
          {random_tensor({4, 3}, rng, 0.1, 1.0)});
    check("add_mul_scale", [](Tape&, const std::vector<Var>& v) { return scale(mul(add(v[0], v[1]), v[1]), 0.7); },
          {random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)});
    check("mean", [](Tape&, const std::vector<Var>& v) { return mean(mul(v[0], v[0])); },
          {random_tensor({2, 5}, rng)});
    check("layernorm", [](Tape&, const std::vector<Var>& v) { return layernorm(v[0], v[1], v[2]); },
          {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
    check("batchnorm",
          [](Tape&, const std::vector<Var>& v) {
              Tensor mean({4}), var({4}, 1.0);
              return batchnorm(v[0], v[1], v[2], BatchNormStats{mean, var}, true);
          },
          {random_tensor({6, 4}, rng), random_tensor({4}, rng), random_tensor({4}, rng)});
    check("cross_entropy",
          [](Tape&, const std::vector<Var>& v) {
              const std::size_t labels[] = {2, 0};
              return cross_entropy(v[0], labels);
          },
          {random_tensor({2, 4}, rng, -2.0, 2.0)});
    check("gather_concat_mean",
          [](Tape&, const std::vector<Var>& v) {
              const std::ptrdiff_t idx[] = {2, -1, 0, 2, 1, 3};
              const Var parts[] = {gather_rows(v[0], idx), v[1]};
              return group_mean_rows(concat_rows(parts), 2);
          },
          {random_tensor({4, 3}, rng), random_tensor({2, 3}, rng)});
    check("attention",
          [](Tape&, const std::vector<Var>& v) { return grouped_attention(v[0], v[1], v[2], 3, 4, 2); },
          {random_tensor({3, 8}, rng), random_tensor({4, 8}, rng), random_tensor({4, 8}, rng)});
    check("grouped_attention",
          [](Tape&, const std::vector<Var>& v) { return grouped_attention(v[0], v[1], v[2], 2, 3, 2); },
          {random_tensor({6, 4}, rng), random_tensor({9, 4}, rng), random_tensor({9, 4}, rng)});

    // Partition encoder, attention variants and the model reuse model
    // parameters; differentiate with respect to a few of them plus the input.
    ModelConfig small;
    small.layers = 1;
    small.embed_channels = 16;
    small.joint_channels = 8;
    small.heads = 2;
    small.frames = 4;
    small.num_classes = 4;
    ModelParams mp = init_params(small, seed);
    // Move weights off their zero initialization so every branch is active.
    for (Parameter& p : mp.set) {
        if (p.trainable() && p.name.ends_with(".bias")) p.value = random_tensor(p.value.shape(), rng, -0.1, 0.1);
    }
    const PartitionMap map = small.partition_map();
    const TokenGrid grid1 = small.grid(1);
    const std::size_t joint_rows = small.frames * kNtuJoints;

    auto bind_and = [&mp](const std::vector<std::string>& names, auto body) {
        return [&mp, names, body](Tape& tape, const std::vector<Var>& v) {
            Bound bound(tape, mp.set);
            for (std::size_t i = 0; i < names.size(); ++i) bound.bind(*mp.set.find(names[i]), v[i + 1]);
            return body(bound, v[0]);
        };
    };
    auto param = [&mp](const std::string& name) { return mp.set[*mp.set.find(name)].value; };

    check("extract_joint_features",
          bind_and({"encoder.lift1.weight", "encoder.bn2.gamma"},
                   [&](Bound& b, Var x) { return extract_joint_features(b, mp.encoder, x, true); }),
          {random_tensor({2 * 4, 3}, rng), param("encoder.lift1.weight"), param("encoder.bn2.gamma")});
    check("embed_parts",
          bind_and({"encoder.embed.weight"}, [&](Bound& b, Var x) { return embed_parts(b, mp.encoder, x); }),
          {random_tensor({4, mp.encoder.embed.in}, rng), param("encoder.embed.weight")}, 64);
    check("partition_encode",
          bind_and({"encoder.lift2.weight"},
                   [&](Bound& b, Var x) { return partition_encode(b, mp.encoder, map, x, grid1, true); }),
          {random_tensor({joint_rows, 3}, rng), param("encoder.lift2.weight")}, 48);

    const std::size_t c = small.embed_channels;
    const LayerParams& layer = mp.layers.front();
    const TokenGrid small_grid{1, 2, 1, 3};
    check("mhsa", [](Tape&, const std::vector<Var>& v) { return mhsa(v[0], v[1], v[2], 2); },
          {random_tensor({3, 8}, rng), random_tensor({4, 8}, rng), random_tensor({4, 8}, rng)});
    check("iipa",
          bind_and({"layer0.s_attn.intra.weight"},
                   [&](Bound& b, Var x) { return iipa(b, x, x, x, layer.spatial, nullptr); }),
          {random_tensor({5, c}, rng), param("layer0.s_attn.intra.weight")}, 64);
    check("s_iipa",
          bind_and({"layer0.s_attn.q.weight"},
                   [&](Bound& b, Var x) { return s_iipa(b, x, layer.spatial, small_grid); }),
          {random_tensor({7, c}, rng), param("layer0.s_attn.q.weight")}, 64);
    check("t_iipa",
          bind_and({"layer0.t_attn.k.weight"},
                   [&](Bound& b, Var x) { return t_iipa(b, x, layer.temporal, small_grid); }),
          {random_tensor({7, c}, rng), param("layer0.t_attn.k.weight")}, 64);
    check("flat_attention",
          bind_and({"layer0.s_attn.v.weight"},
                   [&](Bound& b, Var x) { return flat_attention(b, x, layer.spatial, small_grid); }),
          {random_tensor({7, c}, rng), param("layer0.s_attn.v.weight")}, 64);

    const std::vector<std::string> model_params = {"encoder.embed.weight", "cls_token", "pos_temporal",
                                                   "layer0.s_attn.intra.weight", "layer0.t_attn.out.weight",
                                                   "layer0.ffn1.weight", "head.weight"};
    std::vector<Tensor> inputs{random_tensor({2 * joint_rows, 3}, rng)};
    for (const auto& n : model_params) inputs.push_back(param(n));
    check("model",
          bind_and(model_params,
                   [&](Bound& b, Var x) {
                       ForwardOptions opts;
                       opts.training = true;
                       Var logits = forward_rows(b, mp, x, 2, opts);
                       const std::size_t labels[] = {1, 3};
                       return cross_entropy(logits, labels);
                   }),
          inputs, 24);
    return out;
}

}  // namespace iip
