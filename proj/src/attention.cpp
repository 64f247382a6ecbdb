#include "iip/attention.hpp"

#include <functional>

namespace iip {

AttentionParams add_attention(ParamSet& set, const std::string& name, std::size_t width, std::size_t heads,
                              AttentionMode mode, Rng& rng) {
    if (heads == 0 || width % heads != 0) {
        throw std::invalid_argument(std::to_string(heads) + " heads do not divide width " + std::to_string(width));
    }
    AttentionParams p;
    p.heads = heads;
    p.mode = mode;
    p.q = add_affine(set, name + ".q", width, width, rng);
    p.k = add_affine(set, name + ".k", width, width, rng);
    p.v = add_affine(set, name + ".v", width, width, rng);
    p.out = add_affine(set, name + ".out", width, width, rng);
    if (mode == AttentionMode::iipa) p.intra = add_affine(set, name + ".intra", width, width, rng);
    return p;
}

Var mhsa(Var q, Var k, Var v, std::size_t heads, AttentionTrace* trace) {
    return grouped_attention(q, k, v, q.value().rows(), k.value().rows(), heads, trace ? &trace->maps : nullptr);
}

Var iipa(Bound& bound, Var q, Var k, Var v, const AttentionParams& params, AttentionTrace* trace) {
    Var inter = apply(bound, params.out, mhsa(q, k, v, params.heads, trace));
    if (!params.has_intra()) return inter;
    if (v.value().rows() != q.value().rows()) {
        throw ShapeError("iipa: intra branch needs as many value rows as queries, got q=" + shape_str(q.shape()) +
                         " v=" + shape_str(v.shape()));
    }
    return add(inter, apply(bound, params.intra, v));
}

namespace {

std::size_t sample_rows(const TokenGrid& grid) { return grid.tokens_per_sample() + 1; }

void check_layout(Var x, const TokenGrid& grid, const char* op) {
    const Tensor& xv = x.value();
    const std::size_t expected = grid.batch * sample_rows(grid);
    if (xv.rank() != 2 || xv.rows() != expected) {
        throw ShapeError(std::string(op) + ": expected " + std::to_string(expected) + " rows (" +
                         std::to_string(grid.batch) + " samples of P*F+1 tokens), got " + shape_str(xv.shape()));
    }
}

/// Adds f_intra(V) on part-token rows; class rows are left as they are.
Var add_intra(Bound& bound, Var out, Var values, const AttentionParams& params, const TokenGrid& grid) {
    if (!params.has_intra()) return out;
    const std::size_t n = sample_rows(grid);
    const std::size_t t = grid.tokens_per_sample();
    std::vector<std::ptrdiff_t> token_rows;
    token_rows.reserve(grid.batch * t);
    std::vector<std::ptrdiff_t> expand(grid.batch * n, -1);
    for (std::size_t b = 0; b < grid.batch; ++b)
        for (std::size_t i = 0; i < t; ++i) {
            expand[b * n + 1 + i] = static_cast<std::ptrdiff_t>(token_rows.size());
            token_rows.push_back(static_cast<std::ptrdiff_t>(b * n + 1 + i));
        }
    Var intra = apply(bound, params.intra, gather_rows(values, token_rows));
    return add(out, gather_rows(intra, expand));
}

/// Shared kernel of S-IIPA and T-IIPA. The part tokens of a sample form an
/// outer x inner grid; row_of(o, i) gives the in-sample token index (0-based,
/// class token excluded). Each outer block attends over its inner tokens plus
/// the class key/value.
Var split_attention(Bound& bound, Var x, const AttentionParams& params, const TokenGrid& grid, std::size_t outer,
                    std::size_t inner, const std::function<std::size_t(std::size_t, std::size_t)>& row_of,
                    AttentionTrace* trace) {
    const std::size_t n = sample_rows(grid);
    const std::size_t batch = grid.batch;
    Var q = apply(bound, params.q, x);
    Var k = apply(bound, params.k, x);
    Var v = apply(bound, params.v, x);

    // Class branch: one query per sample over all n keys of that sample.
    std::vector<std::ptrdiff_t> cls_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = static_cast<std::ptrdiff_t>(b * n);
    Var cls_out = grouped_attention(gather_rows(q, cls_rows), k, v, 1, n, params.heads, trace ? &trace->maps : nullptr,
                                    true);

    // Token branch: block (b, o) queries its inner tokens, keys [cls; inner].
    std::vector<std::ptrdiff_t> q_rows, kv_rows;
    q_rows.reserve(batch * outer * inner);
    kv_rows.reserve(batch * outer * (inner + 1));
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < outer; ++o) {
            kv_rows.push_back(static_cast<std::ptrdiff_t>(b * n));
            for (std::size_t i = 0; i < inner; ++i) {
                const auto row = static_cast<std::ptrdiff_t>(b * n + 1 + row_of(o, i));
                q_rows.push_back(row);
                kv_rows.push_back(row);
            }
        }
    Var tok_out = grouped_attention(gather_rows(q, q_rows), gather_rows(k, kv_rows), gather_rows(v, kv_rows), inner,
                                    inner + 1, params.heads, trace ? &trace->maps : nullptr);

    // Back to sample layout: [cls_out; tok_out] -> rows (b, class, tokens...).
    const Var pieces[] = {cls_out, tok_out};
    std::vector<std::ptrdiff_t> layout(batch * n);
    for (std::size_t b = 0; b < batch; ++b) {
        layout[b * n] = static_cast<std::ptrdiff_t>(b);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i)
                layout[b * n + 1 + row_of(o, i)] = static_cast<std::ptrdiff_t>(batch + (b * outer + o) * inner + i);
    }
    Var merged = gather_rows(concat_rows(pieces), layout);
    return add_intra(bound, apply(bound, params.out, merged), v, params, grid);
}

}  // namespace

Var s_iipa(Bound& bound, Var x, const AttentionParams& params, const TokenGrid& grid, AttentionTrace* trace) {
    check_layout(x, grid, "s_iipa");
    const std::size_t q = grid.tokens_per_frame();
    return split_attention(bound, x, params, grid, grid.frames, q,
                           [q](std::size_t f, std::size_t p) { return f * q + p; }, trace);
}

Var t_iipa(Bound& bound, Var x, const AttentionParams& params, const TokenGrid& grid, AttentionTrace* trace) {
    check_layout(x, grid, "t_iipa");
    const std::size_t q = grid.tokens_per_frame();
    return split_attention(bound, x, params, grid, q, grid.frames,
                           [q](std::size_t p, std::size_t f) { return f * q + p; }, trace);
}

Var flat_attention(Bound& bound, Var x, const AttentionParams& params, const TokenGrid& grid, AttentionTrace* trace) {
    check_layout(x, grid, "flat_attention");
    const std::size_t n = sample_rows(grid);
    Var q = apply(bound, params.q, x);
    Var k = apply(bound, params.k, x);
    Var v = apply(bound, params.v, x);
    Var attn = grouped_attention(q, k, v, n, n, params.heads, trace ? &trace->maps : nullptr);
    return add_intra(bound, apply(bound, params.out, attn), v, params, grid);
}

Var attention_layer(Bound& bound, Var x, const AttentionParams& params, const TokenGrid& grid, AttentionAxis axis,
                    AttentionTrace* trace) {
    switch (axis) {
        case AttentionAxis::spatial: return s_iipa(bound, x, params, grid, trace);
        case AttentionAxis::temporal: return t_iipa(bound, x, params, grid, trace);
        case AttentionAxis::flat: return flat_attention(bound, x, params, grid, trace);
    }
    throw std::logic_error("unknown attention axis");
}

}  // namespace iip
