#pragma once

#include "iip/params.hpp"
#include "iip/partition.hpp"

#include <vector>

namespace iip {

enum class AttentionMode { iipa, standard };
enum class AttentionAxis { spatial, temporal, flat };

struct AttentionConfig {
    AttentionMode mode = AttentionMode::iipa;
    AttentionAxis axis = AttentionAxis::spatial;
};

/// Projections of one attention block. `intra` exists only in IIPA mode.
struct AttentionParams {
    Affine q, k, v;
    Affine out;
    Affine intra;
    std::size_t heads = 1;
    AttentionMode mode = AttentionMode::iipa;

    bool has_intra() const { return mode == AttentionMode::iipa; }
};

AttentionParams add_attention(ParamSet& set, const std::string& name, std::size_t width, std::size_t heads,
                              AttentionMode mode, Rng& rng);

/// Collects every softmax map produced during a forward pass.
struct AttentionTrace {
    std::vector<Tensor> maps;
};

/// Multi-head scaled dot-product attention of q rows over k/v rows.
Var mhsa(Var q, Var k, Var v, std::size_t heads, AttentionTrace* trace = nullptr);

/// Inter-part branch (MHSA + output projection) plus, in IIPA mode, the
/// intra-part branch f_intra(V). In standard mode the result is exactly the
/// inter-part branch.
Var iipa(Bound& bound, Var q, Var k, Var v, const AttentionParams& params, AttentionTrace* trace = nullptr);

/// Spatial IIPA over a batch of token sequences laid out as rows
/// (sample, 0 = class token, 1 + f*Q + q). The class token attends to every
/// token of its sample; each frame's Q tokens attend to that frame's tokens
/// plus the class key/value. Shape is preserved.
Var s_iipa(Bound& bound, Var x, const AttentionParams& params, const TokenGrid& grid,
           AttentionTrace* trace = nullptr);

/// Temporal IIPA: as s_iipa with the roles of frames and parts exchanged;
/// each part's F tokens attend to that part's tokens plus the class key/value.
Var t_iipa(Bound& bound, Var x, const AttentionParams& params, const TokenGrid& grid,
           AttentionTrace* trace = nullptr);

/// One self-attention over all tokens of each sample, class token included.
/// The intra branch (IIPA mode) applies to part tokens only.
Var flat_attention(Bound& bound, Var x, const AttentionParams& params, const TokenGrid& grid,
                   AttentionTrace* trace = nullptr);

/// Dispatches on config.axis.
Var attention_layer(Bound& bound, Var x, const AttentionParams& params, const TokenGrid& grid, AttentionAxis axis,
                    AttentionTrace* trace = nullptr);

}  // namespace iip
