#pragma once

#include "iip/params.hpp"
#include "iip/skeleton.hpp"

#include <span>

namespace iip {

/// Batch geometry shared by the encoder and the transformer. Joint rows are
/// ordered (sample, frame, person, joint); token rows (sample, frame, person,
/// part), so the token at frame f and part slot q of one sample sits at
/// f * tokens_per_frame() + q.
struct TokenGrid {
    std::size_t batch = 1;
    std::size_t frames = 1;
    std::size_t persons = 1;
    std::size_t parts = 1;

    std::size_t tokens_per_frame() const { return persons * parts; }
    std::size_t tokens_per_sample() const { return frames * tokens_per_frame(); }
    std::size_t tokens() const { return batch * tokens_per_sample(); }
};

/// f_J: two pointwise 3 -> C_o -> C_o layers, each followed by batchnorm and
/// ReLU. f_P: one affine layer C_o*M -> C_P followed by ReLU.
struct PartitionEncoderParams {
    Affine lift1;
    BatchNorm bn1;
    Affine lift2;
    BatchNorm bn2;
    Affine embed;
    std::size_t joint_channels = 0;
    std::size_t slots = 0;
};

PartitionEncoderParams add_partition_encoder(ParamSet& set, const PartitionMap& map, std::size_t joint_channels,
                                             std::size_t embed_channels, Rng& rng);

/// Packs sequences into joint rows [(B*F*persons*V) x 3]. Every sequence must
/// have the same frame and joint counts; missing persons are zero.
Tensor pack_joint_rows(std::span<const SkeletonSequence> batch, std::size_t persons);

/// [R x 3] joint rows -> [R x C_o].
Var extract_joint_features(Bound& bound, const PartitionEncoderParams& enc, Var joints, bool training);

/// Gathers joint features into part tokens [(B*F*persons*P) x (M*C_o)]. Slot
/// m of a token occupies columns [m*C_o, (m+1)*C_o); pad slots are zero.
Var gather_parts(Var joint_features, const PartitionMap& map, const TokenGrid& grid);

/// Affine + ReLU per token.
Var embed_parts(Bound& bound, const PartitionEncoderParams& enc, Var gathered);

/// Row multiplier that zeroes every joint of part masked[b] (for all frames
/// and persons) of sample b; masked[b] < 0 leaves the sample untouched.
Tensor part_mask_rows(const PartitionMap& map, const TokenGrid& grid, std::span<const std::ptrdiff_t> masked);

/// Full partition encoding: f_J, optional PartMask on the joint features,
/// gather/pad, f_P. Returns [tokens x C_P].
Var partition_encode(Bound& bound, const PartitionEncoderParams& enc, const PartitionMap& map, Var joints,
                     const TokenGrid& grid, bool training, std::span<const std::ptrdiff_t> masked = {});

}  // namespace iip
