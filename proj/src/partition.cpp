#include "iip/partition.hpp"

#include <algorithm>

namespace iip {

PartitionEncoderParams add_partition_encoder(ParamSet& set, const PartitionMap& map, std::size_t joint_channels,
                                             std::size_t embed_channels, Rng& rng) {
    map.validate();
    PartitionEncoderParams enc;
    enc.joint_channels = joint_channels;
    enc.slots = map.max_slots();
    enc.lift1 = add_affine(set, "encoder.lift1", kCoordChannels, joint_channels, rng);
    enc.bn1 = add_batchnorm(set, "encoder.bn1", joint_channels);
    enc.lift2 = add_affine(set, "encoder.lift2", joint_channels, joint_channels, rng);
    enc.bn2 = add_batchnorm(set, "encoder.bn2", joint_channels);
    enc.embed = add_affine(set, "encoder.embed", joint_channels * enc.slots, embed_channels, rng);
    return enc;
}

Tensor pack_joint_rows(std::span<const SkeletonSequence> batch, std::size_t persons) {
    if (batch.empty()) throw ShapeError("pack_joint_rows: empty batch");
    const std::size_t frames = batch.front().frames();
    const std::size_t joints = batch.front().joints();
    Tensor rows({batch.size() * frames * persons * joints, kCoordChannels});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const SkeletonSequence& s = batch[b];
        if (s.frames() != frames || s.joints() != joints) {
            throw ShapeError("pack_joint_rows: sample " + std::to_string(b) + " has shape " +
                             shape_str(s.coords.shape()) + ", expected " + std::to_string(frames) + " frames and " +
                             std::to_string(joints) + " joints");
        }
        if (s.persons() > persons) {
            throw ShapeError("pack_joint_rows: sample has " + std::to_string(s.persons()) + " persons, model takes " +
                             std::to_string(persons));
        }
        for (std::size_t f = 0; f < frames; ++f)
            for (std::size_t p = 0; p < s.persons(); ++p)
                for (std::size_t v = 0; v < joints; ++v) {
                    const std::size_t r = ((b * frames + f) * persons + p) * joints + v;
                    for (std::size_t c = 0; c < kCoordChannels; ++c) rows.at(r, c) = s.at(c, f, v, p);
                }
    }
    return rows;
}

Var extract_joint_features(Bound& bound, const PartitionEncoderParams& enc, Var joints, bool training) {
    if (joints.value().rank() != 2 || joints.value().cols() != kCoordChannels) {
        throw ShapeError("extract_joint_features: expected [R x 3] joint rows, got " + shape_str(joints.shape()));
    }
    Var h = relu(apply(bound, enc.bn1, apply(bound, enc.lift1, joints), training));
    return relu(apply(bound, enc.bn2, apply(bound, enc.lift2, h), training));
}

Var gather_parts(Var joint_features, const PartitionMap& map, const TokenGrid& grid) {
    const std::size_t v = map.joints;
    const std::size_t m = map.max_slots();
    const Tensor& x = joint_features.value();
    const std::size_t expected = grid.batch * grid.frames * grid.persons * v;
    if (x.rank() != 2 || x.rows() != expected || grid.parts != map.part_count()) {
        throw ShapeError("gather_parts: joint features " + shape_str(x.shape()) + " do not match " +
                         std::to_string(expected) + " joint rows / " + std::to_string(map.part_count()) + " parts");
    }
    std::vector<std::ptrdiff_t> index;
    index.reserve(grid.tokens() * m);
    for (std::size_t bf = 0; bf < grid.batch * grid.frames; ++bf)
        for (std::size_t person = 0; person < grid.persons; ++person)
            for (const auto& part : map.parts)
                for (std::size_t slot = 0; slot < m; ++slot) {
                    if (slot < part.size()) {
                        if (part[slot] >= v) throw std::out_of_range("gather_parts: joint index out of range");
                        index.push_back(static_cast<std::ptrdiff_t>((bf * grid.persons + person) * v + part[slot]));
                    } else {
                        index.push_back(-1);
                    }
                }
    const std::size_t width = m * x.cols();
    Var slots = gather_rows(joint_features, index);
    return reshape(slots, {grid.tokens(), width});
}

Var embed_parts(Bound& bound, const PartitionEncoderParams& enc, Var gathered) {
    if (gathered.value().cols() != enc.embed.in) {
        throw ShapeError("embed_parts: token width " + std::to_string(gathered.value().cols()) + ", expected " +
                         std::to_string(enc.embed.in));
    }
    return relu(apply(bound, enc.embed, gathered));
}

Tensor part_mask_rows(const PartitionMap& map, const TokenGrid& grid, std::span<const std::ptrdiff_t> masked) {
    if (masked.size() != grid.batch) throw ShapeError("part_mask_rows: one entry per sample required");
    const std::size_t v = map.joints;
    Tensor mask({grid.batch * grid.frames * grid.persons * v, 1}, 1.0);
    for (std::size_t b = 0; b < grid.batch; ++b) {
        if (masked[b] < 0) continue;
        if (static_cast<std::size_t>(masked[b]) >= map.part_count()) {
            throw std::out_of_range("part mask index " + std::to_string(masked[b]) + " out of range");
        }
        for (std::size_t f = 0; f < grid.frames; ++f)
            for (std::size_t person = 0; person < grid.persons; ++person)
                for (std::size_t j : map.parts[static_cast<std::size_t>(masked[b])])
                    mask[((b * grid.frames + f) * grid.persons + person) * v + j] = 0.0;
    }
    return mask;
}

Var partition_encode(Bound& bound, const PartitionEncoderParams& enc, const PartitionMap& map, Var joints,
                     const TokenGrid& grid, bool training, std::span<const std::ptrdiff_t> masked) {
    Var features = extract_joint_features(bound, enc, joints, training);
    const bool any_mask = std::any_of(masked.begin(), masked.end(), [](std::ptrdiff_t p) { return p >= 0; });
    if (any_mask) {
        const Tensor rows = part_mask_rows(map, grid, masked);
        Tensor full(features.shape());
        const std::size_t c = full.cols();
        for (std::size_t r = 0; r < full.rows(); ++r)
            for (std::size_t j = 0; j < c; ++j) full.at(r, j) = rows[r];
        features = mul(features, bound.tape().constant(std::move(full)));
    }
    return embed_parts(bound, enc, gather_parts(features, map, grid));
}

}  // namespace iip
