#include "iip/augment.hpp"

#include <algorithm>
#include <numeric>

namespace iip {

void AugmentConfig::validate() const {
    if (!(angle_bound >= 0.0)) throw std::invalid_argument("rotation angle bound must be nonnegative");
    if (!(part_mask_prob >= 0.0 && part_mask_prob <= 1.0)) {
        throw std::invalid_argument("part mask probability must lie in [0, 1]");
    }
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise sigma must be nonnegative");
}

Eigen::Matrix3d random_rotation(double bound, Rng& rng) {
    std::uniform_real_distribution<double> angle(-bound, bound);
    const double a = angle(rng);
    const double b = angle(rng);
    const double g = angle(rng);
    return rotation_matrix(a, b, g);
}

SkeletonSequence apply_rotation(const SkeletonSequence& seq, const Eigen::Matrix3d& rotation) {
    SkeletonSequence out = seq;
    for (std::size_t f = 0; f < seq.frames(); ++f)
        for (std::size_t v = 0; v < seq.joints(); ++v)
            for (std::size_t b = 0; b < seq.persons(); ++b) {
                const Eigen::Vector3d p(seq.at(0, f, v, b), seq.at(1, f, v, b), seq.at(2, f, v, b));
                const Eigen::Vector3d r = rotation * p;
                for (std::size_t c = 0; c < kCoordChannels; ++c) out.at(c, f, v, b) = r[static_cast<Eigen::Index>(c)];
            }
    return out;
}

Tensor part_mask(const Tensor& joint_features, const PartitionMap& map, std::size_t part) {
    if (part >= map.part_count()) {
        throw std::out_of_range("part index " + std::to_string(part) + " out of range for " +
                                std::to_string(map.part_count()) + " parts");
    }
    if (joint_features.rank() != 3 || joint_features.dim(2) != map.joints) {
        throw ShapeError("part_mask: expected [C x F x " + std::to_string(map.joints) + "], got " +
                         shape_str(joint_features.shape()));
    }
    Tensor out = joint_features;
    const std::size_t channels = out.dim(0), frames = out.dim(1), joints = out.dim(2);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t f = 0; f < frames; ++f)
            for (std::size_t j : map.parts[part]) out[(c * frames + f) * joints + j] = 0.0;
    return out;
}

SkeletonSequence gaussian_noise(const SkeletonSequence& seq, double sigma, Rng& rng) {
    if (!(sigma >= 0.0)) throw std::invalid_argument("noise sigma must be nonnegative");
    SkeletonSequence out = seq;
    if (sigma == 0.0) return out;
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : out.coords.values()) v += noise(rng);
    return out;
}

SkeletonSequence joint_mask(const SkeletonSequence& seq, std::size_t count, Rng& rng) {
    const std::size_t cells = seq.frames() * seq.joints();
    if (count > cells) {
        throw std::invalid_argument("joint_mask: " + std::to_string(count) + " cells requested but only " +
                                    std::to_string(cells) + " exist");
    }
    SkeletonSequence out = seq;
    if (count == 0) return out;
    std::vector<std::size_t> order(cells);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `count` entries are a uniform sample.
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, cells - 1);
        std::swap(order[i], order[pick(rng)]);
    }
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t f = order[i] / seq.joints();
        const std::size_t v = order[i] % seq.joints();
        for (std::size_t c = 0; c < kCoordChannels; ++c)
            for (std::size_t b = 0; b < seq.persons(); ++b) out.at(c, f, v, b) = 0.0;
    }
    return out;
}

SkeletonSequence augment_sequence(const SkeletonSequence& seq, const AugmentConfig& config, Rng& rng) {
    SkeletonSequence out = seq;
    if (config.rotation) out = apply_rotation(out, random_rotation(config.angle_bound, rng));
    if (config.noise_sigma > 0.0) out = gaussian_noise(out, config.noise_sigma, rng);
    if (config.joint_mask > 0) out = joint_mask(out, config.joint_mask, rng);
    return out;
}

std::ptrdiff_t choose_part_mask(const AugmentConfig& config, std::size_t parts, Rng& rng) {
    if (!config.part_mask || parts == 0) return -1;
    std::bernoulli_distribution apply(config.part_mask_prob);
    if (!apply(rng)) return -1;
    return static_cast<std::ptrdiff_t>(std::uniform_int_distribution<std::size_t>(0, parts - 1)(rng));
}

}  // namespace iip
