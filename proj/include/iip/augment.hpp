#pragma once

#include "iip/skeleton.hpp"

#include <Eigen/Dense>

#include <numbers>

namespace iip {

struct AugmentConfig {
    bool rotation = true;
    double angle_bound = std::numbers::pi / 10.0;
    bool part_mask = true;
    double part_mask_prob = 0.5;
    double noise_sigma = 0.0;
    std::size_t joint_mask = 0;

    void validate() const;
};

/// R = Rz(gamma) * Ry(beta) * Rx(alpha).
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> rotation_matrix(Scalar alpha, Scalar beta, Scalar gamma) {
    using std::cos;
    using std::sin;
    Eigen::Matrix<Scalar, 3, 3> rx, ry, rz;
    rx << 1, 0, 0, 0, cos(alpha), -sin(alpha), 0, sin(alpha), cos(alpha);
    ry << cos(beta), 0, sin(beta), 0, 1, 0, -sin(beta), 0, cos(beta);
    rz << cos(gamma), -sin(gamma), 0, sin(gamma), cos(gamma), 0, 0, 0, 1;
    return rz * ry * rx;
}

/// Angles drawn independently from U[-bound, bound].
Eigen::Matrix3d random_rotation(double bound, Rng& rng);

/// Multiplies every joint coordinate of every frame and person by R.
SkeletonSequence apply_rotation(const SkeletonSequence& seq, const Eigen::Matrix3d& rotation);

/// Zeroes all joints of part `part` in every frame of joint features laid out
/// [C_o x F x V]; other entries are untouched.
Tensor part_mask(const Tensor& joint_features, const PartitionMap& map, std::size_t part);

/// Adds i.i.d. N(0, sigma^2) noise to every coordinate.
SkeletonSequence gaussian_noise(const SkeletonSequence& seq, double sigma, Rng& rng);

/// Zeroes `count` distinct (frame, joint) cells chosen uniformly, for all
/// channels and persons.
SkeletonSequence joint_mask(const SkeletonSequence& seq, std::size_t count, Rng& rng);

/// Raw-coordinate augmentations of one training sample (rotation, noise,
/// joint mask) in that order. PartMask is chosen by choose_part_mask and
/// applied inside the encoder.
SkeletonSequence augment_sequence(const SkeletonSequence& seq, const AugmentConfig& config, Rng& rng);

/// Part index to mask for one sample, or -1.
std::ptrdiff_t choose_part_mask(const AugmentConfig& config, std::size_t parts, Rng& rng);

}  // namespace iip
