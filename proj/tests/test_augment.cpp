#include "iip/augment.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

using namespace iip;

namespace {

SkeletonSequence random_sequence(std::size_t frames, std::size_t persons, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    SkeletonSequence s(frames, kNtuJoints, persons, 1);
    for (double& v : s.coords.values()) v = u(rng);
    return s;
}

Eigen::Vector3d joint(const SkeletonSequence& s, std::size_t f, std::size_t v, std::size_t b) {
    return {s.at(0, f, v, b), s.at(1, f, v, b), s.at(2, f, v, b)};
}

double max_abs_diff(const SkeletonSequence& a, const SkeletonSequence& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.coords.size(); ++i) m = std::max(m, std::abs(a.coords[i] - b.coords[i]));
    return m;
}

}  // namespace

TEST(Rotation, ZeroAnglesGiveIdentity) {
    EXPECT_EQ(rotation_matrix(0.0, 0.0, 0.0), Eigen::Matrix3d::Identity());
}

TEST(Rotation, QuarterTurnAboutX) {
    const Eigen::Matrix3d r = rotation_matrix(std::numbers::pi / 2, 0.0, 0.0);
    const Eigen::Vector3d y = r * Eigen::Vector3d(0, 1, 0);
    EXPECT_NEAR(y.x(), 0.0, 1e-15);
    EXPECT_NEAR(y.y(), 0.0, 1e-15);
    EXPECT_NEAR(y.z(), 1.0, 1e-15);
}

TEST(Rotation, ComposesZYX) {
    const double a = 0.3, b = -0.2, g = 0.7;
    const Eigen::Matrix3d expected = (Eigen::AngleAxisd(g, Eigen::Vector3d::UnitZ()) *
                                      Eigen::AngleAxisd(b, Eigen::Vector3d::UnitY()) *
                                      Eigen::AngleAxisd(a, Eigen::Vector3d::UnitX()))
                                         .toRotationMatrix();
    EXPECT_LT((rotation_matrix(a, b, g) - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Rotation, RandomMatricesAreOrthonormal) {
    Rng rng = derive_stream(1, 0);
    for (int i = 0; i < 1000; ++i) {
        const Eigen::Matrix3d r = random_rotation(std::numbers::pi, rng);
        EXPECT_LT((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
    }
}

TEST(Rotation, AnglesRespectBound) {
    // Each angle within the bound means the rotation angle is at most the
    // composed bound; with bound 0 the matrix is the identity.
    Rng rng = derive_stream(2, 0);
    EXPECT_EQ(random_rotation(0.0, rng), Eigen::Matrix3d::Identity());
    const double bound = std::numbers::pi / 10;
    for (int i = 0; i < 200; ++i) {
        const Eigen::AngleAxisd aa(random_rotation(bound, rng));
        EXPECT_LE(aa.angle(), 3 * bound + 1e-12);
    }
}

TEST(ApplyRotation, IdentityLeavesSequence) {
    const SkeletonSequence s = random_sequence(6, 2, 3);
    EXPECT_EQ(apply_rotation(s, Eigen::Matrix3d::Identity()), s);
}

TEST(ApplyRotation, PreservesDistancesAndInverts) {
    const SkeletonSequence s = random_sequence(5, 2, 4);
    Rng rng = derive_stream(4, 0);
    const Eigen::Matrix3d r = random_rotation(std::numbers::pi, rng);
    const SkeletonSequence t = apply_rotation(s, r);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t f = 0; f < 5; ++f)
            for (std::size_t i = 0; i < kNtuJoints; ++i)
                for (std::size_t j = i + 1; j < kNtuJoints; ++j) {
                    const double d0 = (joint(s, f, i, b) - joint(s, f, j, b)).norm();
                    const double d1 = (joint(t, f, i, b) - joint(t, f, j, b)).norm();
                    ASSERT_NEAR(d0, d1, 1e-9);
                }
    EXPECT_LT(max_abs_diff(apply_rotation(t, r.transpose()), s), 1e-9);
    EXPECT_EQ(t.label, s.label);
}

TEST(ApplyRotation, CommutesWithBones) {
    const SkeletonSequence s = random_sequence(4, 1, 5);
    Rng rng = derive_stream(5, 0);
    const Eigen::Matrix3d r = random_rotation(std::numbers::pi / 3, rng);
    const SkeletonLayout layout = SkeletonLayout::ntu25();
    for (Modality m : {Modality::bone, Modality::joint, Modality::bone_motion}) {
        const SkeletonSequence a = derive_modality(apply_rotation(s, r), m, layout);
        const SkeletonSequence b = apply_rotation(derive_modality(s, m, layout), r);
        EXPECT_LT(max_abs_diff(a, b), 1e-9) << to_string(m);
    }
}

TEST(PartMask, LeftLegZeroesOnlyItsJoints) {
    const PartitionMap map = PartitionMap::ntu25_parts();
    std::mt19937_64 rng(6);
    const std::size_t co = 3, frames = 4;
    const Tensor x = testutil::random_tensor({co, frames, kNtuJoints}, rng, 0.5, 1.5);
    const Tensor y = part_mask(x, map, 3);
    const std::set<std::size_t> leg{12, 13, 14, 15};  // joints 13-16, one-based
    std::size_t changed = 0;
    for (std::size_t c = 0; c < co; ++c)
        for (std::size_t f = 0; f < frames; ++f)
            for (std::size_t v = 0; v < kNtuJoints; ++v) {
                const std::size_t i = (c * frames + f) * kNtuJoints + v;
                if (leg.contains(v)) {
                    EXPECT_EQ(y[i], 0.0);
                    ++changed;
                } else {
                    EXPECT_EQ(y[i], x[i]);
                }
            }
    EXPECT_EQ(changed, leg.size() * frames * co);
}

TEST(PartMask, ChangedCountAndIdempotence) {
    const PartitionMap map = PartitionMap::ntu25_parts();
    std::mt19937_64 rng(7);
    const std::size_t co = 5, frames = 3;
    const Tensor x = testutil::random_tensor({co, frames, kNtuJoints}, rng, 0.5, 1.5);
    for (std::size_t p = 0; p < map.part_count(); ++p) {
        const Tensor y = part_mask(x, map, p);
        std::size_t changed = 0;
        for (std::size_t i = 0; i < x.size(); ++i) changed += y[i] != x[i];
        EXPECT_EQ(changed, map.parts[p].size() * frames * co);
        EXPECT_EQ(part_mask(y, map, p), y);
    }
    EXPECT_THROW(part_mask(x, map, map.part_count()), std::out_of_range);
    EXPECT_THROW(part_mask(testutil::random_tensor({co, frames, 24}, rng), map, 0), ShapeError);
}

TEST(Noise, ZeroSigmaIsIdentityAndSeedsRepeat) {
    const SkeletonSequence s = random_sequence(5, 1, 8);
    Rng a = derive_stream(8, 1);
    EXPECT_EQ(gaussian_noise(s, 0.0, a), s);
    Rng b = derive_stream(8, 2), c = derive_stream(8, 2);
    const SkeletonSequence x = gaussian_noise(s, 0.1, b);
    EXPECT_EQ(gaussian_noise(s, 0.1, c), x);
    EXPECT_GT(max_abs_diff(x, s), 0.0);
    EXPECT_THROW(gaussian_noise(s, -1.0, b), std::invalid_argument);
}

TEST(Noise, SampleDeviationMatchesSigma) {
    const SkeletonSequence s(200, kNtuJoints, 1);
    Rng rng = derive_stream(9, 0);
    const SkeletonSequence x = gaussian_noise(s, 0.2, rng);
    double sq = 0.0;
    for (double v : x.coords.values()) sq += v * v;
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(x.coords.size())), 0.2, 0.005);
}

TEST(JointMask, ZeroCountIsIdentity) {
    const SkeletonSequence s = random_sequence(5, 2, 10);
    Rng rng = derive_stream(10, 0);
    EXPECT_EQ(joint_mask(s, 0, rng), s);
}

TEST(JointMask, ZeroesExactlyKCellsAcrossChannelsAndPersons) {
    const SkeletonSequence s = random_sequence(6, 2, 11);
    Rng rng = derive_stream(11, 0), again = derive_stream(11, 0);
    const std::size_t k = 17;
    const SkeletonSequence m = joint_mask(s, k, rng);
    EXPECT_EQ(joint_mask(s, k, again), m);
    std::size_t cells = 0;
    for (std::size_t f = 0; f < 6; ++f)
        for (std::size_t v = 0; v < kNtuJoints; ++v) {
            bool zeroed = true, kept = true;
            for (std::size_t c = 0; c < kCoordChannels; ++c)
                for (std::size_t b = 0; b < 2; ++b) {
                    zeroed = zeroed && m.at(c, f, v, b) == 0.0;
                    kept = kept && m.at(c, f, v, b) == s.at(c, f, v, b);
                }
            EXPECT_TRUE(zeroed || kept);
            cells += zeroed;
        }
    EXPECT_EQ(cells, k);
    EXPECT_THROW(joint_mask(s, 6 * kNtuJoints + 1, rng), std::invalid_argument);
    EXPECT_NO_THROW(joint_mask(s, 6 * kNtuJoints, rng));
}

TEST(AugmentConfig, ValidationAndPartChoice) {
    AugmentConfig c;
    EXPECT_NO_THROW(c.validate());
    c.part_mask_prob = 1.5;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.part_mask_prob = 0.5;
    c.angle_bound = -0.1;
    EXPECT_THROW(c.validate(), std::invalid_argument);

    AugmentConfig on;
    Rng rng = derive_stream(12, 0);
    std::size_t masked = 0;
    std::vector<std::size_t> hits(5);
    for (int i = 0; i < 4000; ++i) {
        const std::ptrdiff_t p = choose_part_mask(on, 5, rng);
        if (p >= 0) {
            ASSERT_LT(p, 5);
            ++masked;
            ++hits[static_cast<std::size_t>(p)];
        }
    }
    EXPECT_NEAR(static_cast<double>(masked) / 4000.0, 0.5, 0.03);
    for (std::size_t h : hits) EXPECT_NEAR(static_cast<double>(h) / static_cast<double>(masked), 0.2, 0.03);
    on.part_mask = false;
    EXPECT_EQ(choose_part_mask(on, 5, rng), -1);
}

TEST(AugmentSequence, EverythingOffIsIdentity) {
    const SkeletonSequence s = random_sequence(5, 1, 13);
    AugmentConfig off;
    off.rotation = false;
    off.part_mask = false;
    Rng rng = derive_stream(13, 0);
    EXPECT_EQ(augment_sequence(s, off, rng), s);
}
