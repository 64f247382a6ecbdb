#pragma once

#include "iip/params.hpp"
#include "iip/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace iip {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kCoordChannels = 3;
inline constexpr std::size_t kNtuJoints = 25;

/// Joint tree. parent[root] == root.
struct SkeletonLayout {
    std::vector<std::size_t> parent;
    std::size_t center_joint = 0;

    std::size_t joints() const { return parent.size(); }
    /// Throws std::invalid_argument unless every joint reaches a root.
    void validate() const;
    /// Joint indices from the root of `joint`'s tree down to `joint`.
    std::vector<std::size_t> path_from_root(std::size_t joint) const;

    /// 25-joint Kinect V2 layout (NTU RGB+D), 0-indexed, centered on the
    /// mid-spine joint.
    static SkeletonLayout ntu25();
};

/// Coordinates are stored as [3 x frames x joints x persons]; an absent
/// second person is an all-zero slab.
struct SkeletonSequence {
    Tensor coords;
    std::size_t label = 0;

    SkeletonSequence() = default;
    SkeletonSequence(std::size_t frames, std::size_t joints, std::size_t persons, std::size_t label = 0);

    std::size_t frames() const { return coords.dim(1); }
    std::size_t joints() const { return coords.dim(2); }
    std::size_t persons() const { return coords.dim(3); }

    double& at(std::size_t c, std::size_t f, std::size_t v, std::size_t b) {
        return coords[((c * frames() + f) * joints() + v) * persons() + b];
    }
    double at(std::size_t c, std::size_t f, std::size_t v, std::size_t b) const {
        return coords[((c * frames() + f) * joints() + v) * persons() + b];
    }

    bool operator==(const SkeletonSequence&) const = default;
};

/// Assignment of joints to parts; each part is padded to max_slots() slots.
struct PartitionMap {
    std::size_t joints = 0;
    std::vector<std::vector<std::size_t>> parts;

    std::size_t part_count() const { return parts.size(); }
    std::size_t max_slots() const;
    /// Throws std::invalid_argument unless every joint lies in exactly one part.
    void validate() const;
    /// Part containing `joint`.
    std::size_t part_of(std::size_t joint) const;

    /// Torso, left arm, right arm, left leg, right leg over the 25-joint
    /// layout (P = 5, M = 6).
    static PartitionMap ntu25_parts();
    /// One singleton part per joint (P = V, M = 1).
    static PartitionMap identity(std::size_t joints);
};

enum class Modality { joint, bone, joint_motion, bone_motion };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

enum class SampleMode { train, eval };

// ---------------------------------------------------------------------------
// Binary sequence files: "IIPS", u32 version, u32 C, F, V, B_p, label, then
// C*F*V*B_p little-endian f32 values in (c, f, v, b) order.

inline constexpr std::uint32_t kSequenceVersion = 1;

void save_sequence(const SkeletonSequence& seq, const std::filesystem::path& path);
SkeletonSequence load_sequence(const std::filesystem::path& path);
std::vector<char> encode_sequence(const SkeletonSequence& seq);
SkeletonSequence decode_sequence(std::string_view bytes);

// ---------------------------------------------------------------------------

/// Source frame index for each of the `frames_out` output frames. Eval mode
/// is a uniform grid over the whole clip; train mode takes a random
/// contiguous crop of at least half the clip and then a uniform grid. Clips
/// shorter than the request repeat their last frame.
std::vector<std::size_t> resample_indices(std::size_t frames_in, std::size_t frames_out, SampleMode mode,
                                          Rng* rng = nullptr);
SkeletonSequence resample_frames(const SkeletonSequence& seq, std::size_t frames_out, SampleMode mode,
                                 Rng* rng = nullptr);

SkeletonSequence derive_modality(const SkeletonSequence& seq, Modality kind, const SkeletonLayout& layout);

// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string path;
    std::size_t label = 0;
    int subject = 0;
    int camera = 0;
};

/// Tab-separated `path label subject camera` lines. Relative paths resolve
/// against the manifest's directory.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const ManifestEntry& e) const;
    std::size_t num_classes() const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic data: every class is a fixed motion template (per-part sinusoids
// around a rest pose) that depends only on the class id; samples add
// N(0, 0.01^2) coordinate noise drawn from the seed.

inline constexpr double kSynthNoiseSigma = 0.01;

/// Noise-free template of class `label`, [3 x frames x 25 x 1].
SkeletonSequence class_template(std::size_t label, std::size_t frames);
SkeletonSequence synth_sample(std::size_t label, std::size_t frames, Rng& rng);

/// Writes `num_classes * per_class` sequence files plus `manifest.tsv` into
/// `out_dir` and returns the manifest.
DatasetManifest synth_dataset(std::size_t num_classes, std::size_t per_class, std::size_t frames,
                              std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace iip
