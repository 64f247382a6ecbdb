#include "iip/skeleton.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace iip {

void SkeletonLayout::validate() const {
    const std::size_t v = joints();
    if (v == 0) throw std::invalid_argument("layout has no joints");
    if (center_joint >= v) throw std::invalid_argument("layout center joint out of range");
    for (std::size_t j = 0; j < v; ++j) {
        std::size_t cur = j;
        for (std::size_t steps = 0;; ++steps) {
            if (parent[cur] >= v) throw std::invalid_argument("layout parent index out of range");
            if (parent[cur] == cur) break;
            if (steps > v) throw std::invalid_argument("layout parent table has a cycle");
            cur = parent[cur];
        }
    }
}

std::vector<std::size_t> SkeletonLayout::path_from_root(std::size_t joint) const {
    std::vector<std::size_t> path{joint};
    while (parent[path.back()] != path.back()) path.push_back(parent[path.back()]);
    std::reverse(path.begin(), path.end());
    return path;
}

SkeletonLayout SkeletonLayout::ntu25() {
    // 1-indexed (child, parent) bone list; joint 21 (spine shoulder) is the root.
    static constexpr std::pair<int, int> bones[] = {
        {1, 2},   {2, 21},  {3, 21},  {4, 3},   {5, 21},  {6, 5},   {7, 6},   {8, 7},
        {9, 21},  {10, 9},  {11, 10}, {12, 11}, {13, 1},  {14, 13}, {15, 14}, {16, 15},
        {17, 1},  {18, 17}, {19, 18}, {20, 19}, {22, 23}, {23, 8},  {24, 25}, {25, 12},
    };
    SkeletonLayout layout;
    layout.parent.resize(kNtuJoints);
    for (std::size_t j = 0; j < kNtuJoints; ++j) layout.parent[j] = j;
    for (auto [child, par] : bones) layout.parent[child - 1] = par - 1;
    layout.center_joint = 1;
    return layout;
}

SkeletonSequence::SkeletonSequence(std::size_t frames, std::size_t joints, std::size_t persons, std::size_t lab)
    : coords({kCoordChannels, frames, joints, persons}), label(lab) {}

std::size_t PartitionMap::max_slots() const {
    std::size_t m = 0;
    for (const auto& p : parts) m = std::max(m, p.size());
    return m;
}

void PartitionMap::validate() const {
    std::vector<int> seen(joints, 0);
    for (const auto& part : parts) {
        if (part.empty()) throw std::invalid_argument("partition map has an empty part");
        for (std::size_t j : part) {
            if (j >= joints) {
                throw std::invalid_argument("partition map joint " + std::to_string(j) + " out of range");
            }
            ++seen[j];
        }
    }
    for (std::size_t j = 0; j < joints; ++j) {
        if (seen[j] != 1) {
            throw std::invalid_argument("joint " + std::to_string(j) + " appears in " + std::to_string(seen[j]) +
                                        " parts");
        }
    }
}

std::size_t PartitionMap::part_of(std::size_t joint) const {
    for (std::size_t p = 0; p < parts.size(); ++p) {
        if (std::find(parts[p].begin(), parts[p].end(), joint) != parts[p].end()) return p;
    }
    throw std::out_of_range("joint " + std::to_string(joint) + " is in no part");
}

PartitionMap PartitionMap::ntu25_parts() {
    auto zero_based = [](std::initializer_list<std::size_t> one_based) {
        std::vector<std::size_t> out;
        for (std::size_t j : one_based) out.push_back(j - 1);
        return out;
    };
    PartitionMap map;
    map.joints = kNtuJoints;
    map.parts = {
        zero_based({1, 2, 3, 4, 21}),
        zero_based({5, 6, 7, 8, 22, 23}),
        zero_based({9, 10, 11, 12, 24, 25}),
        zero_based({13, 14, 15, 16}),
        zero_based({17, 18, 19, 20}),
    };
    return map;
}

PartitionMap PartitionMap::identity(std::size_t joints) {
    PartitionMap map;
    map.joints = joints;
    for (std::size_t j = 0; j < joints; ++j) map.parts.push_back({j});
    return map;
}

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::joint: return "joint";
        case Modality::bone: return "bone";
        case Modality::joint_motion: return "joint_motion";
        case Modality::bone_motion: return "bone_motion";
    }
    return "joint";
}

Modality parse_modality(std::string_view s) {
    for (Modality m : {Modality::joint, Modality::bone, Modality::joint_motion, Modality::bone_motion}) {
        if (to_string(m) == s) return m;
    }
    throw std::invalid_argument("unknown modality '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'I', 'I', 'P', 'S'};
constexpr std::size_t kHeaderBytes = 4 + 6 * 4;

void put_u32(std::vector<char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

}  // namespace

std::vector<char> encode_sequence(const SkeletonSequence& seq) {
    const Tensor& c = seq.coords;
    if (c.rank() != 4 || c.dim(0) != kCoordChannels) {
        throw ShapeError("sequence coordinates must be [3 x F x V x B], got " + shape_str(c.shape()));
    }
    std::vector<char> out(kMagic, kMagic + 4);
    out.reserve(kHeaderBytes + 4 * c.size());
    put_u32(out, kSequenceVersion);
    for (std::size_t i = 0; i < 4; ++i) put_u32(out, static_cast<std::uint32_t>(c.dim(i)));
    put_u32(out, static_cast<std::uint32_t>(seq.label));
    for (double v : c.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

SkeletonSequence decode_sequence(std::string_view bytes) {
    if (bytes.size() < kHeaderBytes) throw FormatError("truncated header");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic (expected IIPS)");
    const char* p = bytes.data() + 4;
    const std::uint32_t version = get_u32(p);
    if (version != kSequenceVersion) throw FormatError("unsupported sequence version " + std::to_string(version));
    const std::uint32_t c = get_u32(p + 4), f = get_u32(p + 8), v = get_u32(p + 12), b = get_u32(p + 16);
    const std::uint32_t label = get_u32(p + 20);
    if (c != kCoordChannels) throw FormatError("sequence header has " + std::to_string(c) + " channels, expected 3");
    const std::uint64_t count = std::uint64_t{c} * f * v * b;
    const std::uint64_t payload = bytes.size() - kHeaderBytes;
    if (payload != 4 * count) {
        throw FormatError("payload holds " + std::to_string(payload) + " bytes but header C=" + std::to_string(c) +
                          " F=" + std::to_string(f) + " V=" + std::to_string(v) + " B=" + std::to_string(b) +
                          " needs " + std::to_string(4 * count));
    }
    SkeletonSequence seq(f, v, b, label);
    const char* data = bytes.data() + kHeaderBytes;
    for (std::size_t i = 0; i < count; ++i) {
        seq.coords[i] = static_cast<double>(std::bit_cast<float>(get_u32(data + 4 * i)));
    }
    seq.coords.require_finite("load_sequence");
    return seq;
}

void save_sequence(const SkeletonSequence& seq, const std::filesystem::path& path) {
    const auto bytes = encode_sequence(seq);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

SkeletonSequence load_sequence(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    try {
        return decode_sequence(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> resample_indices(std::size_t frames_in, std::size_t frames_out, SampleMode mode, Rng* rng) {
    if (frames_in == 0 || frames_out == 0) throw std::invalid_argument("resample_frames: frame counts must be >= 1");
    std::size_t start = 0;
    std::size_t length = frames_in;
    if (mode == SampleMode::train) {
        if (!rng) throw std::invalid_argument("resample_frames: train mode needs an rng");
        const std::size_t min_len = (frames_in + 1) / 2;
        length = std::uniform_int_distribution<std::size_t>(min_len, frames_in)(*rng);
        start = std::uniform_int_distribution<std::size_t>(0, frames_in - length)(*rng);
    }
    std::vector<std::size_t> idx(frames_out);
    for (std::size_t i = 0; i < frames_out; ++i) {
        const std::size_t offset = length >= frames_out ? i * length / frames_out : std::min(i, length - 1);
        idx[i] = start + offset;
    }
    return idx;
}

SkeletonSequence resample_frames(const SkeletonSequence& seq, std::size_t frames_out, SampleMode mode, Rng* rng) {
    const auto idx = resample_indices(seq.frames(), frames_out, mode, rng);
    SkeletonSequence out(frames_out, seq.joints(), seq.persons(), seq.label);
    const std::size_t slab = seq.joints() * seq.persons();
    for (std::size_t c = 0; c < kCoordChannels; ++c)
        for (std::size_t f = 0; f < frames_out; ++f) {
            const double* src = seq.coords.data() + (c * seq.frames() + idx[f]) * slab;
            std::copy_n(src, slab, out.coords.data() + (c * frames_out + f) * slab);
        }
    return out;
}

namespace {

SkeletonSequence centered(const SkeletonSequence& seq, const SkeletonLayout& layout) {
    SkeletonSequence out = seq;
    for (std::size_t b = 0; b < seq.persons(); ++b) {
        bool present = false;
        for (std::size_t c = 0; c < kCoordChannels && !present; ++c)
            for (std::size_t f = 0; f < seq.frames() && !present; ++f)
                for (std::size_t v = 0; v < seq.joints() && !present; ++v) present = seq.at(c, f, v, b) != 0.0;
        if (!present) continue;
        for (std::size_t c = 0; c < kCoordChannels; ++c) {
            const double origin = seq.at(c, 0, layout.center_joint, b);
            for (std::size_t f = 0; f < seq.frames(); ++f)
                for (std::size_t v = 0; v < seq.joints(); ++v) out.at(c, f, v, b) -= origin;
        }
    }
    return out;
}

SkeletonSequence bones(const SkeletonSequence& seq, const SkeletonLayout& layout) {
    SkeletonSequence out(seq.frames(), seq.joints(), seq.persons(), seq.label);
    for (std::size_t c = 0; c < kCoordChannels; ++c)
        for (std::size_t f = 0; f < seq.frames(); ++f)
            for (std::size_t v = 0; v < seq.joints(); ++v)
                for (std::size_t b = 0; b < seq.persons(); ++b)
                    out.at(c, f, v, b) = seq.at(c, f, v, b) - seq.at(c, f, layout.parent[v], b);
    return out;
}

SkeletonSequence motion(const SkeletonSequence& seq) {
    SkeletonSequence out(seq.frames(), seq.joints(), seq.persons(), seq.label);
    for (std::size_t c = 0; c < kCoordChannels; ++c)
        for (std::size_t f = 0; f + 1 < seq.frames(); ++f)
            for (std::size_t v = 0; v < seq.joints(); ++v)
                for (std::size_t b = 0; b < seq.persons(); ++b)
                    out.at(c, f, v, b) = seq.at(c, f + 1, v, b) - seq.at(c, f, v, b);
    return out;
}

}  // namespace

SkeletonSequence derive_modality(const SkeletonSequence& seq, Modality kind, const SkeletonLayout& layout) {
    if (layout.joints() != seq.joints()) {
        throw ShapeError("layout has " + std::to_string(layout.joints()) + " joints, sequence has " +
                         std::to_string(seq.joints()));
    }
    const SkeletonSequence joint = centered(seq, layout);
    switch (kind) {
        case Modality::joint: return joint;
        case Modality::bone: return bones(joint, layout);
        case Modality::joint_motion: return motion(joint);
        case Modality::bone_motion: return motion(bones(joint, layout));
    }
    return joint;
}

// ---------------------------------------------------------------------------

std::filesystem::path DatasetManifest::resolve(const ManifestEntry& e) const {
    const std::filesystem::path p(e.path);
    return p.is_absolute() ? p : base_dir / p;
}

std::size_t DatasetManifest::num_classes() const {
    std::size_t k = 0;
    for (const auto& e : entries) k = std::max(k, e.label + 1);
    return k;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest " + path.string());
    DatasetManifest m;
    m.base_dir = path.parent_path();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, '\t')) fields.push_back(field);
        if (fields.size() != 4) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
        }
        try {
            ManifestEntry e;
            e.path = fields[0];
            e.label = std::stoul(fields[1]);
            e.subject = std::stoi(fields[2]);
            e.camera = std::stoi(fields[3]);
            m.entries.push_back(std::move(e));
        } catch (const std::logic_error&) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed numeric field");
        }
    }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write manifest " + path.string());
    for (const auto& e : manifest.entries) {
        os << e.path << '\t' << e.label << '\t' << e.subject << '\t' << e.camera << '\n';
    }
}

// ---------------------------------------------------------------------------

namespace {

// Rest pose in meters (x right, y up, z away from the camera), 1-indexed order.
constexpr double kRestPose[kNtuJoints][3] = {
    {0.00, 0.00, 3.0},   {0.00, 0.30, 3.0},   {0.00, 0.65, 3.0},   {0.00, 0.80, 3.0},   {-0.18, 0.50, 3.0},
    {-0.25, 0.25, 3.0},  {-0.28, 0.02, 3.0},  {-0.29, -0.05, 3.0}, {0.18, 0.50, 3.0},   {0.25, 0.25, 3.0},
    {0.28, 0.02, 3.0},   {0.29, -0.05, 3.0},  {-0.10, -0.05, 3.0}, {-0.12, -0.45, 3.0}, {-0.12, -0.85, 3.0},
    {-0.12, -0.90, 2.9}, {0.10, -0.05, 3.0},  {0.12, -0.45, 3.0},  {0.12, -0.85, 3.0},  {0.12, -0.90, 2.9},
    {0.00, 0.55, 3.0},   {-0.30, -0.12, 3.0}, {-0.25, -0.06, 3.0}, {0.30, -0.12, 3.0},  {0.25, -0.06, 3.0},
};

constexpr std::uint64_t kTemplateSeed = 0x7e3a11c0ffee5eedULL;

}  // namespace

SkeletonSequence class_template(std::size_t label, std::size_t frames) {
    Rng rng = derive_stream(kTemplateSeed, label);
    std::uniform_real_distribution<double> freq_dist(0.5, 2.5), phase_dist(0.0, 2.0 * std::numbers::pi),
        amp_dist(0.05, 0.25);
    std::normal_distribution<double> dir_dist(0.0, 1.0);
    const PartitionMap parts = PartitionMap::ntu25_parts();

    SkeletonSequence seq(frames, kNtuJoints, 1, label);
    for (std::size_t v = 0; v < kNtuJoints; ++v)
        for (std::size_t c = 0; c < kCoordChannels; ++c)
            for (std::size_t f = 0; f < frames; ++f) seq.at(c, f, v, 0) = kRestPose[v][c];

    for (const auto& part : parts.parts) {
        const double freq = freq_dist(rng);
        const double phase = phase_dist(rng);
        const double amp = amp_dist(rng);
        double dir[3] = {dir_dist(rng), dir_dist(rng), dir_dist(rng)};
        const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        for (double& d : dir) d /= norm;
        for (std::size_t slot = 0; slot < part.size(); ++slot) {
            const double reach = amp * static_cast<double>(slot + 1) / static_cast<double>(part.size());
            for (std::size_t f = 0; f < frames; ++f) {
                const double t = static_cast<double>(f) / static_cast<double>(frames);
                const double s = reach * std::sin(2.0 * std::numbers::pi * freq * t + phase);
                for (std::size_t c = 0; c < kCoordChannels; ++c) seq.at(c, f, part[slot], 0) += s * dir[c];
            }
        }
    }
    return seq;
}

SkeletonSequence synth_sample(std::size_t label, std::size_t frames, Rng& rng) {
    SkeletonSequence seq = class_template(label, frames);
    std::normal_distribution<double> noise(0.0, kSynthNoiseSigma);
    // Stored as f32 on disk; rounding here keeps file round-trips exact.
    for (double& v : seq.coords.values()) v = static_cast<double>(static_cast<float>(v + noise(rng)));
    return seq;
}

DatasetManifest synth_dataset(std::size_t num_classes, std::size_t per_class, std::size_t frames,
                              std::uint64_t seed, const std::filesystem::path& out_dir) {
    if (num_classes == 0 || per_class == 0 || frames == 0) {
        throw std::invalid_argument("synth: classes, per-class count and frames must be positive");
    }
    std::filesystem::create_directories(out_dir);
    DatasetManifest manifest;
    manifest.base_dir = out_dir;
    std::size_t index = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        for (std::size_t i = 0; i < per_class; ++i, ++index) {
            Rng rng = derive_stream(seed, index);
            const SkeletonSequence seq = synth_sample(k, frames, rng);
            std::ostringstream name;
            name << "sample_" << std::setw(5) << std::setfill('0') << index << ".iips";
            save_sequence(seq, out_dir / name.str());
            manifest.entries.push_back(
                {name.str(), k, static_cast<int>(index % 10) + 1, static_cast<int>(index % 3) + 1});
        }
    }
    save_manifest(manifest, out_dir / "manifest.tsv");
    return manifest;
}

}  // namespace iip
