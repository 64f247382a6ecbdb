#pragma once

#include "iip/attention.hpp"
#include "iip/partition.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace iip {

enum class HeadMode { class_token, avg_pool };
enum class LayerStyle { split, flat };
enum class PartitionKind { parts, identity };

/// Thrown for invalid configuration values or keys.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
    std::size_t layers = 4;
    std::size_t embed_channels = 128;  // C_P
    std::size_t joint_channels = 64;   // C_o
    std::size_t heads = 8;
    std::size_t ffn_ratio = 2;
    std::size_t num_classes = 60;
    std::size_t frames = 32;
    std::size_t persons = 1;
    PartitionKind partition = PartitionKind::parts;
    HeadMode head = HeadMode::class_token;
    AttentionMode attention = AttentionMode::iipa;
    LayerStyle style = LayerStyle::split;
    bool positional = true;
    double dropout = 0.0;

    PartitionMap partition_map() const;
    TokenGrid grid(std::size_t batch) const;
    void validate() const;

    /// Sets one `key = value` entry; throws ConfigError for unknown keys or
    /// malformed values.
    void set(const std::string& key, const std::string& value);
    std::map<std::string, std::string> to_map() const;
    static ModelConfig from_map(const std::map<std::string, std::string>& kv);

    bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
    Norm norm1;
    AttentionParams spatial;  // flat attention in LayerStyle::flat
    Norm norm2;
    AttentionParams temporal;  // unused in LayerStyle::flat
    Norm norm3;
    Affine ffn1;
    Affine ffn2;
};

struct ModelParams {
    ModelConfig config;
    ParamSet set;
    PartitionEncoderParams encoder;
    std::size_t cls_token = 0;
    std::optional<std::size_t> pos_spatial;
    std::optional<std::size_t> pos_temporal;
    std::vector<LayerParams> layers;
    Affine head;
};

/// Affine weights ~ U(+-1/sqrt(fan_in)), biases zero, class token and
/// positional embeddings ~ N(0, 0.02^2). Deterministic in `seed`.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

struct ForwardOptions {
    bool training = false;
    /// Per-sample part index zeroed by PartMask (-1: none). Empty: none.
    std::vector<std::ptrdiff_t> part_mask;
    /// Dropout stream; required when training with dropout > 0.
    Rng* rng = nullptr;
    AttentionTrace* trace = nullptr;
    /// Receives the token tensor entering the first layer and leaving every
    /// layer.
    std::vector<Var>* layer_outputs = nullptr;
};

/// Logits [B x num_classes] for sequences already resampled to
/// config.frames frames.
Var forward(Bound& bound, const ModelParams& params, std::span<const SkeletonSequence> batch,
            const ForwardOptions& options);
/// Same, from packed joint rows (see pack_joint_rows).
Var forward_rows(Bound& bound, const ModelParams& params, Var joints, std::size_t batch,
                 const ForwardOptions& options);

/// Logits of one sequence, eval or train mode, on a private tape.
Tensor forward(const SkeletonSequence& seq, ModelParams& params, SampleMode mode = SampleMode::eval);

// ---------------------------------------------------------------------------
// Checkpoints: "IIPW", u32 version, u32 byte length + `key=value` lines of
// the model config and metadata, u32 tensor count, then per tensor u32 name
// length, UTF-8 name, u32 rank, u32 dims, f64 payload (all little-endian).

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelParams params;
    std::map<std::string, std::string> metadata;
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::map<std::string, std::string>& metadata = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace iip
