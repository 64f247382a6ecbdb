#include "iip/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace iip {

// ---------------------------------------------------------------------------
// Config

PartitionMap ModelConfig::partition_map() const {
    return partition == PartitionKind::parts ? PartitionMap::ntu25_parts() : PartitionMap::identity(kNtuJoints);
}

TokenGrid ModelConfig::grid(std::size_t batch) const {
    return TokenGrid{batch, frames, persons, partition_map().part_count()};
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(layers, "layers");
    positive(embed_channels, "embed_channels");
    positive(joint_channels, "joint_channels");
    positive(heads, "heads");
    positive(ffn_ratio, "ffn_ratio");
    positive(num_classes, "num_classes");
    positive(frames, "frames");
    positive(persons, "persons");
    if (embed_channels % heads != 0) {
        throw ConfigError("heads (" + std::to_string(heads) + ") must divide embed_channels (" +
                          std::to_string(embed_channels) + ")");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& value) {
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + value + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double d = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return d;
    } catch (const std::logic_error&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "on" || value == "1") return true;
    if (value == "false" || value == "off" || value == "0") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + value + "'");
}

template <typename E>
E parse_enum(const std::string& key, const std::string& value, std::initializer_list<std::pair<const char*, E>> opts) {
    for (const auto& [name, e] : opts) {
        if (value == name) return e;
    }
    std::string allowed;
    for (const auto& [name, e] : opts) allowed += (allowed.empty() ? "" : "|") + std::string(name);
    throw ConfigError("config key '" + key + "' expects " + allowed + ", got '" + value + "'");
}

std::string fmt_double(double d) {
    std::ostringstream os;
    os.precision(17);
    os << d;
    return os.str();
}

}  // namespace

void ModelConfig::set(const std::string& key, const std::string& value) {
    if (key == "layers") layers = parse_size(key, value);
    else if (key == "embed_channels") embed_channels = parse_size(key, value);
    else if (key == "joint_channels") joint_channels = parse_size(key, value);
    else if (key == "heads") heads = parse_size(key, value);
    else if (key == "ffn_ratio") ffn_ratio = parse_size(key, value);
    else if (key == "num_classes") num_classes = parse_size(key, value);
    else if (key == "frames") frames = parse_size(key, value);
    else if (key == "persons") persons = parse_size(key, value);
    else if (key == "partition")
        partition = parse_enum<PartitionKind>(key, value, {{"parts", PartitionKind::parts},
                                                           {"identity", PartitionKind::identity}});
    else if (key == "head")
        head = parse_enum<HeadMode>(key, value, {{"class_token", HeadMode::class_token},
                                                 {"avg_pool", HeadMode::avg_pool}});
    else if (key == "attention")
        attention = parse_enum<AttentionMode>(key, value, {{"iipa", AttentionMode::iipa},
                                                           {"standard", AttentionMode::standard}});
    else if (key == "style")
        style = parse_enum<LayerStyle>(key, value, {{"split", LayerStyle::split}, {"flat", LayerStyle::flat}});
    else if (key == "positional") positional = parse_bool(key, value);
    else if (key == "dropout") dropout = parse_double(key, value);
    else throw ConfigError("unknown model config key '" + key + "'");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
    return {
        {"layers", std::to_string(layers)},
        {"embed_channels", std::to_string(embed_channels)},
        {"joint_channels", std::to_string(joint_channels)},
        {"heads", std::to_string(heads)},
        {"ffn_ratio", std::to_string(ffn_ratio)},
        {"num_classes", std::to_string(num_classes)},
        {"frames", std::to_string(frames)},
        {"persons", std::to_string(persons)},
        {"partition", partition == PartitionKind::parts ? "parts" : "identity"},
        {"head", head == HeadMode::class_token ? "class_token" : "avg_pool"},
        {"attention", attention == AttentionMode::iipa ? "iipa" : "standard"},
        {"style", style == LayerStyle::split ? "split" : "flat"},
        {"positional", positional ? "true" : "false"},
        {"dropout", fmt_double(dropout)},
    };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    for (const auto& [k, v] : kv) c.set(k, v);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Parameters

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng = derive_stream(seed, 0);
    ModelParams mp;
    mp.config = config;
    const PartitionMap map = config.partition_map();
    const std::size_t c = config.embed_channels;
    mp.encoder = add_partition_encoder(mp.set, map, config.joint_channels, c, rng);

    std::normal_distribution<double> small(0.0, 0.02);
    auto gaussian = [&](Shape shape) {
        Tensor t(std::move(shape));
        for (double& v : t.values()) v = small(rng);
        return t;
    };
    mp.cls_token = mp.set.add("cls_token", gaussian({1, c}), ParamKind::no_decay);
    if (config.positional) {
        mp.pos_spatial = mp.set.add("pos_spatial", gaussian({config.grid(1).tokens_per_frame(), c}),
                                    ParamKind::no_decay);
        mp.pos_temporal = mp.set.add("pos_temporal", gaussian({config.frames, c}), ParamKind::no_decay);
    }
    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string p = "layer" + std::to_string(l);
        LayerParams lp;
        lp.norm1 = add_layernorm(mp.set, p + ".norm1", c);
        if (config.style == LayerStyle::split) {
            lp.spatial = add_attention(mp.set, p + ".s_attn", c, config.heads, config.attention, rng);
            lp.norm2 = add_layernorm(mp.set, p + ".norm2", c);
            lp.temporal = add_attention(mp.set, p + ".t_attn", c, config.heads, config.attention, rng);
        } else {
            lp.spatial = add_attention(mp.set, p + ".attn", c, config.heads, config.attention, rng);
        }
        lp.norm3 = add_layernorm(mp.set, p + ".norm3", c);
        lp.ffn1 = add_affine(mp.set, p + ".ffn1", c, c * config.ffn_ratio, rng);
        lp.ffn2 = add_affine(mp.set, p + ".ffn2", c * config.ffn_ratio, c, rng);
        mp.layers.push_back(lp);
    }
    mp.head = add_affine(mp.set, "head", c, config.num_classes, rng);
    return mp;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Var dropout(Tape& tape, Var x, double rate, Rng* rng) {
    if (!rng) throw std::invalid_argument("dropout > 0 in training needs ForwardOptions::rng");
    Tensor mask(x.shape());
    std::bernoulli_distribution keep(1.0 - rate);
    for (double& m : mask.values()) m = keep(*rng) ? 1.0 / (1.0 - rate) : 0.0;
    return mul(x, tape.constant(std::move(mask)));
}

}  // namespace

Var forward_rows(Bound& bound, const ModelParams& params, Var joints, std::size_t batch,
                 const ForwardOptions& options) {
    const ModelConfig& cfg = params.config;
    const PartitionMap map = cfg.partition_map();
    const TokenGrid grid = cfg.grid(batch);
    const std::size_t t = grid.tokens_per_sample();
    const std::size_t n = t + 1;
    if (!options.part_mask.empty() && options.part_mask.size() != batch) {
        throw ShapeError("forward: part_mask needs one entry per sample");
    }

    Var tokens = partition_encode(bound, params.encoder, map, joints, grid, options.training, options.part_mask);

    if (params.pos_spatial && params.pos_temporal) {
        std::vector<std::ptrdiff_t> spatial(grid.tokens()), temporal(grid.tokens());
        for (std::size_t r = 0; r < grid.tokens(); ++r) {
            const std::size_t i = r % t;
            spatial[r] = static_cast<std::ptrdiff_t>(i % grid.tokens_per_frame());
            temporal[r] = static_cast<std::ptrdiff_t>(i / grid.tokens_per_frame());
        }
        tokens = add(tokens, gather_rows(bound[*params.pos_spatial], spatial));
        tokens = add(tokens, gather_rows(bound[*params.pos_temporal], temporal));
    }

    // Prepend the class token to every sample: rows (b, cls, tokens...).
    const Var pieces[] = {bound[params.cls_token], tokens};
    std::vector<std::ptrdiff_t> layout(batch * n);
    for (std::size_t b = 0; b < batch; ++b) {
        layout[b * n] = 0;
        for (std::size_t i = 0; i < t; ++i) layout[b * n + 1 + i] = static_cast<std::ptrdiff_t>(1 + b * t + i);
    }
    Var x = gather_rows(concat_rows(pieces), layout);
    if (options.layer_outputs) options.layer_outputs->push_back(x);

    for (const LayerParams& lp : params.layers) {
        if (cfg.style == LayerStyle::split) {
            x = add(x, s_iipa(bound, apply(bound, lp.norm1, x), lp.spatial, grid, options.trace));
            x = add(x, t_iipa(bound, apply(bound, lp.norm2, x), lp.temporal, grid, options.trace));
        } else {
            x = add(x, flat_attention(bound, apply(bound, lp.norm1, x), lp.spatial, grid, options.trace));
        }
        Var h = relu(apply(bound, lp.ffn1, apply(bound, lp.norm3, x)));
        if (options.training && cfg.dropout > 0.0) h = dropout(bound.tape(), h, cfg.dropout, options.rng);
        x = add(x, apply(bound, lp.ffn2, h));
        if (options.layer_outputs) options.layer_outputs->push_back(x);
    }

    Var pooled;
    if (cfg.head == HeadMode::class_token) {
        std::vector<std::ptrdiff_t> rows(batch);
        for (std::size_t b = 0; b < batch; ++b) rows[b] = static_cast<std::ptrdiff_t>(b * n);
        pooled = gather_rows(x, rows);
    } else {
        std::vector<std::ptrdiff_t> rows;
        rows.reserve(batch * t);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < t; ++i) rows.push_back(static_cast<std::ptrdiff_t>(b * n + 1 + i));
        pooled = group_mean_rows(gather_rows(x, rows), t);
    }
    return apply(bound, params.head, pooled);
}

Var forward(Bound& bound, const ModelParams& params, std::span<const SkeletonSequence> batch,
            const ForwardOptions& options) {
    const ModelConfig& cfg = params.config;
    for (const auto& s : batch) {
        if (s.frames() != cfg.frames) {
            throw ShapeError("forward: sequence has " + std::to_string(s.frames()) + " frames, model expects " +
                             std::to_string(cfg.frames) + " (resample first)");
        }
        if (s.joints() != kNtuJoints) {
            throw ShapeError("forward: sequence has " + std::to_string(s.joints()) + " joints, expected 25");
        }
    }
    Var joints = bound.tape().constant(pack_joint_rows(batch, cfg.persons));
    return forward_rows(bound, params, joints, batch.size(), options);
}

Tensor forward(const SkeletonSequence& seq, ModelParams& params, SampleMode mode) {
    Tape tape;
    Bound bound(tape, params.set);
    ForwardOptions opts;
    opts.training = mode == SampleMode::train;
    Var logits = forward(bound, params, std::span<const SkeletonSequence>(&seq, 1), opts);
    return logits.value().reshaped({params.config.num_classes});
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[4] = {'I', 'I', 'P', 'W'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f64(std::string& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated in ") + what);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint32_t u32(const char* what) {
        auto s = take(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
        return v;
    }
    double f64(const char* what) {
        auto s = take(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
        return std::bit_cast<double>(v);
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

constexpr const char* kMetaPrefix = "meta.";

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::map<std::string, std::string>& metadata) {
    std::string text;
    for (const auto& [k, v] : params.config.to_map()) text += k + "=" + v + "\n";
    for (const auto& [k, v] : metadata) {
        if (k.find('=') != std::string::npos || v.find('\n') != std::string::npos) {
            throw std::invalid_argument("checkpoint metadata entries must not contain '=' or newlines");
        }
        text += kMetaPrefix + k + "=" + v + "\n";
    }

    std::string out(kCkptMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    put_u32(out, static_cast<std::uint32_t>(params.set.size()));
    for (const Parameter& p : params.set) {
        put_u32(out, static_cast<std::uint32_t>(p.name.size()));
        out += p.name;
        put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
        for (std::size_t d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : p.value.values()) put_f64(out, v);
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Reader in(bytes);
    if (in.take(4, "magic") != std::string_view(kCkptMagic, 4)) throw FormatError("bad checkpoint magic");
    const std::uint32_t version = in.u32("version");
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const std::string text(in.take(in.u32("config length"), "config"));

    std::map<std::string, std::string> config_kv, meta;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("malformed checkpoint config line '" + line + "'");
        const std::string key = line.substr(0, eq);
        if (key.rfind(kMetaPrefix, 0) == 0) meta[key.substr(std::strlen(kMetaPrefix))] = line.substr(eq + 1);
        else config_kv[key] = line.substr(eq + 1);
    }

    Checkpoint ck{init_params(ModelConfig::from_map(config_kv), 0), std::move(meta)};
    const std::uint32_t count = in.u32("tensor count");
    if (count != ck.params.set.size()) {
        throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, config needs " +
                          std::to_string(ck.params.set.size()));
    }
    for (Parameter& p : ck.params.set) {
        const std::string name(in.take(in.u32("name length"), "name"));
        if (name != p.name) throw FormatError("checkpoint tensor '" + name + "' where '" + p.name + "' expected");
        Shape shape(in.u32("rank"));
        for (auto& d : shape) d = in.u32("shape");
        if (shape != p.value.shape()) {
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", config needs " +
                              shape_str(p.value.shape()));
        }
        for (double& v : p.value.values()) v = in.f64("payload");
        p.value.require_finite("load_checkpoint");
    }
    if (!in.done()) throw FormatError("trailing bytes after checkpoint payload");
    return ck;
}

}  // namespace iip
