#include "iip/complexity.hpp"

#include <algorithm>
#include <iomanip>

namespace iip {

std::uint64_t CostReport::total_madds() const {
    std::uint64_t s = 0;
    for (const auto& i : items) s += i.madds;
    return s;
}

std::uint64_t CostReport::total_aux_flops() const {
    std::uint64_t s = 0;
    for (const auto& i : items) s += i.aux_flops;
    return s;
}

std::uint64_t CostReport::total_params() const {
    std::uint64_t s = 0;
    for (const auto& i : items) s += i.params;
    return s;
}

std::uint64_t CostReport::group_madds(const std::string& group) const {
    std::uint64_t s = 0;
    for (const auto& i : items)
        if (i.group == group) s += i.madds;
    return s;
}

std::uint64_t CostReport::group_params(const std::string& group) const {
    std::uint64_t s = 0;
    for (const auto& i : items)
        if (i.group == group) s += i.params;
    return s;
}

std::uint64_t CostReport::madds_with_suffix(const std::string& suffix) const {
    std::uint64_t s = 0;
    for (const auto& i : items) {
        if (i.name.size() >= suffix.size() && i.name.compare(i.name.size() - suffix.size(), suffix.size(), suffix) == 0)
            s += i.madds;
    }
    return s;
}

std::vector<std::string> CostReport::groups() const {
    std::vector<std::string> out;
    for (const auto& i : items)
        if (std::find(out.begin(), out.end(), i.group) == out.end()) out.push_back(i.group);
    return out;
}

namespace {

using u64 = std::uint64_t;

class Builder {
public:
    explicit Builder(CostReport& r) : report_(r) {}

    void affine(const std::string& group, const std::string& name, u64 rows, u64 in, u64 out, bool bias = true) {
        report_.items.push_back({group, name, rows * in * out, 0, in * out + (bias ? out : 0)});
    }
    void norm(const std::string& group, const std::string& name, u64 elements, u64 params) {
        report_.items.push_back({group, name, 0, kElementwiseFlops * elements, params});
    }
    void item(const std::string& group, const std::string& name, u64 madds, u64 aux, u64 params) {
        report_.items.push_back({group, name, madds, aux, params});
    }

private:
    CostReport& report_;
};

/// Attention block costs. `outer` blocks of `inner` queries each attend over
/// inner + 1 keys (class key included); the class query attends over n keys.
void split_block(Builder& b, const std::string& group, const std::string& prefix, u64 n, u64 tokens, u64 c,
                 u64 heads, u64 outer, u64 inner, bool intra) {
    b.affine(group, prefix + ".q", n, c, c);
    b.affine(group, prefix + ".k", n, c, c);
    b.affine(group, prefix + ".v", n, c, c);
    b.item(group, prefix + ".class_map", 2 * n * c, kElementwiseFlops * heads * n, 0);
    b.item(group, prefix + ".part_maps", 2 * outer * inner * inner * c, kElementwiseFlops * heads * outer * inner * inner,
           0);
    b.item(group, prefix + ".class_column", 2 * outer * inner * c, kElementwiseFlops * heads * outer * inner, 0);
    b.affine(group, prefix + ".out", n, c, c);
    if (intra) b.affine(group, prefix + ".intra", tokens, c, c);
}

}  // namespace

CostReport count_model(const ModelConfig& config) {
    config.validate();
    CostReport report;
    Builder b(report);
    const PartitionMap map = config.partition_map();
    const TokenGrid grid = config.grid(1);
    const u64 co = config.joint_channels;
    const u64 c = config.embed_channels;
    const u64 h = config.heads;
    const u64 f = config.frames;
    const u64 q = grid.tokens_per_frame();
    const u64 t = grid.tokens_per_sample();
    const u64 n = t + 1;
    const u64 joint_rows = f * config.persons * map.joints;
    const u64 m = map.max_slots();
    const bool intra = config.attention == AttentionMode::iipa;

    b.affine("encoder", "encoder.lift1", joint_rows, kCoordChannels, co);
    b.norm("encoder", "encoder.bn1", joint_rows * co, 2 * co);
    b.affine("encoder", "encoder.lift2", joint_rows, co, co);
    b.norm("encoder", "encoder.bn2", joint_rows * co, 2 * co);
    b.affine("encoder", "encoder.embed", t, m * co, c);

    b.item("embedding", "cls_token", 0, 0, c);
    if (config.positional) {
        b.item("embedding", "pos_spatial", 0, 0, q * c);
        b.item("embedding", "pos_temporal", 0, 0, f * c);
    }

    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string p = "layer" + std::to_string(l);
        b.norm("norm", p + ".norm1", n * c, 2 * c);
        if (config.style == LayerStyle::split) {
            split_block(b, "spatial_attention", p + ".s_attn", n, t, c, h, f, q, intra);
            b.norm("norm", p + ".norm2", n * c, 2 * c);
            split_block(b, "temporal_attention", p + ".t_attn", n, t, c, h, q, f, intra);
        } else {
            const std::string a = p + ".attn";
            b.affine("flat_attention", a + ".q", n, c, c);
            b.affine("flat_attention", a + ".k", n, c, c);
            b.affine("flat_attention", a + ".v", n, c, c);
            b.item("flat_attention", a + ".score_map", 2 * n * n * c, kElementwiseFlops * h * n * n, 0);
            b.affine("flat_attention", a + ".out", n, c, c);
            if (intra) b.affine("flat_attention", a + ".intra", t, c, c);
        }
        b.norm("norm", p + ".norm3", n * c, 2 * c);
        b.affine("ffn", p + ".ffn1", n, c, c * config.ffn_ratio);
        b.affine("ffn", p + ".ffn2", n, c * config.ffn_ratio, c);
    }
    b.affine("head", "head", 1, c, config.num_classes);
    return report;
}

CostCounter instrumented_count(const ModelConfig& config) {
    ModelParams params = init_params(config, 0);
    SkeletonSequence seq(config.frames, kNtuJoints, config.persons);
    CostCounter counter;
    {
        ScopedCostCounter scope(counter);
        forward(seq, params, SampleMode::eval);
    }
    return counter;
}

std::uint64_t spatial_part_map_madds(const CostReport& report) {
    std::uint64_t s = 0;
    for (const auto& i : report.items) {
        if (i.group == "spatial_attention" && i.name.ends_with(".part_maps")) s += i.madds;
    }
    return s;
}

ComparisonReport compare_configs(const CostReport& a, const CostReport& b) {
    auto ratio = [](std::uint64_t num, std::uint64_t den) {
        return den == 0 ? (num == 0 ? 1.0 : 0.0) : static_cast<double>(num) / static_cast<double>(den);
    };
    ComparisonReport cmp;
    std::vector<std::string> groups = a.groups();
    for (const auto& g : b.groups())
        if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
    for (const auto& g : groups) {
        cmp.rows.push_back({g, ratio(b.group_madds(g), a.group_madds(g)), ratio(b.group_params(g), a.group_params(g))});
    }
    cmp.rows.push_back({"total", ratio(b.total_madds(), a.total_madds()), ratio(b.total_params(), a.total_params())});
    return cmp;
}

void print_report(std::ostream& os, const CostReport& report) {
    std::size_t width = 4;
    for (const auto& i : report.items) width = std::max(width, i.name.size());
    os << std::left << std::setw(static_cast<int>(width) + 2) << "name" << std::right << std::setw(16) << "madds"
       << std::setw(14) << "aux_flops" << std::setw(12) << "params" << '\n';
    for (const auto& i : report.items) {
        os << std::left << std::setw(static_cast<int>(width) + 2) << i.name << std::right << std::setw(16) << i.madds
           << std::setw(14) << i.aux_flops << std::setw(12) << i.params << '\n';
    }
    os << std::left << std::setw(static_cast<int>(width) + 2) << "TOTAL" << std::right << std::setw(16)
       << report.total_madds() << std::setw(14) << report.total_aux_flops() << std::setw(12) << report.total_params()
       << '\n';
}

void print_report_csv(std::ostream& os, const CostReport& report) {
    os << "group,name,madds,aux_flops,params\n";
    for (const auto& i : report.items) {
        os << i.group << ',' << i.name << ',' << i.madds << ',' << i.aux_flops << ',' << i.params << '\n';
    }
    os << "total,total," << report.total_madds() << ',' << report.total_aux_flops() << ',' << report.total_params()
       << '\n';
}

void print_comparison(std::ostream& os, const ComparisonReport& cmp) {
    os << std::left << std::setw(22) << "group" << std::right << std::setw(14) << "madds_ratio" << std::setw(14)
       << "params_ratio" << '\n';
    os << std::fixed << std::setprecision(4);
    for (const auto& r : cmp.rows) {
        os << std::left << std::setw(22) << r.group << std::right << std::setw(14) << r.madds_ratio << std::setw(14)
           << r.params_ratio << '\n';
    }
    os << std::defaultfloat;
}

}  // namespace iip
