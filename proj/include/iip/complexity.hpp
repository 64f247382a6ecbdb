#pragma once

#include "iip/autograd.hpp"
#include "iip/model.hpp"

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace iip {

/// Cost of one operation of a single-sample forward pass. One madd is one
/// multiply-accumulate; aux_flops counts softmax and normalization work at
/// kElementwiseFlops per element.
struct CostItem {
    std::string group;
    std::string name;
    std::uint64_t madds = 0;
    std::uint64_t aux_flops = 0;
    std::uint64_t params = 0;
};

struct CostReport {
    std::vector<CostItem> items;

    std::uint64_t total_madds() const;
    std::uint64_t total_aux_flops() const;
    std::uint64_t total_params() const;
    std::uint64_t group_madds(const std::string& group) const;
    std::uint64_t group_params(const std::string& group) const;
    /// Sum of madds over items whose name ends with `suffix`.
    std::uint64_t madds_with_suffix(const std::string& suffix) const;
    std::vector<std::string> groups() const;
};

/// Closed-form counts for one sample in eval mode.
CostReport count_model(const ModelConfig& config);

/// Counts gathered by running one eval-mode forward pass under a
/// ScopedCostCounter.
CostCounter instrumented_count(const ModelConfig& config);

/// Madds of the part-to-part spatial score maps (query-key products and
/// weighted sums over part keys only) across all layers.
std::uint64_t spatial_part_map_madds(const CostReport& report);

struct RatioRow {
    std::string group;
    double madds_ratio = 0.0;   // b / a
    double params_ratio = 0.0;  // b / a
};

struct ComparisonReport {
    std::vector<RatioRow> rows;  // per group, then "total"
};

ComparisonReport compare_configs(const CostReport& a, const CostReport& b);

void print_report(std::ostream& os, const CostReport& report);
void print_report_csv(std::ostream& os, const CostReport& report);
void print_comparison(std::ostream& os, const ComparisonReport& cmp);

}  // namespace iip
