#pragma once

#include "iip/autograd.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace iip {

/// Builds the computation under test from leaves bound to the inputs. The
/// returned Var may have any shape; non-scalar outputs are contracted with a
/// fixed random weighting before differentiation.
using GradFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Compares reverse-mode gradients of every input against central finite
/// differences with step `eps`. The error of one input is
/// ||analytic - numeric||_2 / max(||analytic||_2 + ||numeric||_2, 1e-12);
/// the result holds the maximum over inputs. When `max_entries` is nonzero at
/// most that many coordinates per input are probed (chosen by `seed`).
GradcheckResult gradcheck(const std::string& name, const GradFn& fn, const std::vector<Tensor>& inputs,
                          double eps = 1e-5, std::size_t max_entries = 0, std::uint64_t seed = 0);

/// The built-in suite run by the `gradcheck` command: every differentiable
/// kernel, the partition encoder, the attention variants and a one-layer
/// model.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed);

}  // namespace iip
