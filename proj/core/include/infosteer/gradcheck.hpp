#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "infosteer/tensor.hpp"

namespace infosteer {

struct GradCheckOptions {
    double eps = 1e-4;
    std::size_t samples = 100;  // coordinates probed; all of them when fewer exist
    std::uint64_t seed = 0;
    double floor = 1e-6;  // denominator floor for the relative error
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_tape = 0.0;
    double worst_fd = 0.0;
};

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` builds the scalar loss from `params`; it is called once under a
/// fresh tape for the analytic gradient and then repeatedly without a tape for
/// the probes. Relative error per coordinate is
/// |g_tape - g_fd| / max(|g_fd|, floor). Parameter grads are reset first and
/// hold the tape gradient on return. Throws NumericError when a probe is not
/// finite.
GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::span<Tensor<double>> params, const GradCheckOptions& options = {});

}  // namespace infosteer
