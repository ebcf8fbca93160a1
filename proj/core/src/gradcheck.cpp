#include "infosteer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "infosteer/error.hpp"
#include "infosteer/rng.hpp"

namespace infosteer {

GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& loss_fn, std::span<Tensor<double>> params,
                                  const GradCheckOptions& options) {
    if (params.empty()) {
        throw GraphError("finite_diff_check: no parameters given");
    }
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        Tensor<double> loss = loss_fn();
        tape.backward(loss);
    }

    // Flat (param, index) coordinate list, subsampled without replacement.
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].numel(); ++i) {
            coords.emplace_back(p, i);
        }
    }
    if (coords.size() > options.samples) {
        Rng rng(options.seed);
        rng.shuffle(coords);
        coords.resize(options.samples);
        std::sort(coords.begin(), coords.end());
    }

    auto probe = [&](std::size_t p, std::size_t i) {
        const double value = loss_fn().item();
        if (!std::isfinite(value)) {
            throw NumericError("finite_diff_check: non-finite loss probing parameter " + std::to_string(p) +
                               " index " + std::to_string(i));
        }
        return value;
    };

    GradCheckReport report;
    for (auto [p, i] : coords) {
        auto data = params[p].mutable_data();
        const double original = data[i];
        data[i] = original + options.eps;
        const double plus = probe(p, i);
        data[i] = original - options.eps;
        const double minus = probe(p, i);
        data[i] = original;

        const double fd = (plus - minus) / (2.0 * options.eps);
        const double tape = params[p].has_grad() ? params[p].grad()[i] : 0.0;
        const double rel = std::abs(tape - fd) / std::max(std::abs(fd), options.floor);
        ++report.checked;
        if (rel > report.max_rel_error || report.checked == 1) {
            report.max_rel_error = rel;
            report.worst_param = p;
            report.worst_index = i;
            report.worst_tape = tape;
            report.worst_fd = fd;
        }
    }
    return report;
}

}  // namespace infosteer
