#pragma once

// Central-difference gradient checking. The loss functor is evaluated
// tape-free at perturbed parameter values, so the check stays independent of
// the analytic backward path it verifies. Relative error follows
// |analytic - fd| / max(1, |fd|).

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "avloc/nn.hpp"
#include "avloc/tensor.hpp"

namespace avloc {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::int64_t worst_index = -1;
    std::int64_t coords_checked = 0;
};

// Compares p->grad (already populated by a backward pass) against central
// differences of `loss_fn`. `max_coords` limits the coordinates probed per
// parameter (0 = all); subsampled coordinates are drawn deterministically
// from `seed`.
template <typename S>
GradCheckReport check_param_gradients(const std::vector<ParamT<S>*>& params,
                                      const std::function<double()>& loss_fn, double h,
                                      std::int64_t max_coords = 0, std::uint64_t seed = 0) {
    GradCheckReport report;
    std::mt19937_64 rng(seed);
    for (ParamT<S>* p : params) {
        const std::int64_t n = p->numel();
        std::vector<std::int64_t> coords;
        if (max_coords <= 0 || n <= max_coords) {
            coords.resize(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            std::vector<std::int64_t> all(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            std::shuffle(all.begin(), all.end(), rng);
            coords.assign(all.begin(), all.begin() + static_cast<long>(max_coords));
        }
        for (std::int64_t i : coords) {
            const S orig = p->value[static_cast<size_t>(i)];
            p->value[static_cast<size_t>(i)] = orig + static_cast<S>(h);
            const double f_plus = loss_fn();
            p->value[static_cast<size_t>(i)] = orig - static_cast<S>(h);
            const double f_minus = loss_fn();
            p->value[static_cast<size_t>(i)] = orig;
            const double fd = (f_plus - f_minus) / (2.0 * h);
            const double analytic = static_cast<double>(p->grad[static_cast<size_t>(i)]);
            const double rel = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p->name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

// Same comparison for a leaf input's gradient read off the tape.
template <typename S>
double check_leaf_gradient(const std::vector<S>& analytic, std::vector<S>& data,
                           const std::function<double()>& loss_fn, double h) {
    double max_rel = 0.0;
    for (size_t i = 0; i < data.size(); ++i) {
        const S orig = data[i];
        data[i] = orig + static_cast<S>(h);
        const double f_plus = loss_fn();
        data[i] = orig - static_cast<S>(h);
        const double f_minus = loss_fn();
        data[i] = orig;
        const double fd = (f_plus - f_minus) / (2.0 * h);
        const double rel = std::abs(static_cast<double>(analytic[i]) - fd) / std::max(1.0, std::abs(fd));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

} // namespace avloc
