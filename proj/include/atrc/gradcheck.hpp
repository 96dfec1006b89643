// Finite-difference verification of the tape gradients. Runs in double
// precision with central differences; reports the worst relative error over
// all checked coordinates.

#pragma once

#include <functional>
#include <sstream>

#include "atrc/autodiff.hpp"
#include "atrc/rng.hpp"

namespace atrc {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::string worst;  // "input/index: analytic vs numeric"

    bool ok(double tol) const { return max_rel_error < tol; }
};

// f builds a fresh scalar graph from the given leaves on every call.
// When max_coords_per_input > 0, a deterministic subsample of coordinates is
// perturbed instead of every entry (used for large parameter tensors).
inline GradCheckReport gradcheck(
    const std::function<VarT<double>(const std::vector<VarT<double>>&)>& f,
    const std::vector<VarT<double>>& inputs, double h = 1e-5,
    std::size_t max_coords_per_input = 0, std::uint64_t coord_seed = 17) {
    for (const auto& in : inputs) in->requires_grad = true;

    auto out = f(inputs);
    if (out->value.size() != 1) fail("gradcheck", "function must be scalar-valued");
    if (!std::isfinite(out->value[0])) fail("gradcheck", "non-finite function value");
    backward(out);

    std::vector<TensorT<double>> analytic;
    analytic.reserve(inputs.size());
    for (const auto& in : inputs)
        analytic.push_back(in->has_grad() ? in->grad : TensorT<double>(in->value.shape()));

    auto eval = [&]() {
        auto y = f(inputs);
        if (!std::isfinite(y->value[0])) fail("gradcheck", "non-finite function value");
        return y->value[0];
    };

    GradCheckReport report;
    for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
        TensorT<double>& x = inputs[ii]->value;
        std::vector<std::size_t> coords;
        if (max_coords_per_input == 0 || x.size() <= max_coords_per_input) {
            coords.resize(x.size());
            for (std::size_t i = 0; i < x.size(); ++i) coords[i] = i;
        } else {
            CounterRng rng(coord_seed, {ii});
            for (std::size_t i = 0; i < max_coords_per_input; ++i)
                coords.push_back(rng.below(x.size()));
        }
        for (std::size_t c : coords) {
            const double orig = x[c];
            x[c] = orig + h;
            const double fp = eval();
            x[c] = orig - h;
            const double fm = eval();
            x[c] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[ii][c];
            const double rel = std::abs(a - numeric) /
                               std::max({std::abs(a), std::abs(numeric), 1e-6});
            ++report.coords_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                std::ostringstream os;
                os << "input " << ii << " coord " << c << ": analytic " << a << " vs numeric " << numeric;
                report.worst = os.str();
            }
        }
    }
    return report;
}

}  // namespace atrc
