#pragma once

// Central finite-difference oracle for the tape. Lives on the test side of
// every dual-route gradient check: analytic backward vs numeric differences.

#include <functional>
#include <string>
#include <vector>

#include "tsasr/autodiff.hpp"

namespace tsasr {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    double max_rel_err() const {
        double m = 0.0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_err);
        return m;
    }
};

// f builds a scalar loss from parameter Vars bound in the given order.
using GradCheckFn = std::function<Var(GradTape&, const std::vector<Var>&)>;

inline double gradcheck_eval(const GradCheckFn& f, const std::vector<std::pair<std::string, Tensor>>& params) {
    GradTape tape;
    tape.recording = false;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& [name, value] : params) {
        (void)name;
        vars.push_back(tape.constant(value));
    }
    const Tensor& out = f(tape, vars).value();
    require_dim(out.numel() == 1, "gradcheck: function must be scalar");
    if (!std::isfinite(out.data[0])) throw NumericError("gradcheck: non-finite function value");
    return out.data[0];
}

inline GradCheckReport finite_difference_gradcheck(const GradCheckFn& f,
                                                   std::vector<std::pair<std::string, Tensor>> params,
                                                   double epsilon = 1e-5) {
    require(epsilon >= 1e-7 && epsilon <= 1e-3, "gradcheck: epsilon out of [1e-7, 1e-3]");

    GradTape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& [name, value] : params) vars.push_back(tape.parameter(name, value));
    Var loss = f(tape, vars);
    require_dim(loss.value().numel() == 1, "gradcheck: function must be scalar");
    if (!std::isfinite(loss.value().data[0])) throw NumericError("gradcheck: non-finite function value");
    tape.backward(loss);

    GradCheckReport report;
    for (size_t p = 0; p < params.size(); ++p) {
        const Tensor analytic = tape.grad(vars[p]);
        GradCheckEntry entry;
        entry.name = params[p].first;
        for (size_t i = 0; i < params[p].second.data.size(); ++i) {
            const double orig = params[p].second.data[i];
            params[p].second.data[i] = orig + epsilon;
            const double up = gradcheck_eval(f, params);
            params[p].second.data[i] = orig - epsilon;
            const double down = gradcheck_eval(f, params);
            params[p].second.data[i] = orig;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double a = analytic.data[i];
            const double abs_err = std::fabs(a - numeric);
            const double rel_err = abs_err / std::max(1e-6, std::fabs(a) + std::fabs(numeric));
            entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
            entry.max_rel_err = std::max(entry.max_rel_err, rel_err);
        }
        report.entries.push_back(entry);
    }
    return report;
}

}  // namespace tsasr
