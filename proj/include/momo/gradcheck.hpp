#pragma once

#include <functional>
#include <string>
#include <vector>

#include "momo/tensor.hpp"

namespace momo {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
    int elements_checked = 0;
    std::string worst;  // "input k elem i: analytic vs numeric"
};

template <class T>
inline double gradcheck_default_step() {
    return sizeof(T) == 4 ? 1e-3 : 1e-5;
}

// Central finite differences against the tape's analytic gradients.
// f must be scalar-valued and a pure function of (tape, inputs). A failing
// check is a report, not an exception.
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>(Tape<T>&, std::vector<Tensor<T>>&)>& f,
                           std::vector<Tensor<T>> inputs, double tol,
                           double h = 0.0) {
    if (h == 0.0) h = gradcheck_default_step<T>();

    GradCheckReport report;
    report.tol = tol;

    Tape<T> tape;
    for (auto& in : inputs) in.set_requires_grad(true);
    for (auto& in : inputs) in.zero_grad();
    Tensor<T> out = f(tape, inputs);
    tape.backward(out);
    std::vector<std::vector<T>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) analytic.push_back(in.grad());

    Tape<T> probe;
    probe.set_recording(false);
    for (size_t k = 0; k < inputs.size(); ++k) {
        auto& vals = inputs[k].values();
        for (size_t i = 0; i < vals.size(); ++i) {
            const T orig = vals[i];
            vals[i] = orig + static_cast<T>(h);
            double fp = static_cast<double>(f(probe, inputs).item());
            vals[i] = orig - static_cast<T>(h);
            double fm = static_cast<double>(f(probe, inputs).item());
            vals[i] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double a = static_cast<double>(analytic[k][i]);
            double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
            double rel = std::abs(a - numeric) / denom;
            ++report.elements_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = "input " + std::to_string(k) + " elem " + std::to_string(i) + ": analytic " +
                               std::to_string(a) + " vs numeric " + std::to_string(numeric);
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace momo
