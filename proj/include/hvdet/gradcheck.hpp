#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hvdet/autodiff.hpp"
#include "hvdet/nn.hpp"

namespace hvdet {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool all_pass = true;
    double worst = 0.0;
    std::string worst_name;

    void finalize(double tol) {
        for (auto& e : entries) {
            e.pass = e.max_rel_err < tol;
            if (!e.pass) all_pass = false;
            if (e.max_rel_err > worst) {
                worst = e.max_rel_err;
                worst_name = e.name;
            }
        }
    }
};

/// Central finite-difference check of analytic gradients for a scalar loss.
/// `loss_fn` must rebuild the graph from the current parameter values on
/// every call and be deterministic (same op-call sequence each time).
/// Relative error per element is |a - fd| / max(1, |a|, |fd|), reported as
/// the max over each parameter. Piecewise decisions (relu/abs/clamp/min/max)
/// are recorded on the first evaluation and replayed during the difference
/// evaluations, so kink crossings cannot masquerade as gradient errors.
inline GradCheckReport grad_check(const std::function<ad::Var()>& loss_fn,
                                  const std::vector<ParamStore::Entry>& params,
                                  double h = 1e-3, double tol = 1e-4) {
    GradCheckReport report;
    ad::BranchTape tape;
    ad::BranchTapeGuard tape_guard(&tape);

    for (const auto& e : params) e.var->grad = Tensor();
    ad::Var loss = loss_fn();
    if (!loss->value.all_finite())
        throw std::runtime_error("grad_check: non-finite loss");
    ad::backward(loss);
    tape.replay();

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& e : params)
        analytic.push_back(e.var->grad.numel() ? e.var->grad : Tensor(e.var->value.shape()));

    for (std::size_t p = 0; p < params.size(); ++p) {
        GradCheckEntry entry;
        entry.name = params[p].name;
        Tensor& theta = params[p].var->value;
        for (std::size_t i = 0; i < theta.numel(); ++i) {
            const double saved = theta[i];
            double fplus, fminus;
            {
                ad::NoGradGuard ng;
                theta[i] = saved + h;
                tape.rewind();
                fplus = loss_fn()->value[0];
                theta[i] = saved - h;
                tape.rewind();
                fminus = loss_fn()->value[0];
                theta[i] = saved;
            }
            const double fd = (fplus - fminus) / (2.0 * h);
            const double a = analytic[p][i];
            const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        report.entries.push_back(entry);
    }
    report.finalize(tol);
    return report;
}

} // namespace hvdet
