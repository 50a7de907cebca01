#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "hvdet/autodiff.hpp"
#include "hvdet/tensor.hpp"

namespace hvdet {

inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalClamp = 1e-8;
inline constexpr double kClsWeight = 2.0;
inline constexpr double kL1Weight = 5.0;
inline constexpr double kGiouWeight = 2.0;

struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;
};

struct GroundTruthObject {
    int class_id = 0;
    Box box;
};

// ---------------------------------------------------------------------------
// Scalar (value-level) losses, used for cost matrices and oracles.
// ---------------------------------------------------------------------------

inline double focal_loss(double p, int target) {
    const double pt = (target == 1) ? p : 1.0 - p;
    const double c = std::min(1.0 - kFocalClamp, std::max(kFocalClamp, pt));
    return -kFocalAlpha * std::pow(1.0 - c, kFocalGamma) * std::log(c);
}

inline double giou(const Box& a, const Box& b) {
    if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0)
        throw std::domain_error("giou: degenerate box");
    const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
    const double ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
    const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
    const double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    const double hull = (std::max(ax1, bx1) - std::min(ax0, bx0)) *
                        (std::max(ay1, by1) - std::min(ay0, by0));
    return inter / uni - (hull - uni) / hull;
}

inline double box_loss(const Box& a, const Box& b) {
    const double l1 = std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) +
                      std::abs(a.h - b.h);
    return kL1Weight * l1 + kGiouWeight * (1.0 - giou(a, b));
}

inline double match_cost(double prob, const Box& pred, const Box& gt) {
    return kClsWeight * focal_loss(prob, 1) + box_loss(pred, gt);
}

// ---------------------------------------------------------------------------
// Exact bipartite matching
// ---------------------------------------------------------------------------

struct MatchResult {
    std::vector<std::size_t> assignment;  // assignment[i] = prediction index of gt i
    double total_cost = 0.0;
};

namespace detail {

/// Jonker-Volgenant shortest augmenting path solver for a g x n matrix with
/// g <= n. Returns row -> column.
inline std::vector<int> solve_square_assignment(const std::vector<std::vector<double>>& cost) {
    const int g = static_cast<int>(cost.size());
    const int n = static_cast<int>(cost.empty() ? 0 : cost[0].size());
    std::vector<double> u(g + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= g; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = 0;
            double delta = std::numeric_limits<double>::infinity();
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> rowsol(g, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) rowsol[p[j] - 1] = j - 1;
    return rowsol;
}

/// Optimal assignment of a rectangular cost matrix (rows <= cols).
inline std::vector<std::size_t> solve_rect_assignment(const std::vector<std::vector<double>>& c) {
    const std::size_t g = c.size();
    const std::vector<int> rowsol = solve_square_assignment(c);
    std::vector<std::size_t> out(g);
    for (std::size_t i = 0; i < g; ++i) out[i] = static_cast<std::size_t>(rowsol[i]);
    return out;
}

inline double assignment_cost(const std::vector<std::vector<double>>& c,
                              const std::vector<std::size_t>& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += c[i][a[i]];
    return s;
}

} // namespace detail

/// Minimum-cost injective assignment of ground truths (rows) to predictions
/// (columns). For small instances equal-cost ties are canonicalized to the
/// lexicographically smallest assignment; large instances keep the solver's
/// deterministic choice.
inline MatchResult hungarian_match(const std::vector<std::vector<double>>& cost) {
    const std::size_t g = cost.size();
    if (g == 0) return {};
    const std::size_t n = cost[0].size();
    if (g > n) throw std::invalid_argument("hungarian_match: more ground truths than predictions");
    for (const auto& r : cost)
        if (r.size() != n) throw std::invalid_argument("hungarian_match: ragged cost matrix");

    std::vector<std::size_t> best = detail::solve_rect_assignment(cost);
    const double best_cost = detail::assignment_cost(cost, best);

    if (g <= 8 && n <= 16) {
        // lexicographic canonicalization: fix each row to the smallest column
        // that still admits an optimal completion
        const double tol = 1e-9 * std::max(1.0, std::abs(best_cost));
        std::vector<std::size_t> fixed;
        std::vector<char> col_used(n, 0);
        double fixed_cost = 0.0;
        for (std::size_t i = 0; i < g; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (col_used[j]) continue;
                // optimal completion of rows i+1..g-1 over the free columns
                std::vector<std::vector<double>> sub;
                std::vector<std::size_t> free_cols;
                for (std::size_t jj = 0; jj < n; ++jj)
                    if (!col_used[jj] && jj != j) free_cols.push_back(jj);
                for (std::size_t ii = i + 1; ii < g; ++ii) {
                    std::vector<double> r;
                    for (std::size_t jj : free_cols) r.push_back(cost[ii][jj]);
                    sub.push_back(std::move(r));
                }
                double rest = 0.0;
                if (!sub.empty()) {
                    const auto a = detail::solve_rect_assignment(sub);
                    rest = detail::assignment_cost(sub, a);
                }
                if (fixed_cost + cost[i][j] + rest <= best_cost + tol) {
                    fixed.push_back(j);
                    col_used[j] = 1;
                    fixed_cost += cost[i][j];
                    break;
                }
            }
        }
        if (fixed.size() == g) best = fixed;
    }

    MatchResult r;
    r.assignment = best;
    r.total_cost = detail::assignment_cost(cost, best);
    return r;
}

// ---------------------------------------------------------------------------
// Graph-level losses
// ---------------------------------------------------------------------------

namespace ad {

/// Sum of focal losses over a probability matrix with 0/1 targets.
inline Var focal_sum(const Var& p, const Tensor& targets) {
    if (!p->value.same_shape(targets)) throw std::invalid_argument("focal_sum: shape mismatch");
    // pt = p*t + (1-p)*(1-t)
    const Var t = constant(targets);
    Var one_minus_p = add_scalar(scale(p, -1.0), 1.0);
    Tensor one_minus_t = targets;
    for (std::size_t i = 0; i < one_minus_t.numel(); ++i) one_minus_t[i] = 1.0 - one_minus_t[i];
    Var pt = add(mul(p, t), mul(one_minus_p, constant(one_minus_t)));
    pt = clamp(pt, kFocalClamp, 1.0 - kFocalClamp);
    const Var om = add_scalar(scale(pt, -1.0), 1.0);  // (1 - pt)
    const Var loss = scale(mul(mul(om, om), vlog(pt)), -kFocalAlpha);
    return sum_all(loss);
}

inline Var focal_one(const Var& p, int target) {
    Tensor t(p->value.shape(), target == 1 ? 1.0 : 0.0);
    return focal_sum(p, t);
}

/// GIoU of two [1,4] (cx,cy,w,h) boxes.
inline Var giou(const Var& a, const Var& b) {
    const auto corner = [](const Var& x) {
        const Var cx = slice_cols(x, 0, 1), cy = slice_cols(x, 1, 1);
        const Var w = slice_cols(x, 2, 1), h = slice_cols(x, 3, 1);
        const Var hw = scale(w, 0.5), hh = scale(h, 0.5);
        return std::array<Var, 4>{sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
    };
    const auto [ax0, ay0, ax1, ay1] = corner(a);
    const auto [bx0, by0, bx1, by1] = corner(b);
    const Var zero = constant(Tensor({1, 1}, 0.0));
    const Var iw = maximum(zero, sub(minimum(ax1, bx1), maximum(ax0, bx0)));
    const Var ih = maximum(zero, sub(minimum(ay1, by1), maximum(ay0, by0)));
    const Var inter = mul(iw, ih);
    const Var area_a = mul(sub(ax1, ax0), sub(ay1, ay0));
    const Var area_b = mul(sub(bx1, bx0), sub(by1, by0));
    const Var uni = sub(add(area_a, area_b), inter);
    const Var hull = mul(sub(maximum(ax1, bx1), minimum(ax0, bx0)),
                         sub(maximum(ay1, by1), minimum(ay0, by0)));
    return sub(div(inter, uni), div(sub(hull, uni), hull));
}

inline Var l1_distance(const Var& a, const Var& b) { return sum_all(vabs(sub(a, b))); }

} // namespace ad

/// Per-site component breakdown; totals carry gradients.
struct LossBreakdown {
    ad::Var focal;  // sum of focal terms (unweighted)
    ad::Var l1;     // sum of l1 box terms (unweighted)
    ad::Var giou;   // sum of (1 - giou) terms (unweighted)
    ad::Var total;  // 2*focal + 5*l1 + 2*giou

    static LossBreakdown from_components(ad::Var focal, ad::Var l1, ad::Var giou) {
        LossBreakdown b;
        b.total = ad::add(ad::scale(focal, kClsWeight),
                          ad::add(ad::scale(l1, kL1Weight), ad::scale(giou, kGiouWeight)));
        b.focal = std::move(focal);
        b.l1 = std::move(l1);
        b.giou = std::move(giou);
        return b;
    }
};

/// Encoder-side candidate pool: per anchor scale, an object-probability
/// column [HW,1] and a box matrix [HW,4]. A candidate's flat index is
/// position * S + scale.
struct CandidateSet {
    std::vector<ad::Var> probs;  // per scale, [HW,1]
    std::vector<ad::Var> boxes;  // per scale, [HW,4]

    std::size_t positions() const { return probs.empty() ? 0 : probs[0]->value.rows(); }
    std::size_t scales() const { return probs.size(); }
    std::size_t count() const { return positions() * scales(); }

    double prob_value(std::size_t flat) const {
        return probs[flat % scales()]->value[flat / scales()];
    }
    Box box_value(std::size_t flat) const {
        const Tensor& b = boxes[flat % scales()]->value;
        const std::size_t p = flat / scales();
        return {b.at(p, 0), b.at(p, 1), b.at(p, 2), b.at(p, 3)};
    }
    ad::Var box_row(std::size_t flat) const {
        return ad::row(boxes[flat % scales()], flat / scales());
    }
};

inline ad::Var box_loss_terms(const ad::Var& pred_box, const Box& g, ad::Var& l1, ad::Var& gi) {
    const ad::Var gt_box = ad::constant(Tensor({1, 4}, {g.cx, g.cy, g.w, g.h}));
    l1 = ad::add(l1, ad::l1_distance(pred_box, gt_box));
    gi = ad::add(gi, ad::reshape(ad::add_scalar(ad::scale(ad::giou(pred_box, gt_box), -1.0), 1.0),
                                 {1}));
    return gt_box;
}

/// Binary set-prediction loss over all candidates: every candidate gets a
/// focal term (target 1 iff matched), matched candidates add a box term.
/// `forced` pins the assignment (gradient checking treats matching as
/// constant); otherwise it is recomputed from current values.
inline std::pair<LossBreakdown, MatchResult> loss_init(
    const CandidateSet& cands, const std::vector<GroundTruthObject>& gts,
    const MatchResult* forced = nullptr) {
    const std::size_t n = cands.count();
    const std::size_t s = cands.scales();

    MatchResult match;
    if (forced) {
        match = *forced;
    } else if (!gts.empty()) {
        std::vector<std::vector<double>> cost(gts.size(), std::vector<double>(n));
        for (std::size_t i = 0; i < gts.size(); ++i)
            for (std::size_t j = 0; j < n; ++j)
                cost[i][j] = match_cost(cands.prob_value(j), cands.box_value(j), gts[i].box);
        match = hungarian_match(cost);
    }

    std::vector<Tensor> targets(s, Tensor({cands.positions(), 1}));
    for (std::size_t flat : match.assignment) targets[flat % s][flat / s] = 1.0;
    ad::Var focal;
    for (std::size_t si = 0; si < s; ++si) {
        const ad::Var f = ad::focal_sum(cands.probs[si], targets[si]);
        focal = si ? ad::add(focal, f) : f;
    }

    ad::Var l1 = ad::constant(Tensor::scalar(0.0));
    ad::Var gi = ad::constant(Tensor::scalar(0.0));
    for (std::size_t i = 0; i < match.assignment.size(); ++i)
        box_loss_terms(cands.box_row(match.assignment[i]), gts[i].box, l1, gi);
    return {LossBreakdown::from_components(std::move(focal), std::move(l1), std::move(gi)),
            std::move(match)};
}

/// Per-decoder-layer detection loss. `class_probs` is [K, C+1] of per-class
/// sigmoid probabilities (last column = "no object"); matched queries target
/// their class one-vs-all, unmatched queries target the no-object column.
/// `boxes` is [K, 4].
inline std::pair<LossBreakdown, MatchResult> decoder_layer_loss(
    const ad::Var& class_probs, const ad::Var& boxes,
    const std::vector<GroundTruthObject>& gts, const MatchResult* forced = nullptr) {
    const std::size_t k = class_probs->value.rows();
    const std::size_t ncols = class_probs->value.cols();
    if (boxes->value.rows() != k) throw std::invalid_argument("decoder_layer_loss: K mismatch");

    MatchResult match;
    if (forced) {
        match = *forced;
    } else if (!gts.empty()) {
        std::vector<std::vector<double>> cost(gts.size(), std::vector<double>(k));
        for (std::size_t i = 0; i < gts.size(); ++i) {
            const std::size_t cls = static_cast<std::size_t>(gts[i].class_id);
            for (std::size_t j = 0; j < k; ++j) {
                const Box pb{boxes->value.at(j, 0), boxes->value.at(j, 1),
                             boxes->value.at(j, 2), boxes->value.at(j, 3)};
                cost[i][j] = match_cost(class_probs->value.at(j, cls), pb, gts[i].box);
            }
        }
        match = hungarian_match(cost);
    }

    Tensor targets({k, ncols});
    for (std::size_t j = 0; j < k; ++j) targets.at(j, ncols - 1) = 1.0;  // default: no object
    for (std::size_t i = 0; i < match.assignment.size(); ++i) {
        const std::size_t j = match.assignment[i];
        targets.at(j, ncols - 1) = 0.0;
        targets.at(j, static_cast<std::size_t>(gts[i].class_id)) = 1.0;
    }
    ad::Var focal = ad::focal_sum(class_probs, targets);

    ad::Var l1 = ad::constant(Tensor::scalar(0.0));
    ad::Var gi = ad::constant(Tensor::scalar(0.0));
    for (std::size_t i = 0; i < match.assignment.size(); ++i)
        box_loss_terms(ad::row(boxes, match.assignment[i]), gts[i].box, l1, gi);
    return {LossBreakdown::from_components(std::move(focal), std::move(l1), std::move(gi)),
            std::move(match)};
}

/// Deep-supervision sum: init site plus every decoder layer site.
inline ad::Var loss_total(const LossBreakdown& init, const std::vector<LossBreakdown>& layers) {
    if (layers.empty()) throw std::invalid_argument("loss_total: no decoder layers");
    ad::Var t = init.total;
    for (const auto& l : layers) t = ad::add(t, l.total);
    return t;
}

} // namespace hvdet
