#pragma once

#include <algorithm>
#include <set>
#include <vector>

#include "hvdet/loss.hpp"

namespace hvdet {

struct Detection {
    int scene_id = 0;
    int class_id = 0;
    Box box;
    double score = 0.0;
};

struct GtInstance {
    int scene_id = 0;
    int class_id = 0;
    Box box;
};

inline double iou(const Box& a, const Box& b) {
    const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
    const double ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
    const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
    const double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

namespace detail {

/// All-point interpolated AP for one class. Detections are sorted by
/// descending confidence (ties by original index); each is a true positive if
/// it claims a so-far-unmatched ground truth in its scene with IoU above the
/// threshold (the best-overlapping one).
inline double class_ap(std::vector<Detection> dets, const std::vector<GtInstance>& gts,
                       double iou_threshold) {
    if (gts.empty()) return dets.empty() ? 1.0 : 0.0;
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;
    });

    std::vector<char> claimed(gts.size(), 0);
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (std::size_t oi : order) {
        const Detection& det = dets[oi];
        double best = iou_threshold;
        std::size_t best_gt = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (claimed[g] || gts[g].scene_id != det.scene_id) continue;
            const double v = iou(det.box, gts[g].box);
            if (v >= best) {
                best = v;
                best_gt = g;
            }
        }
        if (best_gt < gts.size()) {
            claimed[best_gt] = 1;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(double(tp) / double(tp + fp));
        recall.push_back(double(tp) / double(gts.size()));
    }
    if (precision.empty()) return 0.0;

    // all-point interpolation: running max of precision from the right
    for (std::size_t i = precision.size() - 1; i-- > 0;)
        precision[i] = std::max(precision[i], precision[i + 1]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

} // namespace detail

/// Mean over per-class all-point interpolated AP at one IoU threshold.
/// Classes considered are those present in either list; no ground truths and
/// no detections at all is defined as 1.0.
inline double evaluate_ap(const std::vector<Detection>& detections,
                          const std::vector<GtInstance>& gts, double iou_threshold = 0.5) {
    std::set<int> classes;
    for (const auto& d : detections) classes.insert(d.class_id);
    for (const auto& g : gts) classes.insert(g.class_id);
    if (classes.empty()) return 1.0;
    double sum = 0.0;
    for (int cls : classes) {
        std::vector<Detection> d;
        std::vector<GtInstance> g;
        for (const auto& det : detections)
            if (det.class_id == cls) d.push_back(det);
        for (const auto& gt : gts)
            if (gt.class_id == cls) g.push_back(gt);
        sum += detail::class_ap(std::move(d), g, iou_threshold);
    }
    return sum / double(classes.size());
}

} // namespace hvdet
