#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "hvdet/config.hpp"
#include "hvdet/metrics.hpp"
#include "hvdet/model.hpp"
#include "hvdet/synthdata.hpp"

namespace hvdet {

/// Decoupled-weight-decay adaptive-moment optimizer with two parameter
/// groups: the stem trains at its own (lower) rate, everything else at the
/// base rate.
class AdamW {
public:
    AdamW(const std::vector<ParamStore::Entry>& params, const OptimConfig& opt)
        : wd_(opt.weight_decay) {
        for (const auto& e : params) {
            const bool is_stem = e.name.rfind("stem.", 0) == 0;
            slots_.push_back({e.var, Tensor(e.var->value.shape()),
                              Tensor(e.var->value.shape()),
                              is_stem ? opt.stem_lr : opt.lr});
        }
    }

    /// One update from the currently accumulated gradients.
    void step(double lr_scale) {
        ++t_;
        const double bc1 = 1.0 - std::pow(kBeta1, double(t_));
        const double bc2 = 1.0 - std::pow(kBeta2, double(t_));
        for (auto& s : slots_) {
            if (s.var->grad.numel() == 0) continue;
            const double lr = s.base_lr * lr_scale;
            for (std::size_t i = 0; i < s.m.numel(); ++i) {
                const double g = s.var->grad[i];
                s.m[i] = kBeta1 * s.m[i] + (1.0 - kBeta1) * g;
                s.v[i] = kBeta2 * s.v[i] + (1.0 - kBeta2) * g * g;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                s.var->value[i] -=
                    lr * (mhat / (std::sqrt(vhat) + kEps) + wd_ * s.var->value[i]);
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

private:
    struct Slot {
        ad::Var var;
        Tensor m, v;
        double base_lr;
    };
    std::vector<Slot> slots_;
    double wd_ = 0.0;
    std::size_t t_ = 0;
};

/// Scale all gradients so the global L2 norm is at most max_norm.
inline double clip_grad_norm(const std::vector<ParamStore::Entry>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& e : params)
        for (std::size_t i = 0; i < e.var->grad.numel(); ++i)
            sq += e.var->grad[i] * e.var->grad[i];
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (const auto& e : params)
            for (std::size_t i = 0; i < e.var->grad.numel(); ++i) e.var->grad[i] *= s;
    }
    return norm;
}

struct TrainLogRow {
    std::size_t step = 0;
    double l_init = 0.0;
    std::vector<double> l_dec;
    double total = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    std::vector<double> epoch_mean_loss;
};

inline void write_loss_log(const std::string& path, const TrainResult& tr,
                           std::size_t n_dec, const std::string& cfg_hash) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_loss_log: cannot open " + path);
    os << "# schema=hvdet.losslog.v1 config_hash=" << cfg_hash << "\n";
    os << "step,l_init";
    for (std::size_t l = 0; l < n_dec; ++l) os << ",l_dec" << l;
    os << ",total,lr\n";
    os.precision(17);
    for (const auto& r : tr.log) {
        os << r.step << ',' << r.l_init;
        for (double v : r.l_dec) os << ',' << v;
        os << ',' << r.total << ',' << r.lr << "\n";
    }
}

/// Full training run over freshly generated scenes, one scene per step,
/// scene order reshuffled per epoch from the run seed. Aborts on a
/// non-finite loss.
inline TrainResult train_model(Model& model, const RunConfig& rc,
                               const std::function<void(std::size_t, std::size_t)>& progress =
                                   {}) {
    rc.validate();
    AdamW opt(model.params.entries(), rc.optim);
    TrainResult tr;
    std::size_t step = 0;

    std::vector<std::size_t> order(rc.train_data.count);
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < rc.optim.epochs; ++epoch) {
        Rng shuffle_rng(rc.seed ^ Rng::splitmix64(0x5Eu + epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        const double lr_scale =
            (epoch >= rc.optim.lr_drop_epoch) ? rc.optim.lr_drop_factor : 1.0;

        double epoch_sum = 0.0;
        for (std::size_t idx : order) {
            const Scene scene = generate_scene(rc.train_data, idx);
            Rng drop_rng(rc.seed ^ Rng::splitmix64(0xD0ull + step));
            const ForwardResult fr = model.forward(scene.image, nullptr, false, &drop_rng);
            const ModelLoss ml = model.compute_loss(fr, scene.objects);
            if (!ml.total->value.all_finite())
                throw std::runtime_error("train: non-finite loss at step " +
                                         std::to_string(step) + " (scene " +
                                         std::to_string(idx) + ")");
            model.params.zero_grad();
            ad::backward(ml.total);
            clip_grad_norm(model.params.entries(), rc.optim.clip_norm);
            opt.step(lr_scale);

            TrainLogRow row;
            row.step = step;
            row.l_init = ml.init ? ml.init->total->value[0] : 0.0;
            for (const auto& lb : ml.layers) row.l_dec.push_back(lb.total->value[0]);
            row.total = ml.total->value[0];
            row.lr = rc.optim.lr * lr_scale;
            epoch_sum += row.total;
            tr.log.push_back(std::move(row));
            ++step;
            if (progress) progress(step, rc.optim.epochs * rc.train_data.count);
        }
        tr.epoch_mean_loss.push_back(epoch_sum / double(order.size()));
    }
    return tr;
}

/// Convert the last decoder layer's predictions of one forward pass into
/// scored detections: per query, the best class by one-vs-all probability,
/// scored by that probability times the not-"no object" probability.
inline std::vector<Detection> extract_detections(const ForwardResult& fr, int scene_id,
                                                 std::size_t num_classes) {
    std::vector<Detection> out;
    if (fr.layers.empty()) return out;
    const LayerOutput& last = fr.layers.back();
    const Tensor& probs = last.class_probs->value;
    const Tensor& boxes = last.boxes->value;
    for (std::size_t q = 0; q < probs.rows(); ++q) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < num_classes; ++c)
            if (probs.at(q, c) > probs.at(q, best)) best = c;
        Detection d;
        d.scene_id = scene_id;
        d.class_id = static_cast<int>(best);
        d.box = {boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
        d.score = probs.at(q, best) * (1.0 - probs.at(q, num_classes));
        out.push_back(d);
    }
    return out;
}

struct EvalResult {
    double ap = 0.0;
    std::vector<Detection> detections;
    std::vector<GtInstance> gts;
};

inline EvalResult evaluate_model(const Model& model, const DatasetSpec& data,
                                 double iou_threshold = 0.5) {
    ad::NoGradGuard ng;
    EvalResult er;
    for (std::size_t i = 0; i < data.count; ++i) {
        const Scene scene = generate_scene(data, i);
        const ForwardResult fr = model.forward(scene.image);
        for (auto& d : extract_detections(fr, int(i), model.cfg.num_classes))
            er.detections.push_back(std::move(d));
        for (const auto& o : scene.objects)
            er.gts.push_back({int(i), o.class_id, o.box});
    }
    er.ap = evaluate_ap(er.detections, er.gts, iou_threshold);
    return er;
}

/// Chance-level reference: K uniform boxes with uniform classes and scores
/// per scene, from a seeded stream.
inline double random_box_baseline_ap(const DatasetSpec& data, std::size_t k,
                                     std::size_t num_classes, std::uint64_t seed,
                                     double iou_threshold = 0.5) {
    Rng rng(seed);
    std::vector<Detection> dets;
    std::vector<GtInstance> gts;
    for (std::size_t i = 0; i < data.count; ++i) {
        const Scene scene = generate_scene(data, i);
        for (const auto& o : scene.objects) gts.push_back({int(i), o.class_id, o.box});
        for (std::size_t q = 0; q < k; ++q) {
            Detection d;
            d.scene_id = int(i);
            d.class_id = int(rng.uniform_int(num_classes));
            const double w = rng.uniform(0.05, 0.95);
            const double h = rng.uniform(0.05, 0.95);
            d.box = {rng.uniform(w / 2, 1.0 - w / 2), rng.uniform(h / 2, 1.0 - h / 2), w, h};
            d.score = rng.uniform();
            dets.push_back(d);
        }
    }
    return evaluate_ap(dets, gts, iou_threshold);
}

} // namespace hvdet
