#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "hvdet/autodiff.hpp"
#include "hvdet/encoding.hpp"
#include "hvdet/nn.hpp"
#include "hvdet/tensor.hpp"

namespace hvdet {

/// Normalized 2-D location anchoring a query's box prediction.
struct ReferencePoint {
    double cx = 0, cy = 0;
    std::size_t source_index = 0;  // flat encoder position (row-major)
    std::size_t scale_index = 0;   // anchor scale that produced it
};

/// Normalized (w, h) prior extents; candidates are estimated per scale.
struct AnchorScaleSet {
    std::vector<std::pair<double, double>> scales;

    static AnchorScaleSet defaults() { return {{{0.1, 0.1}, {0.2, 0.2}, {0.4, 0.4}}}; }

    void validate() const {
        if (scales.empty()) throw std::invalid_argument("anchor scale set is empty");
        for (auto [w, h] : scales)
            if (w <= 0 || w >= 1 || h <= 0 || h >= 1)
                throw std::invalid_argument("anchor scale components must lie in (0,1)");
    }
};

enum class ContentInit { from_embedding, from_box };
enum class QueryMode { rb, ip, ip_it };

inline std::string to_string(ContentInit m) {
    return m == ContentInit::from_embedding ? "from_embedding" : "from_box";
}
inline ContentInit content_init_from(const std::string& s) {
    if (s == "from_embedding") return ContentInit::from_embedding;
    if (s == "from_box") return ContentInit::from_box;
    throw std::invalid_argument("unknown content init mode: " + s);
}
inline std::string to_string(QueryMode m) {
    switch (m) {
        case QueryMode::rb: return "rb";
        case QueryMode::ip: return "ip";
        case QueryMode::ip_it: return "ip_it";
    }
    return "?";
}
inline QueryMode query_mode_from(const std::string& s) {
    if (s == "rb") return QueryMode::rb;
    if (s == "ip") return QueryMode::ip;
    if (s == "ip_it") return QueryMode::ip_it;
    throw std::invalid_argument("unknown query mode: " + s);
}

/// p_q = lambda_q ⊙ p_s, elementwise.
inline ad::Var compose_box_query(const ad::Var& p_s, const ad::Var& lambda_q) {
    if (p_s->value.numel() != lambda_q->value.numel())
        throw std::invalid_argument("compose_box_query: length mismatch");
    return ad::mul(lambda_q, p_s);
}

/// lambda_q = FFN(encoder embedding at the reference cell).
/// `enc` is the position-major encoder output [H*W, d].
inline ad::Var predict_transformation(const ad::Var& enc, std::size_t source_index,
                                      const Ffn& ffn) {
    if (source_index >= enc->value.rows())
        throw std::out_of_range("predict_transformation: point outside grid");
    return ffn.forward(ad::row(enc, source_index));
}

/// Per-scale 2-logit objectness over every grid cell: one [H*W, 2] matrix per head.
inline std::vector<ad::Var> objectness_scores(const ad::Var& enc,
                                              const std::vector<Ffn>& heads) {
    std::vector<ad::Var> out;
    out.reserve(heads.size());
    for (const auto& h : heads) out.push_back(h.forward(enc));
    return out;
}

/// softmax component 1 of a 2-logit vector
inline double object_probability(double logit0, double logit1) {
    const double m = std::max(logit0, logit1);
    const double e0 = std::exp(logit0 - m), e1 = std::exp(logit1 - m);
    return e1 / (e0 + e1);
}

/// Top-K candidates by object probability, descending; ties broken by
/// ascending flat index (row-major position, then scale).
/// `probs[(i*W + j) * S + s]` is the probability of candidate (cell, scale).
inline std::vector<std::size_t> select_top_candidates(const std::vector<double>& probs,
                                                      std::size_t k) {
    if (k > probs.size())
        throw std::invalid_argument("select_top_candidates: K exceeds candidate count");
    std::vector<std::size_t> idx(probs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (probs[a] != probs[b]) return probs[a] > probs[b];
                          return a < b;
                      });
    idx.resize(k);
    return idx;
}

/// Center of grid cell (row i, col j) in normalized coordinates.
inline std::pair<double, double> cell_center(std::size_t i, std::size_t j, std::size_t H,
                                             std::size_t W) {
    return {(static_cast<double>(j) + 0.5) / static_cast<double>(W),
            (static_cast<double>(i) + 0.5) / static_cast<double>(H)};
}

inline std::vector<ReferencePoint> select_reference_points(const std::vector<double>& probs,
                                                           std::size_t k, std::size_t H,
                                                           std::size_t W, std::size_t S) {
    if (probs.size() != H * W * S)
        throw std::invalid_argument("select_reference_points: score count mismatch");
    std::vector<ReferencePoint> pts;
    for (std::size_t flat : select_top_candidates(probs, k)) {
        const std::size_t pos = flat / S;
        const auto [cx, cy] = cell_center(pos / W, pos % W, H, W);
        pts.push_back({cx, cy, pos, flat % S});
    }
    return pts;
}

/// b = sigmoid(FFN(x_cell) + inverse_sigmoid([cx cy cw ch])), a [1,4] box.
inline ad::Var estimate_candidate_box(const ad::Var& enc, std::size_t source_index,
                                      double cell_cx, double cell_cy, double anchor_w,
                                      double anchor_h, const Ffn& box_ffn) {
    if (anchor_w <= 0 || anchor_w >= 1 || anchor_h <= 0 || anchor_h >= 1)
        throw std::invalid_argument("estimate_candidate_box: anchor components must be in (0,1)");
    const Tensor prior({1, 4}, {inverse_sigmoid(cell_cx), inverse_sigmoid(cell_cy),
                                inverse_sigmoid(anchor_w), inverse_sigmoid(anchor_h)});
    const ad::Var logits = box_ffn.forward(ad::row(enc, source_index));
    return ad::sigmoid(ad::add(logits, ad::constant(prior)));
}

/// First-layer content query.
inline ad::Var init_content_query_from_embedding(const ad::Var& enc, std::size_t source_index,
                                                 const Ffn& ffn) {
    return ffn.forward(ad::row(enc, source_index));
}

inline ad::Var init_content_query_from_box(const ad::Var& box, std::size_t dim, const Ffn& ffn) {
    return ffn.forward(ad::pe_box(box, dim));
}

/// Per-layer box prediction: sigmoid(FFN(f) + [logit(cx), logit(cy), 0, 0]).
inline ad::Var box_head(const ad::Var& decoder_embedding, const ReferencePoint& ref,
                        const Ffn& ffn) {
    const Tensor offs({1, 4},
                      {inverse_sigmoid(ref.cx), inverse_sigmoid(ref.cy), 0.0, 0.0});
    return ad::sigmoid(ad::add(ffn.forward(decoder_embedding), ad::constant(offs)));
}

} // namespace hvdet
