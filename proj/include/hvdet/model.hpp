#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hvdet/attention.hpp"
#include "hvdet/autodiff.hpp"
#include "hvdet/encoding.hpp"
#include "hvdet/loss.hpp"
#include "hvdet/nn.hpp"
#include "hvdet/query.hpp"
#include "hvdet/rng.hpp"
#include "hvdet/tensor.hpp"

namespace hvdet {

inline constexpr std::size_t kStemStride = 8;

struct ModelConfig {
    std::size_t d = 64;
    std::size_t heads = 4;
    std::size_t ffn_hidden = 256;
    std::size_t n_enc = 2;
    std::size_t n_dec = 2;
    std::size_t num_queries = 25;
    AttentionKind attention_kind = AttentionKind::hv;
    AnchorScaleSet anchors = AnchorScaleSet::defaults();
    ContentInit content_init = ContentInit::from_box;
    QueryMode query_mode = QueryMode::ip_it;
    double dropout = 0.0;
    std::size_t num_classes = 3;

    void validate() const {
        if (d == 0 || heads == 0 || d % heads != 0)
            throw std::invalid_argument("ModelConfig: d must be a positive multiple of heads");
        if (num_queries < 1) throw std::invalid_argument("ModelConfig: K >= 1 required");
        if (num_classes < 1) throw std::invalid_argument("ModelConfig: need at least one class");
        if (dropout < 0.0 || dropout >= 1.0)
            throw std::invalid_argument("ModelConfig: dropout must be in [0,1)");
        if (content_init == ContentInit::from_box && d % 8 != 0)
            throw std::invalid_argument("ModelConfig: from_box content init needs d % 8 == 0");
        if (d % 4 != 0) throw std::invalid_argument("ModelConfig: 2-D encodings need d % 4 == 0");
        anchors.validate();
    }
};

/// Unnormalized decoder cross-attention weight for one (query, key) pair:
/// the content dot product plus the spatial dot product of the box query
/// against the positional key. All inputs are length-d vectors.
inline double decoder_cross_attention_weight(const Tensor& c_q, const Tensor& c_k,
                                             const Tensor& lambda_q, const Tensor& p_s,
                                             const Tensor& p_k) {
    const std::size_t d = c_q.numel();
    if (c_k.numel() != d || lambda_q.numel() != d || p_s.numel() != d || p_k.numel() != d)
        throw std::invalid_argument("decoder_cross_attention_weight: dim mismatch");
    double w = 0.0;
    for (std::size_t i = 0; i < d; ++i) w += c_q[i] * c_k[i] + lambda_q[i] * p_s[i] * p_k[i];
    return w;
}

namespace detail {

/// Standard multi-head attention over row sets; q_in/k_in may carry additive
/// positional content, values come from v_in.
inline ad::Var mha(const ad::Var& q_in, const ad::Var& k_in, const ad::Var& v_in,
                   const Linear& lq, const Linear& lk, const Linear& lv, const Linear& lo,
                   std::size_t heads) {
    const std::size_t d = lq.out_dim();
    const std::size_t dh = d / heads;
    const ad::Var q = lq.forward(q_in);
    const ad::Var k = lk.forward(k_in);
    const ad::Var v = lv.forward(v_in);
    ad::Var cat;
    for (std::size_t h = 0; h < heads; ++h) {
        const ad::Var scores =
            ad::scale(ad::matmul_nt(ad::slice_cols(q, h * dh, dh), ad::slice_cols(k, h * dh, dh)),
                      1.0 / std::sqrt(double(dh)));
        const ad::Var oh = ad::matmul(ad::softmax_rows(scores), ad::slice_cols(v, h * dh, dh));
        cat = h ? ad::concat_cols(cat, oh) : oh;
    }
    return lo.forward(cat);
}

/// Decoder cross-attention: the per-head score is the concatenated
/// [content | box-query] against [content key | positional key] dot product,
/// i.e. c_q.c_k + p_q.p_k, scaled by 1/sqrt(2 dh) for the doubled width.
inline ad::Var cross_attention(const ad::Var& content, const ad::Var& p_q, const ad::Var& enc,
                               const Tensor& p_k, const Linear& lq, const Linear& lk,
                               const Linear& lv, const Linear& lo, std::size_t heads,
                               std::vector<Tensor>* wout = nullptr) {
    const std::size_t d = lq.out_dim();
    const std::size_t dh = d / heads;
    const ad::Var cq = lq.forward(content);
    const ad::Var ck = lk.forward(enc);
    const ad::Var v = lv.forward(enc);
    const ad::Var pk = ad::constant(p_k);
    ad::Var cat;
    for (std::size_t h = 0; h < heads; ++h) {
        const ad::Var content_term =
            ad::matmul_nt(ad::slice_cols(cq, h * dh, dh), ad::slice_cols(ck, h * dh, dh));
        const ad::Var spatial_term =
            ad::matmul_nt(ad::slice_cols(p_q, h * dh, dh), ad::slice_cols(pk, h * dh, dh));
        const ad::Var alpha = ad::softmax_rows(ad::scale(ad::add(content_term, spatial_term),
                                                         1.0 / std::sqrt(2.0 * double(dh))));
        if (wout) wout->push_back(alpha->value);
        const ad::Var oh = ad::matmul(alpha, ad::slice_cols(v, h * dh, dh));
        cat = h ? ad::concat_cols(cat, oh) : oh;
    }
    return lo.forward(cat);
}

} // namespace detail

/// Frozen discrete routing: pins the top-K candidate selection so the forward
/// pass stays differentiable-in-the-FD-sense under parameter perturbations.
struct Routing {
    std::vector<std::size_t> selected;  // flat candidate indices, length K
};

struct LayerOutput {
    ad::Var class_logits;  // [K, C+1]
    ad::Var class_probs;   // elementwise sigmoid of the logits
    ad::Var boxes;         // [K, 4]
};

struct ForwardResult {
    std::size_t H = 0, W = 0;
    ad::Var enc;  // [H*W, d]
    CandidateSet candidates;
    std::vector<std::size_t> selected;
    std::vector<ReferencePoint> refs;
    std::vector<LayerOutput> layers;
    AttentionWeights cross_attn;  // first decoder layer, per head [K, H*W]
};

struct FrozenMatches {
    std::optional<MatchResult> init;
    std::vector<MatchResult> layers;
};

struct ModelLoss {
    std::optional<LossBreakdown> init;
    std::vector<LossBreakdown> layers;
    ad::Var total;
    MatchResult init_match;
    std::vector<MatchResult> layer_matches;
};

class Model {
public:
    ModelConfig cfg;
    ParamStore params;

    explicit Model(ModelConfig config, std::uint64_t seed = 1) : cfg(std::move(config)) {
        cfg.validate();
        Rng rng(seed);
        const std::size_t d = cfg.d;

        const std::size_t c1 = std::max<std::size_t>(4, d / 4);
        const std::size_t c2 = std::max<std::size_t>(8, d / 2);
        stem1_ = Conv::create(params, "stem.c0", 3, c1, 3, 2, 1, rng);
        stem2_ = Conv::create(params, "stem.c1", c1, c2, 3, 2, 1, rng);
        stem3_ = Conv::create(params, "stem.c2", c2, d, 3, 2, 1, rng);

        for (std::size_t l = 0; l < cfg.n_enc; ++l) {
            const std::string p = "enc" + std::to_string(l);
            EncoderLayer layer;
            layer.attn =
                AttentionParams::create(cfg.attention_kind, params, p + ".attn", d, cfg.heads, rng);
            layer.ln1 = LayerNorm::create(params, p + ".ln1", d);
            layer.ffn = Ffn::create(params, p + ".ffn", {d, cfg.ffn_hidden, d}, rng);
            layer.ln2 = LayerNorm::create(params, p + ".ln2", d);
            enc_.push_back(std::move(layer));
        }

        const bool image_dependent = cfg.query_mode != QueryMode::rb;
        if (image_dependent) {
            for (std::size_t s = 0; s < cfg.anchors.scales.size(); ++s) {
                const std::string p = "query.scale" + std::to_string(s);
                obj_heads_.push_back(Ffn::create(params, p + ".obj", {d, d, 2}, rng));
                cand_box_heads_.push_back(Ffn::create(params, p + ".box", {d, d, 4}, rng));
            }
            if (cfg.content_init == ContentInit::from_box)
                content_ffn_ = Ffn::create(params, "query.content_box", {d, d, d}, rng);
            else
                content_ffn_ = Ffn::create(params, "query.content_emb", {d, d, d}, rng);
        } else {
            // reference points and content queries are free parameters
            Tensor refs({cfg.num_queries, 2});
            for (std::size_t i = 0; i < refs.numel(); ++i) refs[i] = rng.uniform();
            learned_refs_ = params.add("query.ref_points", std::move(refs));
            learned_content_ = params.add("query.content",
                                          xavier_uniform({cfg.num_queries, d}, d, d, rng));
        }
        if (cfg.query_mode == QueryMode::ip_it)
            lambda_init_ = Ffn::create(params, "query.lambda", {d, d, d}, rng);
        else
            learned_lambda_ = params.add("query.lambda_table",
                                         xavier_uniform({cfg.num_queries, d}, d, d, rng));

        for (std::size_t l = 0; l < cfg.n_dec; ++l) {
            const std::string p = "dec" + std::to_string(l);
            DecoderLayer layer;
            layer.sq = Linear::create(params, p + ".self.q", d, d, rng);
            layer.sk = Linear::create(params, p + ".self.k", d, d, rng);
            layer.sv = Linear::create(params, p + ".self.v", d, d, rng);
            layer.so = Linear::create(params, p + ".self.out", d, d, rng);
            layer.ln1 = LayerNorm::create(params, p + ".ln1", d);
            layer.cq = Linear::create(params, p + ".cross.q", d, d, rng);
            layer.ck = Linear::create(params, p + ".cross.k", d, d, rng);
            layer.cv = Linear::create(params, p + ".cross.v", d, d, rng);
            layer.co = Linear::create(params, p + ".cross.out", d, d, rng);
            layer.ln2 = LayerNorm::create(params, p + ".ln2", d);
            layer.ffn = Ffn::create(params, p + ".ffn", {d, cfg.ffn_hidden, d}, rng);
            layer.ln3 = LayerNorm::create(params, p + ".ln3", d);
            if (l > 0) layer.lambda_ffn = Ffn::create(params, p + ".lambda", {d, d, d}, rng);
            dec_.push_back(std::move(layer));
        }

        class_head_ = Ffn::create(params, "head.class", {d, d, cfg.num_classes + 1}, rng);
        box_head_ = Ffn::create(params, "head.box", {d, d, 4}, rng);
    }

    // -- stem ----------------------------------------------------------------

    ad::Var stem(const Tensor& image, Rng* drop_rng = nullptr) const {
        if (image.rank() != 3 || image.size(0) != 3)
            throw std::invalid_argument("stem: expected a [3,H,W] image");
        if (image.size(1) % kStemStride != 0 || image.size(2) % kStemStride != 0)
            throw std::invalid_argument("stem: image sides must be divisible by " +
                                        std::to_string(kStemStride));
        (void)drop_rng;
        ad::Var h = ad::relu(stem1_.forward(ad::constant(image)));
        h = ad::relu(stem2_.forward(h));
        return stem3_.forward(h);
    }

    FeatureMap stem_forward(const Tensor& image) const {
        ad::NoGradGuard ng;
        const ad::Var m = stem(image);
        return FeatureMap(m->value.size(0), m->value.size(1), m->value.size(2), m->value);
    }

    // -- encoder ---------------------------------------------------------------

    /// Position-major encoder over an [H*W, d] map.
    ad::Var encode(const ad::Var& x0, std::size_t H, std::size_t W,
                   Rng* drop_rng = nullptr) const {
        const Tensor pe2d = grid_pe(H, W);
        const AxialPe axial = axial_pe(H, W);
        ad::Var x = x0;
        for (const auto& layer : enc_) {
            ad::Var a;
            switch (cfg.attention_kind) {
                case AttentionKind::global: a = global_attention(x, H, W, layer.attn, &pe2d); break;
                case AttentionKind::hv: a = hv_attention(x, H, W, layer.attn, &axial); break;
                case AttentionKind::cc: a = cc_attention(x, H, W, layer.attn); break;
            }
            x = layer.ln1.forward(ad::add(x, drop(a, drop_rng)));
            x = layer.ln2.forward(ad::add(x, drop(layer.ffn.forward(x), drop_rng)));
        }
        return x;
    }

    FeatureMap encoder_forward(const FeatureMap& fm) const {
        ad::NoGradGuard ng;
        if (fm.d != cfg.d) throw std::invalid_argument("encoder_forward: channel mismatch");
        const ad::Var y = encode(ad::constant(to_positions(fm)), fm.H, fm.W);
        return from_positions(y->value, fm.H, fm.W);
    }

    // -- full forward ------------------------------------------------------------

    ForwardResult forward(const Tensor& image, const Routing* frozen = nullptr,
                          bool capture_cross = false, Rng* drop_rng = nullptr) const {
        ForwardResult fr;
        const ad::Var map = stem(image, drop_rng);
        fr.H = map->value.size(1);
        fr.W = map->value.size(2);
        fr.enc = encode(ad::chw_to_positions(map), fr.H, fr.W, drop_rng);

        const std::size_t d = cfg.d;
        const std::size_t K = cfg.num_queries;
        ad::Var content, lambda0;

        if (cfg.query_mode == QueryMode::rb) {
            for (std::size_t qi = 0; qi < K; ++qi) {
                const double cx = std::clamp(learned_refs_->value.at(qi, 0), 0.0, 1.0);
                const double cy = std::clamp(learned_refs_->value.at(qi, 1), 0.0, 1.0);
                fr.refs.push_back({cx, cy, 0, 0});
            }
            content = learned_content_;
            lambda0 = learned_lambda_;
        } else {
            fr.candidates = score_candidates(fr.enc, fr.H, fr.W);
            const std::size_t total = fr.candidates.count();
            if (K > total)
                throw std::invalid_argument("forward: K exceeds the candidate count");
            if (frozen) {
                if (frozen->selected.size() != K)
                    throw std::invalid_argument("forward: frozen routing has wrong K");
                fr.selected = frozen->selected;
            } else {
                std::vector<double> probs(total);
                for (std::size_t i = 0; i < total; ++i) probs[i] = fr.candidates.prob_value(i);
                fr.selected = select_top_candidates(probs, K);
            }
            const std::size_t S = cfg.anchors.scales.size();
            std::vector<std::size_t> positions;
            for (std::size_t flat : fr.selected) {
                const std::size_t pos = flat / S;
                const auto [cx, cy] = cell_center(pos / fr.W, pos % fr.W, fr.H, fr.W);
                fr.refs.push_back({cx, cy, pos, flat % S});
                positions.push_back(pos);
            }
            const ad::Var cells = ad::rows(fr.enc, positions);
            if (cfg.content_init == ContentInit::from_embedding) {
                content = content_ffn_.forward(cells);
            } else {
                std::vector<ad::Var> rows;
                for (std::size_t flat : fr.selected)
                    rows.push_back(content_ffn_.forward(
                        ad::pe_box(fr.candidates.box_row(flat), d)));
                content = ad::stack_rows(rows);
            }
            lambda0 = (cfg.query_mode == QueryMode::ip_it) ? lambda_init_.forward(cells)
                                                           : learned_lambda_;
        }

        // constant spatial embeddings for the fixed reference points and keys
        Tensor p_s({K, d});
        for (std::size_t qi = 0; qi < K; ++qi) {
            const Tensor pe = sinusoidal_pe_2d(fr.refs[qi].cx, fr.refs[qi].cy, d);
            for (std::size_t c = 0; c < d; ++c) p_s.at(qi, c) = pe[c];
        }
        const ad::Var ps = ad::constant(p_s);
        const Tensor p_k = grid_pe(fr.H, fr.W);

        Tensor offsets({K, 4});
        for (std::size_t qi = 0; qi < K; ++qi) {
            offsets.at(qi, 0) = inverse_sigmoid(fr.refs[qi].cx);
            offsets.at(qi, 1) = inverse_sigmoid(fr.refs[qi].cy);
        }
        const ad::Var offs = ad::constant(offsets);

        ad::Var x = content;
        for (std::size_t l = 0; l < dec_.size(); ++l) {
            const DecoderLayer& layer = dec_[l];
            const ad::Var lambda = l == 0 ? lambda0 : layer.lambda_ffn.forward(x);
            const ad::Var p_q = compose_box_query(ps, lambda);

            const ad::Var qk = ad::add(x, p_q);
            const ad::Var sa =
                detail::mha(qk, qk, x, layer.sq, layer.sk, layer.sv, layer.so, cfg.heads);
            x = layer.ln1.forward(ad::add(x, drop(sa, drop_rng)));

            const ad::Var ca = detail::cross_attention(
                x, p_q, fr.enc, p_k, layer.cq, layer.ck, layer.cv, layer.co, cfg.heads,
                (capture_cross && l == 0) ? &fr.cross_attn.full : nullptr);
            x = layer.ln2.forward(ad::add(x, drop(ca, drop_rng)));
            x = layer.ln3.forward(ad::add(x, drop(layer.ffn.forward(x), drop_rng)));

            LayerOutput out;
            out.class_logits = class_head_.forward(x);
            out.class_probs = ad::sigmoid(out.class_logits);
            out.boxes = ad::sigmoid(ad::add(box_head_.forward(x), offs));
            fr.layers.push_back(std::move(out));
        }
        return fr;
    }

    ModelLoss compute_loss(const ForwardResult& fr, const std::vector<GroundTruthObject>& gts,
                           const FrozenMatches* frozen = nullptr) const {
        ModelLoss ml;
        ad::Var total;
        if (cfg.query_mode != QueryMode::rb) {
            std::vector<GroundTruthObject> binary = gts;
            for (auto& g : binary) g.class_id = 0;
            auto [lb, match] =
                loss_init(fr.candidates, binary,
                          frozen && frozen->init ? &*frozen->init : nullptr);
            total = lb.total;
            ml.init = std::move(lb);
            ml.init_match = std::move(match);
        }
        for (std::size_t l = 0; l < fr.layers.size(); ++l) {
            const MatchResult* forced =
                frozen && l < frozen->layers.size() ? &frozen->layers[l] : nullptr;
            auto [lb, match] =
                decoder_layer_loss(fr.layers[l].class_probs, fr.layers[l].boxes, gts, forced);
            total = total ? ad::add(total, lb.total) : lb.total;
            ml.layers.push_back(std::move(lb));
            ml.layer_matches.push_back(std::move(match));
        }
        ml.total = total;
        return ml;
    }

    // -- helpers ------------------------------------------------------------------

    CandidateSet score_candidates(const ad::Var& enc, std::size_t H, std::size_t W) const {
        CandidateSet cs;
        const std::size_t hw = H * W;
        for (std::size_t s = 0; s < cfg.anchors.scales.size(); ++s) {
            const ad::Var logits = obj_heads_[s].forward(enc);  // [HW, 2]
            cs.probs.push_back(ad::slice_cols(ad::softmax_rows(logits), 1, 1));
            const auto [aw, ah] = cfg.anchors.scales[s];
            Tensor prior({hw, 4});
            for (std::size_t pos = 0; pos < hw; ++pos) {
                const auto [cx, cy] = cell_center(pos / W, pos % W, H, W);
                prior.at(pos, 0) = inverse_sigmoid(cx);
                prior.at(pos, 1) = inverse_sigmoid(cy);
                prior.at(pos, 2) = inverse_sigmoid(aw);
                prior.at(pos, 3) = inverse_sigmoid(ah);
            }
            cs.boxes.push_back(ad::sigmoid(
                ad::add(cand_box_heads_[s].forward(enc), ad::constant(prior))));
        }
        return cs;
    }

    Tensor grid_pe(std::size_t H, std::size_t W) const {
        Tensor pe({H * W, cfg.d});
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                const auto [cx, cy] = cell_center(i, j, H, W);
                const Tensor p = sinusoidal_pe_2d(cx, cy, cfg.d);
                for (std::size_t c = 0; c < cfg.d; ++c) pe.at(i * W + j, c) = p[c];
            }
        return pe;
    }

    AxialPe axial_pe(std::size_t H, std::size_t W) const {
        AxialPe pe{Tensor({H, cfg.d}), Tensor({W, cfg.d})};
        for (std::size_t i = 0; i < H; ++i) {
            const Tensor p = sinusoidal_pe((double(i) + 0.5) / double(H), cfg.d);
            for (std::size_t c = 0; c < cfg.d; ++c) pe.row.at(i, c) = p[c];
        }
        for (std::size_t j = 0; j < W; ++j) {
            const Tensor p = sinusoidal_pe((double(j) + 0.5) / double(W), cfg.d);
            for (std::size_t c = 0; c < cfg.d; ++c) pe.col.at(j, c) = p[c];
        }
        return pe;
    }

private:
    struct EncoderLayer {
        AttentionParams attn;
        LayerNorm ln1;
        Ffn ffn;
        LayerNorm ln2;
    };
    struct DecoderLayer {
        Linear sq, sk, sv, so;
        LayerNorm ln1;
        Linear cq, ck, cv, co;
        LayerNorm ln2;
        Ffn ffn;
        LayerNorm ln3;
        Ffn lambda_ffn;  // internal layers only
    };

    ad::Var drop(const ad::Var& x, Rng* rng) const {
        return (rng && cfg.dropout > 0.0) ? ad::dropout(x, cfg.dropout, *rng) : x;
    }

    Conv stem1_, stem2_, stem3_;
    std::vector<EncoderLayer> enc_;
    std::vector<Ffn> obj_heads_, cand_box_heads_;
    Ffn content_ffn_, lambda_init_;
    ad::Var learned_refs_, learned_content_, learned_lambda_;
    std::vector<DecoderLayer> dec_;
    Ffn class_head_, box_head_;
};

} // namespace hvdet
