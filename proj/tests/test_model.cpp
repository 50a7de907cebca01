#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "hvdet/model.hpp"
#include "hvdet/rng.hpp"

using namespace hvdet;

namespace {

Tensor random_image(std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    Tensor img({3, side, side});
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
    return img;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.ffn_hidden = 12;
    cfg.n_enc = 1;
    cfg.n_dec = 2;
    cfg.num_queries = 3;
    cfg.num_classes = 2;
    return cfg;
}

} // namespace

TEST_CASE("config validation rejects inconsistent settings") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.d = 12;  // not divisible by 8, required by the box-embedding init
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.content_init = ContentInit::from_embedding;
    CHECK_NOTHROW(cfg.validate());
    cfg = tiny_config();
    cfg.dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("stem downsamples by a fixed factor of eight") {
    ModelConfig cfg = tiny_config();
    cfg.d = 32;
    const Model m(cfg, 1);
    const FeatureMap fm = m.stem_forward(random_image(64, 9));
    CHECK(fm.d == 32);
    CHECK(fm.H == 64 / kStemStride);
    CHECK(fm.W == 8);
    CHECK(fm.data.all_finite());
    CHECK_THROWS_AS(m.stem_forward(Tensor({3, 60, 60})), std::invalid_argument);
    CHECK_THROWS_AS(m.stem_forward(Tensor({1, 64, 64})), std::invalid_argument);
}

TEST_CASE("stem maps a zero image to a zero map") {
    // all conv biases start at zero, so zero input stays zero through the stack
    const Model m(tiny_config(), 3);
    const FeatureMap fm = m.stem_forward(Tensor({3, 16, 16}));
    for (std::size_t i = 0; i < fm.data.numel(); ++i) CHECK(fm.data[i] == 0.0);
}

TEST_CASE("same config and seed give identical parameters and outputs") {
    const Model a(tiny_config(), 11), b(tiny_config(), 11), c(tiny_config(), 12);
    REQUIRE(a.params.entries().size() == b.params.entries().size());
    bool seed_matters = false;
    for (std::size_t i = 0; i < a.params.entries().size(); ++i) {
        const auto& ea = a.params.entries()[i];
        const auto& eb = b.params.entries()[i];
        CHECK(ea.name == eb.name);
        CHECK(max_abs_diff(ea.var->value, eb.var->value) == 0.0);
        if (max_abs_diff(ea.var->value, c.params.entries()[i].var->value) != 0.0)
            seed_matters = true;
    }
    CHECK(seed_matters);

    const Tensor img = random_image(16, 21);
    ad::NoGradGuard ng;
    const ForwardResult fa = a.forward(img), fb = b.forward(img);
    CHECK(fa.selected == fb.selected);
    CHECK(max_abs_diff(fa.layers.back().boxes->value, fb.layers.back().boxes->value) == 0.0);
}

TEST_CASE("an empty encoder stack is the identity") {
    ModelConfig cfg = tiny_config();
    cfg.n_enc = 0;
    const Model m(cfg, 5);
    Rng rng(33);
    Tensor x({12, cfg.d});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1.0, 1.0);
    ad::NoGradGuard ng;
    const Tensor y = m.encode(ad::constant(x), 3, 4)->value;
    CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("one encoder layer composes attention, norms and the feed-forward block") {
    ModelConfig cfg = tiny_config();
    cfg.attention_kind = AttentionKind::global;
    const Model m(cfg, 7);
    Rng rng(35);
    const std::size_t H = 2, W = 3, d = cfg.d;
    Tensor x({H * W, d});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1.0, 1.0);

    ad::NoGradGuard ng;
    const Tensor got = m.encode(ad::constant(x), H, W)->value;

    // manual composition from the registered parameters
    const auto& ps = m.params;
    AttentionParams ap;
    ap.kind = AttentionKind::global;
    ap.heads = cfg.heads;
    ap.q = Linear{ps.find("enc0.attn.q.weight"), ps.find("enc0.attn.q.bias")};
    ap.k = Linear{ps.find("enc0.attn.k.weight"), ps.find("enc0.attn.k.bias")};
    ap.v = Linear{ps.find("enc0.attn.v.weight"), ps.find("enc0.attn.v.bias")};
    ap.out = Linear{ps.find("enc0.attn.out.weight"), ps.find("enc0.attn.out.bias")};
    const Tensor pe = m.grid_pe(H, W);
    const ad::Var xv = ad::constant(x);
    ad::Var h = global_attention(xv, H, W, ap, &pe);
    const LayerNorm ln1{ps.find("enc0.ln1.gain"), ps.find("enc0.ln1.bias")};
    const LayerNorm ln2{ps.find("enc0.ln2.gain"), ps.find("enc0.ln2.bias")};
    Ffn ffn;
    ffn.layers.push_back(Linear{ps.find("enc0.ffn.l0.weight"), ps.find("enc0.ffn.l0.bias")});
    ffn.layers.push_back(Linear{ps.find("enc0.ffn.l1.weight"), ps.find("enc0.ffn.l1.bias")});
    ad::Var y = ln1.forward(ad::add(xv, h));
    y = ln2.forward(ad::add(y, ffn.forward(y)));
    CHECK(max_abs_diff(got, y->value) < 1e-12);
}

TEST_CASE("forward produces per-layer heads with valid shapes and ranges") {
    const ModelConfig cfg = tiny_config();
    const Model m(cfg, 13);
    const Tensor img = random_image(16, 77);
    ad::NoGradGuard ng;
    const ForwardResult fr = m.forward(img);

    CHECK(fr.H == 2);
    CHECK(fr.W == 2);
    CHECK(fr.enc->value.rows() == 4);
    CHECK(fr.enc->value.cols() == cfg.d);
    CHECK(fr.selected.size() == cfg.num_queries);
    CHECK(fr.refs.size() == cfg.num_queries);
    CHECK(fr.candidates.scales() == cfg.anchors.scales.size());
    CHECK(fr.candidates.positions() == 4);
    REQUIRE(fr.layers.size() == cfg.n_dec);
    for (const LayerOutput& lo : fr.layers) {
        CHECK(lo.class_probs->value.rows() == cfg.num_queries);
        CHECK(lo.class_probs->value.cols() == cfg.num_classes + 1);
        CHECK(lo.boxes->value.rows() == cfg.num_queries);
        CHECK(lo.boxes->value.cols() == 4);
        for (std::size_t i = 0; i < lo.boxes->value.numel(); ++i) {
            CHECK(lo.boxes->value[i] > 0.0);
            CHECK(lo.boxes->value[i] < 1.0);
        }
        for (std::size_t i = 0; i < lo.class_probs->value.numel(); ++i) {
            CHECK(lo.class_probs->value[i] > 0.0);
            CHECK(lo.class_probs->value[i] < 1.0);
        }
    }
    // reference points are the centers of the selected cells
    for (std::size_t q = 0; q < fr.refs.size(); ++q) {
        const std::size_t pos = fr.selected[q] / cfg.anchors.scales.size();
        const auto [cx, cy] = cell_center(pos / fr.W, pos % fr.W, fr.H, fr.W);
        CHECK(fr.refs[q].cx == Catch::Approx(cx));
        CHECK(fr.refs[q].cy == Catch::Approx(cy));
    }
}

TEST_CASE("selected candidates are the top scorers") {
    const Model m(tiny_config(), 17);
    const Tensor img = random_image(16, 5);
    ad::NoGradGuard ng;
    const ForwardResult fr = m.forward(img);
    std::vector<double> probs(fr.candidates.count());
    for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = fr.candidates.prob_value(i);
    CHECK(fr.selected == select_top_candidates(probs, m.cfg.num_queries));
}

TEST_CASE("frozen routing pins the selection") {
    const Model m(tiny_config(), 19);
    const Tensor img = random_image(16, 6);
    ad::NoGradGuard ng;
    const ForwardResult free = m.forward(img);
    const Routing routing{free.selected};
    const ForwardResult pinned = m.forward(img, &routing);
    CHECK(pinned.selected == free.selected);
    CHECK(max_abs_diff(pinned.layers.back().boxes->value,
                       free.layers.back().boxes->value) == 0.0);
    Routing bad{{0}};
    CHECK_THROWS_AS(m.forward(img, &bad), std::invalid_argument);
}

TEST_CASE("learned-query mode uses stored points and skips the candidate stage") {
    ModelConfig cfg = tiny_config();
    cfg.query_mode = QueryMode::rb;
    const Model m(cfg, 23);
    const Tensor img = random_image(16, 7);
    ad::NoGradGuard ng;
    const ForwardResult fr = m.forward(img);
    CHECK(fr.selected.empty());
    CHECK(fr.candidates.scales() == 0);
    REQUIRE(fr.refs.size() == cfg.num_queries);
    for (const ReferencePoint& r : fr.refs) {
        CHECK(r.cx >= 0.0);
        CHECK(r.cx <= 1.0);
        CHECK(r.cy >= 0.0);
        CHECK(r.cy <= 1.0);
    }
    const std::vector<GroundTruthObject> gts{{0, {0.5, 0.5, 0.2, 0.2}}};
    const ModelLoss ml = m.compute_loss(fr, gts);
    CHECK_FALSE(ml.init.has_value());  // no candidate supervision in this mode
    CHECK(ml.layers.size() == cfg.n_dec);
}

TEST_CASE("model loss sums the candidate and per-layer sites") {
    const Model m(tiny_config(), 29);
    const Tensor img = random_image(16, 8);
    ad::NoGradGuard ng;
    const ForwardResult fr = m.forward(img);
    const std::vector<GroundTruthObject> gts{{0, {0.3, 0.4, 0.2, 0.2}},
                                             {1, {0.7, 0.6, 0.3, 0.25}}};
    const ModelLoss ml = m.compute_loss(fr, gts);
    REQUIRE(ml.init.has_value());
    double want = ml.init->total->value[0];
    for (const LossBreakdown& lb : ml.layers) want += lb.total->value[0];
    CHECK(ml.total->value[0] == Catch::Approx(want).margin(1e-12));
    CHECK(ml.init_match.assignment.size() == gts.size());
    for (const MatchResult& mr : ml.layer_matches) CHECK(mr.assignment.size() == gts.size());
}

TEST_CASE("pairwise decoder weight follows the additive two-term form") {
    Rng rng(31);
    const std::size_t d = 8;
    Tensor cq({d}), ck({d}), lq({d}), ps({d}), pk({d});
    for (Tensor* t : {&cq, &ck, &lq, &ps, &pk})
        for (std::size_t i = 0; i < d; ++i) (*t)[i] = rng.uniform(-1.0, 1.0);

    double want = 0.0;
    for (std::size_t i = 0; i < d; ++i) want += cq[i] * ck[i] + (lq[i] * ps[i]) * pk[i];
    CHECK(decoder_cross_attention_weight(cq, ck, lq, ps, pk) ==
          Catch::Approx(want).margin(1e-12));

    // gate of zeros leaves only the content term
    Tensor zero({d});
    double content = 0.0;
    for (std::size_t i = 0; i < d; ++i) content += cq[i] * ck[i];
    CHECK(decoder_cross_attention_weight(cq, ck, zero, ps, pk) ==
          Catch::Approx(content).margin(1e-12));

    // zero content leaves only the gated spatial term
    double spatial = 0.0;
    for (std::size_t i = 0; i < d; ++i) spatial += lq[i] * ps[i] * pk[i];
    CHECK(decoder_cross_attention_weight(zero, ck, lq, ps, pk) ==
          Catch::Approx(spatial).margin(1e-12));

    CHECK_THROWS_AS(decoder_cross_attention_weight(Tensor({4}), ck, lq, ps, pk),
                    std::invalid_argument);
}

TEST_CASE("captured cross-attention weights are row-stochastic over the grid") {
    const Model m(tiny_config(), 37);
    const Tensor img = random_image(16, 10);
    ad::NoGradGuard ng;
    const ForwardResult fr = m.forward(img, nullptr, /*capture_cross=*/true);
    REQUIRE(fr.cross_attn.full.size() == m.cfg.heads);
    for (const Tensor& w : fr.cross_attn.full) {
        CHECK(w.rows() == m.cfg.num_queries);
        CHECK(w.cols() == fr.H * fr.W);
        for (std::size_t q = 0; q < w.rows(); ++q) {
            double s = 0.0;
            for (std::size_t k = 0; k < w.cols(); ++k) s += w.at(q, k);
            CHECK(s == Catch::Approx(1.0).margin(1e-9));
        }
    }
}
