#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hvdet/encoding.hpp"
#include "hvdet/nn.hpp"
#include "hvdet/query.hpp"
#include "hvdet/rng.hpp"

using namespace hvdet;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

Ffn zero_ffn(ParamStore& ps, const std::string& name, std::vector<std::size_t> dims) {
    Rng rng(1);
    Ffn f = Ffn::create(ps, name, dims, rng);
    for (const Linear& l : f.layers) {
        l.weight->value.fill(0.0);
        l.bias->value.fill(0.0);
    }
    return f;
}

// brute-force top-k: full stable sort by (probability desc, index asc)
std::vector<std::size_t> ref_topk(const std::vector<double>& probs, std::size_t k) {
    std::vector<std::size_t> idx(probs.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });
    idx.resize(k);
    return idx;
}

} // namespace

TEST_CASE("box query is the elementwise product of spatial embedding and gate") {
    Rng rng(41);
    const Tensor ps = random_tensor({1, 8}, rng);
    const Tensor lq = random_tensor({1, 8}, rng);
    const Tensor got = compose_box_query(ad::constant(ps), ad::constant(lq))->value;
    for (std::size_t i = 0; i < 8; ++i)
        CHECK(got[i] == Catch::Approx(ps[i] * lq[i]).margin(1e-15));
    CHECK_THROWS_AS(compose_box_query(ad::constant(Tensor({1, 8})),
                                      ad::constant(Tensor({1, 4}))),
                    std::invalid_argument);
}

TEST_CASE("top-k selection matches a full sort, including ties") {
    Rng rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> probs(20);
        // coarse quantization forces plenty of exact ties
        for (double& p : probs) p = double(rng.uniform_int(5)) / 4.0;
        const std::size_t k = 1 + rng.uniform_int(probs.size());
        CHECK(select_top_candidates(probs, k) == ref_topk(probs, k));
    }
    CHECK_THROWS_AS(select_top_candidates({0.5, 0.5}, 3), std::invalid_argument);
}

TEST_CASE("ties break toward the lower flat index") {
    const std::vector<double> probs{0.5, 0.9, 0.5, 0.9, 0.1};
    const auto top = select_top_candidates(probs, 4);
    CHECK(top == std::vector<std::size_t>{1, 3, 0, 2});
}

TEST_CASE("cell centers are normalized half-offset grid points") {
    const auto [cx, cy] = cell_center(0, 0, 4, 8);
    CHECK(cx == Catch::Approx(0.5 / 8.0));
    CHECK(cy == Catch::Approx(0.5 / 4.0));
    const auto [cx2, cy2] = cell_center(3, 7, 4, 8);
    CHECK(cx2 == Catch::Approx(7.5 / 8.0));
    CHECK(cy2 == Catch::Approx(3.5 / 4.0));
}

TEST_CASE("reference point selection decodes flat candidate indices") {
    // grid 2 x 3, S = 2 scales -> 12 candidates; flat = (row*W + col)*S + scale
    std::vector<double> probs(12, 0.0);
    probs[7] = 0.9;  // position 3 = (1,0), scale 1
    probs[4] = 0.8;  // position 2 = (0,2), scale 0
    const auto pts = select_reference_points(probs, 2, 2, 3, 2);
    REQUIRE(pts.size() == 2);
    CHECK(pts[0].source_index == 3);
    CHECK(pts[0].scale_index == 1);
    CHECK(pts[0].cx == Catch::Approx(0.5 / 3.0));
    CHECK(pts[0].cy == Catch::Approx(1.5 / 2.0));
    CHECK(pts[1].source_index == 2);
    CHECK(pts[1].scale_index == 0);
    CHECK_THROWS_AS(select_reference_points(probs, 2, 2, 3, 3), std::invalid_argument);
}

TEST_CASE("objectness probability is the softmax of two logits") {
    CHECK(object_probability(0.0, 0.0) == Catch::Approx(0.5));
    const double p = object_probability(1.0, 3.0);
    CHECK(p == Catch::Approx(std::exp(3.0) / (std::exp(1.0) + std::exp(3.0))).margin(1e-12));
    // shift invariance (stability under large logits)
    CHECK(object_probability(1000.0, 1001.0) ==
          Catch::Approx(object_probability(0.0, 1.0)).margin(1e-12));
}

TEST_CASE("candidate box with a zero head reproduces the cell/anchor prior") {
    ParamStore ps;
    const std::size_t d = 8;
    const Ffn box_ffn = zero_ffn(ps, "box", {d, d, 4});
    Rng rng(47);
    const ad::Var enc = ad::constant(random_tensor({3, d}, rng));
    const Tensor b = estimate_candidate_box(enc, 1, 0.3, 0.7, 0.2, 0.4, box_ffn)->value;
    CHECK(b[0] == Catch::Approx(0.3).margin(1e-9));
    CHECK(b[1] == Catch::Approx(0.7).margin(1e-9));
    CHECK(b[2] == Catch::Approx(0.2).margin(1e-9));
    CHECK(b[3] == Catch::Approx(0.4).margin(1e-9));
    CHECK_THROWS_AS(estimate_candidate_box(enc, 0, 0.5, 0.5, 1.2, 0.2, box_ffn),
                    std::invalid_argument);
}

TEST_CASE("box head with a zero network reproduces the reference point") {
    ParamStore ps;
    const std::size_t d = 8;
    const Ffn head = zero_ffn(ps, "head", {d, d, 4});
    Rng rng(53);
    const ad::Var f = ad::constant(random_tensor({1, d}, rng));
    const ReferencePoint ref{0.25, 0.6, 0, 0};
    const Tensor b = box_head(f, ref, head)->value;
    CHECK(b[0] == Catch::Approx(0.25).margin(1e-9));
    CHECK(b[1] == Catch::Approx(0.6).margin(1e-9));
    // zero logits for the extents decode to the sigmoid midpoint
    CHECK(b[2] == Catch::Approx(0.5).margin(1e-12));
    CHECK(b[3] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("content query initializers follow their definitions") {
    Rng rng(59);
    ParamStore ps;
    const std::size_t d = 16;
    const Ffn emb_ffn = Ffn::create(ps, "emb", {d, d, d}, rng);
    const Ffn box_ffn = Ffn::create(ps, "box", {d, d, d}, rng);
    const Tensor enc = random_tensor({4, d}, rng);
    const ad::Var encv = ad::constant(enc);

    // from_embedding: the network applied to the selected cell's embedding
    const Tensor got = init_content_query_from_embedding(encv, 2, emb_ffn)->value;
    const Tensor want = emb_ffn.forward(ad::row(encv, 2))->value;
    CHECK(max_abs_diff(got, want) == 0.0);

    // from_box: the network applied to the sinusoidal embedding of the box
    const Tensor box({1, 4}, {0.3, 0.6, 0.2, 0.25});
    const Tensor got2 = init_content_query_from_box(ad::constant(box), d, box_ffn)->value;
    const Tensor pe = sinusoidal_pe_box(0.3, 0.6, 0.2, 0.25, d);
    const Tensor want2 =
        box_ffn.forward(ad::constant(Tensor({1, d}, std::vector<double>(
                                                        pe.data(), pe.data() + d))))
            ->value;
    CHECK(max_abs_diff(got2, want2) < 1e-12);
}

TEST_CASE("transformation gate is the network applied to the reference cell") {
    Rng rng(61);
    ParamStore ps;
    const std::size_t d = 8;
    const Ffn ffn = Ffn::create(ps, "lambda", {d, d, d}, rng);
    const ad::Var enc = ad::constant(random_tensor({5, d}, rng));
    const Tensor got = predict_transformation(enc, 3, ffn)->value;
    const Tensor want = ffn.forward(ad::row(enc, 3))->value;
    CHECK(max_abs_diff(got, want) == 0.0);
    CHECK_THROWS_AS(predict_transformation(enc, 5, ffn), std::out_of_range);
}

TEST_CASE("anchor scale sets validate their ranges") {
    AnchorScaleSet def = AnchorScaleSet::defaults();
    CHECK(def.scales.size() == 3);
    CHECK(def.scales[0].first == Catch::Approx(0.1));
    CHECK(def.scales[2].second == Catch::Approx(0.4));
    CHECK_NOTHROW(def.validate());
    CHECK_THROWS_AS(AnchorScaleSet{}.validate(), std::invalid_argument);
    AnchorScaleSet bad{{{0.5, 1.0}}};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("query mode and content init names round-trip") {
    for (QueryMode m : {QueryMode::rb, QueryMode::ip, QueryMode::ip_it})
        CHECK(query_mode_from(to_string(m)) == m);
    for (ContentInit m : {ContentInit::from_embedding, ContentInit::from_box})
        CHECK(content_init_from(to_string(m)) == m);
    CHECK_THROWS_AS(query_mode_from("xx"), std::invalid_argument);
    CHECK_THROWS_AS(content_init_from("xx"), std::invalid_argument);
}
