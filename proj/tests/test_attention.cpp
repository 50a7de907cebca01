#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "hvdet/attention.hpp"
#include "hvdet/nn.hpp"
#include "hvdet/rng.hpp"

using namespace hvdet;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

// Plain-loop reference pieces, written without the graph ops on purpose.

Tensor ref_linear(const Tensor& x, const Linear& l) {
    const Tensor& w = l.weight->value;
    Tensor y({x.rows(), w.rows()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t o = 0; o < w.rows(); ++o) {
            double s = l.bias->value[o];
            for (std::size_t j = 0; j < x.cols(); ++j) s += x.at(i, j) * w.at(o, j);
            y.at(i, o) = s;
        }
    return y;
}

std::vector<double> ref_softmax(const std::vector<double>& s) {
    double mx = s[0];
    for (double v : s) mx = std::max(mx, v);
    std::vector<double> e(s.size());
    double z = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) { e[i] = std::exp(s[i] - mx); z += e[i]; }
    for (double& v : e) v /= z;
    return e;
}

/// Reference multi-head global attention over [HW, d] with optional additive
/// positional content on queries and keys.
Tensor ref_global(const Tensor& x, std::size_t H, std::size_t W, const AttentionParams& p,
                  const Tensor* pe) {
    const std::size_t n = H * W, d = p.model_dim(), heads = p.heads, dh = d / heads;
    Tensor xq = x;
    if (pe)
        for (std::size_t i = 0; i < xq.numel(); ++i) xq[i] += (*pe)[i];
    const Tensor q = ref_linear(xq, p.q);
    const Tensor k = ref_linear(xq, p.k);
    const Tensor v = ref_linear(x, p.v);
    Tensor cat({n, d});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> scores(n);
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c)
                    s += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                scores[j] = s / std::sqrt(double(dh));
            }
            const std::vector<double> a = ref_softmax(scores);
            for (std::size_t c = 0; c < dh; ++c) {
                double o = 0.0;
                for (std::size_t j = 0; j < n; ++j) o += a[j] * v.at(j, h * dh + c);
                cat.at(i, h * dh + c) = o;
            }
        }
    return ref_linear(cat, p.out);
}

/// Reference pooled-key two-branch attention (keys projected, then averaged
/// per grid row / column; branch outputs concatenated).
Tensor ref_hv(const Tensor& x, std::size_t H, std::size_t W, const AttentionParams& p,
              const AxialPe* pe) {
    const std::size_t n = H * W, d = p.model_dim(), heads = p.heads, dh = d / heads;
    Tensor q_row = ref_linear(x, p.q), q_col = ref_linear(x, p.q2);
    const Tensor k_row_full = ref_linear(x, p.k);
    const Tensor k_col_full = ref_linear(x, p.k2);
    const Tensor v_row = ref_linear(x, p.v);
    const Tensor v_col = ref_linear(x, p.v2);
    Tensor k_row({H, d}), k_col({W, d});
    for (std::size_t u = 0; u < H; ++u)
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t c = 0; c < d; ++c) {
                k_row.at(u, c) += k_row_full.at(u * W + j, c) / double(W);
                k_col.at(j, c) += k_col_full.at(u * W + j, c) / double(H);
            }
    if (pe) {
        for (std::size_t u = 0; u < H; ++u)
            for (std::size_t j = 0; j < W; ++j)
                for (std::size_t c = 0; c < d; ++c) {
                    q_row.at(u * W + j, c) += pe->row.at(u, c);
                    q_col.at(u * W + j, c) += pe->col.at(j, c);
                }
        for (std::size_t u = 0; u < H; ++u)
            for (std::size_t c = 0; c < d; ++c) k_row.at(u, c) += pe->row.at(u, c);
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t c = 0; c < d; ++c) k_col.at(j, c) += pe->col.at(j, c);
    }
    Tensor cat({n, 2 * d});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t u = 0; u < H; ++u)
            for (std::size_t j = 0; j < W; ++j) {
                const std::size_t qi = u * W + j;
                std::vector<double> sr(H), sc(W);
                for (std::size_t i = 0; i < H; ++i) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c)
                        s += q_row.at(qi, h * dh + c) * k_row.at(i, h * dh + c);
                    sr[i] = s / std::sqrt(double(dh));
                }
                for (std::size_t jj = 0; jj < W; ++jj) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c)
                        s += q_col.at(qi, h * dh + c) * k_col.at(jj, h * dh + c);
                    sc[jj] = s / std::sqrt(double(dh));
                }
                const std::vector<double> ar = ref_softmax(sr);
                const std::vector<double> ac = ref_softmax(sc);
                for (std::size_t c = 0; c < dh; ++c) {
                    double orow = 0.0, ocol = 0.0;
                    for (std::size_t i = 0; i < H; ++i)
                        orow += ar[i] * v_row.at(i * W + j, h * dh + c);
                    for (std::size_t jj = 0; jj < W; ++jj)
                        ocol += ac[jj] * v_col.at(u * W + jj, h * dh + c);
                    cat.at(qi, h * dh + c) = orow;
                    cat.at(qi, d + h * dh + c) = ocol;
                }
            }
    return ref_linear(cat, p.out);
}

/// Reference per-query axial attention (keys are the query's own row and
/// column cells; branch outputs added).
Tensor ref_cc(const Tensor& x, std::size_t H, std::size_t W, const AttentionParams& p) {
    const std::size_t n = H * W, d = p.model_dim(), heads = p.heads, dh = d / heads;
    const Tensor q_row = ref_linear(x, p.q), k_row = ref_linear(x, p.k),
                 v_row = ref_linear(x, p.v);
    const Tensor q_col = ref_linear(x, p.q2), k_col = ref_linear(x, p.k2),
                 v_col = ref_linear(x, p.v2);
    Tensor cat({n, d});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t u = 0; u < H; ++u)
            for (std::size_t j = 0; j < W; ++j) {
                const std::size_t qi = u * W + j;
                std::vector<double> sr(H), sc(W);
                for (std::size_t i = 0; i < H; ++i) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c)
                        s += q_row.at(qi, h * dh + c) * k_row.at(i * W + j, h * dh + c);
                    sr[i] = s / std::sqrt(double(dh));
                }
                for (std::size_t jj = 0; jj < W; ++jj) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c)
                        s += q_col.at(qi, h * dh + c) * k_col.at(u * W + jj, h * dh + c);
                    sc[jj] = s / std::sqrt(double(dh));
                }
                const std::vector<double> ar = ref_softmax(sr);
                const std::vector<double> ac = ref_softmax(sc);
                for (std::size_t c = 0; c < dh; ++c) {
                    double o = 0.0;
                    for (std::size_t i = 0; i < H; ++i)
                        o += ar[i] * v_row.at(i * W + j, h * dh + c);
                    for (std::size_t jj = 0; jj < W; ++jj)
                        o += ac[jj] * v_col.at(u * W + jj, h * dh + c);
                    cat.at(qi, h * dh + c) = o;
                }
            }
    return ref_linear(cat, p.out);
}

} // namespace

TEST_CASE("global attention matches the naive reference") {
    Rng rng(101);
    ParamStore ps;
    const std::size_t H = 3, W = 4, d = 8;
    const AttentionParams p = AttentionParams::create(AttentionKind::global, ps, "a", d, 2, rng);
    const Tensor x = random_tensor({H * W, d}, rng);
    Tensor pe({H * W, d});
    for (std::size_t i = 0; i < pe.numel(); ++i) pe[i] = rng.uniform(-1.0, 1.0);

    ad::NoGradGuard ng;
    for (const Tensor* pep : {static_cast<const Tensor*>(nullptr), static_cast<const Tensor*>(&pe)}) {
        const Tensor got = global_attention(ad::constant(x), H, W, p, pep)->value;
        const Tensor want = ref_global(x, H, W, p, pep);
        CHECK(max_abs_diff(got, want) < 1e-11);
    }
}

TEST_CASE("pooled-key attention matches the naive reference") {
    Rng rng(103);
    ParamStore ps;
    const std::size_t H = 3, W = 5, d = 8;
    const AttentionParams p = AttentionParams::create(AttentionKind::hv, ps, "a", d, 4, rng);
    const Tensor x = random_tensor({H * W, d}, rng);
    AxialPe pe{random_tensor({H, d}, rng), random_tensor({W, d}, rng)};

    ad::NoGradGuard ng;
    for (const AxialPe* pep : {static_cast<const AxialPe*>(nullptr), static_cast<const AxialPe*>(&pe)}) {
        const Tensor got = hv_attention(ad::constant(x), H, W, p, pep)->value;
        const Tensor want = ref_hv(x, H, W, p, pep);
        CHECK(max_abs_diff(got, want) < 1e-11);
    }
}

TEST_CASE("per-query axial attention matches the naive reference") {
    Rng rng(107);
    ParamStore ps;
    const std::size_t H = 4, W = 3, d = 8;
    const AttentionParams p = AttentionParams::create(AttentionKind::cc, ps, "a", d, 2, rng);
    const Tensor x = random_tensor({H * W, d}, rng);
    ad::NoGradGuard ng;
    const Tensor got = cc_attention(ad::constant(x), H, W, p)->value;
    const Tensor want = ref_cc(x, H, W, p);
    CHECK(max_abs_diff(got, want) < 1e-11);
}

TEST_CASE("captured attention weights are row-stochastic") {
    Rng rng(109);
    for (AttentionKind kind : {AttentionKind::global, AttentionKind::hv, AttentionKind::cc}) {
        ParamStore ps;
        const std::size_t H = 3, W = 4, d = 8;
        const AttentionParams p = AttentionParams::create(kind, ps, "a", d, 2, rng);
        const FeatureMap fm(d, H, W, random_tensor({d, H, W}, rng));
        AttentionWeights wts;
        (void)run_attention(fm, p, &wts);
        auto check_rows = [](const std::vector<Tensor>& mats) {
            for (const Tensor& m : mats)
                for (std::size_t i = 0; i < m.rows(); ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < m.cols(); ++j) {
                        s += m.at(i, j);
                        CHECK(m.at(i, j) >= 0.0);
                    }
                    CHECK(s == Catch::Approx(1.0).margin(1e-9));
                }
        };
        if (kind == AttentionKind::global) {
            CHECK(wts.full.size() == 2);
            check_rows(wts.full);
        } else {
            CHECK(wts.row_branch.size() == 2);
            CHECK(wts.col_branch.size() == 2);
            check_rows(wts.row_branch);
            check_rows(wts.col_branch);
        }
    }
}

TEST_CASE("position-major conversion round-trips") {
    Rng rng(113);
    FeatureMap fm(3, 4, 5, random_tensor({3, 4, 5}, rng));
    const Tensor m = to_positions(fm);
    CHECK(m.rows() == 20);
    CHECK(m.at(1 * 5 + 2, 0) == fm.data.at(0, 1, 2));
    const FeatureMap back = from_positions(m, 4, 5);
    CHECK(max_abs_diff(back.data, fm.data) == 0.0);
}

TEST_CASE("analytic flop counts take their published values") {
    CHECK(flops_global(100, 150, 256) == 119132160000ull);
    CHECK(flops_hv(100, 150, 256) == 8801280000ull);
    CHECK(double(flops_global(100, 150, 256)) / double(flops_hv(100, 150, 256)) ==
          Catch::Approx(13.5358).margin(1e-3));
    CHECK(flops_global(2, 2, 1) == 48ull);
    CHECK(flops_hv(2, 2, 1) == 60ull);
    CHECK(flops_global(1, 1, 1) == 6ull);
    CHECK(flops_hv(1, 1, 1) == 11ull);
}

TEST_CASE("memory model reports kernel-specific key and weight counts") {
    const auto g = memory_model(AttentionKind::global, 10, 20, 8);
    CHECK(g.key_count == 200);
    CHECK(g.weight_entries == 200 * 200);
    CHECK(g.key_storage == 200 * 8);
    CHECK(g.flops == flops_global(10, 20, 8));

    const auto hv = memory_model(AttentionKind::hv, 10, 20, 8);
    CHECK(hv.key_count == 30);
    CHECK(hv.weight_entries == 200 * 30);
    CHECK(hv.key_storage == 30 * 8);
    CHECK(hv.flops == flops_hv(10, 20, 8));

    const auto cc = memory_model(AttentionKind::cc, 10, 20, 8);
    CHECK(cc.key_count == 29);
    CHECK(cc.weight_entries == 200 * 29);
    CHECK(cc.key_storage == 200 * 29 * 8);
}

TEST_CASE("single-row grids make the column branch equal global attention") {
    // With identity projections, one head, and no positional content, a 1 x W
    // grid gives every query the same key set either way.
    for (std::size_t W : {1u, 5u, 9u}) {
        const std::size_t d = 4;
        Rng rng(127 + W);
        const Tensor x = random_tensor({W, d}, rng);
        ad::NoGradGuard ng;
        const Tensor g = global_attention(ad::constant(x), 1, W,
                                          AttentionParams::identity(AttentionKind::global, d))
                             ->value;
        const Tensor hv = hv_attention(ad::constant(x), 1, W,
                                       AttentionParams::identity(AttentionKind::hv, d))
                              ->value;
        for (std::size_t i = 0; i < W; ++i)
            for (std::size_t c = 0; c < d; ++c)
                CHECK(hv.at(i, d + c) == Catch::Approx(g.at(i, c)).margin(1e-12));
    }
}

TEST_CASE("attention kind names round-trip") {
    for (AttentionKind k : {AttentionKind::global, AttentionKind::hv, AttentionKind::cc})
        CHECK(attention_kind_from(to_string(k)) == k);
    CHECK_THROWS_AS(attention_kind_from("diag"), std::invalid_argument);
}
