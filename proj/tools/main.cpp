#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hvdet/config.hpp"
#include "hvdet/gradcheck.hpp"
#include "hvdet/model.hpp"
#include "hvdet/serialize.hpp"
#include "hvdet/synthdata.hpp"
#include "hvdet/train.hpp"

namespace {

using namespace hvdet;

struct GlobalOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::size_t threads = 0;  // 0 = resolve from env / default 1
};

RunConfig resolve_config(GlobalOpts& g) {
    RunConfig rc = load_run_config(g.config_path, g.overrides);
    if (g.threads == 0) {
        if (const char* env = std::getenv("HVDK_THREADS")) g.threads = std::stoul(env);
    }
    if (g.threads > 0) rc.threads = g.threads;
    std::fprintf(stderr, "config_hash=%s\n", config_hash(nlohmann::json(rc)).c_str());
    return rc;
}

Model load_model_from_checkpoint(const RunConfig& rc, const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    const std::string want = canonical_config(rc.model);
    if (ck.config_json != want) {
        nlohmann::json a = nlohmann::json::parse(ck.config_json);
        nlohmann::json b = nlohmann::json::parse(want);
        std::string diff;
        for (auto& [k, v] : a.items())
            if (!b.contains(k) || b[k] != v)
                diff += "  " + k + ": checkpoint=" + v.dump() +
                        " config=" + (b.contains(k) ? b[k].dump() : "(absent)") + "\n";
        for (auto& [k, v] : b.items())
            if (!a.contains(k)) diff += "  " + k + ": checkpoint=(absent) config=" + v.dump() + "\n";
        throw std::invalid_argument("checkpoint/config mismatch in " + path + ":\n" + diff);
    }
    Model model(rc.model, rc.seed);
    apply_checkpoint(ck, model.params);
    return model;
}

int cmd_train(GlobalOpts& g) {
    RunConfig rc = resolve_config(g);
    std::filesystem::create_directories(rc.out_dir);
    Model model(rc.model, rc.seed);
    const TrainResult tr = train_model(model, rc);
    write_loss_log(rc.out_dir + "/loss_log.csv", tr, rc.model.n_dec,
                   config_hash(nlohmann::json(rc)));
    save_checkpoint(rc.out_dir + "/checkpoint.hvdk", canonical_config(rc.model), model.params);
    if (!tr.epoch_mean_loss.empty())
        std::printf("epochs=%zu first_epoch_loss=%.6f last_epoch_loss=%.6f\n",
                    tr.epoch_mean_loss.size(), tr.epoch_mean_loss.front(),
                    tr.epoch_mean_loss.back());
    std::printf("checkpoint=%s/checkpoint.hvdk loss_log=%s/loss_log.csv\n", rc.out_dir.c_str(),
                rc.out_dir.c_str());
    return 0;
}

int cmd_eval(GlobalOpts& g, const std::string& ckpt, const std::string& out_jsonl) {
    RunConfig rc = resolve_config(g);
    const Model model = load_model_from_checkpoint(rc, ckpt);
    const EvalResult er = evaluate_model(model, rc.eval_data);
    if (!out_jsonl.empty()) {
        std::vector<SceneRecord> recs(rc.eval_data.count);
        for (std::size_t i = 0; i < recs.size(); ++i) recs[i].scene_id = int(i);
        for (const auto& d : er.detections) {
            auto& r = recs[static_cast<std::size_t>(d.scene_id)];
            r.boxes.push_back(d.box);
            r.classes.push_back(d.class_id);
            r.scores.push_back(d.score);
        }
        write_jsonl(out_jsonl, recs);
    }
    std::printf("ap50=%.6f detections=%zu ground_truths=%zu\n", er.ap, er.detections.size(),
                er.gts.size());
    return 0;
}

int cmd_flops(std::uint64_t H, std::uint64_t W, std::uint64_t d) {
    const std::uint64_t fg = flops_global(H, W, d);
    const std::uint64_t fh = flops_hv(H, W, d);
    std::printf("H=%llu W=%llu d=%llu\n", (unsigned long long)H, (unsigned long long)W,
                (unsigned long long)d);
    std::printf("global: %llu\n", (unsigned long long)fg);
    std::printf("hv:     %llu\n", (unsigned long long)fh);
    std::printf("ratio:  %.4f\n", double(fg) / double(fh));
    return 0;
}

double median_wall_ns(AttentionKind kind, std::size_t H, std::size_t W, std::size_t d,
                      std::size_t reps) {
    Rng rng(97);
    ParamStore ps;
    const AttentionParams p = AttentionParams::create(kind, ps, "bench", d, 1, rng);
    FeatureMap fm(d, H, W);
    for (std::size_t i = 0; i < fm.data.numel(); ++i) fm.data[i] = rng.uniform(-1.0, 1.0);
    for (int w = 0; w < 3; ++w) (void)run_attention(fm, p);
    std::vector<double> times;
    for (std::size_t r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        (void)run_attention(fm, p);
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

int cmd_bench_attn(const std::vector<std::string>& cells, std::size_t reps,
                   const std::string& out_path) {
    if (cells.empty()) throw std::invalid_argument("bench-attn: empty grid");
    std::ostringstream csv;
    csv << "# schema=hvdet.bench.v1\n";
    csv << "kind,H,W,d,wall_ns,flops_analytic,weight_entries,key_count\n";
    for (const std::string& cell : cells) {
        std::size_t H, W, d;
        if (std::sscanf(cell.c_str(), "%zux%zux%zu", &H, &W, &d) != 3)
            throw std::invalid_argument("bench-attn: cell must be HxWxd, got " + cell);
        for (AttentionKind kind :
             {AttentionKind::global, AttentionKind::hv, AttentionKind::cc}) {
            const AttentionCost c = memory_model(kind, H, W, d);
            const double ns = median_wall_ns(kind, H, W, d, reps);
            csv << to_string(kind) << ',' << H << ',' << W << ',' << d << ','
                << std::llround(ns) << ',' << c.flops << ',' << c.weight_entries << ','
                << c.key_count << "\n";
        }
    }
    if (out_path.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream os(out_path, std::ios::trunc);
        if (!os) throw std::runtime_error("bench-attn: cannot open " + out_path);
        os << csv.str();
    }
    return 0;
}

/// The gradient suites exercised by `hvdet gradcheck` (also used by the
/// acceptance tests): each returns a named report.
std::vector<std::pair<std::string, GradCheckReport>> run_gradcheck_suites();

int cmd_gradcheck() {
    bool all = true;
    for (auto& [name, rep] : run_gradcheck_suites()) {
        std::printf("%-28s %-4s worst=%.3e (%s)\n", name.c_str(),
                    rep.all_pass ? "pass" : "FAIL", rep.worst, rep.worst_name.c_str());
        for (const auto& e : rep.entries)
            if (!e.pass) std::printf("    offender %-28s max_rel_err=%.3e\n", e.name.c_str(),
                                     e.max_rel_err);
        all = all && rep.all_pass;
    }
    std::printf("gradcheck: %s\n", all ? "all checks passed" : "FAILURES present");
    return all ? 0 : 1;
}

int cmd_dump_attn(GlobalOpts& g, const std::string& ckpt, std::size_t scene_index,
                  const std::string& out_path) {
    RunConfig rc = resolve_config(g);
    const Model model = load_model_from_checkpoint(rc, ckpt);
    const Scene scene = generate_scene(rc.eval_data, scene_index);
    ad::NoGradGuard ng;
    const ForwardResult fr = model.forward(scene.image, nullptr, /*capture_cross=*/true);

    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw std::runtime_error("dump-attn: cannot open " + out_path);
    os << "# schema=hvdet.attnmap.v1 config_hash=" << config_hash(nlohmann::json(rc)) << "\n";
    os << "head,query,query_row,query_col,key_index,weight\n";
    os.precision(17);
    const std::size_t K = fr.refs.size();
    for (std::size_t q = 0; q < K; ++q) {
        const std::size_t qrow = fr.refs[q].source_index / fr.W;
        const std::size_t qcol = fr.refs[q].source_index % fr.W;
        for (std::size_t h = 0; h < fr.cross_attn.full.size(); ++h)
            for (std::size_t key = 0; key < fr.H * fr.W; ++key)
                os << h << ',' << q << ',' << qrow << ',' << qcol << ',' << key << ','
                   << fr.cross_attn.full[h].at(q, key) << "\n";
    }
    std::printf("wrote %s (%zu queries x %zu heads x %zu keys)\n", out_path.c_str(), K,
                fr.cross_attn.full.size(), fr.H * fr.W);
    return 0;
}

int cmd_dump_refs(GlobalOpts& g, const std::string& ckpt, std::size_t scene_index,
                  const std::string& out_path) {
    RunConfig rc = resolve_config(g);
    const Model model = load_model_from_checkpoint(rc, ckpt);
    const Scene scene = generate_scene(rc.eval_data, scene_index);
    ad::NoGradGuard ng;
    const ForwardResult fr = model.forward(scene.image);

    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw std::runtime_error("dump-refs: cannot open " + out_path);
    os << "# schema=hvdet.refpoints.v1 config_hash=" << config_hash(nlohmann::json(rc)) << "\n";
    os << "index,cx,cy,scale,objectness\n";
    os.precision(17);
    for (std::size_t i = 0; i < fr.refs.size(); ++i) {
        const double obj = fr.selected.empty()
                               ? 0.0
                               : fr.candidates.prob_value(fr.selected[i]);
        os << i << ',' << fr.refs[i].cx << ',' << fr.refs[i].cy << ','
           << fr.refs[i].scale_index << ',' << obj << "\n";
    }
    std::printf("wrote %s (%zu reference points)\n", out_path.c_str(), fr.refs.size());
    return 0;
}

// ---------------------------------------------------------------------------
// Gradient suites
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, GradCheckReport>> run_gradcheck_suites() {
    std::vector<std::pair<std::string, GradCheckReport>> out;
    const double kOpsTol = 1e-4, kEndTol = 1e-3;

    const auto kernel_suite = [&](AttentionKind kind, const std::string& name) {
        Rng rng(11);
        ParamStore ps;
        const std::size_t d = 8, H = 3, W = 4;
        const AttentionParams p = AttentionParams::create(kind, ps, "attn", d, 2, rng);
        Tensor x({H * W, d});
        for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1.0, 1.0);
        auto loss = [&]() {
            const ad::Var xv = ad::constant(x);
            ad::Var y;
            switch (kind) {
                case AttentionKind::global: y = global_attention(xv, H, W, p); break;
                case AttentionKind::hv: y = hv_attention(xv, H, W, p); break;
                case AttentionKind::cc: y = cc_attention(xv, H, W, p); break;
            }
            return ad::sum_all(ad::mul(y, y));
        };
        out.emplace_back(name, grad_check(loss, ps.entries(), 1e-3, kOpsTol));
    };
    kernel_suite(AttentionKind::global, "attention/global");
    kernel_suite(AttentionKind::hv, "attention/hv");
    kernel_suite(AttentionKind::cc, "attention/cc");

    {
        // box / content query heads and the box head, checked through one loss
        Rng rng(13);
        ParamStore ps;
        const std::size_t d = 8;
        const Ffn box_ffn = Ffn::create(ps, "box", {d, d, 4}, rng);
        const Ffn content_ffn = Ffn::create(ps, "content", {d, d, d}, rng);
        const Ffn head_ffn = Ffn::create(ps, "head", {d, d, 4}, rng);
        Tensor cell({1, d});
        for (std::size_t i = 0; i < d; ++i) cell[i] = rng.uniform(-1.0, 1.0);
        const ReferencePoint ref{0.3, 0.7, 0, 0};
        auto loss = [&]() {
            const ad::Var enc = ad::constant(cell);
            const ad::Var cand = estimate_candidate_box(enc, 0, 0.3, 0.7, 0.2, 0.2, box_ffn);
            const ad::Var content = init_content_query_from_box(cand, d, content_ffn);
            const ad::Var b = box_head(content, ref, head_ffn);
            return ad::sum_all(ad::mul(b, b));
        };
        out.emplace_back("query/heads", grad_check(loss, ps.entries(), 1e-3, kOpsTol));
    }

    {
        // full tiny model + loss, discrete routing and matching frozen
        ModelConfig cfg;
        cfg.d = 8;
        cfg.heads = 2;
        cfg.ffn_hidden = 12;
        cfg.n_enc = 1;
        cfg.n_dec = 2;
        cfg.num_queries = 3;
        cfg.num_classes = 2;
        Model m(cfg, 5);
        Tensor img({3, 16, 16});
        Rng ir(503);
        for (std::size_t i = 0; i < img.numel(); ++i) img[i] = ir.uniform();
        const std::vector<GroundTruthObject> gts{{0, {0.3, 0.4, 0.2, 0.2}},
                                                 {1, {0.7, 0.6, 0.3, 0.25}}};
        const ForwardResult fr0 = m.forward(img);
        const ModelLoss ml0 = m.compute_loss(fr0, gts);
        const Routing routing{fr0.selected};
        FrozenMatches fm;
        fm.init = ml0.init_match;
        fm.layers = ml0.layer_matches;
        auto loss = [&]() {
            return m.compute_loss(m.forward(img, &routing), gts, &fm).total;
        };
        out.emplace_back("model/end_to_end",
                         grad_check(loss, m.params.entries(), 1e-3, kEndTol));
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"box-query detection transformer toolkit"};
    app.require_subcommand(1);
    GlobalOpts g;
    app.add_option("--config", g.config_path, "JSON run configuration");
    app.add_option("--set", g.overrides, "dot-path override, e.g. --set model.d=64");
    app.add_option("--threads", g.threads, "worker threads (or HVDK_THREADS)");

    auto* train = app.add_subcommand("train", "train on synthetic scenes");
    std::string ckpt = "out/checkpoint.hvdk", out_file;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (AP@0.5)");
    eval->add_option("--checkpoint", ckpt, "checkpoint path");
    eval->add_option("--out", out_file, "detections JSONL path");

    auto* bench = app.add_subcommand("bench-attn", "benchmark attention kernels");
    std::vector<std::string> grid{"32x32x64", "64x64x64"};
    std::size_t reps = 20;
    std::string bench_out;
    bench->add_option("--grid", grid, "cells as HxWxd");
    bench->add_option("--reps", reps, "repetitions (median reported)")
        ->check(CLI::Range(std::size_t(1), std::size_t(10000)));
    bench->add_option("--out", bench_out, "CSV path (default stdout)");

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suites");

    auto* flops = app.add_subcommand("flops", "analytic attention cost");
    std::uint64_t fh = 100, fw = 150, fd = 256;
    flops->add_option("H", fh, "feature map height")->required();
    flops->add_option("W", fw, "feature map width")->required();
    flops->add_option("d", fd, "channel dim")->required();

    std::size_t scene_index = 0;
    std::string dump_out = "attn.csv";
    auto* dattn = app.add_subcommand("dump-attn", "first-decoder-layer cross-attention maps");
    dattn->add_option("--checkpoint", ckpt, "checkpoint path");
    dattn->add_option("--scene", scene_index, "eval scene index");
    dattn->add_option("--out", dump_out, "CSV path");

    std::string refs_out = "refs.csv";
    auto* drefs = app.add_subcommand("dump-refs", "selected reference points");
    drefs->add_option("--checkpoint", ckpt, "checkpoint path");
    drefs->add_option("--scene", scene_index, "eval scene index");
    drefs->add_option("--out", refs_out, "CSV path");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train) return cmd_train(g);
        if (*eval) return cmd_eval(g, ckpt, out_file);
        if (*bench) return cmd_bench_attn(grid, reps, bench_out);
        if (*grad) return cmd_gradcheck();
        if (*flops) return cmd_flops(fh, fw, fd);
        if (*dattn) return cmd_dump_attn(g, ckpt, scene_index, dump_out);
        if (*drefs) return cmd_dump_refs(g, ckpt, scene_index, refs_out);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
