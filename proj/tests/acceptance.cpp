// Acceptance suite: one test case per release criterion, each printing a
// single pass/fail line. Heavier end-to-end criteria drive the CLI binary
// (path in GRADTRACE_CLI) exactly as a user would.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "gradtrace/io.hpp"
#include "gradtrace/oracle.hpp"
#include "test_util.hpp"

using namespace gradtrace;
using namespace gtt;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(int criterion, const std::string& name, bool ok, const std::string& detail) {
    std::printf("criterion %d (%s): %s  [%s]\n", criterion, name.c_str(), ok ? "PASS" : "FAIL",
                detail.c_str());
    std::fflush(stdout);
}

// Shared desk-scale fixture: a 48-step fine-tuning run over 192 synthetic
// examples, checkpointed every 12 steps.
struct DeskRun {
    ModelConfig cfg;
    std::vector<Example> data;
    CheckpointSeries series;
};

const DeskRun& desk_run() {
    static const DeskRun run = [] {
        DeskRun r;
        r.cfg = tiny_config();
        r.data = small_dataset(r.cfg, 32, 401);
        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 8;
        tc.lr_peak = 1e-3;
        tc.lr_final = 1e-5;
        tc.warmup_steps = 4;
        tc.checkpoint_stride = 12;
        tc.seed = 403;
        ModelState st = randomized_adapter_state(r.cfg, 409);
        r.series = train(st, r.data, tc);
        return r;
    }();
    return run;
}

std::string cli_path() {
    const char* p = std::getenv("GRADTRACE_CLI");
    return p ? p : "";
}

int run_cli(const std::string& args, const fs::path& log) {
    std::string cmd = cli_path() + " " + args + " >> " + log.string() + " 2>&1";
    return std::system(cmd.c_str());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("gradtrace_accept_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

} // namespace

TEST_CASE("criterion 1: gradient fidelity") {
    auto t0 = std::chrono::steady_clock::now();

    ModelConfig cfg;
    cfg.embed_dim = 32;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.context_len = 96;
    cfg.adapter_rank = 4;
    cfg.adapter_alpha = 8.0;

    size_t total_params = 0;
    for (const ParamSpec& s : parameter_specs(cfg)) total_params += shape_numel(s.shape);
    REQUIRE(total_params <= 50000);

    ModelState st = randomized_adapter_state(cfg, 419);
    std::vector<Example> data = small_dataset(cfg, 2, 421);
    std::vector<ParamSlot> layout = adapter_layout(cfg);

    Rng rng(431);
    double max_rel = 0.0;
    int checked = 0;
    for (int trial = 0; trial < 120; ++trial) {
        const Example& z = data[rng.below(data.size())];
        GradientVector g = example_gradient(st, z);
        const ParamSlot& slot = layout[rng.below(layout.size())];
        size_t idx = rng.below(slot.count);
        double fd = fd_adapter_grad(st, z, slot.name, idx, 1e-4);
        double an = g.values[slot.offset + idx];
        max_rel = std::max(max_rel, rel_err(an, fd));
        ++checked;
    }
    double elapsed = seconds_since(t0);
    bool ok = checked >= 100 && max_rel <= 1e-6 && elapsed < 120.0;
    report(1, "gradient fidelity", ok,
           "coords=" + std::to_string(checked) + " max_rel=" + format_double(max_rel) +
               " params=" + std::to_string(total_params) + " time=" + format_double(elapsed) + "s");
    CHECK(ok);
}

TEST_CASE("criterion 2: self-influence identity") {
    const DeskRun& run = desk_run();
    Rng rng(433);

    bool pairs_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        const Example& z = run.data[rng.below(run.data.size())];
        const auto& [step, state] =
            run.series.checkpoints[rng.below(run.series.checkpoints.size())];
        GradientVector g = example_gradient(*state, z, GradScope::adapters, run.series.run_id);
        double v = rel_inf(g, g);
        if (!(v >= 1.0 - 1e-12 && v <= 1.0 + 1e-12)) pairs_ok = false;
    }

    PairedSets self;
    for (size_t i = 0; i < 6; ++i) {
        self.probes.push_back(run.data[i * 7]);
    }
    self.evals = self.probes;
    GradientCache cache;
    InfluenceTrace t = trace(self, run.series, {"self in", "self cross"}, cache);
    bool trace_ok = t.records.size() == run.series.checkpoints.size();
    for (const TraceRecord& rec : t.records)
        if (!(rec.s_in >= 1.0 - 1e-12 && rec.s_in <= 1.0 + 1e-12)) trace_ok = false;

    bool ok = pairs_ok && trace_ok;
    report(2, "self-influence identity", ok,
           "20 (example, checkpoint) pairs; s_in over " + std::to_string(t.records.size()) +
               " checkpoints");
    CHECK(ok);
}

TEST_CASE("criterion 3: telescoping cumulative influence") {
    const DeskRun& run = desk_run();
    const ModelState& start = *run.series.checkpoints[1].second;
    const Example& z = run.data[10];
    const Example& z0 = run.data[100];

    std::vector<double> etas(20, 1e-4);
    double total = tracin_measured(z, z0, start, etas);

    ModelState end = start;
    for (double eta : etas) end = single_sgd_step(end, z, eta);
    double endpoints = completion_loss(start, z0) - completion_loss(end, z0);
    double gap = std::fabs(total - endpoints);

    bool ok = gap <= 1e-10;
    report(3, "telescoping cumulative influence", ok,
           "20 steps; |sum - endpoint| = " + format_double(gap));
    CHECK(ok);
}

TEST_CASE("criterion 4: first-order validity") {
    const DeskRun& run = desk_run();

    auto median_err = [&](double eta, Rng& sample_rng) {
        std::vector<double> errs;
        for (int trial = 0; trial < 50; ++trial) {
            const Example& z = run.data[sample_rng.below(run.data.size())];
            const Example& z0 = run.data[sample_rng.below(run.data.size())];
            const auto& [step, state] =
                run.series.checkpoints[sample_rng.below(run.series.checkpoints.size())];
            errs.push_back(taylor_check(*state, z, z0, eta).rel_error);
        }
        std::sort(errs.begin(), errs.end());
        return errs[errs.size() / 2];
    };

    Rng rng_coarse(439), rng_fine(439); // identical triples at both step sizes
    double med4 = median_err(1e-4, rng_coarse);
    double med5 = median_err(1e-5, rng_fine);

    bool ok = med4 <= 0.05 && med5 * 3.0 <= med4;
    report(4, "first-order validity", ok,
           "median(1e-4)=" + format_double(med4) + " median(1e-5)=" + format_double(med5) +
               " shrink=" + format_double(med5 > 0 ? med4 / med5 : 0.0) + "x");
    CHECK(ok);
}

TEST_CASE("criterion 5: protocol reproduction via the CLI") {
    REQUIRE(!cli_path().empty());
    auto t0 = std::chrono::steady_clock::now();
    TempDir tmp("c5");
    fs::path log = tmp.path / "log.txt";

    // 480 examples, batch 8, 5 epochs -> 300 steps; checkpoint every 50
    std::string data = (tmp.path / "data.jsonl").string();
    std::string run = (tmp.path / "run").string();
    std::string out = (tmp.path / "study").string();
    bool ok = run_cli("gen-data --out " + data + " --per-family 80 --seed 1", log) == 0;
    ok = ok && run_cli("train --data " + data + " --out " + run +
                           " --epochs 5 --batch 8 --stride 50 --seed 1",
                       log) == 0;
    ok = ok && run_cli("study --kind cot --run " + run + " --out " + out + " --seed 7", log) == 0;

    std::set<std::string> metrics;
    std::set<uint64_t> steps;
    bool finite = true;
    size_t rows = 0;
    if (ok) {
        for (const TraceRow& r : load_trace_csv(fs::path(out) / "study_cot.csv")) {
            metrics.insert(r.metric);
            steps.insert(r.step);
            if (!std::isfinite(r.value)) finite = false;
            ++rows;
        }
    }
    std::set<std::string> expected = {"CoT->In-task non-CoT", "non-CoT->In-task non-CoT",
                                      "CoT->Cross-task non-CoT", "non-CoT->Cross-task non-CoT"};
    std::set<uint64_t> expected_steps = {0, 50, 100, 150, 200, 250, 300};

    // the rendered chart carries one polyline per metric
    size_t polylines = 0;
    std::string svg_file = (tmp.path / "study.svg").string();
    if (ok && run_cli("report " + (fs::path(out) / "study_cot.csv").string() + " --out " +
                          svg_file,
                      log) == 0) {
        std::string svg = read_file(svg_file);
        size_t pos = 0;
        while ((pos = svg.find("<polyline", pos)) != std::string::npos) {
            ++polylines;
            pos += 9;
        }
    }

    double elapsed = seconds_since(t0);
    ok = ok && metrics == expected && steps == expected_steps && finite && polylines == 4 &&
         elapsed < 600.0;
    report(5, "protocol reproduction via the CLI", ok,
           std::to_string(rows) + " rows, " + std::to_string(metrics.size()) + " metrics, " +
               std::to_string(steps.size()) + " checkpoints, " + std::to_string(polylines) +
               " polylines, time=" + format_double(elapsed) + "s");
    CHECK(ok);
}

TEST_CASE("criterion 6: aggregate redundancy") {
    const DeskRun& run = desk_run();
    PairedSets mixed;
    for (size_t i = 0; i < 6; ++i) {
        mixed.probes.push_back(run.data[i * 11 + 1]);
        mixed.evals.push_back(run.data[i * 13 + 2]);
    }
    GradientCache cache;
    InfluenceTrace t = trace(mixed, run.series, {"in", "cross"}, cache);

    bool ok = !t.records.empty();
    for (const TraceRecord& rec : t.records) {
        if (rec.s_in != rec.s_in_from_matrix()) ok = false;
        if (rec.s_cross != rec.s_cross_from_matrix()) ok = false;
    }
    // and an independent recomputation of the aggregates from fresh gradients
    for (size_t c = 0; c < run.series.checkpoints.size(); ++c) {
        const ModelState& st = *run.series.checkpoints[c].second;
        if (s_in(mixed, st, GradScope::adapters, run.series.run_id) != t.records[c].s_in) ok = false;
        if (s_cross(mixed, st, GradScope::adapters, run.series.run_id) != t.records[c].s_cross)
            ok = false;
    }
    report(6, "aggregate redundancy", ok,
           std::to_string(t.records.size()) + " records checked bit-exactly");
    CHECK(ok);
}

TEST_CASE("criterion 7: byte-identical reruns via the CLI") {
    REQUIRE(!cli_path().empty());
    TempDir tmp("c7");
    fs::path log = tmp.path / "log.txt";

    auto run_all = [&](const std::string& tag) {
        fs::path base = tmp.path / tag;
        fs::create_directories(base);
        std::string data = (base / "data.jsonl").string();
        std::string run = (base / "run").string();
        std::string out = (base / "study").string();
        bool ok = run_cli("gen-data --out " + data + " --per-family 16 --seed 3", log) == 0;
        ok = ok && run_cli("train --data " + data + " --out " + run +
                               " --epochs 2 --batch 8 --stride 6 --seed 3 --warmup 4",
                           log) == 0;
        ok = ok &&
             run_cli("study --kind cot --run " + run + " --out " + out + " --n 6 --seed 9", log) ==
                 0;
        return ok;
    };

    bool ok = run_all("a") && run_all("b");
    std::string mismatch;
    if (ok) {
        // dataset bytes
        if (read_file(tmp.path / "a" / "data.jsonl") != read_file(tmp.path / "b" / "data.jsonl"))
            mismatch += " dataset";
        // every checkpoint byte-for-byte
        for (const auto& entry : fs::directory_iterator(tmp.path / "a" / "run")) {
            if (entry.path().extension() != ".gtck") continue;
            fs::path twin = tmp.path / "b" / "run" / entry.path().filename();
            if (!fs::exists(twin) || read_file(entry.path()) != read_file(twin))
                mismatch += " " + entry.path().filename().string();
        }
        // study CSV and set dumps
        for (const auto& entry : fs::directory_iterator(tmp.path / "a" / "study")) {
            fs::path twin = tmp.path / "b" / "study" / entry.path().filename();
            if (!fs::exists(twin) || read_file(entry.path()) != read_file(twin))
                mismatch += " " + entry.path().filename().string();
        }
        ok = mismatch.empty();
    }
    report(7, "byte-identical reruns via the CLI", ok,
           ok ? "dataset, checkpoints, study outputs all byte-identical"
              : ("mismatch:" + mismatch));
    CHECK(ok);
}

TEST_CASE("criterion 8: retraining oracle ordering") {
    const DeskRun& run = desk_run();
    const auto& fams = builtin_families();

    int wins = 0;
    const int trials = 10;
    for (int trial = 0; trial < trials; ++trial) {
        uint64_t seed = 1000 + static_cast<uint64_t>(trial);
        std::vector<Example> evals;
        for (size_t i = 0; i < 6; ++i) {
            const TaskFamily& fam = fams[i % fams.size()];
            uint64_t s = derive_seed(derive_seed(seed, "ev"), i);
            evals.push_back(gen_positive(fam, s, "ev-" + std::to_string(trial) + "-" +
                                                     std::to_string(i),
                                         run.cfg));
        }
        std::vector<std::pair<std::string, PairedSets>> conditions;
        for (StrategyKind kind :
             {StrategyKind::cot, StrategyKind::clarify, StrategyKind::respond_eval})
            conditions.emplace_back(
                strategy_name(kind),
                build_paired_sets(evals, kind, derive_seed(seed, strategy_name(kind)), run.cfg));
        RetrainReport rep = mini_retrain_check(conditions, run.series, 3, {4, 2e-3});
        if (rep.self_training_largest) ++wins;
    }

    bool ok = wins >= 9;
    report(8, "retraining oracle ordering", ok,
           "self-training largest in " + std::to_string(wins) + "/" + std::to_string(trials) +
               " trials");
    CHECK(ok);
}

TEST_CASE("criterion 9: schedule endpoints") {
    // 6400 examples, batch 32, 6 epochs -> 1200 steps at defaults
    TrainConfig tc;
    LrSchedule sched{tc.lr_peak, tc.lr_final, tc.warmup_steps, 6400 / 32 * 6};
    bool ok = sched.lr_at(10) == 1e-5 && sched.lr_at(sched.total) == 1e-7 && sched.lr_at(0) == 0.0;
    report(9, "schedule endpoints", ok,
           "lr(10)=" + format_double(sched.lr_at(10)) + " lr(" + std::to_string(sched.total) +
               ")=" + format_double(sched.lr_at(sched.total)));
    CHECK(ok);
}
