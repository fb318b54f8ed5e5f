// End-to-end checks of the command-line surface: every subcommand, the exit
// code contract, and the artifacts each one writes.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include <json.hpp>

#include "gradtrace/io.hpp"
#include "test_util.hpp"

using namespace gradtrace;
using namespace gtt;
namespace fs = std::filesystem;

namespace {

std::string cli() {
    const char* p = std::getenv("GRADTRACE_CLI");
    REQUIRE(p != nullptr);
    return p;
}

int run(const std::string& args, const fs::path& log) {
    std::string cmd = cli() + " " + args + " >> " + log.string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / "gradtrace_cli_test";
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

} // namespace

TEST_CASE("cli surface") {
    TempDir tmp;
    fs::path log = tmp.path / "log.txt";
    std::string data = (tmp.path / "data.jsonl").string();
    std::string rundir = (tmp.path / "run").string();

    // exit code 1 on usage errors, with help text on the stream
    CHECK(run("frobnicate", log) == 1);
    CHECK(run("train --no-such-flag", log) == 1);
    CHECK(run("--help", log) == 0);

    // exit code 2 on runtime errors
    CHECK(run("train --data " + (tmp.path / "missing.jsonl").string() + " --out " + rundir, log) ==
          2);

    REQUIRE(run("gen-data --out " + data + " --per-family 16 --seed 5", log) == 0);

    SUBCASE("a zero-epoch run manifests exactly one checkpoint") {
        std::string run0 = (tmp.path / "run0").string();
        REQUIRE(run("train --data " + data + " --out " + run0 + " --epochs 0", log) == 0);
        LoadedRun loaded = load_run(run0);
        CHECK(loaded.series.checkpoints.size() == 1);
        CHECK(loaded.series.checkpoints[0].first == 0);
    }

    SUBCASE("trace, oracle and report run end to end") {
        REQUIRE(run("train --data " + data + " --out " + rundir +
                        " --epochs 2 --batch 8 --stride 6 --warmup 4 --seed 5"
                        " --embed-dim 32 --layers 1 --rank 4 --alpha 8",
                    log) == 0);

        // probe/eval files for the trace command
        ModelConfig cfg = load_run(rundir).manifest.model;
        std::vector<Example> all = load_dataset(data, cfg);
        std::vector<Example> probes(all.begin(), all.begin() + 4);
        std::vector<Example> evals(all.begin() + 4, all.begin() + 8);
        save_dataset(tmp.path / "probes.jsonl", probes);
        save_dataset(tmp.path / "evals.jsonl", evals);

        std::string tcsv = (tmp.path / "t.csv").string();
        std::string mcsv = (tmp.path / "m.csv").string();
        REQUIRE(run("trace --run " + rundir + " --probes " + (tmp.path / "probes.jsonl").string() +
                        " --evals " + (tmp.path / "evals.jsonl").string() + " --out " + tcsv +
                        " --matrix-out " + mcsv + " --probe-label P --eval-label E",
                    log) == 0);
        std::vector<TraceRow> rows = load_trace_csv(tcsv);
        CHECK(!rows.empty());
        std::set<std::string> metrics;
        for (const TraceRow& r : rows) metrics.insert(r.metric);
        CHECK(metrics == std::set<std::string>{"P->In-task E", "P->Cross-task E"});
        CHECK(fs::exists(mcsv));

        std::string taylor = (tmp.path / "taylor.json").string();
        REQUIRE(run("oracle --mode taylor --run " + rundir + " --data " + data +
                        " --trials 6 --eta 1e-4 --out " + taylor,
                    log) == 0);
        auto tj = nlohmann::json::parse(read_file(taylor));
        CHECK(tj.at("mode") == "taylor");
        CHECK(tj.at("per_eta").size() == 1);
        CHECK(tj.at("per_eta")[0].at("entries").size() == 6);

        std::string retrain = (tmp.path / "retrain.json").string();
        REQUIRE(run("oracle --mode retrain --run " + rundir +
                        " --n 6 --steps 3 --lr 2e-3 --k-top 2 --out " + retrain,
                    log) == 0);
        auto rj = nlohmann::json::parse(read_file(retrain));
        CHECK(rj.at("conditions").size() == 4); // self + three strategies
        CHECK(rj.at("conditions")[0].at("name") == "self(evals)");

        std::string svg = (tmp.path / "t.svg").string();
        REQUIRE(run("report " + tcsv + " --out " + svg + " --title chart", log) == 0);
        std::string body = read_file(svg);
        size_t polylines = 0, pos = 0;
        while ((pos = body.find("<polyline", pos)) != std::string::npos) {
            ++polylines;
            pos += 9;
        }
        CHECK(polylines == 2);
    }

    SUBCASE("results do not depend on the worker count") {
        std::string run1 = (tmp.path / "run_t1").string();
        std::string run2 = (tmp.path / "run_t2").string();
        std::string common = " --data " + data + " --epochs 2 --batch 8 --stride 6 --warmup 4"
                             " --seed 5 --embed-dim 32 --layers 1 --rank 4 --alpha 8";
        REQUIRE(std::system(("GRADTRACE_THREADS=1 " + cli() + " train --out " + run1 + common +
                             " >> " + log.string() + " 2>&1")
                                .c_str()) == 0);
        REQUIRE(std::system(("GRADTRACE_THREADS=2 " + cli() + " train --out " + run2 + common +
                             " >> " + log.string() + " 2>&1")
                                .c_str()) == 0);
        for (const auto& entry : fs::directory_iterator(run1)) {
            if (entry.path().extension() != ".gtck") continue;
            fs::path twin = fs::path(run2) / entry.path().filename();
            REQUIRE(fs::exists(twin));
            CHECK(read_file(entry.path()) == read_file(twin));
        }
    }

    // every CLI invocation printed its resolved config as a JSON line
    std::string logged = read_file(log);
    CHECK(logged.find("{\"command\":\"gen-data\"") != std::string::npos);
}
