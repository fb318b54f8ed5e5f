#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gradtrace/oracle.hpp"
#include "test_util.hpp"

using namespace gradtrace;
using namespace gtt;

TEST_CASE("taylor check against a real retraining step") {
    ModelConfig cfg = micro_config();
    std::vector<Example> data = small_dataset(cfg, 1, 211);
    ModelState st = randomized_adapter_state(cfg, 223);

    SUBCASE("a self step decreases its own loss") {
        TaylorCheck chk = taylor_check(st, data[0], data[0], 1e-4);
        CHECK(chk.measured > 0.0);
        CHECK(chk.predicted > 0.0);
    }
    SUBCASE("the prediction converges on the measurement as eta shrinks") {
        TaylorCheck coarse = taylor_check(st, data[1], data[1], 1e-4);
        TaylorCheck fine = taylor_check(st, data[1], data[1], 1e-6);
        CHECK(fine.rel_error < coarse.rel_error);
        CHECK(fine.predicted / fine.measured == doctest::Approx(1.0).epsilon(1e-3));
    }
    SUBCASE("median error over mixed pairs stays small and shrinks with eta") {
        Rng rng(227);
        std::vector<double> coarse, fine;
        for (int t = 0; t < 15; ++t) {
            const Example& z = data[rng.below(data.size())];
            const Example& z0 = data[rng.below(data.size())];
            coarse.push_back(taylor_check(st, z, z0, 1e-4).rel_error);
            fine.push_back(taylor_check(st, z, z0, 1e-5).rel_error);
        }
        std::sort(coarse.begin(), coarse.end());
        std::sort(fine.begin(), fine.end());
        CHECK(coarse[coarse.size() / 2] <= 0.05);
        CHECK(fine[fine.size() / 2] <= coarse[coarse.size() / 2]);
    }
    SUBCASE("a non-positive eta is rejected") {
        CHECK_THROWS_AS(taylor_check(st, data[0], data[1], 0.0), Error);
    }
}

TEST_CASE("mini retraining check") {
    ModelConfig cfg = micro_config();
    std::vector<Example> data = small_dataset(cfg, 3, 229);
    CheckpointSeries series = quick_series(cfg, data, 2, 4, 233);

    std::vector<Example> evals;
    const auto& fams = builtin_families();
    for (size_t i = 0; i < 6; ++i)
        evals.push_back(gen_positive(fams[i % fams.size()], derive_seed(239, i),
                                     "ev-" + std::to_string(i), cfg));
    PairedSets cot_sets = build_paired_sets(evals, StrategyKind::cot, 241, cfg);

    SUBCASE("zero fine-tune steps give zero reduction") {
        RetrainReport r = mini_retrain_check(cot_sets, series, 2, {0, 1e-3});
        for (const RetrainCondition& c : r.conditions) CHECK(c.realized_reduction == 0.0);
    }
    SUBCASE("probes equal to evals reproduce the self condition exactly") {
        PairedSets self;
        self.probes = evals;
        self.evals = evals;
        self.note = "copy";
        RetrainReport r = mini_retrain_check(self, series, 2, {3, 1e-3});
        REQUIRE(r.conditions.size() == 2);
        CHECK(r.conditions[0].realized_reduction == r.conditions[1].realized_reduction);
        CHECK(r.conditions[0].s_in_final == r.conditions[1].s_in_final);
    }
    SUBCASE("self training wins and the report carries rankings") {
        std::vector<std::pair<std::string, PairedSets>> conditions;
        conditions.emplace_back("cot", cot_sets);
        conditions.emplace_back("clarify",
                                build_paired_sets(evals, StrategyKind::clarify, 251, cfg));
        RetrainReport r = mini_retrain_check(conditions, series, 3, {4, 2e-3});
        REQUIRE(r.conditions.size() == 3);
        CHECK(r.conditions[0].name == "self(evals)");
        CHECK(r.self_training_largest);
        CHECK(r.conditions[0].s_in_final == doctest::Approx(1.0).epsilon(1e-12));
        for (const RetrainCondition& c : r.conditions) {
            CHECK(c.top_probes.size() == 3);
            CHECK(std::isfinite(c.realized_reduction));
        }
    }
}
