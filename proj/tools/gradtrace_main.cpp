// gradtrace: train a tiny adapter-tuned decoder, trace gradient-projection
// influence scores across its checkpoints, and sanity-check the estimates by
// actually retraining.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradtrace/io.hpp"
#include "gradtrace/oracle.hpp"
#include "gradtrace/rng.hpp"
#include "gradtrace/study.hpp"
#include "gradtrace/svg.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace gradtrace;

namespace {

void print_resolved_config(const std::string& command, const ordered_json& values) {
    ordered_json line;
    line["command"] = command;
    line["config"] = values;
    std::cout << line.dump() << "\n";
}

struct ModelFlags {
    size_t embed_dim = 64;
    size_t layers = 2;
    size_t heads = 2;
    size_t context_len = 256;
    size_t rank = 8;
    double alpha = 64.0;

    void attach(CLI::App* cmd) {
        cmd->add_option("--embed-dim", embed_dim, "embedding width");
        cmd->add_option("--layers", layers, "decoder blocks");
        cmd->add_option("--heads", heads, "attention heads");
        cmd->add_option("--context", context_len, "context window (tokens)");
        cmd->add_option("--rank", rank, "adapter rank r");
        cmd->add_option("--alpha", alpha, "adapter scaling alpha");
    }

    ModelConfig config() const {
        ModelConfig cfg;
        cfg.embed_dim = embed_dim;
        cfg.layers = layers;
        cfg.heads = heads;
        cfg.context_len = context_len;
        cfg.adapter_rank = rank;
        cfg.adapter_alpha = alpha;
        cfg.validate();
        return cfg;
    }

    ordered_json json() const {
        ordered_json j;
        j["embed_dim"] = embed_dim;
        j["layers"] = layers;
        j["heads"] = heads;
        j["context"] = context_len;
        j["rank"] = rank;
        j["alpha"] = alpha;
        return j;
    }
};

int cmd_gen_data(const std::string& out, size_t per_family, uint64_t seed,
                 const std::vector<std::string>& family_names, const std::string& exclude_file,
                 const ModelFlags& mf) {
    ModelConfig cfg = mf.config();
    std::vector<TaskFamily> fams;
    if (family_names.empty()) {
        fams = builtin_families();
    } else {
        for (const std::string& n : family_names) fams.push_back(find_family(n));
    }
    std::set<std::string> exclude;
    if (!exclude_file.empty())
        for (const Example& z : load_dataset(exclude_file, cfg)) exclude.insert(z.id);
    std::vector<Example> data = gen_base_dataset(fams, per_family, seed, cfg, exclude);
    save_dataset(out, data);
    std::cout << "wrote " << data.size() << " examples to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& data_file, const std::string& out_dir, const TrainConfig& tcfg,
              uint64_t weight_seed, size_t pretrain_steps, double pretrain_lr,
              const ModelFlags& mf) {
    ModelConfig cfg = mf.config();
    std::vector<Example> data = load_dataset(data_file, cfg);
    std::string data_bytes = read_file(data_file);
    uint64_t data_hash = fnv1a64(data_bytes.data(), data_bytes.size());

    ModelState state0 = init_state(cfg, weight_seed);
    if (pretrain_steps > 0)
        state0 = pretrain_base(state0, data, pretrain_steps, pretrain_lr, tcfg.seed);

    CheckpointSeries series = train(state0, data, tcfg, [](size_t step, double loss, double lr) {
        std::cout << "step=" << step << " loss=" << format_double(loss)
                  << " lr=" << format_double(lr) << "\n";
    });
    save_run(out_dir, series, cfg, tcfg, weight_seed, data_file, data_hash, data.size());
    std::cout << "run " << series.run_id << ": " << series.checkpoints.size()
              << " checkpoints in " << out_dir << "\n";
    return 0;
}

int cmd_trace(const std::string& run_dir, const std::string& probes_file,
              const std::string& evals_file, const std::string& out_file,
              const std::string& matrix_file, const std::string& probe_label,
              const std::string& eval_label, GradScope scope) {
    LoadedRun run = load_run(run_dir);
    PairedSets sets;
    sets.probes = load_dataset(probes_file, run.manifest.model);
    sets.evals = load_dataset(evals_file, run.manifest.model);
    sets.note = probe_label + " onto " + eval_label;
    TraceLabels labels{probe_label + "->In-task " + eval_label,
                       probe_label + "->Cross-task " + eval_label};
    GradientCache cache;
    InfluenceTrace t = trace(sets, run.series, labels, cache, scope);
    save_trace_csv(out_file, trace_rows(t));
    if (!matrix_file.empty()) save_matrix_csv(matrix_file, t);
    std::cout << "traced " << t.records.size() << " checkpoints to " << out_file << "\n";
    return 0;
}

int cmd_study(StrategyKind kind, const std::string& run_dir, const std::string& out_dir,
              size_t n, uint64_t seed, GradScope scope, bool matrices) {
    LoadedRun run = load_run(run_dir);
    StudyConfig sc;
    sc.n = n;
    sc.seed = seed;
    sc.scope = scope;
    StudyResult result = run_swift_study(kind, run.series, sc, run.manifest.model);

    fs::create_directories(out_dir);
    fs::path csv = fs::path(out_dir) / (std::string("study_") + strategy_name(kind) + ".csv");
    save_trace_csv(csv, trace_rows(result.traces));
    for (const auto& [role, examples] : result.sets)
        save_dataset(fs::path(out_dir) / (std::string("set_") + role + ".jsonl"), examples);
    if (matrices) {
        for (size_t i = 0; i < result.traces.size(); ++i) {
            fs::path m = fs::path(out_dir) / (std::string("matrix_") + strategy_name(kind) + "_" +
                                              std::to_string(i) + ".csv");
            save_matrix_csv(m, result.traces[i]);
        }
    }
    std::cout << "study " << strategy_name(kind) << ": " << result.traces.size() * 2
              << " metric series over " << result.traces.front().records.size()
              << " checkpoints -> " << csv.string() << "\n";
    return 0;
}

int cmd_oracle_taylor(const std::string& run_dir, const std::string& data_file, size_t trials,
                      std::vector<double> etas, uint64_t seed, const std::string& out_file) {
    LoadedRun run = load_run(run_dir);
    std::vector<Example> data = load_dataset(data_file, run.manifest.model);
    if (data.size() < 2) fail(Errc::size, "need at least two examples for taylor trials");
    if (etas.empty()) etas = {1e-4, 1e-5};

    ordered_json report;
    report["mode"] = "taylor";
    report["run_id"] = run.manifest.run_id;
    report["trials"] = trials;
    ordered_json per_eta = ordered_json::array();
    for (double eta : etas) {
        Rng rng(derive_seed(seed, "taylor"));
        std::vector<double> errors;
        ordered_json entries = ordered_json::array();
        for (size_t t = 0; t < trials; ++t) {
            const auto& [step, state] = run.series.checkpoints[rng.below(run.series.checkpoints.size())];
            size_t zi = rng.below(data.size());
            size_t z0i = rng.below(data.size());
            TaylorCheck chk = taylor_check(*state, data[zi], data[z0i], eta);
            errors.push_back(chk.rel_error);
            ordered_json e;
            e["step"] = step;
            e["z"] = data[zi].id;
            e["z0"] = data[z0i].id;
            e["predicted"] = chk.predicted;
            e["measured"] = chk.measured;
            e["rel_error"] = chk.rel_error;
            entries.push_back(std::move(e));
        }
        std::vector<double> sorted = errors;
        std::sort(sorted.begin(), sorted.end());
        double median = sorted[sorted.size() / 2];
        ordered_json block;
        block["eta"] = eta;
        block["median_rel_error"] = median;
        block["entries"] = std::move(entries);
        per_eta.push_back(std::move(block));
    }
    report["per_eta"] = std::move(per_eta);
    write_file_atomic(out_file, report.dump(2) + "\n");
    std::cout << "taylor report -> " << out_file << "\n";
    return 0;
}

int cmd_oracle_retrain(const std::string& run_dir, size_t n, uint64_t seed, size_t steps,
                       double lr, size_t k_top, const std::string& out_file) {
    LoadedRun run = load_run(run_dir);
    const ModelConfig& cfg = run.manifest.model;

    // shared eval set; one probe condition per strategy plus a plain-QA one
    std::vector<Example> evals;
    const auto& fams = builtin_families();
    for (size_t i = 0; i < n; ++i) {
        const TaskFamily& fam = fams[i % fams.size()];
        uint64_t s = derive_seed(derive_seed(seed, "retrain-eval"), i);
        evals.push_back(gen_positive(fam, s, "eval-" + fam.name + "-" + std::to_string(i), cfg));
    }
    std::vector<std::pair<std::string, PairedSets>> conditions;
    for (StrategyKind kind :
         {StrategyKind::cot, StrategyKind::clarify, StrategyKind::respond_eval}) {
        conditions.emplace_back(strategy_name(kind),
                                build_paired_sets(evals, kind, derive_seed(seed, strategy_name(kind)),
                                                  cfg));
    }

    RetrainReport report = mini_retrain_check(conditions, run.series, k_top, {steps, lr});

    ordered_json j;
    j["mode"] = "retrain";
    j["run_id"] = run.manifest.run_id;
    j["finetune_steps"] = report.finetune_steps;
    j["finetune_lr"] = report.finetune_lr;
    j["self_training_largest"] = report.self_training_largest;
    j["ordering_match"] = report.ordering_match;
    ordered_json conds = ordered_json::array();
    for (const RetrainCondition& c : report.conditions) {
        ordered_json cj;
        cj["name"] = c.name;
        cj["realized_reduction"] = c.realized_reduction;
        cj["s_in_final"] = c.s_in_final;
        cj["top_probes"] = c.top_probes;
        conds.push_back(std::move(cj));
    }
    j["conditions"] = std::move(conds);
    write_file_atomic(out_file, j.dump(2) + "\n");
    std::cout << "retrain report -> " << out_file
              << (report.self_training_largest ? " (self-training largest)" : "") << "\n";
    return 0;
}

int cmd_report(const std::string& csv_file, const std::string& out_file,
               const std::string& title) {
    std::vector<TraceRow> rows = load_trace_csv(csv_file);
    if (rows.empty()) fail(Errc::size, csv_file + " has no data rows");
    std::string svg = render_trace_chart(rows, title.empty() ? csv_file : title);
    write_file_atomic(out_file, svg);
    std::cout << "chart -> " << out_file << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"gradient-projection influence tracing for instruction-tuning data"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic instruction-tuning dataset");
    std::string gen_out = "data.jsonl";
    size_t per_family = 85;
    uint64_t gen_seed = 1;
    std::vector<std::string> gen_families;
    std::string gen_exclude;
    ModelFlags gen_mf;
    gen->add_option("--out", gen_out, "output JSONL path")->required();
    gen->add_option("--per-family", per_family, "examples per task family");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--families", gen_families, "subset of task families")->delimiter(',');
    gen->add_option("--exclude", gen_exclude, "JSONL whose ids must not be generated");
    gen_mf.attach(gen);

    // train
    auto* tr = app.add_subcommand("train", "fine-tune adapters and checkpoint the run");
    std::string train_data, train_out;
    TrainConfig tcfg;
    tcfg.epochs = 5;
    uint64_t weight_seed = 11;
    size_t pretrain_steps = 0;
    double pretrain_lr = 1e-3;
    ModelFlags train_mf;
    tr->add_option("--data", train_data, "training JSONL")->required();
    tr->add_option("--out", train_out, "run directory")->required();
    tr->add_option("--epochs", tcfg.epochs, "training epochs");
    tr->add_option("--batch", tcfg.batch_size, "batch size");
    tr->add_option("--lr-peak", tcfg.lr_peak, "peak learning rate");
    tr->add_option("--lr-final", tcfg.lr_final, "final learning rate");
    tr->add_option("--warmup", tcfg.warmup_steps, "warmup steps");
    tr->add_option("--stride", tcfg.checkpoint_stride, "checkpoint stride");
    tr->add_option("--seed", tcfg.seed, "shuffle seed");
    tr->add_option("--weight-seed", weight_seed, "base weight init seed");
    tr->add_option("--base-pretrain-steps", pretrain_steps,
                   "full-parameter warmup steps before the adapter run");
    tr->add_option("--base-pretrain-lr", pretrain_lr, "warmup learning rate");
    train_mf.attach(tr);

    // trace
    auto* tc = app.add_subcommand("trace", "trace influence of a probe set onto an eval set");
    std::string trace_run, trace_probes, trace_evals, trace_out, trace_matrix;
    std::string probe_label = "probe", eval_label = "eval", trace_scope = "adapter";
    tc->add_option("--run", trace_run, "run directory")->required();
    tc->add_option("--probes", trace_probes, "probe JSONL")->required();
    tc->add_option("--evals", trace_evals, "eval JSONL")->required();
    tc->add_option("--out", trace_out, "output trace CSV")->required();
    tc->add_option("--matrix-out", trace_matrix, "optional full-matrix CSV");
    tc->add_option("--probe-label", probe_label, "metric prefix for the probe set");
    tc->add_option("--eval-label", eval_label, "metric suffix for the eval set");
    tc->add_option("--scope", trace_scope, "gradient scope: adapter | all")
        ->check(CLI::IsMember({"adapter", "all"}));

    // study
    auto* st = app.add_subcommand("study", "run a swift study against a trained run");
    std::string study_kind, study_run, study_out, study_scope = "adapter";
    size_t study_n = 8;
    uint64_t study_seed = 7;
    bool study_matrices = false;
    st->add_option("--kind", study_kind, "cot | clarify | respond_eval")
        ->required()
        ->check(CLI::IsMember({"cot", "clarify", "respond_eval"}));
    st->add_option("--run", study_run, "run directory")->required();
    st->add_option("--out", study_out, "output directory")->required();
    st->add_option("--n", study_n, "paired-set size");
    st->add_option("--seed", study_seed, "probe/eval generation seed");
    st->add_option("--scope", study_scope, "gradient scope: adapter | all")
        ->check(CLI::IsMember({"adapter", "all"}));
    st->add_flag("--matrices", study_matrices, "also write full RelInf matrices");

    // oracle
    auto* orc = app.add_subcommand("oracle", "validate estimates by actual retraining");
    std::string oracle_mode, oracle_run, oracle_data, oracle_out = "oracle.json";
    size_t oracle_trials = 50, oracle_n = 8, oracle_steps = 5, oracle_ktop = 3;
    double oracle_lr = 2e-3;
    std::vector<double> oracle_etas;
    uint64_t oracle_seed = 5;
    orc->add_option("--mode", oracle_mode, "taylor | retrain")
        ->required()
        ->check(CLI::IsMember({"taylor", "retrain"}));
    orc->add_option("--run", oracle_run, "run directory")->required();
    orc->add_option("--data", oracle_data, "example JSONL (taylor mode)");
    orc->add_option("--out", oracle_out, "output JSON report");
    orc->add_option("--trials", oracle_trials, "taylor trial count");
    orc->add_option("--eta", oracle_etas, "taylor step sizes (repeatable)");
    orc->add_option("--n", oracle_n, "retrain paired-set size");
    orc->add_option("--steps", oracle_steps, "retrain fine-tune steps");
    orc->add_option("--lr", oracle_lr, "retrain fine-tune rate");
    orc->add_option("--k-top", oracle_ktop, "top probes listed per condition");
    orc->add_option("--seed", oracle_seed, "sampling seed");

    // report
    auto* rp = app.add_subcommand("report", "render a trace CSV as an SVG line chart");
    std::string report_csv, report_out, report_title;
    rp->add_option("csv", report_csv, "trace CSV")->required();
    rp->add_option("--out", report_out, "output SVG (default: csv stem + .svg)");
    rp->add_option("--title", report_title, "chart title");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            ordered_json j;
            j["out"] = gen_out;
            j["per_family"] = per_family;
            j["seed"] = gen_seed;
            j["families"] = gen_families;
            j["exclude"] = gen_exclude;
            j["model"] = gen_mf.json();
            print_resolved_config("gen-data", j);
            return cmd_gen_data(gen_out, per_family, gen_seed, gen_families, gen_exclude, gen_mf);
        }
        if (tr->parsed()) {
            ordered_json j;
            j["data"] = train_data;
            j["out"] = train_out;
            j["epochs"] = tcfg.epochs;
            j["batch"] = tcfg.batch_size;
            j["lr_peak"] = tcfg.lr_peak;
            j["lr_final"] = tcfg.lr_final;
            j["warmup"] = tcfg.warmup_steps;
            j["stride"] = tcfg.checkpoint_stride;
            j["seed"] = tcfg.seed;
            j["weight_seed"] = weight_seed;
            j["base_pretrain_steps"] = pretrain_steps;
            j["model"] = train_mf.json();
            print_resolved_config("train", j);
            return cmd_train(train_data, train_out, tcfg, weight_seed, pretrain_steps, pretrain_lr,
                             train_mf);
        }
        if (tc->parsed()) {
            ordered_json j;
            j["run"] = trace_run;
            j["probes"] = trace_probes;
            j["evals"] = trace_evals;
            j["out"] = trace_out;
            j["matrix_out"] = trace_matrix;
            j["probe_label"] = probe_label;
            j["eval_label"] = eval_label;
            j["scope"] = trace_scope;
            print_resolved_config("trace", j);
            GradScope scope = trace_scope == "all" ? GradScope::all : GradScope::adapters;
            return cmd_trace(trace_run, trace_probes, trace_evals, trace_out, trace_matrix,
                             probe_label, eval_label, scope);
        }
        if (st->parsed()) {
            ordered_json j;
            j["kind"] = study_kind;
            j["run"] = study_run;
            j["out"] = study_out;
            j["n"] = study_n;
            j["seed"] = study_seed;
            j["scope"] = study_scope;
            j["matrices"] = study_matrices;
            print_resolved_config("study", j);
            GradScope scope = study_scope == "all" ? GradScope::all : GradScope::adapters;
            return cmd_study(*parse_strategy(study_kind), study_run, study_out, study_n,
                             study_seed, scope, study_matrices);
        }
        if (orc->parsed()) {
            ordered_json j;
            j["mode"] = oracle_mode;
            j["run"] = oracle_run;
            j["data"] = oracle_data;
            j["out"] = oracle_out;
            j["trials"] = oracle_trials;
            j["etas"] = oracle_etas;
            j["n"] = oracle_n;
            j["steps"] = oracle_steps;
            j["lr"] = oracle_lr;
            j["k_top"] = oracle_ktop;
            j["seed"] = oracle_seed;
            print_resolved_config("oracle", j);
            if (oracle_mode == "taylor") {
                if (oracle_data.empty())
                    fail(Errc::config, "oracle --mode taylor needs --data");
                return cmd_oracle_taylor(oracle_run, oracle_data, oracle_trials, oracle_etas,
                                         oracle_seed, oracle_out);
            }
            return cmd_oracle_retrain(oracle_run, oracle_n, oracle_seed, oracle_steps, oracle_lr,
                                      oracle_ktop, oracle_out);
        }
        if (rp->parsed()) {
            if (report_out.empty())
                report_out = fs::path(report_csv).replace_extension(".svg").string();
            ordered_json j;
            j["csv"] = report_csv;
            j["out"] = report_out;
            j["title"] = report_title;
            print_resolved_config("report", j);
            return cmd_report(report_csv, report_out, report_title);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
