#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gradtrace/influence.hpp"
#include "gradtrace/model.hpp"
#include "gradtrace/rng.hpp"

namespace gradtrace {

// The three data-creation strategies under study.
enum class StrategyKind { cot, clarify, respond_eval };

const char* strategy_name(StrategyKind k);
std::optional<StrategyKind> parse_strategy(std::string_view name);

// A synthetic task: a sampler for input payloads and the deterministic rule
// mapping payloads to correct outputs, plus the rendering hooks the strategy
// transforms need (rule traces, format directives, corrupted outputs).
struct TaskFamily {
    std::string name;
    std::function<std::string(Rng&)> sample_payload;
    std::function<std::string(const std::string&)> core_query;   // without directive
    std::string format_directive;                                // appended to core query
    std::function<std::string(const std::string&)> answer;       // correct, formatted
    std::function<std::string(const std::string&)> sloppy_answer; // unformatted/ambiguous
    std::function<std::string(const std::string&)> rationale;    // rule trace

    std::string full_query(const std::string& payload) const;
    // Recovers the payload from either the full or the directive-less query.
    std::optional<std::string> parse_payload(const std::string& query) const;
};

const std::vector<TaskFamily>& builtin_families();
const TaskFamily& find_family(const std::string& name);

// Well-specified query with the correct formatted response.
Example gen_positive(const TaskFamily& fam, uint64_t seed, const std::string& id,
                     const ModelConfig& cfg);

// Under-specified query (directive dropped) with an unformatted response;
// the deterministic stand-in for a misbehaving model output.
Example gen_negative(const TaskFamily& fam, uint64_t seed, const std::string& id,
                     const ModelConfig& cfg);

// Deterministic base corpus: per_family examples from each family, ids
// carrying the family name and seed. Probe/eval ids passed in exclude_ids
// are never emitted; an example that cannot fit the context is regenerated
// with a shorter payload a bounded number of times.
std::vector<Example> gen_base_dataset(const std::vector<TaskFamily>& families, size_t per_family,
                                      uint64_t seed, const ModelConfig& cfg,
                                      const std::set<std::string>& exclude_ids = {});

// Applies one strategy to an example:
//   cot          - directive marker appended to the query, rule-trace
//                  rationale prepended to the response
//   clarify      - query wrapped in a restatement request, response is the
//                  clarified query (requirements appended)
//   respond_eval - query wraps the original query and response, response is
//                  a rule-checked verdict (MEETS / FAILS) plus justification
Example make_variant(const Example& z, StrategyKind kind, uint64_t seed, const ModelConfig& cfg);

// probe i = strategy variant of a fresh same-family analog of eval i.
PairedSets build_paired_sets(const std::vector<Example>& evals, StrategyKind kind, uint64_t seed,
                             const ModelConfig& cfg, bool require_cross_task = true);

struct StudyConfig {
    size_t n = 8;
    uint64_t seed = 7;
    GradScope scope = GradScope::adapters;
};

struct StudyResult {
    StrategyKind kind;
    std::vector<InfluenceTrace> traces;
    // The example sets behind the traces, keyed by role, for audit dumps and
    // retraining oracles.
    std::map<std::string, std::vector<Example>> sets;
};

// Runs a full swift study against a trained series: builds probe/eval sets
// for the strategy plus its plain-QA comparison and traces every metric the
// protocol defines (4 labeled series for cot, 8 for clarify, 12 for
// respond_eval).
StudyResult run_swift_study(StrategyKind kind, const CheckpointSeries& series,
                            const StudyConfig& study_cfg, const ModelConfig& model_cfg);

} // namespace gradtrace
