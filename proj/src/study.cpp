#include "gradtrace/study.hpp"

#include <algorithm>

namespace gradtrace {

const char* strategy_name(StrategyKind k) {
    switch (k) {
        case StrategyKind::cot: return "cot";
        case StrategyKind::clarify: return "clarify";
        case StrategyKind::respond_eval: return "respond_eval";
    }
    return "?";
}

std::optional<StrategyKind> parse_strategy(std::string_view name) {
    if (name == "cot") return StrategyKind::cot;
    if (name == "clarify") return StrategyKind::clarify;
    if (name == "respond_eval") return StrategyKind::respond_eval;
    return std::nullopt;
}

std::string TaskFamily::full_query(const std::string& payload) const {
    return core_query(payload) + format_directive;
}

std::optional<std::string> TaskFamily::parse_payload(const std::string& query) const {
    std::string q = query;
    if (q.size() >= format_directive.size() &&
        q.compare(q.size() - format_directive.size(), format_directive.size(),
                  format_directive) == 0)
        q.erase(q.size() - format_directive.size());
    // Every core template is "<prefix><payload>"; match the prefix by
    // rendering the template with an empty marker.
    std::string prefix = core_query("\x01");
    size_t cut = prefix.find('\x01');
    if (cut == std::string::npos) return std::nullopt;
    std::string head = prefix.substr(0, cut);
    std::string tail = prefix.substr(cut + 1);
    if (q.size() < head.size() + tail.size()) return std::nullopt;
    if (q.compare(0, head.size(), head) != 0) return std::nullopt;
    if (!tail.empty() && q.compare(q.size() - tail.size(), tail.size(), tail) != 0)
        return std::nullopt;
    return q.substr(head.size(), q.size() - head.size() - tail.size());
}

namespace {

std::string random_lower(Rng& rng, size_t lo, size_t hi) {
    size_t len = lo + rng.below(hi - lo + 1);
    std::string s(len, 'a');
    for (char& c : s) c = static_cast<char>('a' + rng.below(26));
    return s;
}

std::string random_digits(Rng& rng, size_t lo, size_t hi) {
    size_t len = lo + rng.below(hi - lo + 1);
    std::string s(len, '0');
    for (char& c : s) c = static_cast<char>('0' + rng.below(10));
    return s;
}

std::string spaced(const std::string& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out.push_back(' ');
        out.push_back(s[i]);
    }
    return out;
}

std::vector<TaskFamily> make_families() {
    std::vector<TaskFamily> fams;

    {
        TaskFamily f;
        f.name = "copy";
        f.sample_payload = [](Rng& rng) { return random_lower(rng, 4, 8); };
        f.core_query = [](const std::string& p) { return "copy exactly: " + p; };
        f.format_directive = " (text only)";
        f.answer = [](const std::string& p) { return p; };
        f.sloppy_answer = [](const std::string& p) { return "the text is " + p; };
        f.rationale = [](const std::string& p) { return "chars " + spaced(p); };
        fams.push_back(std::move(f));
    }
    {
        TaskFamily f;
        f.name = "reverse";
        f.sample_payload = [](Rng& rng) { return random_lower(rng, 4, 8); };
        f.core_query = [](const std::string& p) { return "reverse the text: " + p; };
        f.format_directive = " (text only)";
        f.answer = [](const std::string& p) { return std::string(p.rbegin(), p.rend()); };
        f.sloppy_answer = [](const std::string& p) {
            return "reading backwards gives " + std::string(p.rbegin(), p.rend());
        };
        f.rationale = [](const std::string& p) {
            return "take " + spaced(std::string(p.rbegin(), p.rend()));
        };
        fams.push_back(std::move(f));
    }
    {
        TaskFamily f;
        f.name = "sort_digits";
        f.sample_payload = [](Rng& rng) { return random_digits(rng, 3, 6); };
        f.core_query = [](const std::string& p) { return "sort ascending: " + p; };
        f.format_directive = " (digits only)";
        auto sorted = [](const std::string& p) {
            std::string s = p;
            std::sort(s.begin(), s.end());
            return s;
        };
        f.answer = sorted;
        f.sloppy_answer = [sorted](const std::string& p) { return "sorted order " + sorted(p); };
        f.rationale = [sorted](const std::string& p) {
            std::string out;
            for (char c : sorted(p)) {
                out += "pick ";
                out.push_back(c);
                out.push_back(' ');
            }
            out.pop_back();
            return out;
        };
        fams.push_back(std::move(f));
    }
    {
        TaskFamily f;
        f.name = "modular_sum";
        f.sample_payload = [](Rng& rng) { return random_digits(rng, 3, 6); };
        f.core_query = [](const std::string& p) { return "digit sum mod 10 of " + p; };
        f.format_directive = " (one digit)";
        auto total = [](const std::string& p) {
            int s = 0;
            for (char c : p) s += c - '0';
            return s;
        };
        f.answer = [total](const std::string& p) {
            return std::string(1, static_cast<char>('0' + total(p) % 10));
        };
        f.sloppy_answer = [total](const std::string& p) {
            return "the result equals " + std::to_string(total(p) % 10);
        };
        f.rationale = [](const std::string& p) {
            std::string out;
            int run = p[0] - '0';
            out += p.substr(0, 1);
            for (size_t i = 1; i < p.size(); ++i) {
                int d = p[i] - '0';
                out += "+";
                out.push_back(p[i]);
                run += d;
                out += "=" + std::to_string(run);
            }
            out += " then mod 10 is " + std::to_string(run % 10);
            return out;
        };
        fams.push_back(std::move(f));
    }
    {
        TaskFamily f;
        f.name = "substring_extract";
        // payload format "i:j:text" with 0 <= i < j <= len(text)
        f.sample_payload = [](Rng& rng) {
            std::string text = random_lower(rng, 5, 8);
            size_t i = rng.below(text.size() - 1);
            size_t j = i + 1 + rng.below(text.size() - i - 1) + 1;
            j = std::min(j, text.size());
            return std::to_string(i) + ":" + std::to_string(j) + ":" + text;
        };
        auto parts = [](const std::string& p) {
            size_t a = p.find(':');
            size_t b = p.find(':', a + 1);
            size_t i = static_cast<size_t>(std::stoul(p.substr(0, a)));
            size_t j = static_cast<size_t>(std::stoul(p.substr(a + 1, b - a - 1)));
            return std::tuple<size_t, size_t, std::string>(i, j, p.substr(b + 1));
        };
        f.core_query = [](const std::string& p) { return "extract slice " + p; };
        f.format_directive = " (text only)";
        f.answer = [parts](const std::string& p) {
            auto [i, j, text] = parts(p);
            return text.substr(i, j - i);
        };
        f.sloppy_answer = [parts](const std::string& p) {
            auto [i, j, text] = parts(p);
            return "the slice is " + text.substr(i, j - i);
        };
        f.rationale = [parts](const std::string& p) {
            auto [i, j, text] = parts(p);
            return "chars " + std::to_string(i) + " to " + std::to_string(j) + " of " + text +
                   " give " + text.substr(i, j - i);
        };
        fams.push_back(std::move(f));
    }
    {
        TaskFamily f;
        f.name = "pattern_classify";
        f.sample_payload = [](Rng& rng) {
            std::string s = random_lower(rng, 4, 8);
            if (rng.below(2) == 0) s.back() = s.front(); // balance the classes
            return s;
        };
        f.core_query = [](const std::string& p) {
            return "do first and last characters match in " + p;
        };
        f.format_directive = " (yes or no)";
        f.answer = [](const std::string& p) {
            return p.front() == p.back() ? std::string("yes") : std::string("no");
        };
        f.sloppy_answer = [](const std::string& p) {
            return std::string("i think ") + (p.front() == p.back() ? "they do" : "they differ");
        };
        f.rationale = [](const std::string& p) {
            std::string out = "first ";
            out.push_back(p.front());
            out += " last ";
            out.push_back(p.back());
            out += p.front() == p.back() ? " same" : " differ";
            return out;
        };
        fams.push_back(std::move(f));
    }
    return fams;
}

constexpr const char* kCotDirective = " show the steps first";
constexpr const char* kClarifyWrapPrefix = "rephrase this question so it is fully specified: ";
constexpr const char* kEvalWrapPrefix = "judge whether the response meets the request. request: ";
constexpr const char* kEvalWrapMid = " response: ";

std::string hex_id(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%08llx", static_cast<unsigned long long>(h & 0xffffffffULL));
    return std::string(buf);
}

} // namespace

const std::vector<TaskFamily>& builtin_families() {
    static const std::vector<TaskFamily> fams = make_families();
    return fams;
}

const TaskFamily& find_family(const std::string& name) {
    for (const TaskFamily& f : builtin_families())
        if (f.name == name) return f;
    fail(Errc::config, "unknown task family '" + name + "'");
}

Example gen_positive(const TaskFamily& fam, uint64_t seed, const std::string& id,
                     const ModelConfig& cfg) {
    Rng rng(seed);
    std::string payload = fam.sample_payload(rng);
    return make_example(id, fam.name, fam.full_query(payload), fam.answer(payload), cfg);
}

Example gen_negative(const TaskFamily& fam, uint64_t seed, const std::string& id,
                     const ModelConfig& cfg) {
    Rng rng(seed);
    std::string payload = fam.sample_payload(rng);
    return make_example(id, fam.name, fam.core_query(payload), fam.sloppy_answer(payload), cfg);
}

std::vector<Example> gen_base_dataset(const std::vector<TaskFamily>& families, size_t per_family,
                                      uint64_t seed, const ModelConfig& cfg,
                                      const std::set<std::string>& exclude_ids) {
    if (families.empty()) fail(Errc::size, "no task families given");
    if (per_family == 0) fail(Errc::size, "per_family count must be >= 1");
    std::vector<Example> out;
    out.reserve(families.size() * per_family);
    for (const TaskFamily& fam : families) {
        for (size_t i = 0; i < per_family; ++i) {
            uint64_t ex_seed = derive_seed(derive_seed(seed, fam.name), i);
            std::string id = fam.name + "-" + hex_id(ex_seed) + "-" + std::to_string(i);
            if (exclude_ids.count(id)) continue;
            const int max_retries = 8;
            int attempt = 0;
            for (;;) {
                try {
                    out.push_back(gen_positive(fam, derive_seed(ex_seed, attempt), id, cfg));
                    break;
                } catch (const Error& e) {
                    if (e.code() != Errc::length || ++attempt > max_retries) throw;
                }
            }
        }
    }
    return out;
}

Example make_variant(const Example& z, StrategyKind kind, uint64_t seed, const ModelConfig& cfg) {
    const TaskFamily& fam = find_family(z.task);
    std::string q = query_text(z);
    std::string r = response_text(z);
    std::optional<std::string> payload = fam.parse_payload(q);
    if (!payload)
        fail(Errc::state, "example " + z.id + " does not match the " + fam.name + " template");
    std::string id = z.id + "-" + strategy_name(kind) + "-" + hex_id(derive_seed(seed, z.id));

    switch (kind) {
        case StrategyKind::cot: {
            std::string vq = q + kCotDirective;
            std::string vr = fam.rationale(*payload) + " so the answer is " + fam.answer(*payload);
            return make_example(id, z.task, vq, vr, cfg);
        }
        case StrategyKind::clarify: {
            std::string vq = kClarifyWrapPrefix + q;
            std::string vr = fam.full_query(*payload) + " answer with the exact output only";
            return make_example(id, z.task, vq, vr, cfg);
        }
        case StrategyKind::respond_eval: {
            std::string vq = kEvalWrapPrefix + q + kEvalWrapMid + r;
            bool correct = (r == fam.answer(*payload));
            std::string vr = correct
                                 ? "MEETS the request, expected " + fam.answer(*payload)
                                 : "FAILS the request, expected " + fam.answer(*payload) +
                                       " but got " + r;
            return make_example(id, z.task, vq, vr, cfg);
        }
    }
    fail(Errc::config, "unknown strategy kind");
}

PairedSets build_paired_sets(const std::vector<Example>& evals, StrategyKind kind, uint64_t seed,
                             const ModelConfig& cfg, bool require_cross_task) {
    if (evals.empty()) fail(Errc::size, "no evaluation examples given");
    if (require_cross_task) {
        std::set<std::string> tasks;
        for (const Example& z : evals) tasks.insert(z.task);
        if (tasks.size() < 2)
            fail(Errc::size, "cross-task metrics need evals from at least two distinct tasks");
    }
    PairedSets sets;
    sets.evals = evals;
    sets.note = std::string(strategy_name(kind)) + " probes";
    sets.probes.reserve(evals.size());
    for (size_t i = 0; i < evals.size(); ++i) {
        const TaskFamily& fam = find_family(evals[i].task);
        uint64_t analog_seed = derive_seed(derive_seed(seed, "analog"), i);
        Example analog = gen_positive(fam, analog_seed,
                                      "probe-" + fam.name + "-" + hex_id(analog_seed), cfg);
        sets.probes.push_back(make_variant(analog, kind, derive_seed(seed, i), cfg));
    }
    return sets;
}

namespace {

// Fresh example sets used by all three protocols: anchors (the references a
// strategy variant is built from), same-family eval analogs, and the
// positive/negative pairs for the clarify and respond_eval studies.
struct StudySets {
    std::vector<Example> anchors;   // plain positives, the "reference" examples
    std::vector<Example> evals_pos; // fresh positive analogs (evaluation side)
    std::vector<Example> evals_neg; // fresh negative analogs
    std::vector<Example> anchors_neg;
};

StudySets build_study_sets(const StudyConfig& sc, const ModelConfig& cfg) {
    const auto& fams = builtin_families();
    StudySets out;
    for (size_t i = 0; i < sc.n; ++i) {
        const TaskFamily& fam = fams[i % fams.size()];
        uint64_t s_anchor = derive_seed(derive_seed(sc.seed, "anchor"), i);
        uint64_t s_eval = derive_seed(derive_seed(sc.seed, "eval"), i);
        out.anchors.push_back(
            gen_positive(fam, s_anchor, "ref-" + fam.name + "-" + hex_id(s_anchor), cfg));
        out.anchors_neg.push_back(
            gen_negative(fam, s_anchor, "refneg-" + fam.name + "-" + hex_id(s_anchor), cfg));
        out.evals_pos.push_back(
            gen_positive(fam, s_eval, "eval-" + fam.name + "-" + hex_id(s_eval), cfg));
        out.evals_neg.push_back(
            gen_negative(fam, s_eval, "evalneg-" + fam.name + "-" + hex_id(s_eval), cfg));
    }
    return out;
}

std::vector<Example> variants_of(const std::vector<Example>& zs, StrategyKind kind, uint64_t seed,
                                 const ModelConfig& cfg) {
    std::vector<Example> out;
    out.reserve(zs.size());
    for (size_t i = 0; i < zs.size(); ++i)
        out.push_back(make_variant(zs[i], kind, derive_seed(seed, i), cfg));
    return out;
}

} // namespace

StudyResult run_swift_study(StrategyKind kind, const CheckpointSeries& series,
                            const StudyConfig& sc, const ModelConfig& model_cfg) {
    if (sc.n < 2) fail(Errc::size, "a study needs n >= 2 pairs");
    if (series.checkpoints.empty()) fail(Errc::state, "study needs a trained checkpoint series");

    StudySets sets = build_study_sets(sc, model_cfg);
    GradientCache cache;
    StudyResult result;
    result.kind = kind;

    auto add_trace = [&](const std::vector<Example>& probes, const std::vector<Example>& evals,
                         const std::string& probe_label, const std::string& eval_label) {
        PairedSets ps;
        ps.probes = probes;
        ps.evals = evals;
        ps.note = probe_label + " onto " + eval_label;
        TraceLabels labels{probe_label + "->In-task " + eval_label,
                           probe_label + "->Cross-task " + eval_label};
        result.traces.push_back(trace(ps, series, labels, cache, sc.scope));
    };

    switch (kind) {
        case StrategyKind::cot: {
            std::vector<Example> cot_probes =
                variants_of(sets.anchors, StrategyKind::cot, derive_seed(sc.seed, "cot"), model_cfg);
            result.sets["probes_cot"] = cot_probes;
            result.sets["probes_plain"] = sets.anchors;
            result.sets["evals"] = sets.evals_pos;
            add_trace(cot_probes, sets.evals_pos, "CoT", "non-CoT");
            add_trace(sets.anchors, sets.evals_pos, "non-CoT", "non-CoT");
            break;
        }
        case StrategyKind::clarify: {
            std::vector<Example> clarify_probes = variants_of(
                sets.anchors_neg, StrategyKind::clarify, derive_seed(sc.seed, "clarify"), model_cfg);
            result.sets["probes_clarify"] = clarify_probes;
            result.sets["probes_pos"] = sets.anchors;
            result.sets["evals_pos"] = sets.evals_pos;
            result.sets["evals_neg"] = sets.evals_neg;
            add_trace(clarify_probes, sets.evals_pos, "Clarify", "Pos");
            add_trace(clarify_probes, sets.evals_neg, "Clarify", "Neg");
            add_trace(sets.anchors, sets.evals_pos, "Pos", "Pos");
            add_trace(sets.anchors, sets.evals_neg, "Pos", "Neg");
            break;
        }
        case StrategyKind::respond_eval: {
            std::vector<Example> eval_pos_probes = variants_of(
                sets.anchors, StrategyKind::respond_eval, derive_seed(sc.seed, "epos"), model_cfg);
            std::vector<Example> eval_neg_probes =
                variants_of(sets.anchors_neg, StrategyKind::respond_eval,
                            derive_seed(sc.seed, "eneg"), model_cfg);
            result.sets["probes_evalpos"] = eval_pos_probes;
            result.sets["probes_evalneg"] = eval_neg_probes;
            result.sets["probes_pos"] = sets.anchors;
            result.sets["evals_pos"] = sets.evals_pos;
            result.sets["evals_neg"] = sets.evals_neg;
            add_trace(eval_pos_probes, sets.evals_pos, "EvalPos", "Pos");
            add_trace(eval_pos_probes, sets.evals_neg, "EvalPos", "Neg");
            add_trace(eval_neg_probes, sets.evals_pos, "EvalNeg", "Pos");
            add_trace(eval_neg_probes, sets.evals_neg, "EvalNeg", "Neg");
            add_trace(sets.anchors, sets.evals_pos, "Pos", "Pos");
            add_trace(sets.anchors, sets.evals_neg, "Pos", "Neg");
            break;
        }
    }
    return result;
}

} // namespace gradtrace
