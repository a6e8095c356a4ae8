#include "p2d/selector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "p2d/errors.hpp"
#include "p2d/hash.hpp"
#include "p2d/rng.hpp"

namespace p2d {

namespace {
using ordered_json = nlohmann::ordered_json;
}

void ProbeConfig::validate() const {
    if (n_demos < 1) throw ParamError("probe: n_demos must be >= 1");
    if (n_queries < 1) throw ParamError("probe: n_queries must be >= 1");
    if (min_appearances < 1) throw ParamError("probe: min_appearances must be >= 1");
    if (rho_d <= 0.0 || rho_d > 1.0)
        throw ParamError("probe: rho_d must be in (0,1], got " + std::to_string(rho_d));
}

ProbeContext build_context(const std::string& instruction, const std::vector<Example>& demos,
                           int max_context) {
    ProbeContext ctx;
    ctx.tokens = tok::encode(instruction + "|");
    for (const Example& d : demos) {
        DemoSpan span;
        span.sample_id = d.meta.id;
        span.begin = static_cast<int>(ctx.tokens.size());
        const std::vector<int> body = tok::encode(example_body(d));
        ctx.tokens.insert(ctx.tokens.end(), body.begin(), body.end());
        span.end = static_cast<int>(ctx.tokens.size());
        ctx.spans.push_back(span);
    }
    if (static_cast<int>(ctx.tokens.size()) > max_context)
        throw ParamError("probe context of " + std::to_string(ctx.tokens.size()) +
                         " tokens exceeds max context " + std::to_string(max_context));
    return ctx;
}

void SelectionLedger::ensure(int64_t id) { entries_[id]; }

void SelectionLedger::add(int64_t id, int iteration, double value) {
    if (!entries_.count(id))
        throw Error("ledger: unknown sample id " + std::to_string(id));
    entries_[id].contributions.push_back({iteration, value});
}

int SelectionLedger::count(int64_t id) const {
    auto it = entries_.find(id);
    return it == entries_.end() ? 0 : static_cast<int>(it->second.contributions.size());
}

double SelectionLedger::value_sum(int64_t id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) return 0.0;
    std::vector<std::pair<int, double>> c = it->second.contributions;
    std::sort(c.begin(), c.end());  // canonical iteration order
    double sum = 0.0;
    for (const auto& [iter, v] : c) sum += v;
    return sum;
}

std::vector<int64_t> SelectionLedger::ids() const {
    std::vector<int64_t> out;
    out.reserve(entries_.size());
    for (const auto& [id, e] : entries_) out.push_back(id);
    return out;
}

double demo_weight(const AttentionRecord& record, const HeadSet& headset, const DemoSpan& span,
                   const std::vector<std::pair<int, int>>& query_rows) {
    if (headset.heads.empty())
        throw ParamError("demo_weight: empty head set (run head identification first)");
    if (span.begin < 0 || span.end > record.seq_len || span.length() <= 0)
        throw IndexError("demo_weight: span outside record");
    for (const auto& [lo, hi] : query_rows)
        if (lo < 0 || hi > record.seq_len || lo >= hi)
            throw IndexError("demo_weight: query rows outside record");

    double mass = 0.0;
    for (HeadId id : headset.heads) {
        const Tensor& attn = record.at(id);
        for (const auto& [lo, hi] : query_rows)
            for (int r = lo; r < hi; ++r)
                for (int c = span.begin; c < span.end; ++c) mass += attn.at(r, c);
    }
    return mass / static_cast<double>(span.length());
}

IterationResult probe_iteration(const ModelCheckpoint& model, const std::vector<Example>& pool,
                                const std::vector<int64_t>& demo_ids,
                                const std::vector<int64_t>& query_ids, const HeadSet& headset,
                                int iteration) {
    if (demo_ids.empty() || query_ids.empty())
        throw ParamError("probe_iteration: needs demos and queries");
    std::set<int64_t> demo_set(demo_ids.begin(), demo_ids.end());
    for (int64_t q : query_ids)
        if (demo_set.count(q))
            throw ParamError("probe_iteration: sample " + std::to_string(q) +
                             " is both demo and query");

    auto by_id = [&pool](int64_t id) -> const Example& {
        for (const Example& e : pool)
            if (e.meta.id == id) return e;
        throw IndexError("probe_iteration: pool has no sample id " + std::to_string(id));
    };

    std::vector<Example> demos;
    demos.reserve(demo_ids.size());
    for (int64_t id : demo_ids) demos.push_back(by_id(id));
    ProbeContext ctx = build_context(demos.front().instruction, demos, model.config.max_context);

    // Queries are appended to the same sequence, mirroring a multi-question
    // prompt; each query's answer span is teacher-forced and scored by argmax.
    struct QuerySpan {
        int begin;
        int len;  // output tokens, '#' excluded
    };
    std::vector<int> tokens = ctx.tokens;
    std::vector<QuerySpan> qspans;
    for (int64_t id : query_ids) {
        const Example& q = by_id(id);
        const std::vector<int> prompt = tok::encode(q.input + "=");
        const std::vector<int> answer = tok::encode(q.output + "#");
        tokens.insert(tokens.end(), prompt.begin(), prompt.end());
        qspans.push_back({static_cast<int>(tokens.size()), static_cast<int>(answer.size()) - 1});
        tokens.insert(tokens.end(), answer.begin(), answer.end());
    }
    if (static_cast<int>(tokens.size()) > model.config.max_context)
        throw ParamError("probe sequence of " + std::to_string(tokens.size()) +
                         " tokens exceeds max context");

    const ForwardResult fwd = forward(model, tokens, /*capture=*/true);
    const Tensor& logits = fwd.logits;
    const int64_t vocab = logits.cols();

    int hits = 0;
    std::vector<std::pair<int, int>> rows;
    for (const QuerySpan& qs : qspans) {
        bool ok = true;
        for (int pos = qs.begin; pos < qs.begin + qs.len; ++pos) {
            const double* p = logits.data.data() + (pos - 1) * vocab;
            int best = 0;
            for (int64_t j = 1; j < vocab; ++j)
                if (p[j] > p[best]) best = static_cast<int>(j);
            if (best != tokens[static_cast<size_t>(pos)]) {
                ok = false;
                break;
            }
        }
        hits += ok ? 1 : 0;
        rows.push_back({qs.begin, qs.begin + qs.len});
    }

    IterationResult result;
    result.iteration = iteration;
    result.score = static_cast<double>(hits) / static_cast<double>(qspans.size());
    for (const DemoSpan& span : ctx.spans)
        result.weights[span.sample_id] = demo_weight(*fwd.record, headset, span, rows);
    return result;
}

void accumulate(SelectionLedger& ledger, const IterationResult& result,
                const std::vector<Example>& pool) {
    std::set<int64_t> pool_ids;
    for (const Example& e : pool) pool_ids.insert(e.meta.id);
    for (const auto& [id, w] : result.weights) {
        if (!pool_ids.count(id))
            throw Error("accumulate: demo id " + std::to_string(id) + " not in pool");
        ledger.ensure(id);
        ledger.add(id, result.iteration, result.score * w);
    }
}

SelectionReport finalize_and_select(const SelectionLedger& ledger, double rho_d,
                                    const std::vector<Example>& pool,
                                    const std::vector<int64_t>& pool_ids) {
    if (rho_d <= 0.0 || rho_d > 1.0)
        throw ParamError("rho_d must be in (0,1], got " + std::to_string(rho_d));
    std::vector<int64_t> uncovered;
    for (int64_t id : pool_ids)
        if (ledger.count(id) == 0) uncovered.push_back(id);
    if (!uncovered.empty()) {
        std::string msg = "selection coverage failure; uncovered ids:";
        for (size_t i = 0; i < uncovered.size() && i < 16; ++i)
            msg += " " + std::to_string(uncovered[i]);
        throw CoverageError(msg);
    }

    SelectionReport report;
    for (int64_t id : pool_ids) {
        const double s_final =
            ledger.value_sum(id) / static_cast<double>(ledger.count(id));
        report.final_scores.push_back({id, s_final});
        report.appearances[id] = ledger.count(id);
    }
    std::vector<std::pair<int64_t, double>> ranked = report.final_scores;
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    const int64_t n = static_cast<int64_t>(pool_ids.size());
    const int64_t k = std::max<int64_t>(
        1, static_cast<int64_t>(std::ceil(rho_d * static_cast<double>(n))));
    for (int64_t i = 0; i < k; ++i) report.selected.push_back(ranked[static_cast<size_t>(i)].first);

    report.pool_stats = length_stats(pool_ids, pool);
    report.selected_stats = length_stats(report.selected, pool);

    auto corrupted_fraction = [&pool](const std::vector<int64_t>& ids) {
        int64_t corrupted = 0;
        for (int64_t id : ids)
            for (const Example& e : pool)
                if (e.meta.id == id && e.meta.corrupted) {
                    ++corrupted;
                    break;
                }
        return static_cast<double>(corrupted) / static_cast<double>(ids.size());
    };
    report.corrupted_fraction_pool = corrupted_fraction(pool_ids);
    report.corrupted_fraction_selected = corrupted_fraction(report.selected);
    return report;
}

SelectionReport select_data(const ModelCheckpoint& model, const std::vector<Example>& pool,
                            const std::vector<int64_t>& pool_ids, const HeadSet& headset,
                            const ProbeConfig& cfg, AerLedger* ledger_out) {
    cfg.validate();
    const int64_t n = static_cast<int64_t>(pool_ids.size());
    if (n < cfg.n_demos + cfg.n_queries)
        throw ParamError("selection pool of " + std::to_string(n) + " cannot host " +
                         std::to_string(cfg.n_demos) + " demos + " +
                         std::to_string(cfg.n_queries) + " queries");
    PhaseTimer timer;

    SelectionLedger ledger;
    for (int64_t id : pool_ids) ledger.ensure(id);

    // Stratified round-robin: every pass is a fresh permutation chunked into
    // demo sets, so each sample appears at least min_appearances times.
    int iteration = 0;
    for (int pass = 0; pass < cfg.min_appearances; ++pass) {
        Rng pass_rng(derive_seed(cfg.seed, 1000 + static_cast<uint64_t>(pass)));
        std::vector<int64_t> order = pass_rng.perm(n);
        for (int64_t chunk = 0; chunk < n; chunk += cfg.n_demos) {
            std::vector<int64_t> demo_ids;
            for (int64_t i = chunk; i < std::min<int64_t>(n, chunk + cfg.n_demos); ++i)
                demo_ids.push_back(pool_ids[static_cast<size_t>(order[static_cast<size_t>(i)])]);
            // Short tail chunks are topped up from the head of the same pass.
            for (int64_t i = 0; static_cast<int>(demo_ids.size()) < cfg.n_demos; ++i) {
                const int64_t cand =
                    pool_ids[static_cast<size_t>(order[static_cast<size_t>(i)])];
                if (std::find(demo_ids.begin(), demo_ids.end(), cand) == demo_ids.end())
                    demo_ids.push_back(cand);
            }

            Rng query_rng(derive_seed(cfg.seed, 5000 + static_cast<uint64_t>(iteration)));
            std::set<int64_t> demo_set(demo_ids.begin(), demo_ids.end());
            std::vector<int64_t> candidates;
            for (int64_t id : pool_ids)
                if (!demo_set.count(id)) candidates.push_back(id);
            std::vector<int64_t> query_ids;
            for (int64_t pick :
                 query_rng.choose(static_cast<int64_t>(candidates.size()), cfg.n_queries))
                query_ids.push_back(candidates[static_cast<size_t>(pick)]);

            const IterationResult result =
                probe_iteration(model, pool, demo_ids, query_ids, headset, iteration);
            accumulate(ledger, result, pool);
            ++iteration;
        }
    }

    SelectionReport report = finalize_and_select(ledger, cfg.rho_d, pool, pool_ids);
    for (int64_t id : pool_ids)
        if (report.appearances.at(id) < cfg.min_appearances)
            throw CoverageError("sample " + std::to_string(id) + " appeared only " +
                                std::to_string(report.appearances.at(id)) + " times");
    if (ledger_out)
        ledger_out->record(Phase::data_select, timer.seconds(),
                           "iterations=" + std::to_string(iteration));
    return report;
}

void save_selection_report(const std::filesystem::path& path, const SelectionReport& report,
                           const ProbeConfig& cfg) {
    ordered_json j;
    j["config"] = {{"n_demos", cfg.n_demos},
                   {"n_queries", cfg.n_queries},
                   {"min_appearances", cfg.min_appearances},
                   {"rho_d", cfg.rho_d},
                   {"seed", cfg.seed}};
    j["selected"] = report.selected;
    ordered_json scores = ordered_json::array();
    for (const auto& [id, s] : report.final_scores) {
        const auto it = report.appearances.find(id);
        scores.push_back(
            {{"id", id}, {"score", s}, {"n", it == report.appearances.end() ? 0 : it->second}});
    }
    j["scores"] = scores;
    j["audit"] = {{"pool_mean_tokens", report.pool_stats.mean_tokens},
                  {"pool_mean_words", report.pool_stats.mean_words},
                  {"selected_mean_tokens", report.selected_stats.mean_tokens},
                  {"selected_mean_words", report.selected_stats.mean_words},
                  {"pool_corrupted_fraction", report.corrupted_fraction_pool},
                  {"selected_corrupted_fraction", report.corrupted_fraction_selected}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
}

void save_score_histogram_csv(const std::filesystem::path& path,
                              const SelectionReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "id,score,selected\n";
    std::set<int64_t> sel(report.selected.begin(), report.selected.end());
    for (const auto& [id, s] : report.final_scores)
        out << id << "," << s << "," << (sel.count(id) ? 1 : 0) << "\n";
}

std::string selection_hash(const SelectionReport& report) {
    Fnv64 h;
    for (int64_t id : report.selected) h.update(id);
    for (const auto& [id, s] : report.final_scores) {
        h.update(id);
        h.update(s);
    }
    return h.hex();
}

}  // namespace p2d
