#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "p2d/aer.hpp"
#include "p2d/fhi.hpp"
#include "p2d/model.hpp"

namespace p2d {

struct ProbeConfig {
    int n_demos = 5;
    int n_queries = 3;
    int min_appearances = 3;  // coverage guarantee per pool sample
    double rho_d = 0.1;
    uint64_t seed = 0;

    void validate() const;
};

struct DemoSpan {
    int64_t sample_id = 0;
    int begin = 0;  // token range [begin, end) of input=output# in the context
    int end = 0;

    int length() const { return end - begin; }
};

struct ProbeContext {
    std::vector<int> tokens;
    std::vector<DemoSpan> spans;
};

// Instruction followed by the rendered demonstrations, spans recorded per demo.
ProbeContext build_context(const std::string& instruction, const std::vector<Example>& demos,
                           int max_context);

// Per-sample accumulator for the iterative score: contributions keep their
// iteration index so finalization can sum in canonical order regardless of
// the order iterations were merged in.
class SelectionLedger {
public:
    void ensure(int64_t id);
    void add(int64_t id, int iteration, double value);
    bool has(int64_t id) const { return entries_.count(id) != 0; }
    int count(int64_t id) const;
    double value_sum(int64_t id) const;  // canonical-order sum
    std::vector<int64_t> ids() const;

private:
    struct Entry {
        std::vector<std::pair<int, double>> contributions;  // (iteration, value)
    };
    std::map<int64_t, Entry> entries_;
};

struct IterationResult {
    int iteration = 0;
    double score = 0.0;                    // base ICL score s
    std::map<int64_t, double> weights;     // demo id -> structural weight w
};

// Runs one probing round: builds instruction|demos|queries as a single
// sequence (queries and their answers appended after the demos), scores the
// queries by exact match under teacher forcing, and accumulates attention
// from the query answer rows onto each demo span over the given head set.
IterationResult probe_iteration(const ModelCheckpoint& model, const std::vector<Example>& pool,
                                const std::vector<int64_t>& demo_ids,
                                const std::vector<int64_t>& query_ids, const HeadSet& headset,
                                int iteration);

// Attention mass from the given rows onto the span, summed over the head set
// and normalized by the span's token length.
double demo_weight(const AttentionRecord& record, const HeadSet& headset, const DemoSpan& span,
                   const std::vector<std::pair<int, int>>& query_rows);

void accumulate(SelectionLedger& ledger, const IterationResult& result,
                const std::vector<Example>& pool);

struct SelectionReport {
    std::vector<int64_t> selected;  // ranked: score desc, id asc
    std::vector<std::pair<int64_t, double>> final_scores;
    std::map<int64_t, int> appearances;
    LengthStats pool_stats;
    LengthStats selected_stats;
    double corrupted_fraction_pool = 0.0;
    double corrupted_fraction_selected = 0.0;
};

SelectionReport finalize_and_select(const SelectionLedger& ledger, double rho_d,
                                    const std::vector<Example>& pool,
                                    const std::vector<int64_t>& pool_ids);

// Full Stage-II driver: schedules min_appearances stratified passes over the
// pool, probes, accumulates and selects. Selection wall-clock lands in the
// ledger's data_select phase.
SelectionReport select_data(const ModelCheckpoint& model, const std::vector<Example>& pool,
                            const std::vector<int64_t>& pool_ids, const HeadSet& headset,
                            const ProbeConfig& cfg, AerLedger* ledger = nullptr);

void save_selection_report(const std::filesystem::path& path, const SelectionReport& report,
                           const ProbeConfig& cfg);
void save_score_histogram_csv(const std::filesystem::path& path, const SelectionReport& report);
std::string selection_hash(const SelectionReport& report);

}  // namespace p2d
