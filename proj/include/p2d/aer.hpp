#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

namespace p2d {

enum class Phase { proxy_train, head_score, data_select, adapt_train, eval };

std::string phase_name(Phase p);
Phase phase_from(const std::string& name);  // throws ParamError on unknown names

struct PhaseRecord {
    Phase phase;
    double seconds = 0.0;
    std::string meta;
};

// Wall-clock ledger; proxy training, head scoring and data selection roll up
// into t_sel, adaptation into t_train. Evaluation is tracked but excluded
// from both AER terms.
class AerLedger {
public:
    void record(Phase phase, double seconds, std::string meta = "");
    void record(const std::string& phase, double seconds, std::string meta = "");

    double t_sel() const;
    double t_train() const;
    double t_eval() const;
    const std::vector<PhaseRecord>& records() const { return records_; }

    std::string to_json() const;
    static AerLedger from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static AerLedger load(const std::filesystem::path& path);

private:
    std::vector<PhaseRecord> records_;
};

struct AerReport {
    double t_sel = 0.0;
    double t_train = 0.0;
    double t_fft = 0.0;
    double aer = 0.0;
    std::string decomposition;  // "0.32 (0.15+0.17)"
};

AerReport compute_aer(const AerLedger& ledger, double t_fft);

// Runtime ratio of report b over report a; both must share the reference.
double speedup(const AerReport& a, const AerReport& b);

// Scoped monotonic stopwatch for phase timing.
class PhaseTimer {
public:
    PhaseTimer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace p2d
