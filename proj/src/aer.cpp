#include "p2d/aer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "p2d/errors.hpp"

namespace p2d {

namespace {
using ordered_json = nlohmann::ordered_json;
}

std::string phase_name(Phase p) {
    switch (p) {
        case Phase::proxy_train: return "proxy_train";
        case Phase::head_score: return "head_score";
        case Phase::data_select: return "data_select";
        case Phase::adapt_train: return "adapt_train";
        case Phase::eval: return "eval";
    }
    throw ParamError("unknown phase");
}

Phase phase_from(const std::string& name) {
    if (name == "proxy_train") return Phase::proxy_train;
    if (name == "head_score") return Phase::head_score;
    if (name == "data_select") return Phase::data_select;
    if (name == "adapt_train") return Phase::adapt_train;
    if (name == "eval") return Phase::eval;
    throw ParamError("unknown phase '" + name + "'");
}

void AerLedger::record(Phase phase, double seconds, std::string meta) {
    if (!(seconds >= 0.0) || !std::isfinite(seconds))
        throw ParamError("phase duration must be finite and >= 0, got " +
                         std::to_string(seconds));
    records_.push_back({phase, seconds, std::move(meta)});
}

void AerLedger::record(const std::string& phase, double seconds, std::string meta) {
    record(phase_from(phase), seconds, std::move(meta));
}

double AerLedger::t_sel() const {
    double t = 0.0;
    for (const PhaseRecord& r : records_)
        if (r.phase == Phase::proxy_train || r.phase == Phase::head_score ||
            r.phase == Phase::data_select)
            t += r.seconds;
    return t;
}

double AerLedger::t_train() const {
    double t = 0.0;
    for (const PhaseRecord& r : records_)
        if (r.phase == Phase::adapt_train) t += r.seconds;
    return t;
}

double AerLedger::t_eval() const {
    double t = 0.0;
    for (const PhaseRecord& r : records_)
        if (r.phase == Phase::eval) t += r.seconds;
    return t;
}

std::string AerLedger::to_json() const {
    ordered_json arr = ordered_json::array();
    for (const PhaseRecord& r : records_) {
        ordered_json j;
        j["phase"] = phase_name(r.phase);
        j["seconds"] = r.seconds;
        j["meta"] = r.meta;
        arr.push_back(j);
    }
    ordered_json root;
    root["records"] = arr;
    root["t_sel"] = t_sel();
    root["t_train"] = t_train();
    root["t_eval"] = t_eval();
    return root.dump(2);
}

AerLedger AerLedger::from_json(const std::string& text) {
    AerLedger ledger;
    ordered_json root = ordered_json::parse(text);
    for (const auto& j : root.at("records"))
        ledger.record(j.at("phase").get<std::string>(), j.at("seconds").get<double>(),
                      j.value("meta", ""));
    return ledger;
}

void AerLedger::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << to_json() << "\n";
}

AerLedger AerLedger::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json(text);
}

AerReport compute_aer(const AerLedger& ledger, double t_fft) {
    if (!(t_fft > 0.0) || !std::isfinite(t_fft))
        throw ParamError("reference time must be > 0, got " + std::to_string(t_fft));
    AerReport r;
    r.t_sel = ledger.t_sel();
    r.t_train = ledger.t_train();
    r.t_fft = t_fft;
    r.aer = (r.t_sel + r.t_train) / t_fft;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f (%.2f+%.2f)", r.aer, r.t_sel / t_fft,
                  r.t_train / t_fft);
    r.decomposition = buf;
    return r;
}

double speedup(const AerReport& a, const AerReport& b) {
    if (std::abs(a.t_fft - b.t_fft) > 1e-9 * std::max(a.t_fft, b.t_fft))
        throw IncompatError("speedup: reports use different references (" +
                            std::to_string(a.t_fft) + " vs " + std::to_string(b.t_fft) + ")");
    return (b.t_sel + b.t_train) / (a.t_sel + a.t_train);
}

}  // namespace p2d
