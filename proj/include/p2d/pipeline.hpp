#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "p2d/aer.hpp"
#include "p2d/corpus.hpp"
#include "p2d/fhi.hpp"
#include "p2d/model.hpp"
#include "p2d/selector.hpp"
#include "p2d/trainer.hpp"

namespace p2d {

inline constexpr const char* kToolVersion = "p2d 1.0.0";

// Base-model preparation: the pipeline's stand-in for a pretrained backbone.
// Trains a fresh model on streamed multi-example contexts (mixed tasks, fresh
// data every context) so it acquires task competence and in-context reading
// before any alignment stage runs. Its cost is shared by every arm and is not
// part of any AER term.
struct PretrainSpec {
    int steps = 600;
    int batch = 32;
    double lr = 1e-3;
    uint64_t seed = 7;
    std::map<std::string, double> mix = {
        {"mod_add", 0.5}, {"kv_recall", 0.3}, {"copy_reverse", 0.2}};

    void validate() const;
};

ModelCheckpoint pretrain_base(const PretrainSpec& spec, const ModelConfig& cfg);

struct PipelineConfig {
    std::string preset = "custom";
    ModelConfig model;

    std::string task = "mod_add";
    int64_t pool_size = 2048;
    double corruption = 0.0;

    PretrainSpec pretrain;

    std::string selection = "p2d";  // p2d | random | full
    std::string mask = "p2d";       // p2d | random | full
    double rho_p = 0.10;
    double rho_d = 0.10;

    FhiConfig fhi;
    ProbeConfig probe;  // rho_d/seed are filled in from this config at run time
    TrainConfig train;

    uint64_t run_seed = 42;

    std::string to_json() const;
    static PipelineConfig from_json(const std::string& text);
    void validate() const;
};

PipelineConfig preset_config(const std::string& name, uint64_t seed);
std::vector<std::string> known_presets();

struct RunResult {
    std::filesystem::path dir;
    double base_em = 0.0;
    double final_em = 0.0;
    bool has_aer = false;
    AerReport aer;
    std::map<std::string, std::string> artifact_hashes;
};

// Executes gen -> (fhi) -> (select) -> train -> eval, recording every phase.
// The run directory is created fresh and never overwritten. If base_ckpt is
// given it is used as the backbone, otherwise one is pretrained from config.
// AER is computed only when a reference run directory is supplied.
RunResult run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                       const std::optional<std::filesystem::path>& base_ckpt = std::nullopt,
                       const std::optional<std::filesystem::path>& reference_dir = std::nullopt);

// Replays the config embedded in a run manifest into a new directory.
RunResult rerun_from_manifest(const std::filesystem::path& manifest_path,
                              const std::filesystem::path& out_dir);

struct MatrixRow {
    std::string preset;
    std::vector<double> em;   // per seed
    std::vector<double> aer;  // per seed; empty for the reference preset
    double mean_em = 0.0;
    double mean_aer = 0.0;
};

// Runs each preset for each seed against a shared corpus, base model and
// per-seed full-SFT reference, and writes matrix.json / matrix.csv.
std::vector<MatrixRow> experiment_matrix(const std::vector<std::string>& presets,
                                         const std::vector<uint64_t>& seeds,
                                         const std::filesystem::path& out_dir,
                                         const std::optional<std::filesystem::path>& base_ckpt =
                                             std::nullopt);

}  // namespace p2d
