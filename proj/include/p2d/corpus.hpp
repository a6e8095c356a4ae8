#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "p2d/tokenizer.hpp"

namespace p2d {

enum class TaskKind { mod_add, kv_recall, copy_reverse };

std::string task_kind_name(TaskKind k);
TaskKind task_kind_from(const std::string& name);

struct ExampleMeta {
    std::string kind;
    bool corrupted = false;
    int64_t id = 0;
};

struct Example {
    std::string instruction;
    std::string input;
    std::string output;
    ExampleMeta meta;
};

struct CorpusManifest {
    std::string kind;
    int64_t pool_size = 0;
    double corruption_rate = 0.0;
    uint64_t generator_seed = 0;
    uint64_t split_seed = 0;
    std::vector<int64_t> train_ids;
    std::vector<int64_t> test_ids;
};

// Generates exactly n examples; floor(corruption_rate * n) of them carry a
// uniformly-wrong output of the same format and corrupted=true. Deterministic
// in seed.
std::vector<Example> generate(TaskKind kind, int64_t n, double corruption_rate, uint64_t seed);

// Deterministic 90/10 split of pool ids (train first). Pool must have >= 10.
std::pair<std::vector<int64_t>, std::vector<int64_t>> split_pool(
    const std::vector<Example>& pool, uint64_t seed);

struct LengthStats {
    double mean_tokens = 0.0;
    double mean_words = 0.0;
};

LengthStats length_stats(const std::vector<int64_t>& subset_ids,
                         const std::vector<Example>& pool);

// --- Rendering -------------------------------------------------------------
// One canonical text form drives training, evaluation and probing:
//   <instruction> '|' <input> '=' <output> '#'
// The answer span is the output alone; the trailing '#' is trained but not
// scored, so generation knows where to stop.

std::string sample_text(const Example& e);          // instruction|input=output
std::string example_body(const Example& e);         // input=output#

struct TokenizedSample {
    std::vector<int> tokens;
    // targets[t] is the token expected at position t+1 when scored, else -1.
    std::vector<int> targets;
    int answer_begin = 0;  // first output token
    int answer_len = 0;    // output tokens, excluding '#'
};

TokenizedSample render_training_sample(const Example& e);

// --- Persistence -----------------------------------------------------------

void save_corpus_jsonl(const std::filesystem::path& path, const std::vector<Example>& pool);
std::vector<Example> load_corpus_jsonl(const std::filesystem::path& path);

void save_manifest(const std::filesystem::path& path, const CorpusManifest& m);
CorpusManifest load_manifest(const std::filesystem::path& path);

std::string corpus_hash(const std::vector<Example>& pool);

// Fixed kv_recall codebook parameters shared by generator and tests.
constexpr int kKvKeyCount = 16;
constexpr int kModAddModulus = 53;

// Value symbols for kv_recall outputs (alphabet minus structural characters).
std::string kv_value_symbols();

class Rng;

// Single-example samplers reused by the base-model pretraining stream.
Example sample_mod_add(Rng& rng, int64_t id);
Example sample_copy_reverse(Rng& rng, int64_t id);

}  // namespace p2d
