#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "p2d/corpus.hpp"
#include "p2d/tensor.hpp"

namespace p2d {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 8;        // per layer
    int d_model = 128;
    int d_head = 16;
    int vocab_size = 64;
    int max_context = 256;

    void validate() const;
    int total_heads() const { return n_layers * n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
    int layer = 0;
    int head = 0;
    auto operator<=>(const HeadId&) const = default;
};

std::string head_name(HeadId id);

// Per-head projections live as separate named tensors so head-level views and
// masks are exact by construction.
struct ModelCheckpoint {
    ModelConfig config;
    std::map<std::string, Tensor> params;  // iteration order == canonical order

    static ModelCheckpoint init_random(const ModelConfig& cfg, uint64_t seed);

    int64_t total_params() const;
    std::string content_hash() const;
    void validate_shapes() const;
};

// Canonical parameter names for a config, sorted.
std::vector<std::string> param_names(const ModelConfig& cfg);
std::string head_param_name(HeadId id, const char* which);  // "wq" | "wk" | "wv"

struct HeadParams {
    Tensor& wq;
    Tensor& wk;
    Tensor& wv;
};
struct HeadParamsConst {
    const Tensor& wq;
    const Tensor& wk;
    const Tensor& wv;
};

// Mutable views into the checkpoint's per-head projection tensors.
HeadParams head_params(ModelCheckpoint& m, HeadId id);
HeadParamsConst head_params(const ModelCheckpoint& m, HeadId id);
std::vector<HeadId> all_heads(const ModelConfig& cfg);

// Post-softmax attention matrices of the most recent forward pass.
struct AttentionRecord {
    ModelConfig config;
    int seq_len = 0;
    std::vector<Tensor> attn;  // indexed layer * n_heads + head

    const Tensor& at(HeadId id) const;
};

struct ForwardResult {
    Tensor logits;  // (seq_len, vocab)
    std::optional<AttentionRecord> record;
};

ForwardResult forward(const ModelCheckpoint& model, const std::vector<int>& tokens,
                      bool capture);

// --- Graph building (shared by forward() and the trainer) -------------------

struct ParamNodes {
    std::map<std::string, GradTape::Node> node;
    GradTape::Node at(const std::string& name) const;
};

// requires_grad decides per parameter name whether gradients flow into it.
ParamNodes make_param_leaves(GradTape& tape, const ModelCheckpoint& model,
                             const std::function<bool(const std::string&)>& requires_grad);

// Returns the logits node; when attn_out != nullptr, appends one post-softmax
// attention node per head in canonical order.
GradTape::Node build_logits(GradTape& tape, const ModelConfig& cfg, const ParamNodes& params,
                            const std::vector<int>& tokens,
                            std::vector<GradTape::Node>* attn_out);

// --- Evaluation --------------------------------------------------------------

enum class Metric { exact_match };

// Mean per-example exact match on the answer span under greedy decoding.
// (Scored via a teacher-forced argmax sweep, which produces the same
// exact-match outcome as literal greedy decoding: both walk the same prefix
// until the first wrong token.)
double evaluate(const ModelCheckpoint& model, const std::vector<Example>& dataset,
                Metric metric = Metric::exact_match);

// Exact match for a single pre-rendered sample.
bool exact_match_sample(const ModelCheckpoint& model, const TokenizedSample& s);

// Literal greedy decoding: extends `prompt` until `stop_token` or max_new.
std::vector<int> greedy_decode(const ModelCheckpoint& model, const std::vector<int>& prompt,
                               int max_new, int stop_token);

// --- Checkpoint file format --------------------------------------------------
// Little-endian binary container: magic "P2DCKPT1", u32 config fields, u32
// tensor count, then length-prefixed named tensors in canonical name order.

std::vector<unsigned char> serialize_checkpoint(const ModelCheckpoint& m);
void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& m);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace p2d
