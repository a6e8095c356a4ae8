#include "p2d/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "p2d/errors.hpp"
#include "p2d/hash.hpp"
#include "p2d/rng.hpp"

namespace p2d {

namespace {

constexpr char kMagic[8] = {'P', '2', 'D', 'C', 'K', 'P', 'T', '1'};
constexpr double kInitStd = 0.02;
constexpr double kMaskNegative = -1e30;

std::string idx2(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", i);
    return std::string(buf);
}

Tensor causal_mask(int64_t t) {
    Tensor m({t, t});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = i + 1; j < t; ++j) m.at(i, j) = kMaskNegative;
    return m;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_head <= 0 || vocab_size <= 0 ||
        max_context <= 0)
        throw ParamError("model config fields must all be positive");
    if (d_model != n_heads * d_head)
        throw ParamError("d_model (" + std::to_string(d_model) + ") != n_heads*d_head (" +
                         std::to_string(n_heads * d_head) + ")");
}

std::string head_name(HeadId id) {
    return "layer" + idx2(id.layer) + ".head" + idx2(id.head);
}

std::string head_param_name(HeadId id, const char* which) {
    return head_name(id) + "." + which;
}

std::vector<std::string> param_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    names.push_back("tok_emb");
    names.push_back("pos_emb");
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string lp = "layer" + idx2(l) + ".";
        for (int h = 0; h < cfg.n_heads; ++h)
            for (const char* w : {"wq", "wk", "wv"})
                names.push_back(head_param_name({l, h}, w));
        names.push_back(lp + "attn_out");
        names.push_back(lp + "ln1.gain");
        names.push_back(lp + "ln1.bias");
        names.push_back(lp + "ln2.gain");
        names.push_back(lp + "ln2.bias");
        names.push_back(lp + "mlp.fc_w");
        names.push_back(lp + "mlp.fc_b");
        names.push_back(lp + "mlp.proj_w");
        names.push_back(lp + "mlp.proj_b");
    }
    names.push_back("ln_f.gain");
    names.push_back("ln_f.bias");
    names.push_back("unembed");
    std::sort(names.begin(), names.end());
    return names;
}

namespace {

Shape param_shape(const ModelConfig& cfg, const std::string& name) {
    const int64_t d = cfg.d_model;
    const int64_t dh = cfg.d_head;
    const int64_t hidden = 4 * d;
    if (name == "tok_emb") return {cfg.vocab_size, d};
    if (name == "pos_emb") return {cfg.max_context, d};
    if (name == "unembed") return {d, cfg.vocab_size};
    if (name == "ln_f.gain" || name == "ln_f.bias") return {d};
    if (name.ends_with(".wq") || name.ends_with(".wk") || name.ends_with(".wv"))
        return {d, dh};
    if (name.ends_with("attn_out")) return {d, d};
    if (name.ends_with("ln1.gain") || name.ends_with("ln1.bias") ||
        name.ends_with("ln2.gain") || name.ends_with("ln2.bias"))
        return {d};
    if (name.ends_with("mlp.fc_w")) return {d, hidden};
    if (name.ends_with("mlp.fc_b")) return {hidden};
    if (name.ends_with("mlp.proj_w")) return {hidden, d};
    if (name.ends_with("mlp.proj_b")) return {d};
    throw ParamError("unknown parameter name '" + name + "'");
}

bool is_gain(const std::string& name) { return name.ends_with(".gain"); }
bool is_bias(const std::string& name) { return name.ends_with(".bias") || name.ends_with("_b"); }

}  // namespace

ModelCheckpoint ModelCheckpoint::init_random(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelCheckpoint m;
    m.config = cfg;
    Rng rng(derive_seed(seed, 101));
    // Canonical name order fixes the draw sequence for a given seed.
    for (const std::string& name : param_names(cfg)) {
        Tensor t(param_shape(cfg, name));
        if (is_gain(name)) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        } else if (is_bias(name)) {
            // zeros
        } else {
            for (double& v : t.data) v = rng.normal(0.0, kInitStd);
        }
        m.params.emplace(name, std::move(t));
    }
    return m;
}

int64_t ModelCheckpoint::total_params() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

void ModelCheckpoint::validate_shapes() const {
    config.validate();
    const std::vector<std::string> names = param_names(config);
    if (names.size() != params.size())
        throw IncompatError("checkpoint has " + std::to_string(params.size()) +
                            " tensors, expected " + std::to_string(names.size()));
    for (const std::string& name : names) {
        auto it = params.find(name);
        if (it == params.end()) throw IncompatError("checkpoint missing tensor '" + name + "'");
        if (it->second.shape != param_shape(config, name))
            throw IncompatError("tensor '" + name + "' has shape " +
                                shape_str(it->second.shape) + ", expected " +
                                shape_str(param_shape(config, name)));
    }
}

std::string ModelCheckpoint::content_hash() const {
    const std::vector<unsigned char> bytes = serialize_checkpoint(*this);
    return hash_bytes_hex(bytes);
}

HeadParams head_params(ModelCheckpoint& m, HeadId id) {
    if (id.layer < 0 || id.layer >= m.config.n_layers || id.head < 0 ||
        id.head >= m.config.n_heads)
        throw IndexError("head (" + std::to_string(id.layer) + "," + std::to_string(id.head) +
                         ") outside config " + std::to_string(m.config.n_layers) + "x" +
                         std::to_string(m.config.n_heads));
    return {m.params.at(head_param_name(id, "wq")), m.params.at(head_param_name(id, "wk")),
            m.params.at(head_param_name(id, "wv"))};
}

HeadParamsConst head_params(const ModelCheckpoint& m, HeadId id) {
    if (id.layer < 0 || id.layer >= m.config.n_layers || id.head < 0 ||
        id.head >= m.config.n_heads)
        throw IndexError("head (" + std::to_string(id.layer) + "," + std::to_string(id.head) +
                         ") outside config " + std::to_string(m.config.n_layers) + "x" +
                         std::to_string(m.config.n_heads));
    return {m.params.at(head_param_name(id, "wq")), m.params.at(head_param_name(id, "wk")),
            m.params.at(head_param_name(id, "wv"))};
}

std::vector<HeadId> all_heads(const ModelConfig& cfg) {
    std::vector<HeadId> ids;
    ids.reserve(static_cast<size_t>(cfg.total_heads()));
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int h = 0; h < cfg.n_heads; ++h) ids.push_back({l, h});
    return ids;
}

const Tensor& AttentionRecord::at(HeadId id) const {
    if (id.layer < 0 || id.layer >= config.n_layers || id.head < 0 || id.head >= config.n_heads)
        throw IndexError("attention record: head out of range");
    return attn[static_cast<size_t>(id.layer * config.n_heads + id.head)];
}

GradTape::Node ParamNodes::at(const std::string& name) const {
    auto it = node.find(name);
    if (it == node.end()) throw IncompatError("no parameter node named '" + name + "'");
    return it->second;
}

ParamNodes make_param_leaves(GradTape& tape, const ModelCheckpoint& model,
                             const std::function<bool(const std::string&)>& requires_grad) {
    ParamNodes out;
    for (const auto& [name, t] : model.params)
        out.node.emplace(name, tape.leaf(t, requires_grad ? requires_grad(name) : false));
    return out;
}

GradTape::Node build_logits(GradTape& tape, const ModelConfig& cfg, const ParamNodes& params,
                            const std::vector<int>& tokens,
                            std::vector<GradTape::Node>* attn_out) {
    if (tokens.empty()) throw ParamError("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_context)
        throw ParamError("sequence length " + std::to_string(tokens.size()) +
                         " exceeds max context " + std::to_string(cfg.max_context));
    const int64_t t = static_cast<int64_t>(tokens.size());
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
    const Tensor mask = causal_mask(t);

    GradTape::Node x = tape.add(tape.embed_rows(params.at("tok_emb"), tokens),
                                tape.slice_rows(params.at("pos_emb"), 0, t));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string lp = "layer" + idx2(l) + ".";
        GradTape::Node h = tape.layer_norm(x, params.at(lp + "ln1.gain"),
                                           params.at(lp + "ln1.bias"));
        std::vector<GradTape::Node> head_outs;
        head_outs.reserve(static_cast<size_t>(cfg.n_heads));
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            const HeadId id{l, hd};
            GradTape::Node q = tape.matmul(h, params.at(head_param_name(id, "wq")));
            GradTape::Node k = tape.matmul(h, params.at(head_param_name(id, "wk")));
            GradTape::Node v = tape.matmul(h, params.at(head_param_name(id, "wv")));
            GradTape::Node scores =
                tape.add_const(tape.scale(tape.matmul_nt(q, k), inv_sqrt_dh), mask);
            GradTape::Node attn = tape.softmax_rows(scores, 1.0);
            if (attn_out) attn_out->push_back(attn);
            head_outs.push_back(tape.matmul(attn, v));
        }
        GradTape::Node merged = tape.matmul(tape.concat_cols(head_outs),
                                            params.at(lp + "attn_out"));
        x = tape.add(x, merged);
        GradTape::Node m = tape.layer_norm(x, params.at(lp + "ln2.gain"),
                                           params.at(lp + "ln2.bias"));
        GradTape::Node fc = tape.gelu(tape.add_row_broadcast(
            tape.matmul(m, params.at(lp + "mlp.fc_w")), params.at(lp + "mlp.fc_b")));
        GradTape::Node proj = tape.add_row_broadcast(
            tape.matmul(fc, params.at(lp + "mlp.proj_w")), params.at(lp + "mlp.proj_b"));
        x = tape.add(x, proj);
    }

    GradTape::Node f = tape.layer_norm(x, params.at("ln_f.gain"), params.at("ln_f.bias"));
    return tape.matmul(f, params.at("unembed"));
}

ForwardResult forward(const ModelCheckpoint& model, const std::vector<int>& tokens,
                      bool capture) {
    GradTape tape(/*track_gradients=*/false);
    ParamNodes params = make_param_leaves(tape, model, nullptr);
    std::vector<GradTape::Node> attn_nodes;
    GradTape::Node logits =
        build_logits(tape, model.config, params, tokens, capture ? &attn_nodes : nullptr);

    ForwardResult out;
    out.logits = tape.value(logits);
    if (capture) {
        AttentionRecord rec;
        rec.config = model.config;
        rec.seq_len = static_cast<int>(tokens.size());
        rec.attn.reserve(attn_nodes.size());
        for (GradTape::Node n : attn_nodes) rec.attn.push_back(tape.value(n));
        out.record = std::move(rec);
    }
    return out;
}

bool exact_match_sample(const ModelCheckpoint& model, const TokenizedSample& s) {
    const ForwardResult r = forward(model, s.tokens, false);
    const Tensor& logits = r.logits;
    const int64_t vocab = logits.cols();
    for (int pos = s.answer_begin; pos < s.answer_begin + s.answer_len; ++pos) {
        const int64_t row = pos - 1;  // position predicting token `pos`
        const double* p = logits.data.data() + row * vocab;
        int best = 0;
        for (int64_t j = 1; j < vocab; ++j)
            if (p[j] > p[best]) best = static_cast<int>(j);
        if (best != s.tokens[static_cast<size_t>(pos)]) return false;
    }
    return true;
}

double evaluate(const ModelCheckpoint& model, const std::vector<Example>& dataset,
                Metric metric) {
    if (dataset.empty()) throw ParamError("evaluate: empty dataset");
    if (metric != Metric::exact_match) throw ParamError("evaluate: unknown metric");
    int64_t hits = 0;
    for (const Example& e : dataset)
        if (exact_match_sample(model, render_training_sample(e))) ++hits;
    return static_cast<double>(hits) / static_cast<double>(dataset.size());
}

std::vector<int> greedy_decode(const ModelCheckpoint& model, const std::vector<int>& prompt,
                               int max_new, int stop_token) {
    std::vector<int> seq = prompt;
    for (int i = 0; i < max_new; ++i) {
        const ForwardResult r = forward(model, seq, false);
        const Tensor& logits = r.logits;
        const int64_t vocab = logits.cols();
        const double* p = logits.data.data() + (logits.rows() - 1) * vocab;
        int best = 0;
        for (int64_t j = 1; j < vocab; ++j)
            if (p[j] > p[best]) best = static_cast<int>(j);
        seq.push_back(best);
        if (best == stop_token) break;
    }
    return std::vector<int>(seq.begin() + static_cast<int64_t>(prompt.size()), seq.end());
}

// --- Serialization -----------------------------------------------------------

namespace {

template <typename T>
void put(std::vector<unsigned char>& out, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T take(const std::vector<unsigned char>& in, size_t& off) {
    if (off + sizeof(T) > in.size()) throw IoError("checkpoint truncated");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const ModelCheckpoint& m) {
    std::vector<unsigned char> out;
    out.insert(out.end(), kMagic, kMagic + sizeof kMagic);
    put<uint32_t>(out, 1);  // version
    for (int v : {m.config.n_layers, m.config.n_heads, m.config.d_model, m.config.d_head,
                  m.config.vocab_size, m.config.max_context})
        put<uint32_t>(out, static_cast<uint32_t>(v));
    put<uint32_t>(out, static_cast<uint32_t>(m.params.size()));
    for (const auto& [name, t] : m.params) {  // std::map: canonical sorted order
        put<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) put<uint64_t>(out, static_cast<uint64_t>(d));
        const size_t bytes = t.data.size() * sizeof(double);
        const auto* p = reinterpret_cast<const unsigned char*>(t.data.data());
        out.insert(out.end(), p, p + bytes);
    }
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& m) {
    const std::vector<unsigned char> bytes = serialize_checkpoint(m);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    size_t off = 0;
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw IoError("not a checkpoint file: " + path.string());
    off += sizeof kMagic;
    const uint32_t version = take<uint32_t>(bytes, off);
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    ModelCheckpoint m;
    m.config.n_layers = static_cast<int>(take<uint32_t>(bytes, off));
    m.config.n_heads = static_cast<int>(take<uint32_t>(bytes, off));
    m.config.d_model = static_cast<int>(take<uint32_t>(bytes, off));
    m.config.d_head = static_cast<int>(take<uint32_t>(bytes, off));
    m.config.vocab_size = static_cast<int>(take<uint32_t>(bytes, off));
    m.config.max_context = static_cast<int>(take<uint32_t>(bytes, off));
    const uint32_t count = take<uint32_t>(bytes, off);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = take<uint32_t>(bytes, off);
        if (off + name_len > bytes.size()) throw IoError("checkpoint truncated");
        std::string name(reinterpret_cast<const char*>(bytes.data() + off), name_len);
        off += name_len;
        const uint32_t ndim = take<uint32_t>(bytes, off);
        Shape shape;
        for (uint32_t d = 0; d < ndim; ++d)
            shape.push_back(static_cast<int64_t>(take<uint64_t>(bytes, off)));
        Tensor t(shape);
        const size_t nbytes = t.data.size() * sizeof(double);
        if (off + nbytes > bytes.size()) throw IoError("checkpoint truncated");
        std::memcpy(t.data.data(), bytes.data() + off, nbytes);
        off += nbytes;
        m.params.emplace(std::move(name), std::move(t));
    }
    m.validate_shapes();
    return m;
}

}  // namespace p2d
