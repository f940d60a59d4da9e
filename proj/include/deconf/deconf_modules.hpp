#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deconf/errors.hpp"
#include "deconf/optim.hpp"
#include "deconf/tensor.hpp"

namespace deconf {

// ---------------------------------------------------------------------------
// EXPT dictionaries.

enum class DictKind { Visual, Structure, Keyword, Concept };

inline const char* to_string(DictKind k) {
    switch (k) {
        case DictKind::Visual: return "X-visual";
        case DictKind::Structure: return "Z-structure";
        case DictKind::Keyword: return "S-keyword";
        case DictKind::Concept: return "C-concept";
    }
    return "?";
}

inline DictKind dict_kind_from_string(const std::string& s) {
    for (DictKind k : {DictKind::Visual, DictKind::Structure, DictKind::Keyword, DictKind::Concept}) {
        if (s == to_string(k)) return k;
    }
    throw DataError("unknown dictionary kind '" + s + "'");
}

/// K atoms of a shared dimension, one label per atom.
struct ExptDictionary {
    DictKind kind = DictKind::Visual;
    std::vector<std::string> labels;
    Tensor atoms;  // [K, dim]

    std::size_t size() const { return atoms.defined() ? atoms.dim(0) : 0; }
    std::size_t dim() const { return atoms.dim(1); }

    void validate() const {
        if (!atoms.defined() || atoms.rank() != 2 || atoms.dim(0) == 0) throw DataError("empty dictionary");
        if (labels.size() != atoms.dim(0)) throw DataError("dictionary labels do not match atom count");
        std::set<std::string> seen;
        for (const auto& l : labels) {
            if (!seen.insert(l).second) throw DataError("duplicate dictionary label '" + l + "'");
        }
        for (double v : atoms.data()) {
            if (!std::isfinite(v)) throw DataError("dictionary atom is not finite");
        }
    }
};

inline ExptDictionary make_dictionary(DictKind kind, std::vector<std::string> labels, std::size_t dim,
                                      std::vector<double> rows) {
    const std::size_t k = rows.size() / std::max<std::size_t>(dim, 1);
    ExptDictionary d{kind, std::move(labels), Tensor::from({k, dim}, std::move(rows))};
    d.validate();
    return d;
}

/// Deep copy whose atoms are an independent leaf tensor.
inline ExptDictionary clone(const ExptDictionary& d) {
    return ExptDictionary{d.kind, d.labels, Tensor::from(d.atoms.shape(), d.atoms.values(), d.atoms.requires_grad())};
}

struct ExptResult {
    Tensor expectation;  // [B, dim]
    Tensor weights;      // [B, K]
};

/// weights = softmax(query . atoms^T / temperature); expectation = weights . atoms.
inline ExptResult expt(const Tensor& atoms, const Tensor& query, double temperature = 1.0) {
    if (!atoms.defined() || atoms.rank() != 2 || atoms.dim(0) == 0) throw DataError("expt over an empty dictionary");
    if (query.rank() != 2 || query.dim(1) != atoms.dim(1)) {
        throw ShapeError("expt: query " + shape_str(query.shape()) + " does not match atoms " + shape_str(atoms.shape()));
    }
    Tensor logits = matmul(query, transpose(atoms));
    if (temperature != 1.0) logits = scale(logits, 1.0 / temperature);
    const Tensor w = softmax(logits);
    return ExptResult{matmul(w, atoms), w};
}

inline ExptResult expt(const ExptDictionary& dict, const Tensor& query, double temperature = 1.0) {
    if (dict.size() == 0) throw DataError("expt over an empty dictionary");
    return expt(dict.atoms, query, temperature);
}

// ---------------------------------------------------------------------------
// Attention.

struct AttentionOutput {
    Tensor attended;  // [B, d]
    Tensor weights;   // [B, M] for Top-Down, [B, heads, M] for AoA
};

/// alpha = softmax(w_a tanh(W_v x_m + W_h h)); x_hat = sum_m alpha_m x_m.
struct TopDownParams {
    Linear wv;  // d -> a
    Linear wh;  // h -> a
    Tensor wa;  // [a, 1]

    void register_into(ParameterSet& ps, const std::string& prefix) const {
        ps.add(prefix + ".wv", wv);
        ps.add(prefix + ".wh", wh);
        ps.add(prefix + ".wa", wa);
    }
};

inline TopDownParams make_topdown(std::size_t feat_dim, std::size_t h_dim, std::size_t att_dim, Rng& rng) {
    return TopDownParams{make_linear(feat_dim, att_dim, rng), make_linear(h_dim, att_dim, rng),
                         Tensor::uniform({att_dim, 1}, rng, 1.0 / std::sqrt(static_cast<double>(att_dim)), true)};
}

inline AttentionOutput topdown_att(const Tensor& features, const Tensor& h, const TopDownParams& p) {
    if (features.rank() != 3 || features.dim(1) == 0) {
        throw ShapeError("topdown_att: features must be [B,M,d] with M >= 1, got " + shape_str(features.shape()));
    }
    const std::size_t b = features.dim(0), m = features.dim(1), d = features.dim(2);
    const std::size_t a = p.wa.dim(0);
    const Tensor proj = tanh(add(p.wv(features), expand_set(p.wh(h), m)));
    const Tensor logits = reshape(matmul(reshape(proj, {b * m, a}), p.wa), {b, m});
    const Tensor alpha = softmax(logits);
    const Tensor xhat = reshape(batch_matmul(reshape(alpha, {b, 1, m}), features), {b, d});
    return AttentionOutput{xhat, alpha};
}

inline constexpr std::size_t kAoaHeads = 8;

/**
 * Multi-head attention of the query h over the feature set followed by the
 * attention-on-attention gate:
 *
 *   head_i = softmax(h W1_i (I W2_i)^T / sqrt(d_k)) I W3_i
 *   M      = Concat(head_1..head_8) W_C
 *   x_hat  = LeakyReLU(MLP(M))
 *   v_i    = W_q^i h + W_I^i x_hat + b^i
 *   v_g    = sigmoid(W_q^g h + W_I^g x_hat + b^g)
 *   out    = v_i * v_g
 */
struct AoaParams {
    Tensor w1;  // [h, d]  query projection, heads side by side
    Tensor w2;  // [d, d]  key projection
    Tensor w3;  // [d, d]  value projection
    Linear wc;  // d -> d
    Linear mlp; // d -> d
    Linear info_q;  // h -> d, carries b^i
    Tensor info_i;  // [d, d]
    Linear gate_q;  // h -> d, carries b^g
    Tensor gate_i;  // [d, d]
    std::size_t heads = kAoaHeads;

    void register_into(ParameterSet& ps, const std::string& prefix) const {
        ps.add(prefix + ".w1", w1);
        ps.add(prefix + ".w2", w2);
        ps.add(prefix + ".w3", w3);
        ps.add(prefix + ".wc", wc);
        ps.add(prefix + ".mlp", mlp);
        ps.add(prefix + ".info_q", info_q);
        ps.add(prefix + ".info_i", info_i);
        ps.add(prefix + ".gate_q", gate_q);
        ps.add(prefix + ".gate_i", gate_i);
    }
};

inline AoaParams make_aoa(std::size_t d, std::size_t h_dim, Rng& rng, std::size_t heads = kAoaHeads) {
    if (heads == 0 || d % heads != 0) {
        throw ShapeError("aoa: model dim " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
    }
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sh = 1.0 / std::sqrt(static_cast<double>(h_dim));
    AoaParams p;
    p.w1 = Tensor::uniform({h_dim, d}, rng, sh, true);
    p.w2 = Tensor::uniform({d, d}, rng, sd, true);
    p.w3 = Tensor::uniform({d, d}, rng, sd, true);
    p.wc = make_linear(d, d, rng);
    p.mlp = make_linear(d, d, rng);
    p.info_q = make_linear(h_dim, d, rng);
    p.info_i = Tensor::uniform({d, d}, rng, sd, true);
    p.gate_q = make_linear(h_dim, d, rng);
    p.gate_i = Tensor::uniform({d, d}, rng, sd, true);
    p.heads = heads;
    return p;
}

struct AoaOutput {
    Tensor out;      // v_i * v_g, [B, d]
    Tensor info;     // v_i
    Tensor gate;     // v_g
    Tensor xhat;     // multi-head attended vector
    Tensor weights;  // [B, heads, M]
};

inline AoaOutput aoa_att(const Tensor& features, const Tensor& h, const AoaParams& p) {
    if (features.rank() != 3 || features.dim(1) == 0) {
        throw ShapeError("aoa_att: features must be [B,M,d] with M >= 1, got " + shape_str(features.shape()));
    }
    const std::size_t b = features.dim(0), m = features.dim(1), d = features.dim(2);
    if (p.heads == 0 || d % p.heads != 0) {
        throw ShapeError("aoa_att: feature dim " + std::to_string(d) + " is not divisible by " + std::to_string(p.heads) + " heads");
    }
    if (p.w2.dim(0) != d) throw ShapeError("aoa_att: features " + shape_str(features.shape()) + " do not match params");
    const std::size_t dk = d / p.heads;
    const Tensor q = matmul(h, p.w1);                                           // [B, d]
    const Tensor flat = reshape(features, {b * m, d});
    const Tensor k = reshape(matmul(flat, p.w2), {b, m, d});
    const Tensor v = reshape(matmul(flat, p.w3), {b, m, d});
    const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<Tensor> heads, weights;
    for (std::size_t i = 0; i < p.heads; ++i) {
        const Tensor qi = reshape(slice_last(q, i * dk, (i + 1) * dk), {b, 1, dk});
        const Tensor ki = slice_last(k, i * dk, (i + 1) * dk);
        const Tensor vi = slice_last(v, i * dk, (i + 1) * dk);
        const Tensor att = softmax(scale(batch_matmul(qi, transpose(ki)), inv), 2);  // [B,1,M]
        weights.push_back(reshape(att, {b, m}));
        heads.push_back(reshape(batch_matmul(att, vi), {b, dk}));
    }
    const Tensor mh = p.wc(concat(heads));
    const Tensor xhat = leaky_relu(p.mlp(mh));
    const Tensor info = add(p.info_q(h), matmul(xhat, p.info_i));
    const Tensor gate = sigmoid(add(p.gate_q(h), matmul(xhat, p.gate_i)));
    return AoaOutput{mul(info, gate), info, gate, xhat, reshape(concat(weights), {b, p.heads, m})};
}

enum class AttentionKind { TopDown, AoA };

inline const char* to_string(AttentionKind k) { return k == AttentionKind::TopDown ? "topdown" : "aoa"; }

inline AttentionKind attention_from_string(const std::string& s) {
    if (s == "topdown" || s == "TopDown") return AttentionKind::TopDown;
    if (s == "aoa" || s == "AoA") return AttentionKind::AoA;
    throw DataError("unknown attention '" + s + "'");
}

// ---------------------------------------------------------------------------
// NWGM head: Softmax(g(x_hat, z_bar, s_bar, x_bar)) followed by the vocabulary projection.

enum class EmbeddingKind { Linear, Lstm, Glu };

inline const char* to_string(EmbeddingKind k) {
    switch (k) {
        case EmbeddingKind::Linear: return "linear";
        case EmbeddingKind::Lstm: return "lstm";
        case EmbeddingKind::Glu: return "glu";
    }
    return "?";
}

inline EmbeddingKind embedding_from_string(const std::string& s) {
    if (s == "linear") return EmbeddingKind::Linear;
    if (s == "lstm") return EmbeddingKind::Lstm;
    if (s == "glu") return EmbeddingKind::Glu;
    throw DataError("unknown embedding layer '" + s + "'");
}

struct NwgmHeadParams {
    EmbeddingKind kind = EmbeddingKind::Linear;
    std::size_t in_dim = 0;
    Linear g_linear;
    LstmCell g_lstm;
    GluCell g_glu;
    Linear vocab;  // d -> |V|

    void register_into(ParameterSet& ps, const std::string& prefix) const {
        switch (kind) {
            case EmbeddingKind::Linear: ps.add(prefix + ".g", g_linear); break;
            case EmbeddingKind::Lstm: ps.add(prefix + ".g", g_lstm); break;
            case EmbeddingKind::Glu: ps.add(prefix + ".g", g_glu); break;
        }
        ps.add(prefix + ".vocab", vocab);
    }

    std::size_t out_dim() const { return vocab.in_dim(); }
};

inline NwgmHeadParams make_nwgm_head(EmbeddingKind kind, std::size_t in_dim, std::size_t d, std::size_t vocab,
                                     Rng& rng) {
    NwgmHeadParams p;
    p.kind = kind;
    p.in_dim = in_dim;
    switch (kind) {
        case EmbeddingKind::Linear: p.g_linear = make_linear(in_dim, d, rng); break;
        case EmbeddingKind::Lstm: p.g_lstm = make_lstm(in_dim, d, rng); break;
        case EmbeddingKind::Glu: p.g_glu = make_glu(in_dim, d, rng); break;
    }
    p.vocab = make_linear(d, vocab, rng);
    return p;
}

struct NwgmOutput {
    Tensor o;       // g output, [B, d]
    Tensor logits;  // [B, |V|]
    LstmState g_state;
};

/// g over the concatenated inputs, then the vocabulary projection. `state` is
/// read and advanced only by the LSTM variant.
inline NwgmOutput nwgm_logits(const std::vector<Tensor>& inputs, const NwgmHeadParams& p, const LstmState& state = {}) {
    if (inputs.empty()) throw ShapeError("nwgm_head needs at least one input");
    const Tensor x = inputs.size() == 1 ? inputs[0] : concat(inputs);
    if (x.rank() != 2 || x.dim(1) != p.in_dim) {
        throw ShapeError("nwgm_head: input " + shape_str(x.shape()) + " does not match g input dim " + std::to_string(p.in_dim));
    }
    NwgmOutput out;
    switch (p.kind) {
        case EmbeddingKind::Linear: out.o = p.g_linear(x); break;
        case EmbeddingKind::Glu: out.o = glu(x, p.g_glu); break;
        case EmbeddingKind::Lstm: {
            const std::size_t hd = p.g_lstm.hidden();
            const LstmState s = state.h.defined() ? state
                                                  : LstmState{Tensor::zeros({x.dim(0), hd}), Tensor::zeros({x.dim(0), hd})};
            out.g_state = lstm_step(x, s, p.g_lstm);
            out.o = out.g_state.h;
            break;
        }
    }
    out.logits = p.vocab(out.o);
    return out;
}

/// Word distribution Softmax(g(x_hat, z_bar, s_bar, x_bar)); absent inputs are left out.
inline Tensor nwgm_head(const std::vector<Tensor>& inputs, const NwgmHeadParams& p, const LstmState& state = {}) {
    return softmax(nwgm_logits(inputs, p, state).logits);
}

/// Moves every atom toward the atom mean: mean + lambda * (atom - mean).
inline Tensor contract_atoms(const Tensor& atoms, double lambda) {
    const std::size_t k = atoms.dim(0), d = atoms.dim(1);
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += atoms.at(i, j) / static_cast<double>(k);
    }
    std::vector<double> out(k * d);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = mean[j] + lambda * (atoms.at(i, j) - mean[j]);
    }
    return Tensor::from({k, d}, std::move(out));
}

// ---------------------------------------------------------------------------
// Dictionary files: <stem>.json manifest plus <stem>.bin of little-endian doubles.

inline void save_dictionary(const std::string& stem, const ExptDictionary& d) {
    d.validate();
    const std::filesystem::path bin = stem + ".bin";
    {
        std::ofstream out(bin, std::ios::binary);
        if (!out) throw DataError("cannot write '" + bin.string() + "'");
        detail::write_le_doubles(out, d.atoms.values());
    }
    nlohmann::json j{{"format", "deconf-dictionary"}, {"version", 1},   {"kind", to_string(d.kind)},
                     {"K", d.size()},                 {"dim", d.dim()}, {"labels", d.labels},
                     {"blob", bin.filename().string()}};
    std::ofstream man(stem + ".json");
    if (!man) throw DataError("cannot write '" + stem + ".json'");
    man << j.dump(2) << '\n';
}

inline ExptDictionary load_dictionary(const std::string& stem) {
    const auto j = detail::read_json_file(stem + ".json");
    try {
        if (j.value("format", "") != "deconf-dictionary") throw DataError("'" + stem + ".json' is not a dictionary");
        const auto dir = std::filesystem::path(stem + ".json").parent_path();
        const auto blob = detail::read_file_bytes((dir / j.at("blob").get<std::string>()).string());
        const std::size_t k = j.at("K").get<std::size_t>(), dim = j.at("dim").get<std::size_t>();
        if (blob.size() != k * dim * 8) throw DataError("dictionary blob size does not match K x dim");
        ExptDictionary d{dict_kind_from_string(j.at("kind").get<std::string>()),
                         j.at("labels").get<std::vector<std::string>>(),
                         Tensor::from({k, dim}, detail::read_le_doubles(blob, 0, k * dim))};
        d.validate();
        return d;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed dictionary manifest: " + std::string(e.what()));
    }
}

}  // namespace deconf
