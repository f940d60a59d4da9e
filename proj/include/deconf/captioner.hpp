#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deconf/deconf_modules.hpp"
#include "deconf/errors.hpp"
#include "deconf/metrics.hpp"
#include "deconf/optim.hpp"
#include "deconf/rng.hpp"
#include "deconf/synthworld.hpp"
#include "deconf/tensor.hpp"
#include "deconf/vocab.hpp"

namespace deconf {

enum class Variant { UD, UD_BD, UD_FD_Cor, UD_FD, DICv1 };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::UD: return "UD";
        case Variant::UD_BD: return "UD-BD";
        case Variant::UD_FD_Cor: return "UD-FD-Cor";
        case Variant::UD_FD: return "UD-FD";
        case Variant::DICv1: return "DICv1";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    for (Variant v : {Variant::UD, Variant::UD_BD, Variant::UD_FD_Cor, Variant::UD_FD, Variant::DICv1}) {
        if (s == to_string(v)) return v;
    }
    throw DataError("unknown variant '" + s + "' (expected UD, UD-BD, UD-FD-Cor, UD-FD or DICv1)");
}

inline std::vector<Variant> all_variants() {
    return {Variant::UD, Variant::UD_BD, Variant::UD_FD_Cor, Variant::UD_FD, Variant::DICv1};
}

inline bool uses_concepts(Variant v) { return v == Variant::UD_BD; }
inline bool uses_z(Variant v) { return v == Variant::UD_FD_Cor || v == Variant::UD_FD || v == Variant::DICv1; }
inline bool uses_x(Variant v) { return v == Variant::UD_FD || v == Variant::DICv1; }
inline bool uses_s(Variant v) { return v == Variant::DICv1; }

struct ModelSpec {
    Variant variant = Variant::DICv1;
    AttentionKind attention = AttentionKind::TopDown;
    EmbeddingKind embedding = EmbeddingKind::Lstm;
    std::size_t dim = 64;
    std::size_t att_dim = 64;
    std::size_t aoa_heads = kAoaHeads;
    bool static_s = false;       // s_bar = atom mean instead of EXPT[S](h3)
    double temperature = 1.0;    // EXPT softmax temperature

    nlohmann::json to_json() const {
        return {{"variant", to_string(variant)}, {"attention", to_string(attention)},
                {"embedding", to_string(embedding)}, {"dim", dim}, {"att_dim", att_dim},
                {"aoa_heads", aoa_heads}, {"static_s", static_s}, {"temperature", temperature}};
    }

    static ModelSpec from_json(const nlohmann::json& j) {
        ModelSpec s;
        s.variant = variant_from_string(j.value("variant", std::string(to_string(s.variant))));
        s.attention = attention_from_string(j.value("attention", std::string(to_string(s.attention))));
        s.embedding = embedding_from_string(j.value("embedding", std::string(to_string(s.embedding))));
        s.dim = j.value("dim", s.dim);
        s.att_dim = j.value("att_dim", s.att_dim);
        s.aoa_heads = j.value("aoa_heads", s.aoa_heads);
        s.static_s = j.value("static_s", s.static_s);
        s.temperature = j.value("temperature", s.temperature);
        return s;
    }
};

/// Dictionaries handed to make_model; only those the variant needs are read.
struct ModelDictionaries {
    std::optional<ExptDictionary> z, s, x, c;
};

struct CaptionModel {
    ModelSpec spec;
    Vocab vocab;
    std::size_t feat_dim = 0;
    Tensor embed;                    // [|V|, d]
    std::array<LstmCell, 4> lstm;
    std::array<bool, 4> active{};    // streams the variant reads
    TopDownParams topdown;
    AoaParams aoa;
    Linear combine;                  // concat(h2, x_hat) -> d, query of the z/concept dictionary
    ExptDictionary dz, ds, dx, dc;
    NwgmHeadParams head;
    ParameterSet params;

    bool has_z() const { return uses_z(spec.variant); }
    bool has_s() const { return uses_s(spec.variant); }
    bool has_x() const { return uses_x(spec.variant); }
    bool has_c() const { return uses_concepts(spec.variant); }

    /// Width of g's input: x_hat, then z_bar (or the concept expectation), s_bar, x_bar.
    std::size_t g_in_dim() const {
        return feat_dim + spec.dim * ((has_z() || has_c()) + has_s() + has_x());
    }
};

namespace detail {

inline ExptDictionary checked_dict(const std::optional<ExptDictionary>& d, DictKind kind, std::size_t dim, Variant v) {
    if (!d) throw DataError(std::string("variant ") + to_string(v) + " needs the " + to_string(kind) + " dictionary");
    if (d->kind != kind) {
        throw DataError(std::string("expected a ") + to_string(kind) + " dictionary, got " + to_string(d->kind));
    }
    d->validate();
    if (d->dim() != dim) {
        throw ShapeError(std::string(to_string(kind)) + " atoms have dim " + std::to_string(d->dim()) + ", model needs " +
                         std::to_string(dim));
    }
    return clone(*d);
}

}  // namespace detail

inline CaptionModel make_model(const ModelSpec& spec, const Vocab& vocab, std::size_t feat_dim,
                               const ModelDictionaries& dicts, std::uint64_t seed) {
    if (spec.dim == 0 || spec.att_dim == 0 || feat_dim == 0) throw DataError("model dims must be positive");
    if (!(spec.temperature > 0.0)) throw DataError("EXPT temperature must be positive");
    const Variant v = spec.variant;
    const std::size_t d = spec.dim;
    if (uses_x(v) && feat_dim != d) {
        throw ShapeError("EXPT[X] is queried by a model-dim stream; feature dim " + std::to_string(feat_dim) +
                         " must equal model dim " + std::to_string(d));
    }
    CaptionModel m;
    m.spec = spec;
    m.vocab = vocab;
    m.feat_dim = feat_dim;
    if (uses_z(v)) m.dz = detail::checked_dict(dicts.z, DictKind::Structure, d, v);
    if (uses_s(v)) m.ds = detail::checked_dict(dicts.s, DictKind::Keyword, d, v);
    if (uses_x(v)) m.dx = detail::checked_dict(dicts.x, DictKind::Visual, feat_dim, v);
    if (uses_concepts(v)) m.dc = detail::checked_dict(dicts.c, DictKind::Concept, d, v);

    m.active = {true, uses_z(v) || uses_concepts(v), uses_s(v) && !spec.static_s, uses_x(v)};

    Rng rng(seed, "model.init");
    m.embed = Tensor::normal({vocab.size(), d}, rng, 0.1, true);
    const std::size_t u_dim = feat_dim + 2 * d;
    for (std::size_t i = 0; i < 4; ++i) {
        if (m.active[i]) m.lstm[i] = make_lstm(u_dim, d, rng);
    }
    if (spec.attention == AttentionKind::TopDown) {
        m.topdown = make_topdown(feat_dim, d, spec.att_dim, rng);
    } else {
        m.aoa = make_aoa(feat_dim, d, rng, spec.aoa_heads);
    }
    if (m.active[1]) m.combine = make_linear(d + feat_dim, d, rng);
    m.head = make_nwgm_head(spec.embedding, m.g_in_dim(), d, vocab.size(), rng);

    m.params.add("embed", m.embed);
    for (std::size_t i = 0; i < 4; ++i) {
        if (m.active[i]) m.params.add("lstm" + std::to_string(i + 1), m.lstm[i]);
    }
    if (spec.attention == AttentionKind::TopDown) {
        m.topdown.register_into(m.params, "att");
    } else {
        m.aoa.register_into(m.params, "att");
    }
    if (m.active[1]) m.params.add("expt.combine", m.combine);
    if (m.has_z()) m.params.add("expt.z", m.dz.atoms);
    if (m.has_s()) m.params.add("expt.s", m.ds.atoms);
    if (m.has_x()) m.params.add("expt.x", m.dx.atoms);
    if (m.has_c()) m.params.add("expt.c", m.dc.atoms);
    m.head.register_into(m.params, "head");
    return m;
}

/// Sets the learning-rate multiplier of every EXPT parameter (names "expt.*").
inline void set_expt_multiplier(CaptionModel& m, double mult) {
    if (!(mult > 0.0)) throw DataError("EXPT lr multiplier must be positive");
    for (auto& e : m.params.entries()) {
        if (e.name.rfind("expt.", 0) == 0) e.multiplier = mult;
    }
}

// ---------------------------------------------------------------------------
// One decoding step

struct Encoded {
    Tensor features;  // [B, M, F]
    Tensor pooled;    // [B, F]

    std::size_t batch() const { return features.dim(0); }
};

inline Encoded encode(const Tensor& features) {
    if (features.rank() != 3) throw ShapeError("features must be [B,M,F], got " + shape_str(features.shape()));
    return Encoded{features, mean_pool(features)};
}

inline Tensor features_tensor(const std::vector<const Scene*>& scenes) {
    if (scenes.empty()) throw DataError("empty batch");
    const std::size_t m = scenes[0]->features.size();
    const std::size_t f = m ? scenes[0]->features[0].size() : 0;
    std::vector<double> v;
    v.reserve(scenes.size() * m * f);
    for (const Scene* s : scenes) {
        if (s->features.size() != m) throw DataError("scene " + s->id + " has a different number of regions");
        for (const auto& row : s->features) {
            if (row.size() != f) throw DataError("scene " + s->id + " has a feature of the wrong dim");
            v.insert(v.end(), row.begin(), row.end());
        }
    }
    return Tensor::from({scenes.size(), m, f}, std::move(v));
}

struct DecoderState {
    std::array<LstmState, 4> streams;
    Tensor o_prev;                    // [B, d]
    LstmState g_state;                // LSTM embedding layer only
    std::vector<std::size_t> prev_words;

    std::size_t batch() const { return prev_words.size(); }
};

inline DecoderState init_state(const CaptionModel& m, std::size_t batch) {
    DecoderState s;
    const std::size_t d = m.spec.dim;
    for (std::size_t i = 0; i < 4; ++i) {
        if (m.active[i]) s.streams[i] = LstmState{Tensor::zeros({batch, d}), Tensor::zeros({batch, d})};
    }
    s.o_prev = Tensor::zeros({batch, d});
    if (m.spec.embedding == EmbeddingKind::Lstm) {
        s.g_state = LstmState{Tensor::zeros({batch, d}), Tensor::zeros({batch, d})};
    }
    s.prev_words.assign(batch, Vocab::kBos);
    return s;
}

/// Rows of every state tensor reordered by `rows` (beam bookkeeping).
inline DecoderState gather_state(const DecoderState& s, const std::vector<std::size_t>& rows) {
    DecoderState out;
    for (std::size_t i = 0; i < 4; ++i) {
        if (s.streams[i].h.defined()) {
            out.streams[i] = LstmState{gather_rows(s.streams[i].h, rows), gather_rows(s.streams[i].c, rows)};
        }
    }
    out.o_prev = gather_rows(s.o_prev, rows);
    if (s.g_state.h.defined()) out.g_state = LstmState{gather_rows(s.g_state.h, rows), gather_rows(s.g_state.c, rows)};
    for (std::size_t r : rows) out.prev_words.push_back(s.prev_words.at(r));
    return out;
}

/// Replaces a dictionary block of g's input with zeros.
struct BlockMask {
    bool z = false;
    bool s = false;
    bool x = false;
};

struct StepOutput {
    Tensor logits;   // [B, |V|]
    Tensor xhat, zbar, sbar, xbar;
    DecoderState state;  // prev_words copied from the input state
};

inline StepOutput decode_step(const CaptionModel& m, const Encoded& enc, const DecoderState& st,
                              const BlockMask& mask = {}) {
    const std::size_t b = st.batch();
    if (enc.batch() != b) throw ShapeError("decode_step: state batch does not match features batch");
    if (enc.features.dim(2) != m.feat_dim) {
        throw ShapeError("decode_step: features have dim " + std::to_string(enc.features.dim(2)) + ", model expects " +
                         std::to_string(m.feat_dim));
    }
    StepOutput out;
    out.state.prev_words = st.prev_words;
    const Tensor u = concat({enc.pooled, embedding(m.embed, st.prev_words), st.o_prev});
    for (std::size_t i = 0; i < 4; ++i) {
        if (m.active[i]) out.state.streams[i] = lstm_step(u, st.streams[i], m.lstm[i]);
    }
    const Tensor& h1 = out.state.streams[0].h;
    out.xhat = m.spec.attention == AttentionKind::TopDown ? topdown_att(enc.features, h1, m.topdown).attended
                                                          : aoa_att(enc.features, h1, m.aoa).out;
    std::vector<Tensor> blocks{out.xhat};
    auto masked = [&](const Tensor& t, bool zero) { return zero ? Tensor::zeros(t.shape()) : t; };
    const double temp = m.spec.temperature;
    if (m.has_z() || m.has_c()) {
        const Tensor q = m.combine(concat({out.state.streams[1].h, out.xhat}));
        out.zbar = expt(m.has_z() ? m.dz.atoms : m.dc.atoms, q, temp).expectation;
        blocks.push_back(masked(out.zbar, mask.z));
    }
    if (m.has_s()) {
        if (m.spec.static_s) {
            const std::size_t k = m.ds.size();
            out.sbar = matmul(Tensor::filled({b, k}, 1.0 / static_cast<double>(k)), m.ds.atoms);
        } else {
            out.sbar = expt(m.ds.atoms, out.state.streams[2].h, temp).expectation;
        }
        blocks.push_back(masked(out.sbar, mask.s));
    }
    if (m.has_x()) {
        out.xbar = expt(m.dx.atoms, out.state.streams[3].h, temp).expectation;
        blocks.push_back(masked(out.xbar, mask.x));
    }
    NwgmOutput g = nwgm_logits(blocks, m.head, st.g_state);
    out.logits = g.logits;
    out.state.o_prev = g.o;
    out.state.g_state = g.g_state;
    return out;
}

// ---------------------------------------------------------------------------
// Teacher-forced cross-entropy

/// Caption ids for training: reference words truncated to the vocabulary's max length.
inline std::vector<std::size_t> target_ids(const Vocab& vocab, const std::string& caption) {
    auto ids = vocab.encode(caption);
    if (ids.size() > vocab.max_len()) ids.resize(vocab.max_len());
    return ids;
}

struct XeLoss {
    Tensor loss;           // mean -log p over target tokens, [1]
    std::size_t tokens = 0;
};

/// Each caption is followed by the end token; steps past a caption's end are masked out.
inline XeLoss xe_loss(const CaptionModel& m, const Encoded& enc, const std::vector<std::vector<std::size_t>>& captions) {
    const std::size_t b = enc.batch();
    if (captions.size() != b) throw ShapeError("xe_loss: caption count does not match batch");
    if (b == 0) throw DataError("empty batch");
    std::size_t steps = 0, tokens = 0;
    for (const auto& c : captions) {
        steps = std::max(steps, c.size() + 1);
        tokens += c.size() + 1;
    }
    DecoderState st = init_state(m, b);
    std::vector<Tensor> terms;
    for (std::size_t t = 0; t < steps; ++t) {
        StepOutput o = decode_step(m, enc, st);
        const Tensor lp = log_softmax(o.logits);
        std::vector<std::size_t> target(b, Vocab::kEos), next(b, Vocab::kEos);
        std::vector<double> w(b, 0.0);
        for (std::size_t i = 0; i < b; ++i) {
            const auto& c = captions[i];
            if (t <= c.size()) {
                target[i] = t < c.size() ? c[t] : Vocab::kEos;
                w[i] = -1.0 / static_cast<double>(tokens);
            }
            if (t < c.size()) next[i] = c[t];
        }
        terms.push_back(pick(lp, target, w));
        st = std::move(o.state);
        st.prev_words = std::move(next);
    }
    Tensor loss = terms.size() == 1 ? terms[0] : sum(concat(terms));
    return XeLoss{loss, tokens};
}

// ---------------------------------------------------------------------------
// Decoding

struct Decoded {
    std::vector<std::size_t> tokens;  // without the end token
    double logprob = 0.0;             // summed, including the end token if emitted
    bool ended = false;

    /// Number of scored tokens: words plus the end token.
    std::size_t length() const { return tokens.size() + (ended ? 1 : 0); }
    double score() const { return length() ? logprob / static_cast<double>(length()) : 0.0; }
};

inline std::vector<double> row_log_softmax(const Tensor& logits, std::size_t row) {
    const std::size_t v = logits.dim(1);
    const double* p = logits.data().data() + row * v;
    const double mx = *std::max_element(p, p + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(p[j] - mx);
    const double lse = mx + std::log(s);
    std::vector<double> out(v);
    for (std::size_t j = 0; j < v; ++j) out[j] = p[j] - lse;
    return out;
}

/// Argmax word per step, lowest id on ties, until the end token or max length.
inline std::vector<Decoded> greedy_decode(const CaptionModel& m, const Tensor& features) {
    NoGradGuard guard;
    const Encoded enc = encode(features);
    const std::size_t b = enc.batch();
    std::vector<Decoded> out(b);
    DecoderState st = init_state(m, b);
    std::vector<bool> done(b, false);
    std::size_t remaining = b;
    for (std::size_t t = 0; t < m.vocab.max_len() && remaining; ++t) {
        StepOutput o = decode_step(m, enc, st);
        std::vector<std::size_t> next(b, Vocab::kEos);
        for (std::size_t i = 0; i < b; ++i) {
            if (done[i]) continue;
            const auto lp = row_log_softmax(o.logits, i);
            std::size_t best = 0;
            for (std::size_t j = 1; j < lp.size(); ++j) {
                if (lp[j] > lp[best]) best = j;
            }
            out[i].logprob += lp[best];
            if (best == Vocab::kEos) {
                out[i].ended = true;
                done[i] = true;
                --remaining;
            } else {
                out[i].tokens.push_back(best);
                next[i] = best;
            }
        }
        st = std::move(o.state);
        st.prev_words = std::move(next);
    }
    return out;
}

/// Beam over summed log-probabilities for one scene ([1,M,F] features).
/// Finished hypotheses compete on length-normalized log-probability; ties go
/// to the lexicographically smaller token sequence.
inline Decoded beam_search(const CaptionModel& m, const Tensor& features, std::size_t beam) {
    if (beam == 0) throw DataError("beam width must be at least 1");
    if (features.rank() != 3 || features.dim(0) != 1) {
        throw ShapeError("beam_search expects one scene, got " + shape_str(features.shape()));
    }
    NoGradGuard guard;
    const Encoded enc1 = encode(features);
    std::vector<Decoded> alive(1), finished;
    DecoderState st = init_state(m, 1);
    const std::size_t max_len = m.vocab.max_len();
    auto better = [](const Decoded& a, const Decoded& b) {
        if (a.score() != b.score()) return a.score() > b.score();
        return a.tokens < b.tokens;
    };
    for (std::size_t t = 0; t < max_len && !alive.empty(); ++t) {
        const std::vector<std::size_t> rows(alive.size(), 0);
        const Encoded enc{gather_rows(enc1.features, rows), gather_rows(enc1.pooled, rows)};
        StepOutput o = decode_step(m, enc, st);
        struct Cand {
            std::size_t parent, word;
            double logprob;
        };
        std::vector<Cand> cands;
        for (std::size_t i = 0; i < alive.size(); ++i) {
            const auto lp = row_log_softmax(o.logits, i);
            for (std::size_t w = 0; w < lp.size(); ++w) cands.push_back({i, w, alive[i].logprob + lp[w]});
        }
        auto seq_less = [&](const Cand& a, const Cand& b) {
            const auto& ta = alive[a.parent].tokens;
            const auto& tb = alive[b.parent].tokens;
            if (ta != tb) return ta < tb;
            return a.word < b.word;
        };
        const std::size_t keep = std::min(beam, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [&](const Cand& a, const Cand& b) {
                              if (a.logprob != b.logprob) return a.logprob > b.logprob;
                              return seq_less(a, b);
                          });
        std::vector<Decoded> next_alive;
        std::vector<std::size_t> parents, words;
        for (std::size_t k = 0; k < keep; ++k) {
            const Cand& c = cands[k];
            Decoded h{alive[c.parent].tokens, c.logprob, false};
            if (c.word == Vocab::kEos) {
                h.ended = true;
                finished.push_back(std::move(h));
                continue;
            }
            h.tokens.push_back(c.word);
            if (t + 1 == max_len) {
                finished.push_back(std::move(h));
                continue;
            }
            next_alive.push_back(std::move(h));
            parents.push_back(c.parent);
            words.push_back(c.word);
        }
        alive = std::move(next_alive);
        if (!alive.empty()) {
            st = gather_state(o.state, parents);
            st.prev_words = words;
        }
    }
    if (finished.empty()) return Decoded{};
    return *std::min_element(finished.begin(), finished.end(), better);
}

/// Sum of log-probabilities the model assigns to `tokens`, followed by the end token if `ended`.
inline Decoded score_sequence(const CaptionModel& m, const Tensor& features, const std::vector<std::size_t>& tokens,
                              bool ended) {
    NoGradGuard guard;
    const Encoded enc = encode(features);
    DecoderState st = init_state(m, 1);
    Decoded d{tokens, 0.0, ended};
    const std::size_t steps = tokens.size() + (ended ? 1 : 0);
    for (std::size_t t = 0; t < steps; ++t) {
        StepOutput o = decode_step(m, enc, st);
        const std::size_t w = t < tokens.size() ? tokens[t] : Vocab::kEos;
        d.logprob += row_log_softmax(o.logits, 0)[w];
        st = std::move(o.state);
        st.prev_words = {w};
    }
    return d;
}

inline Tokens to_words(const Vocab& v, const std::vector<std::size_t>& ids) {
    Tokens out;
    for (std::size_t i : ids) out.push_back(v.word(i));
    return out;
}

/// Captions for a list of scenes: batched greedy for beam 1, per-scene beam otherwise.
inline std::vector<Tokens> caption_scenes(const CaptionModel& m, const std::vector<Scene>& scenes, std::size_t beam = 1,
                                          std::size_t batch = 64) {
    std::vector<Tokens> out;
    if (beam <= 1) {
        for (std::size_t s = 0; s < scenes.size(); s += batch) {
            std::vector<const Scene*> chunk;
            for (std::size_t i = s; i < std::min(scenes.size(), s + batch); ++i) chunk.push_back(&scenes[i]);
            for (const auto& d : greedy_decode(m, features_tensor(chunk))) out.push_back(to_words(m.vocab, d.tokens));
        }
    } else {
        for (const auto& sc : scenes) out.push_back(to_words(m.vocab, beam_search(m, features_tensor({&sc}), beam).tokens));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t xe_epochs = 10;
    std::size_t scst_epochs = 0;
    std::size_t batch_size = 32;
    double lr = 5e-4;
    double decay = 0.8;
    std::size_t decay_every = 5;
    double expt_lr_multiplier = 0.1;
    std::uint64_t seed = 0;
    IdfMode idf = IdfMode::Corpus;  // evaluation IDF; the SCST reward always uses the training table

    void validate() const {
        if (batch_size == 0) throw DataError("batch size must be positive");
        if (!(lr > 0.0) || !(decay > 0.0) || decay_every == 0 || !(expt_lr_multiplier > 0.0)) {
            throw DataError("learning-rate settings must be positive");
        }
    }

    AdamState adam() const {
        AdamState a;
        a.base_lr = lr;
        a.decay = decay;
        a.decay_every = decay_every;
        return a;
    }
};

struct LogRecord {
    std::size_t epoch = 0;
    std::string phase;
    double loss = 0.0;
    std::optional<double> reward;
    double lr = 0.0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"epoch", epoch}, {"phase", phase}, {"loss", loss}, {"lr", lr}, {"seed", seed}};
        j["reward"] = reward ? nlohmann::json(*reward) : nlohmann::json(nullptr);
        return j;
    }
};

namespace detail {

inline void check_finite(double v, const std::string& what, std::size_t epoch, std::size_t batch) {
    if (!std::isfinite(v)) {
        throw Error("non-finite " + what + " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
    }
}

}  // namespace detail

/// Teacher-forced training on every (scene, reference) pair. `first_epoch`
/// continues the lr schedule of an earlier phase.
inline std::vector<LogRecord> train_xe(CaptionModel& m, const std::vector<Scene>& scenes, const TrainConfig& cfg,
                                       AdamState& adam, std::size_t first_epoch = 0) {
    cfg.validate();
    std::vector<LogRecord> log;
    if (cfg.xe_epochs == 0) return log;
    if (scenes.empty()) throw DataError("train_xe: no training scenes");
    set_expt_multiplier(m, cfg.expt_lr_multiplier);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        for (std::size_t c = 0; c < scenes[i].captions.size(); ++c) pairs.emplace_back(i, c);
    }
    if (pairs.empty()) throw DataError("train_xe: scenes carry no reference captions");
    Rng rng(cfg.seed, "train.xe.order");
    for (std::size_t e = 0; e < cfg.xe_epochs; ++e) {
        const std::size_t epoch = first_epoch + e;
        rng.shuffle(std::span(pairs));
        double total = 0.0;
        std::size_t tokens = 0;
        for (std::size_t s = 0, batch = 0; s < pairs.size(); s += cfg.batch_size, ++batch) {
            std::vector<const Scene*> chunk;
            std::vector<std::vector<std::size_t>> caps;
            for (std::size_t i = s; i < std::min(pairs.size(), s + cfg.batch_size); ++i) {
                chunk.push_back(&scenes[pairs[i].first]);
                caps.push_back(target_ids(m.vocab, scenes[pairs[i].first].captions[pairs[i].second]));
            }
            const Encoded enc = encode(features_tensor(chunk));
            XeLoss l = xe_loss(m, enc, caps);
            detail::check_finite(l.loss.item(), "XE loss", epoch, batch);
            m.params.zero_grad();
            backward(l.loss);
            adam_step(m.params, adam, epoch);
            total += l.loss.item() * static_cast<double>(l.tokens);
            tokens += l.tokens;
        }
        log.push_back(LogRecord{epoch, "xe", total / static_cast<double>(tokens), std::nullopt, adam.lr_at(epoch), cfg.seed});
    }
    return log;
}

/// Reward of a sampled caption (ids without the end token) for a scene.
using RewardFn = std::function<double(const std::vector<std::size_t>&, const Scene&)>;

/// CIDEr-D against the scene's references, with document frequencies from `train`.
inline RewardFn cider_reward(const Vocab& vocab, const std::vector<Scene>& train) {
    std::vector<std::vector<Tokens>> refs;
    for (const auto& s : train) {
        std::vector<Tokens> r;
        for (const auto& c : s.captions) r.push_back(tokenize(c));
        refs.push_back(std::move(r));
    }
    auto table = std::make_shared<CiderDf>(CiderDf::build(refs));
    return [table, vocab](const std::vector<std::size_t>& ids, const Scene& scene) {
        std::vector<Tokens> r;
        for (const auto& c : scene.captions) r.push_back(tokenize(c));
        return cider_d_single(to_words(vocab, ids), r, *table);
    };
}

struct ScstBatch {
    double loss = 0.0;
    double sample_reward = 0.0;  // mean over the batch
    double greedy_reward = 0.0;
    std::vector<std::vector<std::size_t>> samples;
};

/// Samples one caption per scene, scores it against the greedy caption's
/// reward and backpropagates -(r_sample - r_greedy) * log p(sample), averaged
/// over the batch. Gradients are left in the parameters.
inline ScstBatch scst_batch(CaptionModel& m, const std::vector<const Scene*>& scenes, const RewardFn& reward, Rng& rng) {
    const std::size_t b = scenes.size();
    if (b == 0) throw DataError("empty batch");
    const Tensor feats = features_tensor(scenes);
    const auto greedy = greedy_decode(m, feats);
    const Encoded enc = encode(feats);
    DecoderState st = init_state(m, b);
    ScstBatch out;
    out.samples.assign(b, {});
    std::vector<bool> done(b, false);
    std::vector<Tensor> logps;
    std::vector<std::vector<std::size_t>> picked;
    std::vector<std::vector<bool>> live;
    std::size_t remaining = b;
    for (std::size_t t = 0; t < m.vocab.max_len() && remaining; ++t) {
        StepOutput o = decode_step(m, enc, st);
        const Tensor lp = log_softmax(o.logits);
        std::vector<std::size_t> w(b, Vocab::kEos);
        std::vector<bool> on(b, false);
        for (std::size_t i = 0; i < b; ++i) {
            if (done[i]) continue;
            on[i] = true;
            const std::size_t v = lp.dim(1);
            std::vector<double> p(v);
            for (std::size_t j = 0; j < v; ++j) p[j] = std::exp(lp.at(i * v + j));
            w[i] = rng.categorical(p);
            if (w[i] == Vocab::kEos) {
                done[i] = true;
                --remaining;
            } else {
                out.samples[i].push_back(w[i]);
            }
        }
        logps.push_back(lp);
        picked.push_back(w);
        live.push_back(on);
        st = std::move(o.state);
        st.prev_words = w;
    }
    std::vector<double> adv(b);
    for (std::size_t i = 0; i < b; ++i) {
        const double rs = reward(out.samples[i], *scenes[i]);
        const double rg = reward(greedy[i].tokens, *scenes[i]);
        adv[i] = rs - rg;
        out.sample_reward += rs / static_cast<double>(b);
        out.greedy_reward += rg / static_cast<double>(b);
    }
    std::vector<Tensor> terms;
    for (std::size_t t = 0; t < logps.size(); ++t) {
        std::vector<double> wt(b, 0.0);
        for (std::size_t i = 0; i < b; ++i) {
            if (live[t][i]) wt[i] = -adv[i] / static_cast<double>(b);
        }
        terms.push_back(pick(logps[t], picked[t], wt));
    }
    const Tensor loss = terms.size() == 1 ? terms[0] : sum(concat(terms));
    out.loss = loss.item();
    backward(loss);
    return out;
}

/// Self-critical training; one record per epoch with the mean sampled reward.
inline std::vector<LogRecord> train_scst(CaptionModel& m, const std::vector<Scene>& scenes, const TrainConfig& cfg,
                                         AdamState& adam, const RewardFn& reward, std::size_t first_epoch = 0) {
    cfg.validate();
    std::vector<LogRecord> log;
    if (cfg.scst_epochs == 0) return log;
    if (scenes.empty()) throw DataError("train_scst: no training scenes");
    set_expt_multiplier(m, cfg.expt_lr_multiplier);
    std::vector<std::size_t> order(scenes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng(cfg.seed, "train.scst.order");
    Rng sample_rng(cfg.seed, "train.scst.sample");
    for (std::size_t e = 0; e < cfg.scst_epochs; ++e) {
        const std::size_t epoch = first_epoch + e;
        order_rng.shuffle(std::span(order));
        double loss = 0.0, rew = 0.0;
        std::size_t n = 0;
        for (std::size_t s = 0, batch = 0; s < order.size(); s += cfg.batch_size, ++batch) {
            std::vector<const Scene*> chunk;
            for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i) chunk.push_back(&scenes[order[i]]);
            m.params.zero_grad();
            const ScstBatch r = scst_batch(m, chunk, reward, sample_rng);
            detail::check_finite(r.loss, "SCST loss", epoch, batch);
            adam_step(m.params, adam, epoch);
            loss += r.loss * static_cast<double>(chunk.size());
            rew += r.sample_reward * static_cast<double>(chunk.size());
            n += chunk.size();
        }
        log.push_back(LogRecord{epoch, "scst", loss / static_cast<double>(n), rew / static_cast<double>(n),
                                adam.lr_at(epoch), cfg.seed});
    }
    return log;
}

// ---------------------------------------------------------------------------
// Model files: <dir>/model.json (spec, vocab, dims) plus the checkpoint and dictionary files.

inline void save_model(const std::string& dir, const CaptionModel& m, const AdamState* adam = nullptr) {
    std::filesystem::create_directories(dir);
    nlohmann::json j{{"format", "deconf-model"}, {"version", 1}, {"spec", m.spec.to_json()},
                     {"feat_dim", m.feat_dim}, {"max_len", m.vocab.max_len()}};
    auto dict_json = [&](const char* key, const ExptDictionary& d, bool used) {
        if (!used) return;
        j["dictionaries"][key] = {{"kind", to_string(d.kind)}, {"labels", d.labels}};
    };
    dict_json("z", m.dz, m.has_z());
    dict_json("s", m.ds, m.has_s());
    dict_json("x", m.dx, m.has_x());
    dict_json("c", m.dc, m.has_c());
    save_vocab((std::filesystem::path(dir) / "vocab.tsv").string(), m.vocab);
    std::ofstream((std::filesystem::path(dir) / "model.json").string()) << j.dump(2) << "\n";
    save_checkpoint((std::filesystem::path(dir) / "weights").string(), m.params, adam);
}

inline CaptionModel load_model(const std::string& dir, AdamState* adam = nullptr) {
    const auto j = detail::read_json_file((std::filesystem::path(dir) / "model.json").string());
    if (j.value("format", "") != "deconf-model") throw DataError(dir + "/model.json is not a deconf model manifest");
    const ModelSpec spec = ModelSpec::from_json(j.at("spec"));
    const Vocab vocab = load_vocab((std::filesystem::path(dir) / "vocab.tsv").string(), j.at("max_len").get<std::size_t>());
    const std::size_t feat_dim = j.at("feat_dim").get<std::size_t>();
    ModelDictionaries dicts;
    if (j.contains("dictionaries")) {
        for (const auto& [key, dj] : j.at("dictionaries").items()) {
            const DictKind kind = dict_kind_from_string(dj.at("kind").get<std::string>());
            const auto labels = dj.at("labels").get<std::vector<std::string>>();
            const std::size_t dim = kind == DictKind::Visual ? feat_dim : spec.dim;
            ExptDictionary d = make_dictionary(kind, labels, dim, std::vector<double>(labels.size() * dim, 0.0));
            if (key == "z") dicts.z = d;
            else if (key == "s") dicts.s = d;
            else if (key == "x") dicts.x = d;
            else if (key == "c") dicts.c = d;
        }
    }
    CaptionModel m = make_model(spec, vocab, feat_dim, dicts, 0);
    load_checkpoint((std::filesystem::path(dir) / "weights").string(), m.params, adam);
    return m;
}

}  // namespace deconf
