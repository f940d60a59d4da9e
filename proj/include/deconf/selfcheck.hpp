#pragma once

#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "deconf/captioner.hpp"
#include "deconf/causal_graph.hpp"
#include "deconf/metrics.hpp"
#include "deconf/scm_generators.hpp"
#include "deconf/synthworld.hpp"

namespace deconf {

struct SelfcheckOptions {
    std::size_t scm_seeds = 100;
    std::size_t grad_seeds = 5;
    std::size_t nwgm_seeds = 20;
    double weight_perturbation = 0.0;  // test hook, forwarded to backdoor_adjust
};

struct SuiteResult {
    std::string name;
    double max_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    std::string note;
};

struct SelfcheckReport {
    std::vector<SuiteResult> suites;
    std::vector<std::pair<double, double>> nwgm_curve;  // (lambda, max gap to E[softmax(g)])

    bool passed() const {
        return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.passed; });
    }
};

// ---------------------------------------------------------------------------
// Gradient probes shared with the acceptance run.

struct NamedGradCheck {
    std::string name;
    GradCheckResult result;
};

/// Finite-difference checks of each layer on one seeded shape.
inline std::vector<NamedGradCheck> layer_grad_checks(std::uint64_t seed) {
    Rng rng(seed, "selfcheck.layers");
    const std::size_t b = 2, m = 3, d = 4, h = 5;
    std::vector<NamedGradCheck> out;
    auto run = [&](const std::string& name, const std::function<Tensor()>& f, const std::vector<Tensor>& params) {
        out.push_back({name, grad_check(f, params)});
    };
    const Tensor x = Tensor::uniform({b, d}, rng, 1.0, true);
    const Tensor feats = Tensor::uniform({b, m, d}, rng, 1.0, true);
    const Tensor hq = Tensor::uniform({b, h}, rng, 1.0, true);
    {
        const Linear l = make_linear(d, h, rng);
        const Tensor w = Tensor::normal({b, h}, rng, 1.0);
        run("linear", [&] { return sum(mul(l(x), w)); }, {l.weight, l.bias, x});
    }
    {
        const LstmCell c = make_lstm(d, h, rng);
        const LstmState s{Tensor::uniform({b, h}, rng, 0.5, true), Tensor::uniform({b, h}, rng, 0.5, true)};
        const Tensor w = Tensor::normal({b, h}, rng, 1.0), v = Tensor::normal({b, h}, rng, 1.0);
        run("lstm", [&] {
            const LstmState n = lstm_step(x, s, c);
            return add(sum(mul(n.h, w)), sum(mul(n.c, v)));
        }, {c.weight, c.bias, x, s.h, s.c});
    }
    {
        const GluCell g = make_glu(d, h, rng);
        const Tensor w = Tensor::normal({b, h}, rng, 1.0);
        run("glu", [&] { return sum(mul(glu(x, g), w)); }, {g.value.weight, g.value.bias, g.gate.weight, g.gate.bias, x});
    }
    {
        const TopDownParams p = make_topdown(d, h, d, rng);
        ParameterSet ps;
        p.register_into(ps, "att");
        auto params = ps.tensors();
        params.push_back(feats);
        params.push_back(hq);
        const Tensor w = Tensor::normal({b, d}, rng, 1.0);
        run("topdown", [&] { return sum(mul(topdown_att(feats, hq, p).attended, w)); }, params);
    }
    {
        const AoaParams p = make_aoa(d, h, rng, 2);
        ParameterSet ps;
        p.register_into(ps, "att");
        auto params = ps.tensors();
        params.push_back(feats);
        params.push_back(hq);
        const Tensor w = Tensor::normal({b, d}, rng, 1.0);
        run("aoa", [&] { return sum(mul(aoa_att(feats, hq, p).out, w)); }, params);
    }
    {
        const Tensor atoms = Tensor::uniform({3, d}, rng, 1.0, true);
        const Tensor w = Tensor::normal({b, d}, rng, 1.0);
        run("expt", [&] { return sum(mul(expt(atoms, x).expectation, w)); }, {atoms, x});
    }
    for (auto kind : {EmbeddingKind::Linear, EmbeddingKind::Lstm, EmbeddingKind::Glu}) {
        const NwgmHeadParams p = make_nwgm_head(kind, 2 * d, h, 6, rng);
        ParameterSet ps;
        p.register_into(ps, "head");
        const Tensor y = Tensor::uniform({b, d}, rng, 1.0, true);
        auto params = ps.tensors();
        params.push_back(x);
        params.push_back(y);
        const Tensor w = Tensor::normal({b, 6}, rng, 1.0);
        run(std::string("nwgm_head.") + to_string(kind),
            [&] { return sum(mul(nwgm_logits({x, y}, p).logits, w)); }, params);
    }
    return out;
}

/// Two DICv1 decode steps with every parameter checked; the embedding kind
/// and attention cycle with the seed.
inline GradCheckResult decode_step_grad_check(std::uint64_t seed) {
    const std::size_t d = 6;
    WorldConfig wc;
    wc.dim = d;
    wc.train = 4;
    wc.val = 0;
    wc.test = 0;
    wc.seed = seed;
    const SynthDataset ds = gen_world(wc);
    Rng rng(seed, "selfcheck.decode");
    auto dict = [&](DictKind k) {
        std::vector<std::string> labels{"a0", "a1", "a2"};
        return make_dictionary(k, labels, d, Tensor::uniform({3, d}, rng, 1.0).values());
    };
    ModelDictionaries dicts;
    dicts.z = dict(DictKind::Structure);
    dicts.s = dict(DictKind::Keyword);
    dicts.x = dict(DictKind::Visual);
    ModelSpec spec;
    spec.variant = Variant::DICv1;
    spec.dim = d;
    spec.att_dim = d;
    spec.aoa_heads = 2;
    spec.embedding = static_cast<EmbeddingKind>(seed % 3);
    spec.attention = seed % 2 ? AttentionKind::AoA : AttentionKind::TopDown;
    const CaptionModel m = make_model(spec, ds.vocab, d, dicts, seed);
    const Tensor f = features_tensor({&ds.train[0], &ds.train[1]});
    const Tensor w = Tensor::normal({2, ds.vocab.size()}, rng, 1.0);
    auto params = m.params.tensors();
    Tensor fv = f;
    fv.set_requires_grad(true);
    params.push_back(fv);
    return grad_check([&] {
        const Encoded enc = encode(fv);
        StepOutput o = decode_step(m, enc, init_state(m, 2));
        DecoderState st = o.state;
        st.prev_words = {4, 5};
        o = decode_step(m, enc, st);
        return sum(mul(o.logits, w));
    }, params);
}

/// Literal bound, or the literal bound on resolvable coordinates plus an
/// absolute bound everywhere.
inline bool grad_within(const GradCheckResult& r, double rel = 1e-6, double abs = 1e-9) {
    return r.max_rel_error <= rel || (r.max_rel_error_resolved <= rel && r.max_abs_error <= abs);
}

// ---------------------------------------------------------------------------
// Suites

namespace detail {

inline SuiteResult suite_backdoor(const SelfcheckOptions& o) {
    SuiteResult r{"backdoor vs do-oracle", 0.0, 1e-10, false, ""};
    AdjustOptions opt;
    opt.weight_perturbation = o.weight_perturbation;
    for (std::uint64_t seed = 0; seed < o.scm_seeds; ++seed) {
        const Scm scm = confounded_scm(seed);
        for (std::size_t i = 0; i < scm.cardinality(scm.id("I")); ++i) {
            const auto adj = backdoor_adjust(scm, "I", i, "L", {"D"}, opt).distribution;
            r.max_error = std::max(r.max_error, total_variation(adj, do_distribution(scm, "L", "I", i)));
        }
    }
    r.passed = r.max_error <= r.tolerance;
    r.note = std::to_string(o.scm_seeds) + " SCMs, max TV";
    return r;
}

inline SuiteResult suite_frontdoor(const SelfcheckOptions& o) {
    SuiteResult r{"front-door vs do-oracle", 0.0, 1e-10, false, ""};
    for (std::uint64_t seed = 0; seed < o.scm_seeds; ++seed) {
        const Scm scm = frontdoor_scm(seed);
        const Scm open = scm.with_hidden({});
        for (std::size_t i = 0; i < scm.cardinality(scm.id("I")); ++i) {
            const auto fd = frontdoor_adjust(scm, "I", i, "L", "Z").distribution;
            r.max_error = std::max(r.max_error, total_variation(fd, do_distribution(scm, "L", "I", i)));
            r.max_error = std::max(r.max_error, total_variation(fd, backdoor_adjust(open, "I", i, "L", {"D"}).distribution));
        }
    }
    r.passed = r.max_error <= r.tolerance;
    r.note = "max TV to oracle and to backdoor with D observed";
    return r;
}

inline SuiteResult suite_dic(const SelfcheckOptions& o) {
    SuiteResult r{"DIC vs do-oracle", 0.0, 1e-10, false, ""};
    std::size_t biased = 0;
    for (std::uint64_t seed = 0; seed < o.scm_seeds; ++seed) {
        const Scm scm = dic_scm(seed);
        const JointTable obs = observational_joint(scm);
        double naive = 0.0;
        for (std::size_t i = 0; i < scm.cardinality(scm.id("I")); ++i) {
            const auto truth = do_distribution(scm, "L", "I", i);
            r.max_error = std::max(r.max_error, total_variation(dic_adjust(scm, "I", i, "L", "Z", "S").distribution, truth));
            naive = std::max(naive, total_variation(conditional(obs, "L", {{"I", i}}), truth));
        }
        biased += naive > 0.01;
    }
    const bool naive_ok = biased * 10 >= o.scm_seeds * 9;
    r.passed = r.max_error <= r.tolerance && naive_ok;
    r.note = "naive conditional off by > 0.01 TV on " + std::to_string(biased) + "/" + std::to_string(o.scm_seeds);
    return r;
}

inline SuiteResult suite_grad(const SelfcheckOptions& o) {
    SuiteResult r{"gradients", 0.0, 1e-6, false, ""};
    r.passed = true;
    double literal = 0.0, abs_err = 0.0;
    auto take = [&](const GradCheckResult& g) {
        r.max_error = std::max(r.max_error, g.max_rel_error_resolved);
        literal = std::max(literal, g.max_rel_error);
        abs_err = std::max(abs_err, g.max_abs_error);
        r.passed = r.passed && grad_within(g);
    };
    for (std::uint64_t seed = 0; seed < o.grad_seeds; ++seed) {
        for (const auto& c : layer_grad_checks(seed)) take(c.result);
        take(decode_step_grad_check(seed));
    }
    std::ostringstream os;
    os << std::setprecision(3) << "layers + DICv1 decode_step; literal max " << literal << ", max abs " << abs_err;
    r.note = os.str();
    return r;
}

inline SuiteResult suite_nwgm(const SelfcheckOptions& o, std::vector<std::pair<double, double>>& curve) {
    SuiteResult r{"NWGM linear identity", 0.0, 1e-12, false, ""};
    const std::vector<double> lambdas{1.0, 0.5, 0.1, 0.0};
    std::vector<double> gaps(lambdas.size(), 0.0);
    bool monotone = true;
    for (std::uint64_t seed = 0; seed < o.nwgm_seeds; ++seed) {
        Rng rng(seed, "selfcheck.nwgm");
        const std::size_t d = 4, v = 10;
        std::array<Tensor, 3> atoms;
        for (auto& a : atoms) a = Tensor::uniform({3, d}, rng, 1.5);
        const Tensor xhat = Tensor::uniform({1, d}, rng, 1.0), query = Tensor::uniform({1, d}, rng, 1.5);
        const NwgmHeadParams head = make_nwgm_head(EmbeddingKind::Linear, 4 * d, 6, v, rng);
        std::array<Tensor, 3> w;
        for (std::size_t k = 0; k < 3; ++k) w[k] = expt(atoms[k], query).weights;
        double prev = INFINITY;
        for (std::size_t li = 0; li < lambdas.size(); ++li) {
            std::array<Tensor, 3> a;
            for (std::size_t k = 0; k < 3; ++k) a[k] = contract_atoms(atoms[k], lambdas[li]);
            const Tensor nwgm = nwgm_head({xhat, matmul(w[0], a[0]), matmul(w[1], a[1]), matmul(w[2], a[2])}, head);
            std::vector<double> eg(v, 0.0), esm(v, 0.0);
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j)
                    for (std::size_t k = 0; k < 3; ++k) {
                        const double p = w[0].at(0, i) * w[1].at(0, j) * w[2].at(0, k);
                        const Tensor l = nwgm_logits(
                            {xhat, gather_rows(a[0], {i}), gather_rows(a[1], {j}), gather_rows(a[2], {k})}, head).logits;
                        const Tensor s = softmax(l);
                        for (std::size_t t = 0; t < v; ++t) {
                            eg[t] += p * l.at(0, t);
                            esm[t] += p * s.at(0, t);
                        }
                    }
            const double mx = *std::max_element(eg.begin(), eg.end());
            double z = 0.0;
            for (double& e : eg) z += e = std::exp(e - mx);
            double identity = 0.0, gap = 0.0;
            for (std::size_t t = 0; t < v; ++t) {
                identity = std::max(identity, std::abs(nwgm.at(0, t) - eg[t] / z));
                gap = std::max(gap, std::abs(nwgm.at(0, t) - esm[t]));
            }
            r.max_error = std::max(r.max_error, identity);
            gaps[li] = std::max(gaps[li], gap);
            monotone = monotone && gap <= prev + 1e-15;
            prev = gap;
        }
    }
    for (std::size_t li = 0; li < lambdas.size(); ++li) curve.emplace_back(lambdas[li], gaps[li]);
    r.passed = r.max_error <= r.tolerance && monotone && gaps.back() <= 1e-12;
    r.note = monotone ? "gap non-increasing under contraction" : "gap increased under contraction";
    return r;
}

inline SuiteResult suite_metrics() {
    SuiteResult r{"metric hand cases", 0.0, 1e-12, false, ""};
    auto toks = [](const std::vector<std::string>& v) {
        std::vector<Tokens> out;
        for (const auto& s : v) out.push_back(tokenize(s));
        return out;
    };
    auto refs = [&](const std::vector<std::string>& v) {
        std::vector<std::vector<Tokens>> out;
        for (const auto& t : toks(v)) out.push_back({t});
        return out;
    };
    auto err = [&](double got, double want) { r.max_error = std::max(r.max_error, std::abs(got - want)); };
    const std::vector<std::string> same{"a red apple on the table", "a green dog near a tree", "a white cup on the shelf"};
    err(cider_d(toks(same), refs(same), IdfMode::Image).score, 10.0);
    // "a b" vs "a b": two of four n-gram orders match fully -> 5; "c e" vs "c d": cosine 1/2 at n = 1 -> 1.25.
    const auto two = cider_d(toks({"a b", "c e"}), refs({"a b", "c d"}), IdfMode::Image);
    err(two.per_image.at(0), 5.0);
    err(two.per_image.at(1), 1.25);
    // p1..p4 = 8/9, 6/7, 4/5, 2/3 at equal lengths.
    err(bleu4(toks({"a b c d", "a b c d e"}), refs({"a b c e", "a b c d e"})).score, std::pow(384.0 / 945.0, 0.25));
    const std::set<std::string> lex{"apple", "dog", "table", "tree", "cup"};
    const auto ch = chair(toks({"a red apple on the table", "a dog near a tree", "a cup", "apple apple dog"}),
                          {{"apple", "table"}, {"dog"}, {"cup"}, {"apple"}}, lex);
    // mentions 2 + 2 + 1 + 2 = 7, hallucinated 0 + 1 + 0 + 1 = 2 in 2 captions
    err(ch.chairi, 2.0 / 7.0);
    err(ch.chairs, 0.5);
    r.passed = r.max_error <= r.tolerance;
    r.note = "CIDEr-D, BLEU@4, CHAIR";
    return r;
}

}  // namespace detail

inline SelfcheckReport selfcheck(const SelfcheckOptions& o = {}) {
    SelfcheckReport rep;
    rep.suites.push_back(detail::suite_backdoor(o));
    rep.suites.push_back(detail::suite_frontdoor(o));
    rep.suites.push_back(detail::suite_dic(o));
    rep.suites.push_back(detail::suite_grad(o));
    rep.suites.push_back(detail::suite_nwgm(o, rep.nwgm_curve));
    rep.suites.push_back(detail::suite_metrics());
    return rep;
}

inline void print_selfcheck(const SelfcheckReport& rep, std::ostream& os) {
    os << std::left << std::setw(26) << "suite" << std::setw(6) << "ok" << std::setw(14) << "max_error" << std::setw(10)
       << "tol" << "note\n";
    for (const auto& s : rep.suites) {
        std::ostringstream e, t;
        e << std::setprecision(3) << s.max_error;
        t << std::setprecision(1) << s.tolerance;
        os << std::left << std::setw(26) << s.name << std::setw(6) << (s.passed ? "PASS" : "FAIL") << std::setw(14)
           << e.str() << std::setw(10) << t.str() << s.note << "\n";
    }
    os << "NWGM gap to E[softmax(g)] by contraction lambda:\n";
    for (const auto& [lambda, gap] : rep.nwgm_curve) {
        os << "  lambda=" << lambda << "  gap=" << std::setprecision(6) << gap << "\n";
    }
    os << (rep.passed() ? "selfcheck passed" : "selfcheck FAILED") << "\n";
}

}  // namespace deconf
