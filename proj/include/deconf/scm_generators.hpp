#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "deconf/rng.hpp"
#include "deconf/scm.hpp"

namespace deconf {

/// Random CPD rows with entries proportional to u^sharpness, u ~ U(0,1).
/// Larger sharpness gives more peaked rows; entries stay strictly positive.
inline std::vector<double> random_cpd_table(Rng& rng, std::size_t rows, std::size_t card, double sharpness = 1.0) {
    std::vector<double> t(rows * card);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < card; ++k) {
            t[r * card + k] = std::pow(0.02 + rng.uniform(), sharpness);
            s += t[r * card + k];
        }
        for (std::size_t k = 0; k < card; ++k) t[r * card + k] /= s;
    }
    return t;
}

struct ScmSpec {
    std::vector<Variable> variables;
    std::vector<std::pair<std::string, std::string>> edges;
    std::set<std::string> hidden;
};

/// Fills every CPD with random rows. Variables listed in `sharp` get peaked rows.
inline Scm random_scm(const ScmSpec& spec, Rng& rng, const std::set<std::string>& sharp = {}, double sharpness = 3.0) {
    std::map<std::string, std::size_t> card;
    std::map<std::string, std::size_t> rows;
    for (const auto& v : spec.variables) {
        card[v.name] = v.cardinality;
        rows[v.name] = 1;
    }
    for (const auto& [p, c] : spec.edges) rows[c] *= card[p];
    std::map<std::string, std::vector<double>> tables;
    for (const auto& v : spec.variables) {
        tables[v.name] = random_cpd_table(rng, rows[v.name], v.cardinality, sharp.count(v.name) ? sharpness : 1.0);
    }
    return Scm(spec.variables, spec.edges, tables, spec.hidden);
}

inline std::size_t random_card(Rng& rng) { return 2 + rng.below(2); }

/// D -> I, D -> L, I -> L, plus up to two nuisance nodes (a cause of L and a
/// child of I). Nothing hidden.
inline Scm confounded_scm(std::uint64_t seed) {
    Rng rng(seed, "gen.confounded");
    ScmSpec s;
    s.variables = {{"D", random_card(rng)}, {"I", random_card(rng)}, {"L", random_card(rng)}};
    s.edges = {{"D", "I"}, {"D", "L"}, {"I", "L"}};
    if (rng.bernoulli(0.5)) {
        s.variables.push_back({"W", random_card(rng)});
        s.edges.emplace_back("W", "L");
    }
    if (rng.bernoulli(0.5)) {
        s.variables.push_back({"M", random_card(rng)});
        s.edges.emplace_back("I", "M");
    }
    return random_scm(s, rng, {"I", "L"});
}

/// D -> I, D -> L, I -> Z, Z -> L with D hidden.
inline Scm frontdoor_scm(std::uint64_t seed) {
    Rng rng(seed, "gen.frontdoor");
    ScmSpec s;
    s.variables = {{"D", random_card(rng)}, {"I", random_card(rng)}, {"Z", random_card(rng)}, {"L", random_card(rng)}};
    s.edges = {{"D", "I"}, {"D", "L"}, {"I", "Z"}, {"Z", "L"}};
    s.hidden = {"D"};
    return random_scm(s, rng, {"I", "Z", "L"});
}

/// D -> I, D -> L, I -> Z, Z -> L, S -> Z, S -> L with D hidden and S observed.
inline Scm dic_scm(std::uint64_t seed) {
    Rng rng(seed, "gen.dic");
    ScmSpec s;
    s.variables = {{"D", random_card(rng)}, {"S", random_card(rng)}, {"I", random_card(rng)},
                   {"Z", random_card(rng)}, {"L", random_card(rng)}};
    s.edges = {{"D", "I"}, {"D", "L"}, {"I", "Z"}, {"S", "Z"}, {"Z", "L"}, {"S", "L"}};
    s.hidden = {"D"};
    return random_scm(s, rng, {"I", "Z", "L"});
}

/// Random DAG over n nodes named V0..V{n-1}; each forward pair is an edge with
/// probability `density`.
inline Scm random_dag_scm(std::uint64_t seed, std::size_t n, double density = 0.4) {
    Rng rng(seed, "gen.random_dag");
    ScmSpec s;
    for (std::size_t i = 0; i < n; ++i) s.variables.push_back({"V" + std::to_string(i), random_card(rng)});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (rng.bernoulli(density)) s.edges.emplace_back(s.variables[i].name, s.variables[j].name);
        }
    }
    return random_scm(s, rng, {}, 1.0);
}

}  // namespace deconf
