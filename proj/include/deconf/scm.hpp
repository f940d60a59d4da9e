#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deconf/dag.hpp"
#include "deconf/errors.hpp"
#include "deconf/rng.hpp"

namespace deconf {

inline constexpr double kNormTolerance = 1e-9;
inline constexpr std::size_t kMaxAssignments = 1'000'000;

struct Variable {
    std::string name;
    std::size_t cardinality = 1;
};

/// Conditional probability table. Rows enumerate parent assignments in
/// row-major order (first parent most significant); each row holds the child's
/// distribution.
struct Cpd {
    NodeId child = 0;
    std::vector<NodeId> parents;
    std::vector<double> table;
};

/// Partial assignment of states to named variables.
using Assignment = std::map<std::string, std::size_t>;

struct DiscreteDistribution {
    std::string variable;
    std::vector<double> probs;

    std::size_t size() const { return probs.size(); }
    double operator[](std::size_t i) const { return probs.at(i); }
};

inline double total_variation(const DiscreteDistribution& a, const DiscreteDistribution& b) {
    if (a.size() != b.size()) throw DataError("total variation between distributions of different support");
    double tv = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) tv += std::abs(a.probs[i] - b.probs[i]);
    return 0.5 * tv;
}

inline double max_abs_diff(const DiscreteDistribution& a, const DiscreteDistribution& b) {
    if (a.size() != b.size()) throw DataError("comparison of distributions of different support");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.probs[i] - b.probs[i]));
    return m;
}

/// Discrete structural causal model: one CPD per variable over a DAG.
class Scm {
public:
    Scm() = default;

    /**
     * Builds and validates a model.
     *
     * `edges` are (parent, child) name pairs; the order of a child's incoming
     * edges fixes the parent order of its CPD. `tables` maps each variable to
     * its flattened CPD. Rows must sum to one within 1e-9.
     */
    Scm(std::vector<Variable> variables,
        const std::vector<std::pair<std::string, std::string>>& edges,
        const std::map<std::string, std::vector<double>>& tables,
        const std::set<std::string>& hidden = {})
        : variables_(std::move(variables)) {
        std::vector<std::string> names;
        for (const auto& v : variables_) {
            if (v.cardinality < 1) throw DataError("variable '" + v.name + "' has cardinality 0");
            names.push_back(v.name);
        }
        dag_ = CausalDag(names);
        for (const auto& [p, c] : edges) dag_.add_edge(p, c);
        cpds_.resize(variables_.size());
        for (NodeId i = 0; i < variables_.size(); ++i) {
            auto it = tables.find(variables_[i].name);
            if (it == tables.end()) throw DataError("missing CPD for '" + variables_[i].name + "'");
            cpds_[i] = Cpd{i, dag_.parents(i), it->second};
        }
        for (const auto& [name, _] : tables) {
            if (!dag_.contains(name)) throw DataError("CPD for unknown variable '" + name + "'");
        }
        for (const auto& h : hidden) hidden_.insert(dag_.id(h));
        validate();
    }

    Scm(std::vector<Variable> variables, CausalDag dag, std::vector<Cpd> cpds, NodeSet hidden)
        : variables_(std::move(variables)), dag_(std::move(dag)), cpds_(std::move(cpds)), hidden_(std::move(hidden)) {
        validate();
    }

    std::size_t size() const { return variables_.size(); }
    const std::vector<Variable>& variables() const { return variables_; }
    const Variable& variable(NodeId id) const { return variables_.at(id); }
    std::size_t cardinality(NodeId id) const { return variables_.at(id).cardinality; }
    const CausalDag& dag() const { return dag_; }
    const Cpd& cpd(NodeId id) const { return cpds_.at(id); }
    const std::vector<Cpd>& cpds() const { return cpds_; }
    const NodeSet& hidden() const { return hidden_; }
    bool is_hidden(NodeId id) const { return hidden_.count(id) != 0; }
    NodeId id(const std::string& name) const { return dag_.id(name); }
    const std::string& name(NodeId id) const { return variables_.at(id).name; }

    NodeSet observable() const {
        NodeSet out;
        for (NodeId i = 0; i < size(); ++i) {
            if (!is_hidden(i)) out.insert(i);
        }
        return out;
    }

    /// Number of rows of a variable's CPD.
    std::size_t cpd_rows(NodeId id) const {
        std::size_t rows = 1;
        for (NodeId p : cpds_.at(id).parents) rows *= cardinality(p);
        return rows;
    }

    /// P(child = state | parents = parent_states), parent_states indexed by node id.
    double cpd_prob(NodeId id, std::span<const std::size_t> states) const {
        const Cpd& c = cpds_[id];
        std::size_t row = 0;
        for (NodeId p : c.parents) row = row * cardinality(p) + states[p];
        return c.table[row * cardinality(id) + states[id]];
    }

    Scm with_hidden(const std::set<std::string>& names) const {
        NodeSet h;
        for (const auto& n : names) h.insert(id(n));
        return Scm(variables_, dag_, cpds_, h);
    }

private:
    void validate() const {
        if (cpds_.size() != variables_.size()) throw DataError("one CPD per variable required");
        dag_.topological_order();
        for (NodeId i = 0; i < variables_.size(); ++i) {
            const Cpd& c = cpds_[i];
            if (c.child != i) throw DataError("CPD order does not match variable order");
            std::set<NodeId> a(c.parents.begin(), c.parents.end());
            std::set<NodeId> b(dag_.parents(i).begin(), dag_.parents(i).end());
            if (a != b || a.size() != c.parents.size()) {
                throw StructuralError("CPD parents of '" + variables_[i].name + "' differ from graph parents");
            }
            const std::size_t card = variables_[i].cardinality;
            const std::size_t rows = cpd_rows(i);
            if (c.table.size() != rows * card) {
                throw DataError("CPD of '" + variables_[i].name + "' has " + std::to_string(c.table.size()) +
                                " entries, expected " + std::to_string(rows * card));
            }
            for (std::size_t r = 0; r < rows; ++r) {
                double sum = 0.0;
                for (std::size_t k = 0; k < card; ++k) {
                    const double p = c.table[r * card + k];
                    if (!(p >= 0.0 && p <= 1.0)) {
                        throw DataError("CPD of '" + variables_[i].name + "' has an entry outside [0,1]");
                    }
                    sum += p;
                }
                if (std::abs(sum - 1.0) > kNormTolerance) {
                    throw DataError("CPD row " + std::to_string(r) + " of '" + variables_[i].name +
                                    "' sums to " + std::to_string(sum));
                }
            }
        }
    }

    std::vector<Variable> variables_;
    CausalDag dag_;
    std::vector<Cpd> cpds_;
    NodeSet hidden_;
};

/// Exact distribution over the full assignment space of a variable list.
/// Flat index is row-major with the first variable most significant.
class JointTable {
public:
    JointTable() = default;

    JointTable(std::vector<Variable> vars, std::vector<double> probs) : vars_(std::move(vars)), probs_(std::move(probs)) {
        std::size_t n = 1;
        for (const auto& v : vars_) n *= v.cardinality;
        if (n != probs_.size()) throw DataError("joint table size does not match cardinalities");
    }

    const std::vector<Variable>& variables() const { return vars_; }
    const std::vector<double>& probs() const { return probs_; }
    std::size_t size() const { return probs_.size(); }
    double operator[](std::size_t i) const { return probs_[i]; }

    std::size_t position(const std::string& name) const {
        for (std::size_t i = 0; i < vars_.size(); ++i) {
            if (vars_[i].name == name) return i;
        }
        throw DataError("variable '" + name + "' not in joint table");
    }

    bool contains(const std::string& name) const {
        for (const auto& v : vars_) {
            if (v.name == name) return true;
        }
        return false;
    }

    /// Decodes a flat index into per-variable states.
    std::vector<std::size_t> decode(std::size_t index) const {
        std::vector<std::size_t> states(vars_.size());
        for (std::size_t i = vars_.size(); i-- > 0;) {
            states[i] = index % vars_[i].cardinality;
            index /= vars_[i].cardinality;
        }
        return states;
    }

    std::size_t encode(std::span<const std::size_t> states) const {
        std::size_t idx = 0;
        for (std::size_t i = 0; i < vars_.size(); ++i) idx = idx * vars_[i].cardinality + states[i];
        return idx;
    }

    /// Marginal table over `keep`, in the given order.
    JointTable marginal(const std::vector<std::string>& keep) const {
        std::vector<std::size_t> pos;
        std::vector<Variable> vars;
        for (const auto& k : keep) {
            pos.push_back(position(k));
            vars.push_back(vars_[pos.back()]);
        }
        std::size_t n = 1;
        for (const auto& v : vars) n *= v.cardinality;
        std::vector<double> out(n, 0.0);
        std::vector<std::size_t> sub(pos.size());
        for (std::size_t i = 0; i < probs_.size(); ++i) {
            if (probs_[i] == 0.0) continue;
            const auto st = decode(i);
            for (std::size_t j = 0; j < pos.size(); ++j) sub[j] = st[pos[j]];
            std::size_t idx = 0;
            for (std::size_t j = 0; j < vars.size(); ++j) idx = idx * vars[j].cardinality + sub[j];
            out[idx] += probs_[i];
        }
        return JointTable(std::move(vars), std::move(out));
    }

    /// P(assignment) for a partial assignment.
    double probability(const Assignment& event) const {
        std::vector<std::pair<std::size_t, std::size_t>> fixed;
        for (const auto& [name, state] : event) fixed.emplace_back(position(name), state);
        double total = 0.0;
        for (std::size_t i = 0; i < probs_.size(); ++i) {
            if (probs_[i] == 0.0) continue;
            const auto st = decode(i);
            bool match = true;
            for (const auto& [p, s] : fixed) {
                if (st[p] != s) {
                    match = false;
                    break;
                }
            }
            if (match) total += probs_[i];
        }
        return total;
    }

private:
    std::vector<Variable> vars_;
    std::vector<double> probs_;
};

inline std::size_t assignment_space(const Scm& scm) {
    std::size_t n = 1;
    for (const auto& v : scm.variables()) {
        if (n > kMaxAssignments / v.cardinality + 1) return kMaxAssignments + 1;
        n *= v.cardinality;
    }
    return n;
}

inline bool enumerable(const Scm& scm) { return assignment_space(scm) <= kMaxAssignments; }

/// Product of CPDs over the full assignment space.
inline JointTable joint_distribution(const Scm& scm) {
    const std::size_t n = assignment_space(scm);
    if (n > kMaxAssignments) {
        throw DataError("assignment space exceeds 10^6 states; exact enumeration refused");
    }
    std::vector<double> probs(n);
    std::vector<std::size_t> states(scm.size(), 0);
    for (std::size_t idx = 0; idx < n; ++idx) {
        double p = 1.0;
        for (NodeId v = 0; v < scm.size() && p != 0.0; ++v) p *= scm.cpd_prob(v, states);
        probs[idx] = p;
        for (std::size_t i = scm.size(); i-- > 0;) {
            if (++states[i] < scm.cardinality(i)) break;
            states[i] = 0;
        }
    }
    return JointTable(scm.variables(), std::move(probs));
}

/// Joint over the observable variables only (hidden ones summed out).
inline JointTable observational_joint(const Scm& scm) {
    std::vector<std::string> keep;
    for (NodeId i : scm.observable()) keep.push_back(scm.name(i));
    return joint_distribution(scm).marginal(keep);
}

inline DiscreteDistribution marginal(const JointTable& joint, const std::string& target) {
    return DiscreteDistribution{target, joint.marginal({target}).probs()};
}

/// P(target | given). Throws ZeroProbabilityError when P(given) = 0.
inline DiscreteDistribution conditional(const JointTable& joint, const std::string& target, const Assignment& given) {
    const std::size_t tpos = joint.position(target);
    std::vector<std::pair<std::size_t, std::size_t>> fixed;
    for (const auto& [name, state] : given) {
        const std::size_t p = joint.position(name);
        if (state >= joint.variables()[p].cardinality) throw DataError("state out of range for '" + name + "'");
        fixed.emplace_back(p, state);
    }
    std::vector<double> out(joint.variables()[tpos].cardinality, 0.0);
    double evidence = 0.0;
    for (std::size_t i = 0; i < joint.size(); ++i) {
        const double p = joint[i];
        if (p == 0.0) continue;
        const auto st = joint.decode(i);
        bool match = true;
        for (const auto& [pos, s] : fixed) {
            if (st[pos] != s) {
                match = false;
                break;
            }
        }
        if (!match) continue;
        out[st[tpos]] += p;
        evidence += p;
    }
    if (evidence <= 0.0) {
        std::string desc;
        for (const auto& [name, state] : given) desc += name + "=" + std::to_string(state) + " ";
        throw ZeroProbabilityError("conditioning on zero-probability evidence: " + desc);
    }
    for (double& v : out) v /= evidence;
    return DiscreteDistribution{target, std::move(out)};
}

/// Truncated factorization: removes the parents of `var` and fixes it to `value`.
inline Scm intervene(const Scm& scm, const std::string& var, std::size_t value) {
    const NodeId v = scm.id(var);
    if (value >= scm.cardinality(v)) throw DataError("intervention value out of range for '" + var + "'");
    CausalDag dag = scm.dag();
    dag.remove_incoming(v);
    std::vector<Cpd> cpds = scm.cpds();
    cpds[v].parents.clear();
    cpds[v].table.assign(scm.cardinality(v), 0.0);
    cpds[v].table[value] = 1.0;
    return Scm(scm.variables(), std::move(dag), std::move(cpds), scm.hidden());
}

/// Ground-truth P(target | do(do_var = do_value)) from the full model.
inline DiscreteDistribution do_distribution(const Scm& scm, const std::string& target, const std::string& do_var,
                                            std::size_t do_value) {
    return marginal(joint_distribution(intervene(scm, do_var, do_value)), target);
}

/// Ancestral sampling; each row is indexed by variable id.
inline std::vector<std::vector<std::size_t>> sample(const Scm& scm, std::uint64_t seed, std::size_t n) {
    std::vector<std::vector<std::size_t>> out;
    out.reserve(n);
    const auto order = scm.dag().topological_order();
    Rng rng(derive_seed(seed, "scm.sample"));
    std::vector<double> row;
    for (std::size_t s = 0; s < n; ++s) {
        std::vector<std::size_t> states(scm.size(), 0);
        for (NodeId v : order) {
            const Cpd& c = scm.cpd(v);
            std::size_t r = 0;
            for (NodeId p : c.parents) r = r * scm.cardinality(p) + states[p];
            const std::size_t card = scm.cardinality(v);
            states[v] = rng.categorical(std::span<const double>(c.table.data() + r * card, card));
        }
        out.push_back(std::move(states));
    }
    return out;
}

/// Empirical joint (same layout as joint_distribution) from samples.
inline JointTable empirical_joint(const Scm& scm, const std::vector<std::vector<std::size_t>>& samples) {
    JointTable shape(scm.variables(), std::vector<double>(assignment_space(scm), 0.0));
    std::vector<double> counts(shape.size(), 0.0);
    for (const auto& s : samples) counts[shape.encode(s)] += 1.0;
    if (!samples.empty()) {
        for (double& c : counts) c /= static_cast<double>(samples.size());
    }
    return JointTable(scm.variables(), std::move(counts));
}

// ---------------------------------------------------------------------------
// JSON file format:
// {"variables":[{"name","cardinality"}], "edges":[["parent","child"]],
//  "cpds":{name: nested arrays, outermost = first parent}, "hidden":[names]}

namespace detail {

inline nlohmann::json nest_table(const Scm& scm, const Cpd& cpd, std::size_t depth, std::size_t offset) {
    const std::size_t card = scm.cardinality(cpd.child);
    if (depth == cpd.parents.size()) {
        nlohmann::json arr = nlohmann::json::array();
        for (std::size_t k = 0; k < card; ++k) arr.push_back(cpd.table[offset * card + k]);
        return arr;
    }
    nlohmann::json arr = nlohmann::json::array();
    const std::size_t pc = scm.cardinality(cpd.parents[depth]);
    for (std::size_t s = 0; s < pc; ++s) arr.push_back(nest_table(scm, cpd, depth + 1, offset * pc + s));
    return arr;
}

inline void flatten_json(const nlohmann::json& j, std::vector<double>& out) {
    if (j.is_array()) {
        for (const auto& e : j) flatten_json(e, out);
    } else if (j.is_number()) {
        out.push_back(j.get<double>());
    } else {
        throw DataError("CPD entries must be numbers");
    }
}

}  // namespace detail

inline nlohmann::json scm_to_json(const Scm& scm) {
    nlohmann::json j;
    j["variables"] = nlohmann::json::array();
    for (const auto& v : scm.variables()) j["variables"].push_back({{"name", v.name}, {"cardinality", v.cardinality}});
    j["edges"] = nlohmann::json::array();
    for (NodeId c = 0; c < scm.size(); ++c) {
        for (NodeId p : scm.cpd(c).parents) j["edges"].push_back({scm.name(p), scm.name(c)});
    }
    j["cpds"] = nlohmann::json::object();
    for (NodeId c = 0; c < scm.size(); ++c) j["cpds"][scm.name(c)] = detail::nest_table(scm, scm.cpd(c), 0, 0);
    j["hidden"] = nlohmann::json::array();
    for (NodeId h : scm.hidden()) j["hidden"].push_back(scm.name(h));
    return j;
}

inline Scm scm_from_json(const nlohmann::json& j) {
    try {
        std::vector<Variable> vars;
        for (const auto& v : j.at("variables")) {
            vars.push_back(Variable{v.at("name").get<std::string>(), v.at("cardinality").get<std::size_t>()});
        }
        std::vector<std::pair<std::string, std::string>> edges;
        if (j.contains("edges")) {
            for (const auto& e : j.at("edges")) {
                if (!e.is_array() || e.size() != 2) throw DataError("edge must be a [parent, child] pair");
                edges.emplace_back(e[0].get<std::string>(), e[1].get<std::string>());
            }
        }
        std::map<std::string, std::vector<double>> tables;
        for (const auto& [name, arr] : j.at("cpds").items()) {
            std::vector<double> flat;
            detail::flatten_json(arr, flat);
            tables[name] = std::move(flat);
        }
        std::set<std::string> hidden;
        if (j.contains("hidden")) {
            for (const auto& h : j.at("hidden")) hidden.insert(h.get<std::string>());
        }
        return Scm(std::move(vars), edges, tables, hidden);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed SCM JSON: ") + e.what());
    }
}

inline Scm load_scm(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open SCM file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("cannot parse SCM file '" + path + "': " + e.what());
    }
    return scm_from_json(j);
}

inline void save_scm(const Scm& scm, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write SCM file '" + path + "'");
    out << scm_to_json(scm).dump(2) << '\n';
}

}  // namespace deconf
