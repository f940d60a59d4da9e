#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "deconf/dag.hpp"
#include "deconf/errors.hpp"
#include "deconf/scm.hpp"

namespace deconf {

enum class JunctionKind { Chain, Confounder, Collider };

inline const char* to_string(JunctionKind k) {
    switch (k) {
        case JunctionKind::Chain: return "chain";
        case JunctionKind::Confounder: return "confounder";
        case JunctionKind::Collider: return "collider";
    }
    return "?";
}

/// Kind of the junction a - b - c. Both a-b and b-c must be edges.
inline JunctionKind classify_junction(NodeId a, NodeId b, NodeId c, const CausalDag& dag) {
    if (!dag.adjacent(a, b) || !dag.adjacent(b, c)) {
        throw StructuralError("junction " + dag.name(a) + "-" + dag.name(b) + "-" + dag.name(c) + " is not adjacent");
    }
    const bool into_b_from_a = dag.has_edge(a, b);
    const bool into_b_from_c = dag.has_edge(c, b);
    if (into_b_from_a && into_b_from_c) return JunctionKind::Collider;
    if (!into_b_from_a && !into_b_from_c) return JunctionKind::Confounder;
    return JunctionKind::Chain;
}

struct PathDescriptor {
    std::vector<NodeId> nodes;
    std::vector<JunctionKind> junctions;  // one per interior node
    bool blocked = false;

    std::string to_string(const CausalDag& dag) const {
        std::string s = dag.name(nodes.front());
        for (std::size_t i = 1; i < nodes.size(); ++i) {
            s += dag.has_edge(nodes[i - 1], nodes[i]) ? "->" : "<-";
            s += dag.name(nodes[i]);
        }
        return s;
    }
};

/// True when some junction on the path stops the flow given `conditioning`.
inline bool is_blocked(const PathDescriptor& path, const NodeSet& conditioning, const CausalDag& dag) {
    for (std::size_t i = 1; i + 1 < path.nodes.size(); ++i) {
        const NodeId b = path.nodes[i];
        const JunctionKind kind = classify_junction(path.nodes[i - 1], b, path.nodes[i + 1], dag);
        if (kind == JunctionKind::Collider) {
            bool opened = conditioning.count(b) != 0;
            if (!opened) {
                for (NodeId d : dag.descendants(b)) {
                    if (conditioning.count(d)) {
                        opened = true;
                        break;
                    }
                }
            }
            if (!opened) return true;
        } else if (conditioning.count(b)) {
            return true;
        }
    }
    return false;
}

namespace detail {

inline PathDescriptor describe(std::vector<NodeId> nodes, const CausalDag& dag, const NodeSet& conditioning) {
    PathDescriptor p;
    p.nodes = std::move(nodes);
    for (std::size_t i = 1; i + 1 < p.nodes.size(); ++i) {
        p.junctions.push_back(classify_junction(p.nodes[i - 1], p.nodes[i], p.nodes[i + 1], dag));
    }
    p.blocked = is_blocked(p, conditioning, dag);
    return p;
}

inline void sort_paths(std::vector<PathDescriptor>& paths, const CausalDag& dag) {
    std::sort(paths.begin(), paths.end(), [&](const PathDescriptor& a, const PathDescriptor& b) {
        return std::lexicographical_compare(
            a.nodes.begin(), a.nodes.end(), b.nodes.begin(), b.nodes.end(),
            [&](NodeId u, NodeId v) { return dag.name(u) < dag.name(v); });
    });
}

/// Depth-first enumeration of simple undirected paths from `path.back()` to `target`.
inline void extend_paths(const CausalDag& dag, NodeId target, std::vector<NodeId>& path, std::vector<bool>& on_path,
                         std::vector<std::vector<NodeId>>& out) {
    const NodeId cur = path.back();
    if (cur == target) {
        out.push_back(path);
        return;
    }
    std::vector<NodeId> nbrs(dag.parents(cur).begin(), dag.parents(cur).end());
    nbrs.insert(nbrs.end(), dag.children(cur).begin(), dag.children(cur).end());
    for (NodeId n : nbrs) {
        if (on_path[n]) continue;
        on_path[n] = true;
        path.push_back(n);
        extend_paths(dag, target, path, on_path, out);
        path.pop_back();
        on_path[n] = false;
    }
}

}  // namespace detail

/// Every simple path between x and y, each annotated for `conditioning`.
inline std::vector<PathDescriptor> all_paths(const CausalDag& dag, NodeId x, NodeId y, const NodeSet& conditioning = {}) {
    if (x == y) throw StructuralError("path endpoints must differ");
    std::vector<std::vector<NodeId>> raw;
    std::vector<NodeId> path{x};
    std::vector<bool> on_path(dag.size(), false);
    on_path[x] = true;
    detail::extend_paths(dag, y, path, on_path, raw);
    std::vector<PathDescriptor> out;
    for (auto& r : raw) out.push_back(detail::describe(std::move(r), dag, conditioning));
    detail::sort_paths(out, dag);
    return out;
}

/// Simple paths x ... y whose first edge points into x, sorted by node names.
inline std::vector<PathDescriptor> backdoor_paths(const CausalDag& dag, NodeId x, NodeId y,
                                                  const NodeSet& conditioning = {}) {
    if (x == y) throw StructuralError("backdoor paths need distinct endpoints");
    std::vector<std::vector<NodeId>> raw;
    std::vector<bool> on_path(dag.size(), false);
    on_path[x] = true;
    for (NodeId p : dag.parents(x)) {
        std::vector<NodeId> path{x, p};
        on_path[p] = true;
        detail::extend_paths(dag, y, path, on_path, raw);
        on_path[p] = false;
    }
    std::vector<PathDescriptor> out;
    for (auto& r : raw) out.push_back(detail::describe(std::move(r), dag, conditioning));
    detail::sort_paths(out, dag);
    return out;
}

inline bool d_separated(const CausalDag& dag, NodeId x, NodeId y, const NodeSet& conditioning) {
    if (x == y) throw StructuralError("d-separation needs distinct nodes");
    for (const auto& p : all_paths(dag, x, y, conditioning)) {
        if (!p.blocked) return false;
    }
    return true;
}

/// Backdoor criterion: no member of `set` descends from x and every backdoor path is blocked.
inline bool satisfies_backdoor(const CausalDag& dag, NodeId x, NodeId y, const NodeSet& set) {
    const NodeSet desc = dag.descendants(x);
    for (NodeId s : set) {
        if (desc.count(s) || s == x || s == y) return false;
    }
    for (const auto& p : backdoor_paths(dag, x, y, set)) {
        if (!p.blocked) return false;
    }
    return true;
}

/// Smallest observable set satisfying the backdoor criterion; ties broken by
/// lexicographic order of the sorted member names. std::nullopt if none exists.
inline std::optional<NodeSet> find_backdoor_set(const CausalDag& dag, NodeId x, NodeId y, const NodeSet& observable) {
    if (x == y) throw StructuralError("find_backdoor_set needs distinct nodes");
    const NodeSet desc = dag.descendants(x);
    std::vector<NodeId> candidates;
    for (NodeId n : observable) {
        if (n != x && n != y && !desc.count(n)) candidates.push_back(n);
    }
    std::sort(candidates.begin(), candidates.end(), [&](NodeId a, NodeId b) { return dag.name(a) < dag.name(b); });
    const std::size_t n = candidates.size();
    for (std::size_t k = 0; k <= n; ++k) {
        // Combinations of size k in lexicographic order over the sorted candidates.
        std::vector<std::size_t> idx(k);
        for (std::size_t i = 0; i < k; ++i) idx[i] = i;
        while (true) {
            NodeSet set;
            for (std::size_t i : idx) set.insert(candidates[i]);
            if (satisfies_backdoor(dag, x, y, set)) return set;
            std::size_t i = k;
            while (i > 0 && idx[i - 1] == n - k + i - 1) --i;
            if (i == 0) break;
            ++idx[i - 1];
            for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Adjustment estimators. Each reads observational factors from the exact
// joint over observable variables and never touches hidden CPDs.

enum class Estimator { Backdoor, Frontdoor, Dic };

inline const char* to_string(Estimator e) {
    switch (e) {
        case Estimator::Backdoor: return "backdoor";
        case Estimator::Frontdoor: return "frontdoor";
        case Estimator::Dic: return "dic";
    }
    return "?";
}

struct AdjustmentResult {
    DiscreteDistribution distribution;
    Estimator estimator = Estimator::Backdoor;
    std::vector<std::string> inputs_used;
};

/// Test hook: mixes stratum weights toward uniform by `weight_perturbation`.
struct AdjustOptions {
    double weight_perturbation = 0.0;
};

namespace detail {

/// Dense observational factor over a fixed list of variables.
class Factor {
public:
    Factor(const JointTable& observational, const std::vector<std::string>& vars)
        : table_(observational.marginal(vars)) {}

    double operator()(std::initializer_list<std::size_t> states) const {
        std::vector<std::size_t> s(states);
        return table_[table_.encode(s)];
    }

    double at(std::span<const std::size_t> states) const { return table_[table_.encode(states)]; }

    std::size_t card(std::size_t pos) const { return table_.variables()[pos].cardinality; }

private:
    JointTable table_;
};

inline void require_observable(const Scm& scm, const std::string& name, const char* role) {
    if (scm.is_hidden(scm.id(name))) {
        throw StructuralError(std::string(role) + " '" + name + "' must be observable");
    }
}

inline void require_distinct(const std::vector<std::string>& names) {
    std::set<std::string> s(names.begin(), names.end());
    if (s.size() != names.size()) throw StructuralError("estimator roles must name distinct variables");
}

/// Every directed path from `from` to `to` passes through `via`.
inline bool intercepts_all_directed(const CausalDag& dag, NodeId from, NodeId to, NodeId via) {
    std::vector<NodeId> stack{from};
    std::vector<bool> seen(dag.size(), false);
    while (!stack.empty()) {
        NodeId n = stack.back();
        stack.pop_back();
        if (n == to) return false;
        if (seen[n] || n == via) continue;
        seen[n] = true;
        for (NodeId c : dag.children(n)) stack.push_back(c);
    }
    return true;
}

inline void check_state(const Scm& scm, const std::string& var, std::size_t state) {
    if (state >= scm.cardinality(scm.id(var))) throw DataError("state out of range for '" + var + "'");
}

inline double normalize(std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    if (s > 0.0) {
        for (double& x : v) x /= s;
    }
    return s;
}

}  // namespace detail

/// P(y | do(x = x_state)) = sum_d P(y | x, d) P(d) over the strata of `adjust_set`.
inline AdjustmentResult backdoor_adjust(const Scm& scm, const std::string& x, std::size_t x_state, const std::string& y,
                                        const std::set<std::string>& adjust_set, const AdjustOptions& opt = {}) {
    detail::check_state(scm, x, x_state);
    detail::require_observable(scm, x, "treatment");
    detail::require_observable(scm, y, "outcome");
    NodeSet set;
    for (const auto& a : adjust_set) {
        detail::require_observable(scm, a, "adjustment variable");
        set.insert(scm.id(a));
    }
    const NodeId xi = scm.id(x);
    const NodeId yi = scm.id(y);
    if (xi == yi) throw StructuralError("treatment and outcome must differ");
    if (!satisfies_backdoor(scm.dag(), xi, yi, set)) {
        std::string msg = "adjustment set {";
        for (const auto& a : adjust_set) msg += a + ",";
        msg += "} does not satisfy the backdoor criterion for " + x + " -> " + y;
        throw InvalidAdjustmentError(msg);
    }

    std::vector<std::string> vars(adjust_set.begin(), adjust_set.end());
    vars.push_back(x);
    vars.push_back(y);
    const detail::Factor joint(observational_joint(scm), vars);
    const std::size_t nd = vars.size() - 2;
    const std::size_t ycard = scm.cardinality(yi);
    const std::size_t xcard = scm.cardinality(xi);

    std::size_t strata = 1;
    for (std::size_t i = 0; i < nd; ++i) strata *= joint.card(i);
    std::vector<double> out(ycard, 0.0);
    std::vector<std::size_t> st(vars.size(), 0);
    for (std::size_t s = 0; s < strata; ++s) {
        std::size_t rem = s;
        for (std::size_t i = nd; i-- > 0;) {
            st[i] = rem % joint.card(i);
            rem /= joint.card(i);
        }
        double pd = 0.0;
        double pxd = 0.0;
        std::vector<double> pyxd(ycard, 0.0);
        for (std::size_t xs = 0; xs < xcard; ++xs) {
            for (std::size_t ys = 0; ys < ycard; ++ys) {
                st[nd] = xs;
                st[nd + 1] = ys;
                const double p = joint.at(st);
                pd += p;
                if (xs == x_state) {
                    pxd += p;
                    pyxd[ys] += p;
                }
            }
        }
        if (pd == 0.0) continue;
        if (pxd == 0.0) {
            throw ZeroProbabilityError("positivity violated: P(" + x + "=" + std::to_string(x_state) +
                                       ", stratum " + std::to_string(s) + ") = 0");
        }
        const double weight = (1.0 - opt.weight_perturbation) * pd +
                              opt.weight_perturbation / static_cast<double>(strata);
        for (std::size_t ys = 0; ys < ycard; ++ys) out[ys] += weight * pyxd[ys] / pxd;
    }
    std::vector<std::string> inputs{"P(" + y + "|" + x};
    for (const auto& a : adjust_set) inputs.front() += "," + a;
    inputs.front() += ")";
    std::string prior = "P(";
    for (std::size_t i = 0; i < nd; ++i) prior += (i ? "," : "") + vars[i];
    inputs.push_back(prior + ")");
    return AdjustmentResult{DiscreteDistribution{y, std::move(out)}, Estimator::Backdoor, std::move(inputs)};
}

/// P(y | do(x = x_state)) = sum_z P(z | x) sum_x' P(y | z, x') P(x').
///
/// Inner strata (z, x') with P(z, x') = 0 are skipped and the remaining P(x')
/// weights renormalized; under positivity this is the plain formula.
inline AdjustmentResult frontdoor_adjust(const Scm& scm, const std::string& x, std::size_t x_state,
                                         const std::string& y, const std::string& mediator) {
    detail::check_state(scm, x, x_state);
    detail::require_distinct({x, y, mediator});
    detail::require_observable(scm, x, "treatment");
    detail::require_observable(scm, y, "outcome");
    detail::require_observable(scm, mediator, "mediator");
    const CausalDag& dag = scm.dag();
    const NodeId xi = scm.id(x), yi = scm.id(y), mi = scm.id(mediator);
    if (!detail::intercepts_all_directed(dag, xi, yi, mi)) {
        throw StructuralError("mediator '" + mediator + "' does not intercept every directed path " + x + " -> " + y);
    }
    for (const auto& p : backdoor_paths(dag, xi, mi)) {
        if (!p.blocked) {
            throw StructuralError("open backdoor path into the mediator: " + p.to_string(dag));
        }
    }
    if (!satisfies_backdoor(dag, mi, yi, NodeSet{xi})) {
        throw StructuralError("conditioning on '" + x + "' does not block the backdoor paths " + mediator + " -> " + y);
    }

    const detail::Factor joint(observational_joint(scm), {x, mediator, y});
    const std::size_t xc = joint.card(0), mc = joint.card(1), yc = joint.card(2);
    std::vector<double> px(xc, 0.0);
    std::vector<std::vector<double>> pxm(xc, std::vector<double>(mc, 0.0));
    for (std::size_t a = 0; a < xc; ++a) {
        for (std::size_t m = 0; m < mc; ++m) {
            for (std::size_t b = 0; b < yc; ++b) pxm[a][m] += joint({a, m, b});
            px[a] += pxm[a][m];
        }
    }
    if (px[x_state] == 0.0) {
        throw ZeroProbabilityError("P(" + x + "=" + std::to_string(x_state) + ") = 0");
    }
    std::vector<double> out(yc, 0.0);
    for (std::size_t m = 0; m < mc; ++m) {
        const double pm_given_x = pxm[x_state][m] / px[x_state];
        if (pm_given_x == 0.0) continue;
        std::vector<double> inner(yc, 0.0);
        double mass = 0.0;
        for (std::size_t a = 0; a < xc; ++a) {
            if (pxm[a][m] == 0.0) continue;
            mass += px[a];
            for (std::size_t b = 0; b < yc; ++b) inner[b] += px[a] * joint({a, m, b}) / pxm[a][m];
        }
        for (std::size_t b = 0; b < yc; ++b) out[b] += pm_given_x * inner[b] / mass;
    }
    return AdjustmentResult{DiscreteDistribution{y, std::move(out)}, Estimator::Frontdoor,
                            {"P(" + mediator + "|" + x + ")", "P(" + y + "|" + mediator + "," + x + ")",
                             "P(" + x + ")"}};
}

/// Factorization used by dic_adjust.
///
/// Stratified: sum_s P(s) sum_z P(z | i, s) sum_x P(x) P(l | s, x, z).
/// Published:  sum_s P(s) sum_x P(x) sum_z P(z | i) P(l | s, x, z).
///
/// The two agree when s has no edge into z. With s -> z the published form
/// drops the coupling between the s that picks z and the s that reaches l.
enum class DicForm { Stratified, Published };

/**
 * Deconfounded adjustment with a hidden confounder of (i, l) and an observed
 * confounder s of (z, l). x ranges over the states of i. Strata of zero
 * probability are skipped and the remaining P(x) weights renormalized.
 */
inline AdjustmentResult dic_adjust(const Scm& scm, const std::string& i, std::size_t i_state, const std::string& l,
                                   const std::string& z, const std::string& s, DicForm form = DicForm::Stratified) {
    detail::check_state(scm, i, i_state);
    detail::require_distinct({i, l, z, s});
    detail::require_observable(scm, i, "treatment");
    detail::require_observable(scm, l, "outcome");
    detail::require_observable(scm, z, "mediator");
    detail::require_observable(scm, s, "observed confounder");
    const CausalDag& dag = scm.dag();
    const NodeId ii = scm.id(i), li = scm.id(l), zi = scm.id(z), si = scm.id(s);
    if (!detail::intercepts_all_directed(dag, ii, li, zi)) {
        throw StructuralError("mediator '" + z + "' does not intercept every directed path " + i + " -> " + l);
    }
    if (!d_separated(dag, si, ii, {})) {
        throw StructuralError("observed confounder '" + s + "' is not independent of '" + i + "'");
    }
    for (const auto& p : backdoor_paths(dag, ii, zi, NodeSet{si})) {
        if (!p.blocked) throw StructuralError("open backdoor path into the mediator: " + p.to_string(dag));
    }
    if (!satisfies_backdoor(dag, zi, li, NodeSet{ii, si})) {
        throw StructuralError("{" + i + "," + s + "} does not block the backdoor paths " + z + " -> " + l);
    }

    const detail::Factor joint(observational_joint(scm), {s, i, z, l});
    const std::size_t sc = joint.card(0), ic = joint.card(1), zc = joint.card(2), lc = joint.card(3);
    std::vector<double> ps(sc, 0.0), pi(ic, 0.0), psi(sc * ic, 0.0);
    std::vector<double> piz(ic * zc, 0.0);
    std::vector<double> psiz(sc * ic * zc, 0.0);
    for (std::size_t a = 0; a < sc; ++a) {
        for (std::size_t b = 0; b < ic; ++b) {
            for (std::size_t c = 0; c < zc; ++c) {
                double m = 0.0;
                for (std::size_t d = 0; d < lc; ++d) m += joint({a, b, c, d});
                psiz[(a * ic + b) * zc + c] = m;
                piz[b * zc + c] += m;
                psi[a * ic + b] += m;
                ps[a] += m;
                pi[b] += m;
            }
        }
    }
    if (pi[i_state] == 0.0) throw ZeroProbabilityError("P(" + i + "=" + std::to_string(i_state) + ") = 0");

    // sum_x P(x) P(l | s, x, z) with zero strata skipped.
    auto inner = [&](std::size_t a, std::size_t c) {
        std::vector<double> acc(lc, 0.0);
        double mass = 0.0;
        for (std::size_t b = 0; b < ic; ++b) {
            const double stratum = psiz[(a * ic + b) * zc + c];
            if (stratum == 0.0) continue;
            mass += pi[b];
            for (std::size_t d = 0; d < lc; ++d) acc[d] += pi[b] * joint({a, b, c, d}) / stratum;
        }
        for (double& v : acc) v /= mass;
        return acc;
    };

    std::vector<double> out(lc, 0.0);
    for (std::size_t a = 0; a < sc; ++a) {
        if (ps[a] == 0.0) continue;
        for (std::size_t c = 0; c < zc; ++c) {
            double pz = 0.0;
            if (form == DicForm::Stratified) {
                if (psi[a * ic + i_state] == 0.0) {
                    throw ZeroProbabilityError("positivity violated: P(" + s + "=" + std::to_string(a) + ", " + i +
                                               "=" + std::to_string(i_state) + ") = 0");
                }
                pz = psiz[(a * ic + i_state) * zc + c] / psi[a * ic + i_state];
            } else {
                pz = piz[i_state * zc + c] / pi[i_state];
            }
            if (pz == 0.0) continue;
            bool any = false;
            for (std::size_t b = 0; b < ic && !any; ++b) any = psiz[(a * ic + b) * zc + c] > 0.0;
            if (!any) {
                if (form == DicForm::Stratified) {
                    throw ZeroProbabilityError("no observational support for " + z + "=" + std::to_string(c) +
                                               " at " + s + "=" + std::to_string(a));
                }
                continue;
            }
            const auto in = inner(a, c);
            for (std::size_t d = 0; d < lc; ++d) out[d] += ps[a] * pz * in[d];
        }
    }
    detail::normalize(out);
    const std::string zfac = form == DicForm::Stratified ? "P(" + z + "|" + i + "," + s + ")" : "P(" + z + "|" + i + ")";
    return AdjustmentResult{DiscreteDistribution{l, std::move(out)}, Estimator::Dic,
                            {"P(" + s + ")", "P(" + i + ")", zfac, "P(" + l + "|" + s + "," + i + "," + z + ")"}};
}

}  // namespace deconf
