#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "deconf/errors.hpp"

namespace deconf {

using NodeId = std::size_t;
using NodeSet = std::set<NodeId>;

/// Directed acyclic graph over named nodes. Edges keep insertion order per child.
class CausalDag {
public:
    CausalDag() = default;

    explicit CausalDag(std::vector<std::string> names) : names_(std::move(names)) {
        parents_.resize(names_.size());
        children_.resize(names_.size());
        for (NodeId i = 0; i < names_.size(); ++i) {
            if (!index_.emplace(names_[i], i).second) {
                throw DataError("duplicate node name '" + names_[i] + "'");
            }
        }
    }

    std::size_t size() const { return names_.size(); }
    const std::string& name(NodeId id) const { return names_.at(id); }
    const std::vector<std::string>& names() const { return names_; }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    NodeId id(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("unknown node '" + name + "'");
        return it->second;
    }

    /// Adds parent -> child. Rejects self loops, duplicates and cycles.
    void add_edge(NodeId parent, NodeId child) {
        check_node(parent);
        check_node(child);
        if (parent == child) throw StructuralError("self loop on '" + names_[parent] + "'");
        if (has_edge(parent, child)) {
            throw DataError("duplicate edge " + names_[parent] + "->" + names_[child]);
        }
        if (is_ancestor(child, parent)) {
            throw StructuralError("edge " + names_[parent] + "->" + names_[child] + " creates a cycle");
        }
        parents_[child].push_back(parent);
        children_[parent].push_back(child);
    }

    void add_edge(const std::string& parent, const std::string& child) { add_edge(id(parent), id(child)); }

    void remove_incoming(NodeId child) {
        check_node(child);
        for (NodeId p : parents_[child]) {
            auto& ch = children_[p];
            ch.erase(std::remove(ch.begin(), ch.end(), child), ch.end());
        }
        parents_[child].clear();
    }

    bool has_edge(NodeId parent, NodeId child) const {
        const auto& ps = parents_.at(child);
        return std::find(ps.begin(), ps.end(), parent) != ps.end();
    }

    bool adjacent(NodeId a, NodeId b) const { return has_edge(a, b) || has_edge(b, a); }

    const std::vector<NodeId>& parents(NodeId id) const { return parents_.at(id); }
    const std::vector<NodeId>& children(NodeId id) const { return children_.at(id); }

    std::vector<std::pair<NodeId, NodeId>> edges() const {
        std::vector<std::pair<NodeId, NodeId>> out;
        for (NodeId c = 0; c < size(); ++c) {
            for (NodeId p : parents_[c]) out.emplace_back(p, c);
        }
        return out;
    }

    /// Strict descendants of a node.
    NodeSet descendants(NodeId id) const {
        NodeSet seen;
        std::vector<NodeId> stack(children_.at(id).begin(), children_.at(id).end());
        while (!stack.empty()) {
            NodeId n = stack.back();
            stack.pop_back();
            if (!seen.insert(n).second) continue;
            for (NodeId c : children_[n]) stack.push_back(c);
        }
        return seen;
    }

    bool is_ancestor(NodeId anc, NodeId node) const { return descendants(anc).count(node) != 0; }

    /// Kahn's algorithm; ties resolved by smallest node id.
    std::vector<NodeId> topological_order() const {
        std::vector<std::size_t> indeg(size());
        for (NodeId i = 0; i < size(); ++i) indeg[i] = parents_[i].size();
        std::set<NodeId> ready;
        for (NodeId i = 0; i < size(); ++i) {
            if (indeg[i] == 0) ready.insert(i);
        }
        std::vector<NodeId> order;
        while (!ready.empty()) {
            NodeId n = *ready.begin();
            ready.erase(ready.begin());
            order.push_back(n);
            for (NodeId c : children_[n]) {
                if (--indeg[c] == 0) ready.insert(c);
            }
        }
        if (order.size() != size()) throw StructuralError("graph has a cycle");
        return order;
    }

    friend bool operator==(const CausalDag& a, const CausalDag& b) {
        if (a.names_ != b.names_) return false;
        for (NodeId i = 0; i < a.size(); ++i) {
            std::set<NodeId> pa(a.parents_[i].begin(), a.parents_[i].end());
            std::set<NodeId> pb(b.parents_[i].begin(), b.parents_[i].end());
            if (pa != pb) return false;
        }
        return true;
    }

private:
    void check_node(NodeId id) const {
        if (id >= names_.size()) throw DataError("node id out of range");
    }

    std::vector<std::string> names_;
    std::map<std::string, NodeId> index_;
    std::vector<std::vector<NodeId>> parents_;
    std::vector<std::vector<NodeId>> children_;
};

}  // namespace deconf
