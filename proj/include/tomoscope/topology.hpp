#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tomoscope/common.hpp"

namespace tomo {

// Directed link: parent_node forwards probes it received to child_node.
struct LinkRecord {
    int id = 0;
    int parent_node = 0;
    int child_node = 0;
};

// One tree produced by decomposition. Source-rooted trees carry the per-source
// remainder of the network; joint-rooted trees carry the subtree hanging off a
// joint node, cut again at any deeper joint node. Links whose child node is a
// joint node are listed as boundary links.
struct DecompTree {
    std::vector<int> source_ids;   // sources feeding this tree
    int root_node = -1;
    int root_joint = -1;           // joint node id when joint-rooted, else -1
    std::vector<int> links;        // ascending link ids
    std::vector<int> boundary_links;
};

struct Decomposition {
    std::vector<int> joint_nodes;  // deepest joint first
    std::vector<DecompTree> descendant_trees;
    std::vector<DecompTree> ancestor_trees;
};

// Validated multicast topology: a DAG of links fed by one or more sources,
// where the subgraph reachable from each source is a tree. Immutable after
// construction; all queries are safe for unsynchronized shared reads.
class NetworkTopology {
  public:
    // Line-oriented format, '#' starts a comment:
    //   source <source-id> <node-id>
    //   link <link-id> <parent-node> <child-node>
    //   theta <link-id> <loss-rate>          (optional ground truth)
    static NetworkTopology parse(const std::string& text, bool merge_chains = false) {
        std::map<int, int> sources;
        std::vector<LinkRecord> links;
        std::map<int, double> thetas;
        std::istringstream in(text);
        std::string raw;
        int lineno = 0;
        while (std::getline(in, raw)) {
            ++lineno;
            const auto hash = raw.find('#');
            if (hash != std::string::npos) raw.erase(hash);
            std::istringstream ls(raw);
            std::string kw;
            if (!(ls >> kw)) continue;
            if (kw == "source") {
                int sid, node;
                if (!(ls >> sid >> node) || sid < 0 || node < 0)
                    throw ParseError(lineno, "expected: source <source-id> <node-id>");
                if (sources.count(sid)) throw ParseError(lineno, "duplicate source id " + std::to_string(sid));
                sources[sid] = node;
            } else if (kw == "link") {
                int id, p, c;
                if (!(ls >> id >> p >> c) || id < 0 || p < 0 || c < 0)
                    throw ParseError(lineno, "expected: link <link-id> <parent-node> <child-node>");
                links.push_back({id, p, c});
            } else if (kw == "theta") {
                int id;
                double v;
                if (!(ls >> id >> v)) throw ParseError(lineno, "expected: theta <link-id> <loss-rate>");
                if (!(v >= 0.0 && v < 1.0)) throw ParseError(lineno, "loss rate must be in [0,1)");
                if (thetas.count(id)) throw ParseError(lineno, "duplicate theta for link " + std::to_string(id));
                thetas[id] = v;
            } else {
                throw ParseError(lineno, "unknown directive '" + kw + "'");
            }
            std::string extra;
            if (ls >> extra) throw ParseError(lineno, "trailing tokens after directive");
        }
        return build(std::move(sources), std::move(links), std::move(thetas), merge_chains, true);
    }

    static NetworkTopology build(std::map<int, int> sources, std::vector<LinkRecord> links,
                                 std::map<int, double> thetas = {}, bool merge_chains = false,
                                 bool require_contiguous_ids = true) {
        NetworkTopology t;
        t.sources_ = std::move(sources);
        for (const auto& l : links) {
            if (t.links_.count(l.id))
                throw ValidationError("duplicate link id " + std::to_string(l.id));
            if (l.parent_node == l.child_node)
                throw ValidationError("link " + std::to_string(l.id) + " is a self loop");
            t.links_[l.id] = l;
        }
        for (const auto& [id, v] : thetas) {
            if (!t.links_.count(id))
                throw ValidationError("theta for unknown link " + std::to_string(id));
            t.thetas_[id] = v;
        }
        if (require_contiguous_ids) {
            int expect = 1;
            for (const auto& [id, l] : t.links_) {
                if (id != expect)
                    throw ValidationError("link ids must be contiguous from 1; missing id " +
                                          std::to_string(expect));
                ++expect;
            }
        }
        t.finish(merge_chains);
        return t;
    }

    // --- basic accessors -------------------------------------------------

    int link_count() const { return static_cast<int>(links_.size()); }

    const LinkRecord& link(int id) const {
        auto it = links_.find(id);
        if (it == links_.end()) throw ValidationError("unknown link id " + std::to_string(id));
        return it->second;
    }

    const std::vector<int>& link_ids() const { return link_ids_; }
    const std::map<int, int>& sources() const { return sources_; }
    const std::vector<int>& nodes() const { return node_ids_; }
    const std::vector<int>& receivers() const { return receivers_; }
    bool is_receiver(int node) const { return out_links(node).empty(); }
    bool is_leaf_link(int id) const { return is_receiver(link(id).child_node); }
    const std::map<int, double>& ground_truth_theta() const { return thetas_; }

    const std::vector<int>& out_links(int node) const {
        static const std::vector<int> empty;
        auto it = out_links_.find(node);
        return it == out_links_.end() ? empty : it->second;
    }

    const std::vector<int>& in_links(int node) const {
        static const std::vector<int> empty;
        auto it = in_links_.find(node);
        return it == in_links_.end() ? empty : it->second;
    }

    // Links merged away by the --merge-chains relaxation: surviving id -> original ids.
    const std::map<int, std::vector<int>>& compound_members() const { return compound_; }

    // --- per-source structure --------------------------------------------

    bool reaches(int source, int link_id) const {
        return source_reach_.at(source).links.count(link_id) > 0;
    }

    bool reaches_node(int source, int node) const {
        return source_reach_.at(source).parent_link.count(node) > 0;
    }

    int root_link(int source) const {
        return out_links(attachment(source)).front();
    }

    int attachment(int source) const {
        auto it = sources_.find(source);
        if (it == sources_.end()) throw ValidationError("unknown source " + std::to_string(source));
        return it->second;
    }

    // Incoming link of `node` on the tree of `source`; -1 at the attachment node.
    int parent_link(int source, int node) const {
        const auto& reach = source_reach_.at(source);
        auto it = reach.parent_link.find(node);
        if (it == reach.parent_link.end())
            throw ValidationError("node " + std::to_string(node) + " not reachable from source " +
                                  std::to_string(source));
        return it->second;
    }

    // Parent link of link `id` on the path to `source` (-1 for that source's root link).
    int parent_link_of_link(int source, int id) const {
        return parent_link(source, link(id).parent_node);
    }

    // a(s,i): ancestors of link `id` ordered f(i) first up to the source's root link.
    std::vector<int> ancestors(int id, int source) const {
        if (!reaches(source, id))
            throw ValidationError("link " + std::to_string(id) + " not reachable from source " +
                                  std::to_string(source));
        std::vector<int> out;
        int cur = parent_link_of_link(source, id);
        while (cur != -1) {
            out.push_back(cur);
            cur = parent_link_of_link(source, cur);
        }
        return out;
    }

    // d_i: immediate child links of link `id`'s child node.
    std::vector<int> descendants(int id) const { return out_links(link(id).child_node); }

    // R(i): receivers reachable through link `id`.
    const std::vector<int>& receivers_under(int id) const {
        auto it = receivers_under_.find(id);
        if (it == receivers_under_.end())
            throw ValidationError("unknown link id " + std::to_string(id));
        return it->second;
    }

    // S(node): sources with a directed path to `node`.
    std::vector<int> sources_reaching(int node) const {
        if (!node_set_.count(node)) throw ValidationError("unknown node " + std::to_string(node));
        std::vector<int> out;
        for (const auto& [sid, reach] : source_reach_)
            if (reach.parent_link.count(node)) out.push_back(sid);
        return out;
    }

    // J: joint nodes, i.e. roots of maximal tree intersections. After
    // validation these are exactly the nodes with two or more incoming links.
    std::vector<int> joint_nodes() const {
        std::vector<int> out;
        for (int n : node_ids_)
            if (in_links(n).size() >= 2) out.push_back(n);
        return out;
    }

    // Links ordered so that every link appears after its parents (and the
    // reverse order visits children first).
    const std::vector<int>& links_topological() const { return topo_links_; }

    int node_depth(int node) const { return depth_.at(node); }

    // --- decomposition -----------------------------------------------------

    // Cut the network at every joint node. Joint nodes are ordered deepest
    // first so nested intersections are processed bottom-up.
    Decomposition decompose() const {
        Decomposition d;
        d.joint_nodes = joint_nodes();
        std::sort(d.joint_nodes.begin(), d.joint_nodes.end(), [&](int a, int b) {
            if (depth_.at(a) != depth_.at(b)) return depth_.at(a) > depth_.at(b);
            return a < b;
        });
        std::set<int> joints(d.joint_nodes.begin(), d.joint_nodes.end());

        // owner of a link = nearest joint node at or above its parent node,
        // else the source whose attachment starts the chain
        std::map<int, std::vector<int>> by_source;  // source -> links
        std::map<int, std::vector<int>> by_joint;   // joint node -> links
        for (int id : link_ids_) {
            int v = links_.at(id).parent_node;
            while (true) {
                if (joints.count(v)) {
                    by_joint[v].push_back(id);
                    break;
                }
                const auto& in = in_links(v);
                if (in.empty()) {
                    for (const auto& [sid, att] : sources_)
                        if (att == v) by_source[sid].push_back(id);
                    break;
                }
                v = links_.at(in.front()).parent_node;
            }
        }

        auto boundaries = [&](const std::vector<int>& ls) {
            std::vector<int> b;
            for (int id : ls)
                if (joints.count(links_.at(id).child_node)) b.push_back(id);
            return b;
        };

        for (const auto& [sid, att] : sources_) {
            DecompTree t;
            t.source_ids = {sid};
            t.root_node = att;
            t.links = by_source.count(sid) ? by_source[sid] : std::vector<int>{};
            std::sort(t.links.begin(), t.links.end());
            t.boundary_links = boundaries(t.links);
            d.ancestor_trees.push_back(std::move(t));
        }
        for (int j : d.joint_nodes) {
            auto it = by_joint.find(j);
            if (it == by_joint.end()) continue;  // joint receiver owns no links
            DecompTree t;
            t.source_ids = sources_reaching(j);
            t.root_node = j;
            t.root_joint = j;
            t.links = it->second;
            std::sort(t.links.begin(), t.links.end());
            t.boundary_links = boundaries(t.links);
            d.descendant_trees.push_back(std::move(t));
        }
        return d;
    }

  private:
    void finish(bool merge_chains) {
        if (sources_.empty()) throw ValidationError("topology has no source");
        rebuild_adjacency();

        // source attachment sanity
        std::set<int> atts;
        for (const auto& [sid, att] : sources_) {
            if (!atts.insert(att).second)
                throw ValidationError("two sources share attachment node " + std::to_string(att));
            if (out_links(att).size() != 1)
                throw ValidationError("source " + std::to_string(sid) + " attachment node " +
                                      std::to_string(att) + " must have exactly one outgoing link");
            if (!in_links(att).empty())
                throw ValidationError("source attachment node " + std::to_string(att) +
                                      " has incoming links");
        }

        topo_sort();  // throws on cycles
        if (merge_chains) {
            bool merged = true;
            while (merged) {
                merged = false;
                for (int n : node_ids_) {
                    if (atts.count(n) || in_links(n).size() != 1 || out_links(n).size() != 1)
                        continue;
                    collapse_chain_node(n);
                    rebuild_adjacency();
                    topo_sort();
                    merged = true;
                    break;
                }
            }
        }

        // serial chains are unidentifiable link-by-link; reject them
        for (int n : node_ids_) {
            if (atts.count(n)) continue;
            if (out_links(n).size() == 1)
                throw ValidationError("internal node " + std::to_string(n) +
                                      " has out-degree 1 (serial chain; rerun with --merge-chains "
                                      "to collapse it)");
        }

        compute_reach();
        for (int id : link_ids_) {
            bool hit = false;
            for (const auto& [sid, reach] : source_reach_) hit = hit || reach.links.count(id);
            if (!hit)
                throw ValidationError("link " + std::to_string(id) +
                                      " is not reachable from any source");
        }

        receivers_.clear();
        for (int n : node_ids_)
            if (out_links(n).empty()) receivers_.push_back(n);

        // receiver sets, children-first
        receivers_under_.clear();
        for (auto it = topo_links_.rbegin(); it != topo_links_.rend(); ++it) {
            const int id = *it;
            const int child = links_.at(id).child_node;
            std::set<int> acc;
            if (out_links(child).empty()) {
                acc.insert(child);
            } else {
                for (int c : out_links(child)) {
                    const auto& sub = receivers_under_.at(c);
                    acc.insert(sub.begin(), sub.end());
                }
            }
            receivers_under_[id] = std::vector<int>(acc.begin(), acc.end());
        }
    }

    void rebuild_adjacency() {
        out_links_.clear();
        in_links_.clear();
        node_set_.clear();
        link_ids_.clear();
        for (const auto& [id, l] : links_) {
            link_ids_.push_back(id);
            out_links_[l.parent_node].push_back(id);
            in_links_[l.child_node].push_back(id);
            node_set_.insert(l.parent_node);
            node_set_.insert(l.child_node);
        }
        for (const auto& [sid, att] : sources_) node_set_.insert(att);
        for (auto& [n, v] : out_links_) std::sort(v.begin(), v.end());
        for (auto& [n, v] : in_links_) std::sort(v.begin(), v.end());
        node_ids_.assign(node_set_.begin(), node_set_.end());

        std::set<std::pair<int, int>> pairs;
        for (const auto& [id, l] : links_)
            if (!pairs.insert({l.parent_node, l.child_node}).second)
                throw ValidationError("duplicate link between nodes " +
                                      std::to_string(l.parent_node) + " and " +
                                      std::to_string(l.child_node));
    }

    void collapse_chain_node(int n) {
        const int up_id = in_links(n).front();
        const int down_id = out_links(n).front();
        LinkRecord up = links_.at(up_id);
        LinkRecord down = links_.at(down_id);
        up.child_node = down.child_node;
        auto& members = compound_[up_id];
        if (members.empty()) members.push_back(up_id);
        auto down_members = compound_.count(down_id) ? compound_[down_id] : std::vector<int>{down_id};
        members.insert(members.end(), down_members.begin(), down_members.end());
        compound_.erase(down_id);
        // compound loss rate: 1 - (1-a)(1-b)
        if (thetas_.count(up_id) && thetas_.count(down_id))
            thetas_[up_id] = 1.0 - (1.0 - thetas_[up_id]) * (1.0 - thetas_[down_id]);
        else
            thetas_.erase(up_id);
        thetas_.erase(down_id);
        links_.erase(down_id);
        links_[up_id] = up;
    }

    void topo_sort() {
        std::map<int, int> indeg;
        for (int n : node_ids_) indeg[n] = static_cast<int>(in_links(n).size());
        std::vector<int> order;
        std::vector<int> ready;
        for (int n : node_ids_)
            if (indeg[n] == 0) ready.push_back(n);
        depth_.clear();
        for (int n : ready) depth_[n] = 0;
        while (!ready.empty()) {
            std::sort(ready.begin(), ready.end());
            const int n = ready.front();
            ready.erase(ready.begin());
            order.push_back(n);
            for (int id : out_links(n)) {
                const int c = links_.at(id).child_node;
                auto it = depth_.find(c);
                const int nd = depth_[n] + 1;
                if (it == depth_.end() || it->second < nd) depth_[c] = nd;
                if (--indeg[c] == 0) ready.push_back(c);
            }
        }
        if (order.size() != node_ids_.size()) throw ValidationError("cycle detected");
        std::map<int, int> pos;
        for (size_t i = 0; i < order.size(); ++i) pos[order[i]] = static_cast<int>(i);
        topo_links_ = link_ids_;
        std::sort(topo_links_.begin(), topo_links_.end(), [&](int a, int b) {
            const int pa = pos.at(links_.at(a).parent_node), pb = pos.at(links_.at(b).parent_node);
            if (pa != pb) return pa < pb;
            return a < b;
        });
    }

    void compute_reach() {
        source_reach_.clear();
        for (const auto& [sid, att] : sources_) {
            Reach r;
            r.parent_link[att] = -1;
            // walk links in topological order so parents are settled first
            for (int id : topo_links_) {
                const auto& l = links_.at(id);
                if (!r.parent_link.count(l.parent_node)) continue;
                r.links.insert(id);
                if (r.parent_link.count(l.child_node))
                    throw ValidationError("node " + std::to_string(l.child_node) +
                                          " has two parents on paths from source " +
                                          std::to_string(sid));
                r.parent_link[l.child_node] = id;
            }
            source_reach_[sid] = std::move(r);
        }
    }

    struct Reach {
        std::set<int> links;
        std::map<int, int> parent_link;  // node -> incoming link (-1 at attachment)
    };

    std::map<int, LinkRecord> links_;
    std::map<int, int> sources_;
    std::map<int, double> thetas_;
    std::map<int, std::vector<int>> compound_;

    std::vector<int> link_ids_;
    std::vector<int> node_ids_;
    std::set<int> node_set_;
    std::map<int, std::vector<int>> out_links_;
    std::map<int, std::vector<int>> in_links_;
    std::vector<int> receivers_;
    std::map<int, std::vector<int>> receivers_under_;
    std::map<int, Reach> source_reach_;
    std::map<int, int> depth_;
    std::vector<int> topo_links_;
};

}  // namespace tomo
