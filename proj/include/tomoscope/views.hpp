#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "tomoscope/simulator.hpp"
#include "tomoscope/topology.hpp"

namespace tomo {

// Y_k^s(o): 1 iff at least one receiver under link k saw probe o from source s.
struct InternalStateMatrix {
    struct SourceStates {
        int source_id = 0;
        int probes = 0;
        std::map<int, std::vector<unsigned char>> y;  // link -> per-probe state
    };
    std::vector<SourceStates> blocks;

    const SourceStates& block(int source_id) const {
        for (const auto& b : blocks)
            if (b.source_id == source_id) return b;
        throw ValidationError("no states for source " + std::to_string(source_id));
    }
};

// The sufficient statistics: per link and source, the confirmed-pass count
// n_i(s,1) and the newly-uncertain count n_i(s,0) = n_f(s,1) - n_i(s,1).
struct InternalViews {
    struct Cell {
        long long n1 = 0;
        long long n0 = 0;
    };
    std::map<int, long long> probes;            // n^s
    std::map<int, std::map<int, Cell>> counts;  // link -> source -> cell

    long long n1(int link, int source) const { return cell(link, source).n1; }
    long long n0(int link, int source) const { return cell(link, source).n0; }
    long long n1(int link) const {
        long long t = 0;
        for (const auto& [s, c] : counts.at(link)) t += c.n1;
        return t;
    }
    long long n0(int link) const {
        long long t = 0;
        for (const auto& [s, c] : counts.at(link)) t += c.n0;
        return t;
    }
    bool has(int link, int source) const {
        auto it = counts.find(link);
        return it != counts.end() && it->second.count(source) > 0;
    }

  private:
    const Cell& cell(int link, int source) const {
        auto it = counts.find(link);
        if (it == counts.end()) throw ValidationError("no views for link " + std::to_string(link));
        auto jt = it->second.find(source);
        if (jt == it->second.end())
            throw ValidationError("link " + std::to_string(link) + " gets no probes from source " +
                                  std::to_string(source));
        return jt->second;
    }
};

// Max-reduction of receiver observations to per-link internal states,
// evaluated children-first so each link is an OR over its child links.
inline InternalStateMatrix internal_states(const ObservationSet& obs,
                                           const NetworkTopology& topo) {
    InternalStateMatrix out;
    for (const auto& block : obs.blocks) {
        const int sid = block.source_id;
        topo.attachment(sid);  // throws for unknown source
        std::map<int, int> recv_index;
        for (size_t i = 0; i < block.receivers.size(); ++i) {
            const int node = block.receivers[i];
            if (!topo.nodes().empty() &&
                !std::binary_search(topo.receivers().begin(), topo.receivers().end(), node))
                throw ValidationError("observation receiver " + std::to_string(node) +
                                      " is not a receiver of the topology");
            if (!topo.reaches_node(sid, node))
                throw ValidationError("receiver " + std::to_string(node) +
                                      " is not reachable from source " + std::to_string(sid));
            recv_index[node] = static_cast<int>(i);
        }
        for (int node : topo.receivers())
            if (topo.reaches_node(sid, node) && !recv_index.count(node))
                throw ValidationError("observations for source " + std::to_string(sid) +
                                      " are missing receiver " + std::to_string(node));

        InternalStateMatrix::SourceStates st;
        st.source_id = sid;
        st.probes = block.probes;
        const auto& order = topo.links_topological();
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            const int id = *it;
            if (!topo.reaches(sid, id)) continue;
            const int child = topo.link(id).child_node;
            std::vector<unsigned char> y(block.probes, 0);
            if (topo.is_receiver(child)) {
                const int idx = recv_index.at(child);
                for (int o = 0; o < block.probes; ++o) y[o] = block.x[o][idx];
            } else {
                for (int c : topo.out_links(child)) {
                    const auto& yc = st.y.at(c);
                    for (int o = 0; o < block.probes; ++o) y[o] |= yc[o];
                }
            }
            st.y[id] = std::move(y);
        }
        out.blocks.push_back(std::move(st));
    }
    return out;
}

inline InternalViews internal_views(const InternalStateMatrix& states,
                                    const NetworkTopology& topo) {
    InternalViews v;
    for (const auto& st : states.blocks) {
        const int sid = st.source_id;
        v.probes[sid] = st.probes;
        for (const auto& [id, y] : st.y) {
            long long n1 = 0;
            for (unsigned char b : y) n1 += b;
            v.counts[id][sid].n1 = n1;
        }
        for (const auto& [id, y] : st.y) {
            const int f = topo.parent_link_of_link(sid, id);
            const long long parent_n1 = (f == -1) ? st.probes : v.counts.at(f).at(sid).n1;
            v.counts[id][sid].n0 = parent_n1 - v.counts[id][sid].n1;
        }
    }
    return v;
}

// Subtree pass rates from a theta assignment, children first: leaf beta = 1,
// beta_i = 1 - prod_j xi_j over child links, xi_i = theta_i + (1-theta_i)(1-beta_i).
struct BetaXi {
    std::map<int, double> beta;
    std::map<int, double> xi;
};

inline BetaXi compute_beta_xi(const NetworkTopology& topo, const std::map<int, double>& theta) {
    BetaXi r;
    const auto& order = topo.links_topological();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const int id = *it;
        const int child = topo.link(id).child_node;
        double beta = 1.0;
        if (!topo.is_receiver(child)) {
            double prod = 1.0;
            for (int c : topo.out_links(child)) prod *= r.xi.at(c);
            beta = 1.0 - prod;
        }
        const double th = theta.at(id);
        r.beta[id] = beta;
        r.xi[id] = (th >= 1.0) ? 1.0 : th + (1.0 - th) * (1.0 - beta);
    }
    return r;
}

namespace detail {
// log with the 0*log(0) := 0 convention used by the likelihood sums
inline double count_log(long long count, double arg) {
    if (count == 0) return 0.0;
    if (arg <= 0.0) return -std::numeric_limits<double>::infinity();
    return static_cast<double>(count) * std::log(arg);
}
}  // namespace detail

// Sufficient-statistics form of the log-likelihood:
//   sum_i [ n_i(1) log(1-theta_i) + n_i(0) log xi_i ]
inline double log_likelihood(const InternalViews& views, const std::map<int, double>& theta,
                             const NetworkTopology& topo) {
    for (int id : topo.link_ids()) {
        const double th = theta.at(id);
        if (!(th >= 0.0 && th < 1.0)) throw ValidationError("theta outside [0,1)");
    }
    const BetaXi bx = compute_beta_xi(topo, theta);
    double total = 0.0;
    for (int id : topo.link_ids()) {
        total += detail::count_log(views.n1(id), 1.0 - theta.at(id));
        total += detail::count_log(views.n0(id), bx.xi.at(id));
    }
    return total;
}

// Per-probe product form, used as the independence oracle for the
// sufficient-statistics likelihood: every probe contributes (1-theta_j) for
// each confirmed pass and xi_k at the first uncertain link.
inline double full_log_likelihood(const ObservationSet& obs, const std::map<int, double>& theta,
                                  const NetworkTopology& topo) {
    for (int id : topo.link_ids()) {
        const double th = theta.at(id);
        if (!(th >= 0.0 && th < 1.0)) throw ValidationError("theta outside [0,1)");
    }
    const BetaXi bx = compute_beta_xi(topo, theta);
    std::map<int, double> log_pass, log_xi;
    for (int id : topo.link_ids()) {
        log_pass[id] = std::log(1.0 - theta.at(id));
        log_xi[id] = bx.xi.at(id) > 0.0 ? std::log(bx.xi.at(id))
                                        : -std::numeric_limits<double>::infinity();
    }
    const InternalStateMatrix states = internal_states(obs, topo);
    double total = 0.0;
    for (const auto& st : states.blocks) {
        for (int o = 0; o < st.probes; ++o) {
            for (const auto& [id, y] : st.y) {
                const int f = topo.parent_link_of_link(st.source_id, id);
                const int yf = (f == -1) ? 1 : st.y.at(f)[o];
                if (y[o])
                    total += log_pass[id];
                else if (yf)
                    total += log_xi[id];
            }
        }
    }
    return total;
}

// Observation-overlap condition at an internal link: every subset of its
// child links (size >= 2) must have been jointly observed by some probe.
struct OverlapResult {
    bool ok = true;
    std::vector<std::vector<int>> violating_subsets;  // child link id sets
};

inline OverlapResult check_overlap_condition(const InternalStateMatrix& states,
                                             const NetworkTopology& topo, int link) {
    const auto children = topo.descendants(link);
    if (children.size() < 2)
        throw ValidationError("overlap condition undefined for leaf link " + std::to_string(link));
    if (children.size() > 20)
        throw ValidationError("overlap check limited to 20 child links");
    const int k = static_cast<int>(children.size());

    std::vector<char> covered(1u << k, 0);  // mask -> some probe covers all its members
    for (const auto& st : states.blocks) {
        if (!st.y.count(link)) continue;
        std::vector<const std::vector<unsigned char>*> ys;
        for (int c : children) ys.push_back(&st.y.at(c));
        for (int o = 0; o < st.probes; ++o) {
            unsigned mask = 0;
            for (int b = 0; b < k; ++b)
                if ((*ys[b])[o]) mask |= 1u << b;
            covered[mask] = 1;
        }
    }
    // a subset is covered if any observed mask contains it
    std::vector<char> hit = covered;
    for (int b = 0; b < k; ++b)
        for (unsigned m = (1u << k) - 1; m + 1 > 0; --m)
            if ((m & (1u << b)) == 0 && hit[m | (1u << b)]) hit[m] = 1;

    OverlapResult out;
    for (unsigned m = 0; m < (1u << k); ++m) {
        if (__builtin_popcount(m) < 2 || hit[m]) continue;
        std::vector<int> subset;
        for (int b = 0; b < k; ++b)
            if (m & (1u << b)) subset.push_back(children[b]);
        out.violating_subsets.push_back(std::move(subset));
    }
    out.ok = out.violating_subsets.empty();
    return out;
}

// gamma_hat_i(s) = n_i(s,1) / n^s
inline double empirical_gamma(const InternalViews& views, int source, int link) {
    if (!views.has(link, source))
        throw ValidationError("source " + std::to_string(source) + " does not reach link " +
                              std::to_string(link));
    const long long n = views.probes.at(source);
    if (n <= 0) throw ValidationError("source has no probes");
    return static_cast<double>(views.n1(link, source)) / static_cast<double>(n);
}

}  // namespace tomo
