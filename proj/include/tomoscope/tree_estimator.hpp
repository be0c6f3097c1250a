#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "tomoscope/views.hpp"

namespace tomo {

// Per-joint-node solution produced by the general pipeline.
struct JointNodeEstimate {
    int node = -1;
    double beta_star = 1.0;   // subtree pass rate
    double n_star = 0.0;      // effective arrivals n_i(1)/beta*
    std::map<int, double> path_rate;  // source -> A(s, node)
    int iterations = 0;
    double residual = 0.0;
    bool degenerate = false;  // fixed point drifted to the unit root
};

struct LossEstimate {
    std::map<int, double> theta;
    std::map<int, double> beta;  // recomputed bottom-up from theta
    std::map<int, double> xi;
    std::map<std::pair<int, int>, double> path_rate;  // (source, node) -> A_hat
    std::map<int, unsigned> flags;
    std::vector<JointNodeEstimate> joints;
    int iterations = 0;
    double residual = 0.0;

    void flag(int link, unsigned f) { flags[link] |= f; }
    unsigned flags_of(int link) const {
        auto it = flags.find(link);
        return it == flags.end() ? flag_none : it->second;
    }
};

// Fill beta/xi from the estimated thetas so the output satisfies
// xi = theta + (1-theta)(1-beta) and beta = 1 - prod xi exactly.
inline void finalize_derived(LossEstimate& est, const NetworkTopology& topo) {
    const auto& order = topo.links_topological();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const int id = *it;
        const int child = topo.link(id).child_node;
        double beta = 1.0;
        if (!topo.is_receiver(child)) {
            double prod = 1.0;
            for (int c : topo.out_links(child)) prod *= est.xi.at(c);
            beta = 1.0 - prod;
        }
        const double th = est.theta.at(id);
        est.beta[id] = beta;
        est.xi[id] = (th >= 1.0) ? 1.0 : th + (1.0 - th) * (1.0 - beta);
    }
}

struct MincRoot {
    double A = 1.0;
    double beta = 1.0;
};

// Bracketed solve of H(A) = 1 - gp/A - prod_j (1 - g_j/A) = 0 on (gp, 1]:
// bisection on the sign change, then a short Newton polish. The root is the
// path pass rate down to the node; beta = gp/A falls out with it.
inline MincRoot solve_minc_polynomial(double gamma_parent, const std::vector<double>& child_gammas) {
    const double gp = gamma_parent;
    auto fail = [&](IdentifiabilityError::Reason r, const std::string& msg) {
        throw IdentifiabilityError(r, gp, child_gammas, msg);
    };
    if (child_gammas.size() < 2)
        fail(IdentifiabilityError::Reason::degenerate_node,
             "node needs at least 2 child links, got " + std::to_string(child_gammas.size()));
    if (!(gp > 0.0))
        fail(IdentifiabilityError::Reason::degenerate_counts, "no probes observed below the node");
    if (gp > 1.0) fail(IdentifiabilityError::Reason::degenerate_counts, "gamma_parent above 1");

    double maxc = 0.0, sumc = 0.0;
    for (double g : child_gammas) {
        if (g < 0.0) fail(IdentifiabilityError::Reason::degenerate_counts, "negative child gamma");
        maxc = std::max(maxc, g);
        sumc += g;
    }
    if (maxc > gp * (1.0 + 1e-12))
        fail(IdentifiabilityError::Reason::degenerate_counts,
             "child gamma exceeds parent gamma");
    // a child observed exactly as often as the parent pins the root at A = gp
    if (maxc >= gp * (1.0 - 1e-15)) return {gp, 1.0};

    auto H = [&](double A) {
        double prod = 1.0;
        for (double g : child_gammas) prod *= 1.0 - g / A;
        return 1.0 - gp / A - prod;
    };
    auto Hprime = [&](double A) {
        double d = gp / (A * A);
        for (size_t j = 0; j < child_gammas.size(); ++j) {
            double prod = child_gammas[j] / (A * A);
            for (size_t k = 0; k < child_gammas.size(); ++k)
                if (k != j) prod *= 1.0 - child_gammas[k] / A;
            d -= prod;
        }
        return d;
    };

    double lo = gp + 1e-12, hi = 1.0;
    if (lo >= hi) return {1.0, gp};
    const double h1 = H(hi);
    if (h1 < 0.0) {
        if (sumc <= gp)
            fail(IdentifiabilityError::Reason::degenerate_counts,
                 "children gammas sum to at most the parent gamma; no root in range");
        fail(IdentifiabilityError::Reason::root_above_one,
             "unconstrained root exceeds 1");
    }
    if (h1 == 0.0) return {1.0, gp};
    double hlo = H(lo);
    if (hlo > 0.0) {
        // pathological flatness near the lower bracket; rescan for the sign change
        bool found = false;
        for (int k = 1; k <= 64 && !found; ++k) {
            const double x = lo + (hi - lo) * (static_cast<double>(k) / 65.0);
            if (H(x) < 0.0) {
                lo = x;
                hlo = H(x);
                found = true;
            }
        }
        if (!found)
            fail(IdentifiabilityError::Reason::degenerate_counts, "no sign change in (gp, 1]");
    }
    while (hi - lo > 1e-12) {
        const double mid = 0.5 * (lo + hi);
        if (H(mid) < 0.0)
            lo = mid;
        else
            hi = mid;
    }
    double A = 0.5 * (lo + hi);
    for (int step = 0; step < 5; ++step) {
        const double d = Hprime(A);
        if (d == 0.0) break;
        const double next = A - H(A) / d;
        if (!(next > gp && next <= 1.0)) break;
        A = next;
    }
    return {A, gp / A};
}

// One tree-shaped estimation task: a (sub)tree with known arrivals at its
// root. Boundary links are cut edges whose child acts as a virtual receiver;
// their counts must already carry any scaling applied by the caller.
struct TreeProblem {
    const NetworkTopology* topo = nullptr;
    int root_node = -1;
    double root_arrival = 0.0;
    std::vector<int> links;
    std::map<int, double> count;  // effective confirmed-pass count per link
    std::set<int> boundary;
};

struct CoreOutcome {
    std::map<int, double> A_node;  // path pass rate to each node (root = 1)
    std::map<int, double> theta;
    std::map<int, unsigned> flags;
    bool degenerate = false;  // polynomial degeneracy; caller should fall back
};

// Top-down pass-rate estimation: solve the node polynomial at every internal
// node, then recover thetas from successive A ratios (leaf and boundary links
// use their gamma directly). An unconstrained root above 1 is clamped to the
// boundary A = 1 and flagged.
inline CoreOutcome tree_topdown_core(const TreeProblem& p) {
    const NetworkTopology& topo = *p.topo;
    CoreOutcome out;
    std::set<int> in_problem(p.links.begin(), p.links.end());
    auto gamma = [&](int id) { return p.count.at(id) / p.root_arrival; };
    auto is_cut = [&](int id) { return p.boundary.count(id) > 0 || topo.is_leaf_link(id); };

    out.A_node[p.root_node] = 1.0;
    std::vector<int> ordered;
    for (int id : topo.links_topological())
        if (in_problem.count(id)) ordered.push_back(id);

    for (int id : ordered) {
        if (is_cut(id)) continue;
        const int w = topo.link(id).child_node;
        if (!(gamma(id) > 0.0)) continue;  // dead subtree, handled below
        std::vector<double> child_g;
        for (int c : topo.out_links(w)) child_g.push_back(gamma(c));
        try {
            out.A_node[w] = solve_minc_polynomial(gamma(id), child_g).A;
        } catch (const IdentifiabilityError& e) {
            if (e.reason == IdentifiabilityError::Reason::root_above_one) {
                out.A_node[w] = 1.0;
                out.flags[id] |= flag_boundary;
            } else {
                out.flags[id] |= flag_overlap_violation;
                out.degenerate = true;
            }
        }
    }
    if (out.degenerate) return out;

    std::set<int> dead_nodes;
    for (int id : ordered) {
        const auto& l = topo.link(id);
        const int v = l.parent_node, w = l.child_node;
        if (dead_nodes.count(v)) {
            out.theta[id] = std::numeric_limits<double>::quiet_NaN();
            out.flags[id] |= flag_unidentifiable_below;
            if (!is_cut(id)) dead_nodes.insert(w);
            continue;
        }
        const double Av = out.A_node.at(v);
        if (!(p.count.at(id) > 0.0)) {
            out.theta[id] = 1.0;
            out.flags[id] |= flag_boundary;
            if (!is_cut(id)) dead_nodes.insert(w);
            continue;
        }
        double th;
        if (!is_cut(id) && out.A_node.count(w))
            th = 1.0 - out.A_node.at(w) / Av;
        else
            th = 1.0 - gamma(id) / Av;
        if (th < 0.0) {
            th = 0.0;
            out.flags[id] |= flag_boundary;
        }
        out.theta[id] = th;
        if (is_cut(id)) out.A_node[w] = Av * (1.0 - th);
    }
    return out;
}

inline TreeProblem single_source_problem(const InternalViews& views, const NetworkTopology& topo,
                                         int source) {
    TreeProblem p;
    p.topo = &topo;
    p.root_node = topo.attachment(source);
    p.root_arrival = static_cast<double>(views.probes.at(source));
    for (int id : topo.link_ids()) {
        if (!topo.reaches(source, id)) continue;
        p.links.push_back(id);
        p.count[id] = static_cast<double>(views.n1(id, source));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Link-based likelihood equations (fixed point)
// ---------------------------------------------------------------------------

namespace detail {

// imp(s, v): estimated number of probes from source s that became uncertain at
// an ancestor yet reached node v unobserved. Walking one link up,
//   imp(v) = (1-theta_p)(1-beta_p) * (n_p(s,0) + imp(parent node of p)) / xi_p
// which telescopes the per-ancestor sum.
class ImpTable {
  public:
    ImpTable(const InternalViews& views, const NetworkTopology& topo,
             const std::map<int, double>& theta, const BetaXi& bx)
        : views_(views), topo_(topo), theta_(theta), bx_(bx) {}

    double at(int source, int node) {
        const auto key = std::make_pair(source, node);
        auto it = memo_.find(key);
        if (it != memo_.end()) return it->second;
        double val = 0.0;
        if (node != topo_.attachment(source)) {
            const int p = topo_.parent_link(source, node);
            const int up = topo_.link(p).parent_node;
            const double base = static_cast<double>(views_.n0(p, source)) + at(source, up);
            if (base > 0.0) {
                const double xi = bx_.xi.at(p);
                if (xi <= 0.0)
                    throw EstimationError("xi = 0 with uncertain probes above link " +
                                          std::to_string(p));
                val = (1.0 - theta_.at(p)) * (1.0 - bx_.beta.at(p)) * base / xi;
            }
        }
        memo_[key] = val;
        return val;
    }

  private:
    const InternalViews& views_;
    const NetworkTopology& topo_;
    const std::map<int, double>& theta_;
    const BetaXi& bx_;
    std::map<std::pair<int, int>, double> memo_;
};

}  // namespace detail

// The imp correction for the node at the child end of `parent_link`, under
// the given theta iterate.
inline double imp_estimate(const InternalViews& views, const NetworkTopology& topo,
                           const std::map<int, double>& theta, int source, int parent_link) {
    const BetaXi bx = compute_beta_xi(topo, theta);
    detail::ImpTable imp(views, topo, theta, bx);
    return imp.at(source, topo.link(parent_link).child_node);
}

struct SweepOptions {
    double tol = 1e-10;
    int max_iter = 500;
};

// Fixed-point sweep over the likelihood equations: root links use the probe
// total, leaf links the uncertain-count ratio, all others the gamma/beta
// ratio, each with the imp correction summed over the sources that reach the
// link. Handles trees and general topologies alike.
inline LossEstimate link_equation_sweep(const InternalViews& views, const NetworkTopology& topo,
                                        SweepOptions opts = {}) {
    LossEstimate est;

    std::map<int, int> root_source;  // root link -> its unique source
    for (const auto& [sid, att] : topo.sources()) root_source[topo.root_link(sid)] = sid;

    std::map<int, std::vector<int>> link_sources;
    for (int id : topo.link_ids()) {
        for (const auto& [sid, n] : views.counts.at(id)) link_sources[id].push_back(sid);
        if (link_sources[id].empty())
            throw ValidationError("no views for link " + std::to_string(id));
    }

    std::map<int, double> theta;
    for (int id : topo.link_ids()) {
        double num = 0.0, den = 0.0;
        for (int s : link_sources[id]) {
            num += static_cast<double>(views.n1(id, s));
            const int f = topo.parent_link_of_link(s, id);
            den += (f == -1) ? static_cast<double>(views.probes.at(s))
                             : static_cast<double>(views.n1(f, s));
        }
        const double ratio = den > 0.0 ? num / den : 0.0;
        theta[id] = std::clamp(1.0 - ratio, 0.0, 1.0 - 1e-9);
    }

    double residual = std::numeric_limits<double>::infinity();
    int iter = 0;
    for (; iter < opts.max_iter && residual >= opts.tol; ++iter) {
        const BetaXi bx = compute_beta_xi(topo, theta);
        detail::ImpTable imp(views, topo, theta, bx);
        std::map<int, double> next;
        for (int id : topo.link_ids()) {
            const int vnode = topo.link(id).parent_node;
            const bool leaf = topo.is_leaf_link(id);
            double th;
            if (root_source.count(id)) {
                const int s = root_source.at(id);
                const double g = static_cast<double>(views.n1(id, s)) /
                                 static_cast<double>(views.probes.at(s));
                const double beta = bx.beta.at(id);
                if (beta <= 1e-12) {
                    if (g > 0.0)
                        throw EstimationError("beta underflow at root link " + std::to_string(id));
                    th = 1.0;
                } else {
                    th = 1.0 - g / beta;
                }
            } else if (leaf) {
                double num = 0.0, den = 0.0;
                for (int s : link_sources[id]) {
                    const double corr = imp.at(s, vnode);
                    const int f = topo.parent_link_of_link(s, id);
                    num += static_cast<double>(views.n0(id, s)) + corr;
                    den += static_cast<double>(views.n1(f, s)) + corr;
                }
                th = den > 0.0 ? num / den : 1.0;
            } else {
                double num = 0.0, den = 0.0;
                for (int s : link_sources[id]) {
                    const double corr = imp.at(s, vnode);
                    const int f = topo.parent_link_of_link(s, id);
                    num += static_cast<double>(views.n1(id, s));
                    den += static_cast<double>(views.n1(f, s)) + corr;
                }
                const double beta = bx.beta.at(id);
                if (beta <= 1e-12) {
                    if (num > 0.0)
                        throw EstimationError("beta underflow at link " + std::to_string(id) +
                                              "; subtree data degenerate");
                    th = 1.0;
                } else {
                    th = den > 0.0 ? 1.0 - (num / den) / beta : 1.0;
                }
            }
            next[id] = std::clamp(th, 0.0, 1.0 - 1e-12);
        }
        residual = 0.0;
        for (int id : topo.link_ids()) residual = std::max(residual, std::abs(next[id] - theta[id]));
        theta = std::move(next);
    }

    est.theta = theta;
    est.iterations = iter;
    est.residual = residual;
    if (residual >= opts.tol)
        for (int id : topo.link_ids()) est.flag(id, flag_nonconverged);
    for (int id : topo.link_ids())
        if (theta.at(id) == 0.0 || theta.at(id) >= 1.0 - 1e-12) est.flag(id, flag_boundary);
    finalize_derived(est, topo);
    return est;
}

// Single-source specialization of the sweep (the tree likelihood equations).
inline LossEstimate solve_link_equations(const InternalViews& views, const NetworkTopology& topo,
                                         SweepOptions opts = {}) {
    if (views.probes.size() != 1)
        throw ValidationError("solve_link_equations expects single-source views");
    return link_equation_sweep(views, topo, opts);
}

// Path-based tree estimator. Overlap violations detected by the caller (or
// polynomial degeneracy met along the way) switch the result to the
// link-equation fallback with the affected links flagged.
inline LossEstimate estimate_tree_topdown(const InternalViews& views, const NetworkTopology& topo,
                                          const std::vector<int>& overlap_violations = {}) {
    if (views.probes.size() != 1)
        throw ValidationError("estimate_tree_topdown expects single-source views");
    const int source = views.probes.begin()->first;
    const TreeProblem p = single_source_problem(views, topo, source);
    CoreOutcome core = tree_topdown_core(p);

    if (core.degenerate || !overlap_violations.empty()) {
        LossEstimate est = solve_link_equations(views, topo);
        for (int id : overlap_violations) est.flag(id, flag_overlap_violation);
        for (const auto& [id, f] : core.flags) est.flag(id, f);
        return est;
    }

    LossEstimate est;
    est.theta = std::move(core.theta);
    est.flags = std::move(core.flags);
    for (const auto& [node, a] : core.A_node) est.path_rate[{source, node}] = a;
    finalize_derived(est, topo);
    return est;
}

// Exhaustive maximizer of the sufficient-statistics log-likelihood: coarse
// full grid, then cyclic per-coordinate scans at `grid_step` with a ternary
// polish. Testing oracle only; guarded to small trees.
inline LossEstimate brute_force_mle(const InternalViews& views, const NetworkTopology& topo,
                                    double grid_step = 1e-3) {
    const int m = topo.link_count();
    if (m > 5) throw ValidationError("brute_force_mle limited to 5 links");

    std::map<int, double> theta;
    for (int id : topo.link_ids()) theta[id] = 0.0;
    auto L = [&]() { return log_likelihood(views, theta, topo); };

    const double coarse = (m <= 3) ? 0.05 : 0.1;
    std::vector<int> ids = topo.link_ids();
    std::vector<int> idx(m, 0);
    const int steps = static_cast<int>(1.0 / coarse);
    double best = -std::numeric_limits<double>::infinity();
    std::map<int, double> best_theta = theta;
    while (true) {
        for (int k = 0; k < m; ++k) theta[ids[k]] = idx[k] * coarse;
        const double val = L();
        if (val > best) {
            best = val;
            best_theta = theta;
        }
        int k = 0;
        for (; k < m; ++k) {
            if (++idx[k] < steps) break;
            idx[k] = 0;
        }
        if (k == m) break;
    }
    theta = best_theta;

    const double hi = 1.0 - 1e-9;
    for (int sweep = 0; sweep < 50; ++sweep) {
        double moved = 0.0;
        for (int id : ids) {
            const double before = theta.at(id);
            double arg = before, val = -std::numeric_limits<double>::infinity();
            for (double x = 0.0; x < 1.0; x += grid_step) {
                theta[id] = std::min(x, hi);
                const double v = L();
                if (v > val) {
                    val = v;
                    arg = theta[id];
                }
            }
            double a = std::max(0.0, arg - grid_step), b = std::min(hi, arg + grid_step);
            for (int it = 0; it < 80 && b - a > 1e-11; ++it) {
                const double m1 = a + (b - a) / 3.0, m2 = b - (b - a) / 3.0;
                theta[id] = m1;
                const double v1 = L();
                theta[id] = m2;
                const double v2 = L();
                if (v1 < v2)
                    a = m1;
                else
                    b = m2;
            }
            theta[id] = 0.5 * (a + b);
            if (L() < val) theta[id] = arg;  // keep the grid point if polish regressed
            moved = std::max(moved, std::abs(theta[id] - before));
        }
        if (moved < grid_step / 4.0) break;
    }

    LossEstimate est;
    est.theta = theta;
    finalize_derived(est, topo);
    return est;
}

}  // namespace tomo
