#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <vector>

#include "tomoscope/loss_model.hpp"
#include "tomoscope/rng.hpp"
#include "tomoscope/topology.hpp"

namespace tomo {

// Receiver observations of one experiment: per source, a binary matrix
// X_r(o) over receivers r and probes o.
struct ObservationSet {
    struct SourceBlock {
        int source_id = 0;
        int probes = 0;
        std::vector<int> receivers;                 // sorted node ids
        std::vector<std::vector<unsigned char>> x;  // [probe][receiver index]
    };
    std::vector<SourceBlock> blocks;  // ascending source id

    const SourceBlock& block(int source_id) const {
        for (const auto& b : blocks)
            if (b.source_id == source_id) return b;
        throw ValidationError("no observations for source " + std::to_string(source_id));
    }
};

// Ground-truth pass/loss tallies recorded by the simulator at every link.
struct LinkTruthTally {
    std::map<int, long long> offered;
    std::map<int, long long> lost;
};

struct ActualLossRates {
    std::map<int, double> rate;   // lost/offered per measured link
    std::vector<int> unmeasured;  // links never offered a probe
};

inline ActualLossRates actual_loss_rates(const LinkTruthTally& tally) {
    ActualLossRates out;
    for (const auto& [link, off] : tally.offered) {
        if (off <= 0) {
            out.unmeasured.push_back(link);
            continue;
        }
        out.rate[link] = static_cast<double>(tally.lost.at(link)) / static_cast<double>(off);
    }
    return out;
}

// Per-probe pass events, recorded only when a trace sink is supplied.
struct SimTrace {
    struct Row {
        int source = 0;
        int probe = 0;
        std::vector<int> passed_links;  // ascending
    };
    std::vector<Row> rows;
};

struct SimulationResult {
    ObservationSet observations;
    LinkTruthTally tally;
};

// Propagate multicast probes from every source through the topology. A probe
// crosses link i iff it reached i's parent node and the link's loss model
// passes it. Fully deterministic under a fixed seed: every draw is keyed by
// (seed, source, probe, link), so runs are reproducible and prefix-stable in
// the probe count.
inline SimulationResult run_experiment(const NetworkTopology& topo, const GroundTruth& truth,
                                       int probes_per_source, std::uint64_t seed,
                                       SimTrace* trace = nullptr) {
    if (probes_per_source < 1) throw ValidationError("probes_per_source must be >= 1");
    for (int id : topo.link_ids()) truth.model_for(id);  // coverage check up front

    SimulationResult res;
    for (int id : topo.link_ids()) {
        res.tally.offered[id] = 0;
        res.tally.lost[id] = 0;
    }
    KeyedRng rng(seed);

    struct PlanEntry {
        int link_id;
        int parent_slot;
        int child_slot;
        const LossModel* model;
        bool bursty;
    };

    for (const auto& [sid, att] : topo.sources()) {
        ObservationSet::SourceBlock block;
        block.source_id = sid;
        block.probes = probes_per_source;

        // dense node slots for this source's tree; links in topological order
        std::map<int, int> slot;
        auto slot_of = [&](int node) {
            auto it = slot.find(node);
            if (it != slot.end()) return it->second;
            const int s = static_cast<int>(slot.size());
            slot[node] = s;
            return s;
        };
        slot_of(att);
        std::vector<PlanEntry> plan;
        for (int id : topo.links_topological()) {
            if (!topo.reaches(sid, id)) continue;
            const auto& l = topo.link(id);
            const auto& m = truth.model_for(id);
            plan.push_back({id, slot_of(l.parent_node), slot_of(l.child_node), &m,
                            std::holds_alternative<TwoStateBurst>(m)});
        }
        for (int node : topo.receivers())
            if (topo.reaches_node(sid, node)) block.receivers.push_back(node);
        std::vector<int> recv_slots(block.receivers.size());
        for (size_t i = 0; i < block.receivers.size(); ++i)
            recv_slots[i] = slot.at(block.receivers[i]);

        std::vector<long long> offered(plan.size(), 0), lost(plan.size(), 0);
        std::vector<LinkState> state(plan.size(), LinkState::good);
        std::vector<unsigned char> reached(slot.size(), 0);

        block.x.assign(probes_per_source,
                       std::vector<unsigned char>(block.receivers.size(), 0));
        for (int o = 0; o < probes_per_source; ++o) {
            std::fill(reached.begin(), reached.end(), 0);
            reached[0] = 1;  // attachment slot
            SimTrace::Row row;
            for (size_t k = 0; k < plan.size(); ++k) {
                const auto& e = plan[k];
                const bool arrived = reached[e.parent_slot] != 0;
                if (e.bursty) {
                    // the channel evolves once per probe index, arrivals or not
                    const double loss_draw = arrived ? rng.uniform(sid, o, e.link_id, 0) : 0.0;
                    const double trans_draw = rng.uniform(sid, o, e.link_id, 1);
                    const auto r = sample_pass(*e.model, state[k], loss_draw, trans_draw);
                    state[k] = r.next_state;
                    if (!arrived) continue;
                    offered[k] += 1;
                    if (r.pass) {
                        reached[e.child_slot] = 1;
                        if (trace) row.passed_links.push_back(e.link_id);
                    } else {
                        lost[k] += 1;
                    }
                } else {
                    if (!arrived) continue;
                    offered[k] += 1;
                    const double u = rng.uniform(sid, o, e.link_id, 0);
                    if (u >= std::get<Bernoulli>(*e.model).theta) {
                        reached[e.child_slot] = 1;
                        if (trace) row.passed_links.push_back(e.link_id);
                    } else {
                        lost[k] += 1;
                    }
                }
            }
            for (size_t i = 0; i < recv_slots.size(); ++i) block.x[o][i] = reached[recv_slots[i]];
            if (trace) {
                row.source = sid;
                row.probe = o;
                trace->rows.push_back(std::move(row));
            }
        }
        for (size_t k = 0; k < plan.size(); ++k) {
            res.tally.offered[plan[k].link_id] += offered[k];
            res.tally.lost[plan[k].link_id] += lost[k];
        }
        res.observations.blocks.push_back(std::move(block));
    }
    return res;
}

}  // namespace tomo
