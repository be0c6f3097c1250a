#pragma once

#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>

#include "tomoscope/common.hpp"

namespace tomo {

// Per-link i.i.d. loss: a probe is dropped with probability theta.
struct Bernoulli {
    double theta = 0.0;
};

// Two-state (good/bad) channel for bursty losses. The chain advances once per
// probe index; each state drops probes with its own probability.
struct TwoStateBurst {
    double p_enter_bad = 0.0;  // good -> bad transition probability
    double p_exit_bad = 1.0;   // bad -> good transition probability
    double loss_good = 0.0;
    double loss_bad = 0.0;
};

using LossModel = std::variant<Bernoulli, TwoStateBurst>;

// Channel state. Bernoulli has unit state (always `good`).
enum class LinkState : unsigned char { good = 0, bad = 1 };

inline void validate_model(const LossModel& m) {
    auto in01 = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (const auto* b = std::get_if<Bernoulli>(&m)) {
        if (!in01(b->theta)) throw ValidationError("bernoulli theta outside [0,1]");
    } else {
        const auto& t = std::get<TwoStateBurst>(m);
        if (!in01(t.p_enter_bad) || !in01(t.p_exit_bad) || !in01(t.loss_good) || !in01(t.loss_bad))
            throw ValidationError("burst probability outside [0,1]");
        if (t.loss_bad < t.loss_good) throw ValidationError("burst requires loss_bad >= loss_good");
    }
}

struct PassResult {
    bool pass;
    LinkState next_state;
};

// One probe transit: draw the loss from the current state, then advance the
// state with the transition draw.
inline PassResult sample_pass(const LossModel& m, LinkState state, double loss_draw,
                              double transition_draw) {
    if (const auto* b = std::get_if<Bernoulli>(&m)) {
        return {loss_draw >= b->theta, LinkState::good};
    }
    const auto& t = std::get<TwoStateBurst>(m);
    const double loss_p = (state == LinkState::bad) ? t.loss_bad : t.loss_good;
    const bool pass = loss_draw >= loss_p;
    LinkState next = state;
    if (state == LinkState::good) {
        if (transition_draw < t.p_enter_bad) next = LinkState::bad;
    } else {
        if (transition_draw < t.p_exit_bad) next = LinkState::good;
    }
    return {pass, next};
}

// Exact long-run loss probability of the model.
inline double stationary_loss_rate(const LossModel& m) {
    if (const auto* b = std::get_if<Bernoulli>(&m)) return b->theta;
    const auto& t = std::get<TwoStateBurst>(m);
    const double denom = t.p_enter_bad + t.p_exit_bad;
    if (denom == 0.0) return t.loss_good;  // chain never leaves its initial (good) state
    const double pi_bad = t.p_enter_bad / denom;
    return pi_bad * t.loss_bad + (1.0 - pi_bad) * t.loss_good;
}

// Model spec syntax: "bernoulli:<theta>" or "burst:<p_enter>:<p_exit>:<loss_good>:<loss_bad>".
inline LossModel parse_model_spec(const std::string& spec) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream in(spec);
    while (std::getline(in, cur, ':')) parts.push_back(cur);
    auto num = [&](const std::string& s) {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw ValidationError("bad number in model spec: " + s);
        return v;
    };
    LossModel m;
    if (parts.size() == 2 && parts[0] == "bernoulli") {
        m = Bernoulli{num(parts[1])};
    } else if (parts.size() == 5 && parts[0] == "burst") {
        m = TwoStateBurst{num(parts[1]), num(parts[2]), num(parts[3]), num(parts[4])};
    } else {
        throw ValidationError("bad model spec: " + spec +
                              " (expected bernoulli:<theta> or burst:<pe>:<px>:<lg>:<lb>)");
    }
    validate_model(m);
    return m;
}

// Per-link model assignment covering every link of a topology exactly once.
struct GroundTruth {
    std::map<int, LossModel> models;  // link id -> model

    const LossModel& model_for(int link) const {
        auto it = models.find(link);
        if (it == models.end())
            throw ValidationError("no loss model for link " + std::to_string(link));
        return it->second;
    }

    double stationary_rate(int link) const { return stationary_loss_rate(model_for(link)); }
};

}  // namespace tomo
