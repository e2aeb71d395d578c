#pragma once

// Fault scenarios: DER loss, communication-link loss and load steps, the
// operating condition they produce, and inherited-feasibility re-checks.

#include "certify.hpp"
#include "controller.hpp"
#include "errors.hpp"
#include "netmodel.hpp"

#include <json.hpp>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace mgrid {

enum class EventKind { der_loss, comm_loss, load_step };

struct FaultEvent {
    double time = 0.0;
    EventKind kind = EventKind::load_step;
    int bus = 0;                  // der_loss, load_step
    std::pair<int, int> edge{};   // comm_loss (bus ids)
    double dP = 0.0;              // load_step
    double dQ = 0.0;
    std::optional<Load> residual; // der_loss: optional residual load left at the bus
};

/// Active inverter set, surviving comm edges and the loads in force.
struct OperatingCondition {
    std::vector<Index> active;       // ascending inverter indices
    std::vector<Edge> comm_edges;    // surviving edges, internal indices
    CommLaplacian comm;
    std::vector<Load> loads;         // per bus; lost inverters carry their residual load
    bool certified = true;           // false once the comm graph is disconnected

    ControlState control() const { return ControlState{active, comm}; }

    /// Buses solved algebraically: everything that is not an active inverter.
    std::vector<Index> algebraic(Index n) const {
        std::vector<Index> out;
        for (Index i = 0; i < n; ++i)
            if (!std::binary_search(active.begin(), active.end(), i)) out.push_back(i);
        return out;
    }
};

inline OperatingCondition initial_condition(const NetworkCase& c) {
    OperatingCondition oc;
    oc.active = c.inverter_indices();
    oc.comm_edges = c.comm_edges;
    oc.comm = laplacian(oc.comm_edges, oc.active);
    oc.loads = c.base_loads();
    oc.certified = oc.comm.connected;
    return oc;
}

inline void rebuild(OperatingCondition& oc) {
    oc.comm = laplacian(oc.comm_edges, oc.active);
    oc.comm_edges = oc.comm.edges;
    oc.certified = oc.certified && oc.comm.connected;
}

/// Applies one event in place. Throws ValidationError for events that do not
/// fit the case; disconnection is accepted and marks the condition uncertified.
inline void apply_event(const NetworkCase& c, OperatingCondition& oc, const FaultEvent& ev) {
    switch (ev.kind) {
        case EventKind::der_loss: {
            const Index i = c.index_of(ev.bus);
            if (!c.buses[static_cast<std::size_t>(i)].is_inverter())
                throw ValidationError("der_loss targets bus " + std::to_string(ev.bus) + ", which is not an inverter");
            auto it = std::find(oc.active.begin(), oc.active.end(), i);
            if (it == oc.active.end()) return;
            oc.active.erase(it);
            if (oc.active.empty()) throw ValidationError("der_loss would remove the last active inverter");
            oc.loads[static_cast<std::size_t>(i)] = ev.residual.value_or(Load{});
            rebuild(oc);
            break;
        }
        case EventKind::comm_loss: {
            const Index a = c.index_of(ev.edge.first);
            const Index b = c.index_of(ev.edge.second);
            const Edge key{std::min(a, b), std::max(a, b)};
            if (std::find(c.comm_edges.begin(), c.comm_edges.end(), key) == c.comm_edges.end())
                throw ValidationError("comm_loss names a link that is not in the comm graph");
            oc.comm_edges.erase(std::remove(oc.comm_edges.begin(), oc.comm_edges.end(), key), oc.comm_edges.end());
            rebuild(oc);
            break;
        }
        case EventKind::load_step: {
            const Index i = c.index_of(ev.bus);
            if (c.buses[static_cast<std::size_t>(i)].is_inverter())
                throw ValidationError("load_step targets bus " + std::to_string(ev.bus) + ", which is an inverter");
            oc.loads[static_cast<std::size_t>(i)].add_step(ev.dP, ev.dQ);
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario file

struct ScenarioSim {
    double t_end = 10.0;
    double dt = 1e-3;
    double newton_tol = 1e-10;
    int newton_max_iter = 50;
    int record_stride = 1;
    std::string integrator = "rk4";
    double e_init = 1.0;  // mean inverter voltage of the initial operating point
};

struct Scenario {
    std::vector<FaultEvent> events;  // sorted by time
    ScenarioSim sim;
};

inline Scenario parse_scenario(const std::string& text) {
    Json doc;
    try {
        doc = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ParseError("byte " + std::to_string(e.byte), e.what());
    }
    Scenario sc;
    if (doc.contains("events")) {
        const Json& je = doc.at("events");
        if (!je.is_array()) throw ParseError("$.events", "expected an array");
        for (std::size_t k = 0; k < je.size(); ++k) {
            const std::string path = "$.events[" + std::to_string(k) + "]";
            const Json& e = je[k];
            FaultEvent ev;
            ev.time = detail::number(e, "t", path);
            const Json& kind = detail::require(e, "kind", path);
            const Json& p = detail::require(e, "params", path);
            const std::string pp = path + ".params";
            if (kind == "der_loss") {
                ev.kind = EventKind::der_loss;
                ev.bus = detail::integer(detail::require(p, "bus", pp), pp + ".bus");
                if (p.contains("residual")) {
                    Load r;
                    r.model = LoadModel::constant_power;
                    r.P = detail::number(p.at("residual"), "P", pp + ".residual");
                    r.Q = detail::number(p.at("residual"), "Q", pp + ".residual");
                    ev.residual = r;
                }
            } else if (kind == "comm_loss") {
                ev.kind = EventKind::comm_loss;
                const Json& edge = detail::require(p, "edge", pp);
                if (!edge.is_array() || edge.size() != 2) throw ParseError(pp + ".edge", "expected a pair of bus ids");
                ev.edge = {detail::integer(edge[0], pp + ".edge[0]"), detail::integer(edge[1], pp + ".edge[1]")};
            } else if (kind == "load_step") {
                ev.kind = EventKind::load_step;
                ev.bus = detail::integer(detail::require(p, "bus", pp), pp + ".bus");
                ev.dP = detail::number(p, "dP", pp);
                ev.dQ = detail::number(p, "dQ", pp);
            } else {
                throw ParseError(path + ".kind", "expected der_loss, comm_loss or load_step");
            }
            sc.events.push_back(ev);
        }
    }
    if (!std::is_sorted(sc.events.begin(), sc.events.end(),
                        [](const FaultEvent& a, const FaultEvent& b) { return a.time < b.time; }))
        throw ValidationError("scenario events must be sorted by time");
    if (doc.contains("sim")) {
        const Json& s = doc.at("sim");
        sc.sim.t_end = detail::number_or(s, "t_end", sc.sim.t_end, "$.sim");
        sc.sim.dt = detail::number_or(s, "dt", sc.sim.dt, "$.sim");
        sc.sim.newton_tol = detail::number_or(s, "newton_tol", sc.sim.newton_tol, "$.sim");
        sc.sim.newton_max_iter = static_cast<int>(detail::number_or(s, "newton_max_iter", sc.sim.newton_max_iter, "$.sim"));
        sc.sim.record_stride = static_cast<int>(detail::number_or(s, "record_stride", sc.sim.record_stride, "$.sim"));
        sc.sim.e_init = detail::number_or(s, "e_init", sc.sim.e_init, "$.sim");
        if (s.contains("integrator")) sc.sim.integrator = s.at("integrator").get<std::string>();
    }
    if (!(sc.sim.dt > 0.0)) throw ValidationError("sim.dt must be positive");
    if (!(sc.sim.t_end >= sc.sim.dt)) throw ValidationError("sim.t_end must be at least dt");
    if (!(sc.sim.e_init > 0.0)) throw ValidationError("sim.e_init must be positive");
    if (sc.sim.record_stride < 1) throw ValidationError("sim.record_stride must be >= 1");
    if (sc.sim.integrator != "rk4" && sc.sim.integrator != "euler")
        throw ValidationError("sim.integrator must be rk4 or euler");
    return sc;
}

// ---------------------------------------------------------------------------
// Inherited feasibility

struct InheritedResult {
    bool skipped = false;  // survivor comm graph disconnected
    bool pass = false;
    double worst = 0.0;    // largest eigenvalue over survivor block vertices
};

/// Re-runs block feasibility on the surviving inverters by restricting every
/// full-system block generator to its surviving principal submatrix.
inline InheritedResult inherited_feasibility(const GainSet& g, const IntervalHull& hull,
                                             const OperatingCondition& oc, double d) {
    InheritedResult out;
    if (!oc.comm.connected) {
        out.skipped = true;
        return out;
    }
    const BlockFeasibility r = block_feasibility(g, hull, d, oc.active);
    out.pass = r.pass;
    out.worst = r.worst;
    return out;
}

}  // namespace mgrid
