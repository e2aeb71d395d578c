#pragma once

// Fixed-step closed-loop DAE simulation, CSV traces and trace metrics.

#include "contingency.hpp"
#include "controller.hpp"
#include "errors.hpp"
#include "netmodel.hpp"
#include "powerflow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace mgrid {

enum class Integrator { rk4, euler };

struct SimConfig {
    double dt = 1e-3;
    double t_end = 10.0;
    Integrator integrator = Integrator::rk4;
    NewtonOptions newton;
    int record_stride = 1;
    double e_init = 1.0;  // mean inverter voltage of the initial sharing point
    int max_halvings = 4;

    static SimConfig from(const ScenarioSim& s) {
        SimConfig c;
        c.dt = s.dt;
        c.t_end = s.t_end;
        c.integrator = s.integrator == "euler" ? Integrator::euler : Integrator::rk4;
        c.newton.tol = s.newton_tol;
        c.newton.max_iter = s.newton_max_iter;
        c.record_stride = s.record_stride;
        c.e_init = s.e_init;
        return c;
    }
};

/// Closed-loop right-hand side at one state.
struct Evaluation {
    Vector xdot;   // 2 per active inverter
    Vector P, Q;   // all buses
    int clamps = 0;
    int newton_iterations = 0;
};

/// Solves the algebraic buses of `x` in place (warm start from its current
/// values) and evaluates the saturated, clamped control derivative.
inline Evaluation evaluate(const NetworkCase& c, const AdmittanceMatrix& Y, const GainSet& g,
                           const OperatingCondition& oc, VoltageProfile& x, const NewtonOptions& opt) {
    Evaluation ev;
    ev.newton_iterations = solve_algebraic(Y, oc.loads, oc.algebraic(c.size()), x, opt).iterations;
    power_terms(Y, x.E, angle_differences(x.theta), ev.P, ev.Q);
    const Index m = static_cast<Index>(oc.active.size());
    Vector S(2 * m);
    Vector Ea(m);
    for (Index a = 0; a < m; ++a) {
        const Index i = oc.active[static_cast<std::size_t>(a)];
        const Bus& b = c.buses[static_cast<std::size_t>(i)];
        S(2 * a) = ev.P(i) / b.P_star;
        S(2 * a + 1) = ev.Q(i) / b.Q_star;
        Ea(a) = x.E(i);
    }
    ev.xdot = control_derivative(g, oc.control(), S);
    ev.clamps = project_security(c, oc.active, Ea, ev.xdot);
    return ev;
}

inline void advance_active(const OperatingCondition& oc, VoltageProfile& x, const Vector& xdot, double h) {
    for (std::size_t a = 0; a < oc.active.size(); ++a) {
        const Index i = oc.active[a];
        x.theta(i) += h * xdot(2 * static_cast<Index>(a));
        x.E(i) += h * xdot(2 * static_cast<Index>(a) + 1);
    }
}

struct StepResult {
    int clamps = 0;
    int newton_iterations = 0;
};

/// One integrator step of size h from `x` (whose algebraic part must already
/// be consistent). `k1` is the derivative at `x`.
inline StepResult step_once(const NetworkCase& c, const AdmittanceMatrix& Y, const GainSet& g,
                            const OperatingCondition& oc, VoltageProfile& x, const Evaluation& k1, double h,
                            Integrator integ, const NewtonOptions& opt) {
    StepResult r;
    VoltageProfile next = x;
    if (integ == Integrator::euler) {
        advance_active(oc, next, k1.xdot, h);
    } else {
        VoltageProfile s = x;
        advance_active(oc, s, k1.xdot, 0.5 * h);
        const Evaluation k2 = evaluate(c, Y, g, oc, s, opt);
        VoltageProfile s3 = x;
        for (Index i : oc.algebraic(c.size())) {
            s3.theta(i) = s.theta(i);
            s3.E(i) = s.E(i);
        }
        advance_active(oc, s3, k2.xdot, 0.5 * h);
        const Evaluation k3 = evaluate(c, Y, g, oc, s3, opt);
        VoltageProfile s4 = x;
        for (Index i : oc.algebraic(c.size())) {
            s4.theta(i) = s3.theta(i);
            s4.E(i) = s3.E(i);
        }
        advance_active(oc, s4, k3.xdot, h);
        const Evaluation k4 = evaluate(c, Y, g, oc, s4, opt);
        r.clamps = std::max({k2.clamps, k3.clamps, k4.clamps});
        r.newton_iterations = k2.newton_iterations + k3.newton_iterations + k4.newton_iterations;
        const Vector incr = (k1.xdot + 2.0 * k2.xdot + 2.0 * k3.xdot + k4.xdot) / 6.0;
        for (Index i : oc.algebraic(c.size())) {
            next.theta(i) = s4.theta(i);
            next.E(i) = s4.E(i);
        }
        advance_active(oc, next, incr, h);
    }
    for (Index i : oc.active) {
        const Bus& b = c.buses[static_cast<std::size_t>(i)];
        next.E(i) = std::clamp(next.E(i), b.E_min, b.E_max);
    }
    r.newton_iterations += solve_algebraic(Y, oc.loads, oc.algebraic(c.size()), next, opt).iterations;
    r.clamps = std::max(r.clamps, k1.clamps);
    x = next;
    return r;
}

/// Advances by `dt`, halving the step (as repeated substeps) up to
/// `max_halvings` times when the load-bus Newton fails.
inline StepResult step(const NetworkCase& c, const AdmittanceMatrix& Y, const GainSet& g,
                       const OperatingCondition& oc, VoltageProfile& x, const SimConfig& cfg) {
    std::string last_error;
    for (int halving = 0; halving <= cfg.max_halvings; ++halving) {
        const int parts = 1 << halving;
        const double h = cfg.dt / parts;
        VoltageProfile trial = x;
        StepResult total;
        try {
            for (int p = 0; p < parts; ++p) {
                VoltageProfile probe = trial;
                const Evaluation k1 = evaluate(c, Y, g, oc, probe, cfg.newton);
                trial = probe;
                const StepResult r = step_once(c, Y, g, oc, trial, k1, h, cfg.integrator, cfg.newton);
                total.clamps = std::max(total.clamps, r.clamps);
                total.newton_iterations += r.newton_iterations + k1.newton_iterations;
            }
            x = trial;
            return total;
        } catch (const NumericalError& e) {
            last_error = e.what();
        }
    }
    throw NumericalError("step failed after " + std::to_string(cfg.max_halvings) + " step halvings: " + last_error);
}

// ---------------------------------------------------------------------------
// Trace

struct Trace {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    Index column(const std::string& name) const {
        auto it = std::find(columns.begin(), columns.end(), name);
        if (it == columns.end()) throw ValidationError("trace has no column " + name);
        return static_cast<Index>(it - columns.begin());
    }
    bool has(const std::string& name) const {
        return std::find(columns.begin(), columns.end(), name) != columns.end();
    }
    std::vector<double> series(const std::string& name) const {
        const Index k = column(name);
        std::vector<double> out;
        out.reserve(rows.size());
        for (const auto& r : rows) out.push_back(r[static_cast<std::size_t>(k)]);
        return out;
    }
    /// Columns whose name starts with `prefix`.
    std::vector<std::string> with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& c : columns)
            if (c.rfind(prefix, 0) == 0) out.push_back(c);
        return out;
    }
};

inline const std::vector<std::string>& trace_flag_columns() {
    static const std::vector<std::string> flags{"clamp_count", "angle_violation", "newton_iters", "share_err_P",
                                                "share_err_Q", "max_branch_angle", "event", "uncertified"};
    return flags;
}

/// Bus indices sorted by external id.
inline std::vector<Index> by_id(const NetworkCase& c, bool inverters_only) {
    std::vector<Index> out;
    for (Index i = 0; i < c.size(); ++i)
        if (!inverters_only || c.buses[static_cast<std::size_t>(i)].is_inverter()) out.push_back(i);
    std::sort(out.begin(), out.end(), [&](Index a, Index b) {
        return c.buses[static_cast<std::size_t>(a)].id < c.buses[static_cast<std::size_t>(b)].id;
    });
    return out;
}

inline std::vector<std::string> trace_columns(const NetworkCase& c) {
    std::vector<std::string> cols{"t"};
    const auto all = by_id(c, false);
    const auto inv = by_id(c, true);
    auto id = [&](Index i) { return std::to_string(c.buses[static_cast<std::size_t>(i)].id); };
    for (Index i : all) cols.push_back("theta_" + id(i));
    for (Index i : all) cols.push_back("E_" + id(i));
    for (Index i : inv) cols.push_back("P_" + id(i));
    for (Index i : inv) cols.push_back("Q_" + id(i));
    for (Index i : inv) cols.push_back("f_" + id(i));
    for (const auto& f : trace_flag_columns()) cols.push_back(f);
    return cols;
}

struct SimResult {
    Trace trace;
    VoltageProfile final_state;
    OperatingCondition final_condition;
    bool uncertified = false;
};

namespace detail {

inline double spread(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *hi - *lo;
}

}  // namespace detail

/// Initial operating point: the proportional-sharing solution when Newton
/// finds one, otherwise the load-bus solution from a flat inverter profile.
inline VoltageProfile initial_state(const NetworkCase& c, const AdmittanceMatrix& Y, const OperatingCondition& oc,
                                    const SimConfig& cfg) {
    try {
        return solve_sharing_point(c, Y, oc.loads, oc.active, cfg.e_init, std::nullopt, cfg.newton).x;
    } catch (const NumericalError&) {
        VoltageProfile x(c.size());
        solve_algebraic(Y, oc.loads, oc.algebraic(c.size()), x, cfg.newton);
        return x;
    }
}

inline SimResult run_scenario(const NetworkCase& c, const GainSet& g, const Scenario& sc, const SimConfig& cfg,
                              std::optional<VoltageProfile> x0 = std::nullopt) {
    const AdmittanceMatrix Y = build_admittance(c);
    OperatingCondition oc = initial_condition(c);
    VoltageProfile x = x0 ? *x0 : initial_state(c, Y, oc, cfg);
    if (x0) solve_algebraic(Y, oc.loads, oc.algebraic(c.size()), x, cfg.newton);

    SimResult res;
    res.trace.columns = trace_columns(c);
    const auto all = by_id(c, false);
    const auto inv = by_id(c, true);
    const long steps = std::lround(cfg.t_end / cfg.dt);
    std::size_t next_event = 0;
    StepResult last{};

    for (long k = 0; k <= steps; ++k) {
        const double t = static_cast<double>(k) * cfg.dt;
        bool event = false;
        while (next_event < sc.events.size() && sc.events[next_event].time <= t + 0.5 * cfg.dt) {
            apply_event(c, oc, sc.events[next_event]);
            ++next_event;
            event = true;
        }
        if (event) last.newton_iterations += solve_algebraic(Y, oc.loads, oc.algebraic(c.size()), x, cfg.newton).iterations;
        if (!oc.certified) res.uncertified = true;

        if (k % cfg.record_stride == 0 || k == steps) {
            VoltageProfile probe = x;
            const Evaluation ev = evaluate(c, Y, g, oc, probe, cfg.newton);
            std::vector<double> row;
            row.reserve(res.trace.columns.size());
            row.push_back(t);
            for (Index i : all) row.push_back(x.theta(i));
            for (Index i : all) row.push_back(x.E(i));
            for (Index i : inv) row.push_back(ev.P(i));
            for (Index i : inv) row.push_back(ev.Q(i));
            std::vector<double> sp, sq;
            for (Index i : inv) {
                auto it = std::find(oc.active.begin(), oc.active.end(), i);
                if (it == oc.active.end()) {
                    row.push_back(std::numeric_limits<double>::quiet_NaN());
                } else {
                    const Index a = static_cast<Index>(it - oc.active.begin());
                    row.push_back(frequency_of(ev.xdot(2 * a), c.omega0));
                }
            }
            for (Index i : oc.active) {
                sp.push_back(ev.P(i) / c.buses[static_cast<std::size_t>(i)].P_star);
                sq.push_back(ev.Q(i) / c.buses[static_cast<std::size_t>(i)].Q_star);
            }
            const double branch = max_branch_angle(c, x.theta);
            row.push_back(static_cast<double>(std::max(last.clamps, ev.clamps)));
            row.push_back(branch > c.gamma ? 1.0 : 0.0);
            row.push_back(static_cast<double>(last.newton_iterations));
            row.push_back(detail::spread(sp));
            row.push_back(detail::spread(sq));
            row.push_back(branch);
            row.push_back(event ? 1.0 : 0.0);
            row.push_back(oc.certified ? 0.0 : 1.0);
            res.trace.rows.push_back(std::move(row));
            last = {};
        }
        if (k == steps) break;
        const StepResult r = step(c, Y, g, oc, x, cfg);
        last.clamps = std::max(last.clamps, r.clamps);
        last.newton_iterations += r.newton_iterations;
    }
    res.final_state = x;
    res.final_condition = oc;
    return res;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_csv(std::ostream& os, const Trace& tr) {
    for (std::size_t k = 0; k < tr.columns.size(); ++k) os << (k ? "," : "") << tr.columns[k];
    os << '\n';
    for (const auto& row : tr.rows) {
        for (std::size_t k = 0; k < row.size(); ++k) os << (k ? "," : "") << format_double(row[k]);
        os << '\n';
    }
}

inline std::string to_csv(const Trace& tr) {
    std::ostringstream os;
    write_csv(os, tr);
    return os.str();
}

inline Trace read_csv(std::istream& is) {
    Trace tr;
    std::string line;
    if (!std::getline(is, line)) throw ParseError("line 1", "empty trace");
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) tr.columns.push_back(cell);
    }
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            if (cell == "nan") {
                row.push_back(std::numeric_limits<double>::quiet_NaN());
                continue;
            }
            try {
                std::size_t used = 0;
                row.push_back(std::stod(cell, &used));
                if (used != cell.size()) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw ParseError("line " + std::to_string(lineno), "bad number '" + cell + "'");
            }
        }
        if (row.size() != tr.columns.size())
            throw ParseError("line " + std::to_string(lineno), "expected " + std::to_string(tr.columns.size()) + " fields");
        tr.rows.push_back(std::move(row));
    }
    return tr;
}

// ---------------------------------------------------------------------------
// Metrics

struct TraceMetrics {
    double final_share_err_P = 0.0;
    double final_share_err_Q = 0.0;
    double max_freq_dev = 0.0;            // Hz, over all rows
    double final_freq_dev = 0.0;          // Hz, last row
    std::map<std::string, std::pair<double, double>> E_range;  // per E_ column
    double max_voltage_dev = 0.0;         // max |E - 1|
    double max_branch_angle = 0.0;        // rad
    int angle_violations = 0;
    int clamp_rows = 0;
    double settle_time_P = std::numeric_limits<double>::quiet_NaN();
    double settle_time_Q = std::numeric_limits<double>::quiet_NaN();
};

/// Summary of a trace. Settling time is the first t after which the sharing
/// error stays below `tol_P` / `tol_Q`.
inline TraceMetrics metrics(const Trace& tr, double f0 = 50.0, double tol_P = 1e-3, double tol_Q = 1e-2) {
    if (tr.rows.empty()) throw ValidationError("trace has no rows");
    TraceMetrics m;
    const auto fcols = tr.with_prefix("f_");
    const auto ecols = tr.with_prefix("E_");
    const Index ct = tr.column("t");
    const Index cp = tr.column("share_err_P");
    const Index cq = tr.column("share_err_Q");
    const Index cb = tr.column("max_branch_angle");
    const Index cv = tr.column("angle_violation");
    const Index cc = tr.column("clamp_count");
    std::vector<Index> fidx, eidx;
    for (const auto& f : fcols) fidx.push_back(tr.column(f));
    for (const auto& e : ecols) {
        eidx.push_back(tr.column(e));
        m.E_range[e] = {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    }
    for (const auto& row : tr.rows) {
        for (Index k : fidx) {
            const double v = row[static_cast<std::size_t>(k)];
            if (!std::isnan(v)) m.max_freq_dev = std::max(m.max_freq_dev, std::abs(v - f0));
        }
        for (std::size_t k = 0; k < eidx.size(); ++k) {
            const double v = row[static_cast<std::size_t>(eidx[k])];
            auto& r = m.E_range[ecols[k]];
            r.first = std::min(r.first, v);
            r.second = std::max(r.second, v);
            m.max_voltage_dev = std::max(m.max_voltage_dev, std::abs(v - 1.0));
        }
        m.max_branch_angle = std::max(m.max_branch_angle, row[static_cast<std::size_t>(cb)]);
        if (row[static_cast<std::size_t>(cv)] != 0.0) ++m.angle_violations;
        if (row[static_cast<std::size_t>(cc)] != 0.0) ++m.clamp_rows;
    }
    const auto& last = tr.rows.back();
    m.final_share_err_P = last[static_cast<std::size_t>(cp)];
    m.final_share_err_Q = last[static_cast<std::size_t>(cq)];
    for (Index k : fidx) {
        const double v = last[static_cast<std::size_t>(k)];
        if (!std::isnan(v)) m.final_freq_dev = std::max(m.final_freq_dev, std::abs(v - f0));
    }
    for (auto it = tr.rows.rbegin(); it != tr.rows.rend(); ++it) {
        if ((*it)[static_cast<std::size_t>(cp)] >= tol_P) break;
        m.settle_time_P = (*it)[static_cast<std::size_t>(ct)];
    }
    for (auto it = tr.rows.rbegin(); it != tr.rows.rend(); ++it) {
        if ((*it)[static_cast<std::size_t>(cq)] >= tol_Q) break;
        m.settle_time_Q = (*it)[static_cast<std::size_t>(ct)];
    }
    return m;
}

}  // namespace mgrid
