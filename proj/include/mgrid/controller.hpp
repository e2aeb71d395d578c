#pragma once

// Distributed consensus control law with rate saturation and voltage-bound
// clamping.

#include "errors.hpp"
#include "linalg.hpp"
#include "netmodel.hpp"
#include "powerflow.hpp"

#include <json.hpp>

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

namespace mgrid {

using Matrix2 = Eigen::Matrix2d;

struct RateLimits {
    double theta_dot_max = 0.3 * 2.0 * std::numbers::pi;  // rad/s
    double E_dot_max = 0.05;                               // p.u./s
    bool operator==(const RateLimits&) const = default;
};

/// Per-inverter 2x2 gain blocks, indexed like the case's inverter buses.
/// Row 1 is in rad/s per unit of S, row 2 in p.u./s per unit of S.
struct GainSet {
    std::vector<Matrix2> blocks;
    RateLimits limits;

    Index size() const { return static_cast<Index>(blocks.size()); }

    /// Block-diagonal K restricted to the given inverter indices.
    Matrix stacked(const std::vector<Index>& active) const {
        const Index m = static_cast<Index>(active.size());
        Matrix K = Matrix::Zero(2 * m, 2 * m);
        for (Index a = 0; a < m; ++a) K.block<2, 2>(2 * a, 2 * a) = blocks[static_cast<std::size_t>(active[static_cast<std::size_t>(a)])];
        return K;
    }

    Matrix stacked() const {
        std::vector<Index> all(blocks.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Index>(i);
        return stacked(all);
    }
};

/// Alternating consensus patterns v_p = [1,0,1,0,...], v_q = [0,1,0,1,...].
inline Vector consensus_vp(Index n_inv) {
    Vector v = Vector::Zero(2 * n_inv);
    for (Index i = 0; i < n_inv; ++i) v(2 * i) = 1.0;
    return v;
}

inline Vector consensus_vq(Index n_inv) {
    Vector v = Vector::Zero(2 * n_inv);
    for (Index i = 0; i < n_inv; ++i) v(2 * i + 1) = 1.0;
    return v;
}

/// Distance from S to span{v_p, v_q}.
inline double consensus_distance(const Vector& S) {
    const Index n = S.size() / 2;
    if (n == 0) return 0.0;
    double mp = 0, mq = 0;
    for (Index i = 0; i < n; ++i) {
        mp += S(2 * i);
        mq += S(2 * i + 1);
    }
    mp /= static_cast<double>(n);
    mq /= static_cast<double>(n);
    double acc = 0.0;
    for (Index i = 0; i < n; ++i) acc += std::pow(S(2 * i) - mp, 2) + std::pow(S(2 * i + 1) - mq, 2);
    return std::sqrt(acc);
}

/// Checks that every null vector of the stacked K lies in the consensus space.
inline bool null_space_in_consensus(const GainSet& g, double tol = 1e-12) {
    const Matrix K = g.stacked();
    Eigen::JacobiSVD<Matrix> svd(K, Eigen::ComputeFullV);
    const Vector& s = svd.singularValues();
    const double cutoff = tol * std::max(1.0, s.size() ? s(0) : 0.0);
    for (Index k = 0; k < s.size(); ++k) {
        if (s(k) > cutoff) continue;
        const Vector v = svd.matrixV().col(k);
        if (consensus_distance(v) > 1e-9) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Gains file

/// Loads gains JSON. Entries are [K11, K12, K21, K22] in mrad/s and mV/s;
/// mV/s are converted to p.u./s through the file's `voltage_base_mV`.
inline GainSet parse_gains(const NetworkCase& c, const std::string& text) {
    Json doc;
    try {
        doc = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ParseError("byte " + std::to_string(e.byte), e.what());
    }
    const Json& units = detail::require(doc, "units", "$");
    const double vbase = detail::number(units, "voltage_base_mV", "$.units");
    if (!(vbase > 0.0)) throw ValidationError("$.units.voltage_base_mV must be positive");
    if (units.value("theta_row", std::string("mrad/s")) != "mrad/s" ||
        units.value("E_row", std::string("mV/s")) != "mV/s")
        throw ParseError("$.units", "gain rows must be mrad/s and mV/s");

    GainSet g;
    if (doc.contains("rate_limits")) {
        const Json& jl = doc.at("rate_limits");
        g.limits.theta_dot_max =
            2.0 * std::numbers::pi * detail::number(jl, "f_dev_max_hz", "$.rate_limits");
        g.limits.E_dot_max = detail::number(jl, "E_dot_max", "$.rate_limits");
        if (!(g.limits.theta_dot_max > 0.0 && g.limits.E_dot_max > 0.0))
            throw ValidationError("rate limits must be positive");
    }
    const Json& jg = detail::require(doc, "gains", "$");
    if (!jg.is_object()) throw ParseError("$.gains", "expected an object keyed by bus id");
    const Index ni = c.n_inverters();
    g.blocks.assign(static_cast<std::size_t>(ni), Matrix2::Zero());
    std::vector<bool> seen(static_cast<std::size_t>(ni), false);
    for (auto it = jg.begin(); it != jg.end(); ++it) {
        const std::string path = "$.gains." + it.key();
        int id = 0;
        try {
            id = std::stoi(it.key());
        } catch (const std::exception&) {
            throw ParseError(path, "key must be a bus id");
        }
        const Index i = c.index_of(id);
        if (!c.buses[static_cast<std::size_t>(i)].is_inverter())
            throw ValidationError(path + ": bus " + it.key() + " is not an inverter");
        const Json& v = it.value();
        if (!v.is_array() || v.size() != 4) throw ParseError(path, "expected [K11, K12, K21, K22]");
        for (const auto& x : v)
            if (!x.is_number()) throw ParseError(path, "gain entries must be numbers");
        Matrix2 K;
        K << v[0].get<double>() * 1e-3, v[1].get<double>() * 1e-3, v[2].get<double>() / vbase,
            v[3].get<double>() / vbase;
        g.blocks[static_cast<std::size_t>(i)] = K;
        seen[static_cast<std::size_t>(i)] = true;
    }
    for (Index i = 0; i < ni; ++i)
        if (!seen[static_cast<std::size_t>(i)])
            throw ValidationError("missing gain block for inverter bus " +
                                  std::to_string(c.buses[static_cast<std::size_t>(i)].id));
    return g;
}

inline Json gains_to_json(const NetworkCase& c, const GainSet& g, double voltage_base_mV = 1000.0) {
    Json doc;
    doc["units"] = {{"theta_row", "mrad/s"},
                    {"E_row", "mV/s"},
                    {"voltage_base_mV", voltage_base_mV},
                    {"note", "1 p.u. voltage = voltage_base_mV mV; E-row entries are divided by it"}};
    doc["rate_limits"] = {{"f_dev_max_hz", g.limits.theta_dot_max / (2.0 * std::numbers::pi)},
                          {"E_dot_max", g.limits.E_dot_max}};
    Json jg = Json::object();
    for (Index i = 0; i < g.size(); ++i) {
        const Matrix2& K = g.blocks[static_cast<std::size_t>(i)];
        jg[std::to_string(c.buses[static_cast<std::size_t>(i)].id)] = {K(0, 0) * 1e3, K(0, 1) * 1e3,
                                                                       K(1, 0) * voltage_base_mV,
                                                                       K(1, 1) * voltage_base_mV};
    }
    doc["gains"] = jg;
    return doc;
}

// ---------------------------------------------------------------------------
// Control law

struct ControlState {
    std::vector<Index> active;  // active inverter indices, ascending
    CommLaplacian comm;

    static ControlState full(const NetworkCase& c) {
        ControlState s;
        s.active = c.inverter_indices();
        s.comm = laplacian(c.comm_edges, s.active);
        return s;
    }
};

/// Elementwise rate saturation, in place. Returns the number of clipped entries.
inline int saturate(Vector& xdot, const RateLimits& lim) {
    int clipped = 0;
    for (Index k = 0; k < xdot.size(); ++k) {
        const double bound = (k % 2 == 0) ? lim.theta_dot_max : lim.E_dot_max;
        if (xdot(k) > bound) {
            xdot(k) = bound;
            ++clipped;
        } else if (xdot(k) < -bound) {
            xdot(k) = -bound;
            ++clipped;
        }
    }
    return clipped;
}

/// Unsaturated K L_f-bar S over the active inverters.
inline Vector consensus_term(const GainSet& g, const ControlState& st, const Vector& S_active) {
    const Index m = static_cast<Index>(st.active.size());
    if (S_active.size() != 2 * m || st.comm.L.rows() != m)
        throw ValidationError("control_derivative: dimension mismatch");
    Vector out(2 * m);
    for (Index a = 0; a < m; ++a) {
        Eigen::Vector2d acc = Eigen::Vector2d::Zero();
        for (Index b = 0; b < m; ++b) {
            const double l = st.comm.L(a, b);
            if (l != 0.0) acc += l * S_active.segment<2>(2 * b);
        }
        out.segment<2>(2 * a) = g.blocks[static_cast<std::size_t>(st.active[static_cast<std::size_t>(a)])] * acc;
    }
    return out;
}

/// Saturated control derivative (theta-dot in rad/s, E-dot in p.u./s).
inline Vector control_derivative(const GainSet& g, const ControlState& st, const Vector& S_active,
                                 int* clipped = nullptr) {
    Vector xdot = consensus_term(g, st, S_active);
    const int n = saturate(xdot, g.limits);
    if (clipped) *clipped = n;
    return xdot;
}

/// Zeroes E-dot entries that push an inverter past its voltage bound.
/// Returns the number of clamped inverters.
inline int project_security(const NetworkCase& c, const std::vector<Index>& active, const Vector& E_active,
                            Vector& xdot, double tol = 0.0) {
    int clamps = 0;
    for (std::size_t a = 0; a < active.size(); ++a) {
        const Bus& b = c.buses[static_cast<std::size_t>(active[a])];
        const Index k = 2 * static_cast<Index>(a) + 1;
        const double E = E_active(static_cast<Index>(a));
        if ((E >= b.E_max - tol && xdot(k) > 0.0) || (E <= b.E_min + tol && xdot(k) < 0.0)) {
            xdot(k) = 0.0;
            ++clamps;
        }
    }
    return clamps;
}

inline double frequency_of(double theta_dot, double omega0) { return (omega0 + theta_dot) / (2.0 * std::numbers::pi); }

}  // namespace mgrid
