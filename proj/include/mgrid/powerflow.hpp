#pragma once

// Power-flow injections, Jacobians, load-bus KCL solution, kappa estimate and
// the existence-condition checker.
//
// Jacobians use an interleaved state layout (theta_0, E_0, theta_1, E_1, ...)
// and row layout (P_0, Q_0, P_1, Q_1, ...). With inverters first in bus order,
// J_I and J_L are the leading / trailing column ranges of the inverter rows.

#include "errors.hpp"
#include "linalg.hpp"
#include "netmodel.hpp"

#include <Eigen/LU>

#include <cmath>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace mgrid {

struct VoltageProfile {
    Vector theta;
    Vector E;

    VoltageProfile() = default;
    explicit VoltageProfile(Index n) : theta(Vector::Zero(n)), E(Vector::Ones(n)) {}
    VoltageProfile(Vector t, Vector e) : theta(std::move(t)), E(std::move(e)) {}

    Index size() const { return theta.size(); }

    /// Interleaved state vector (theta_0, E_0, ...).
    Vector stacked() const {
        Vector x(2 * size());
        for (Index i = 0; i < size(); ++i) {
            x(2 * i) = theta(i);
            x(2 * i + 1) = E(i);
        }
        return x;
    }

    static VoltageProfile from_stacked(const Vector& x) {
        VoltageProfile v;
        v.theta.resize(x.size() / 2);
        v.E.resize(x.size() / 2);
        for (Index i = 0; i < v.theta.size(); ++i) {
            v.theta(i) = x(2 * i);
            v.E(i) = x(2 * i + 1);
        }
        return v;
    }
};

/// Antisymmetric matrix of angle differences theta_i - theta_j.
inline Matrix angle_differences(const Vector& theta) {
    const Index n = theta.size();
    Matrix d(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) d(i, j) = theta(i) - theta(j);
    return d;
}

/// Largest |theta_i - theta_j| over lines.
inline double max_branch_angle(const NetworkCase& c, const Vector& theta) {
    double worst = 0.0;
    for (const auto& l : c.lines) worst = std::max(worst, std::abs(theta(l.from) - theta(l.to)));
    return worst;
}

/// Membership in the voltage box X_E.
inline bool in_voltage_box(const NetworkCase& c, const VoltageProfile& x, double tol = 0.0) {
    for (Index i = 0; i < c.size(); ++i) {
        const Bus& b = c.buses[static_cast<std::size_t>(i)];
        if (x.E(i) < b.E_min - tol || x.E(i) > b.E_max + tol) return false;
    }
    return true;
}

/// Membership in the branch-angle set X_Theta.
inline bool in_angle_set(const NetworkCase& c, const VoltageProfile& x, double tol = 0.0) {
    return max_branch_angle(c, x.theta) <= c.gamma + tol;
}

inline bool in_security_set(const NetworkCase& c, const VoltageProfile& x, double tol = 0.0) {
    return in_voltage_box(c, x, tol) && in_angle_set(c, x, tol);
}

struct InjectionVector {
    Vector P;
    Vector Q;
    Vector S;  // [P_i/P*_i, Q_i/Q*_i] stacked over inverter buses
};

/// P and Q at every bus for per-pair angle differences `delta`.
inline void power_terms(const AdmittanceMatrix& Y, const Vector& E, const Matrix& delta, Vector& P, Vector& Q) {
    const Index n = Y.size();
    P = Vector::Zero(n);
    Q = Vector::Zero(n);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) {
            const double y = Y.magnitude(i, j);
            if (y == 0.0) continue;
            const double a = (i == j ? 0.0 : delta(i, j)) - Y.angle(i, j);
            const double w = E(i) * y * E(j);
            P(i) += w * std::cos(a);
            Q(i) += w * std::sin(a);
        }
    }
}

inline Vector normalized_injections(const NetworkCase& c, const Vector& P, const Vector& Q) {
    const Index ni = c.n_inverters();
    Vector S(2 * ni);
    for (Index i = 0; i < ni; ++i) {
        const Bus& b = c.buses[static_cast<std::size_t>(i)];
        S(2 * i) = P(i) / b.P_star;
        S(2 * i + 1) = Q(i) / b.Q_star;
    }
    return S;
}

inline InjectionVector injections(const NetworkCase& c, const AdmittanceMatrix& Y, const VoltageProfile& x) {
    InjectionVector out;
    power_terms(Y, x.E, angle_differences(x.theta), out.P, out.Q);
    out.S = normalized_injections(c, out.P, out.Q);
    return out;
}

/// d(P, Q)/d(theta, E) for all buses, interleaved, evaluated at per-pair
/// angle differences `delta` (which need not derive from a single theta).
inline Matrix pq_jacobian(const AdmittanceMatrix& Y, const Vector& E, const Matrix& delta) {
    const Index n = Y.size();
    Matrix J = Matrix::Zero(2 * n, 2 * n);
    for (Index i = 0; i < n; ++i) {
        const Index p = 2 * i;
        const Index q = 2 * i + 1;
        const double yii = Y.magnitude(i, i);
        const double phii = Y.angle(i, i);
        J(p, 2 * i + 1) = 2.0 * E(i) * yii * std::cos(phii);
        J(q, 2 * i + 1) = -2.0 * E(i) * yii * std::sin(phii);
        for (Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const double y = Y.magnitude(i, j);
            if (y == 0.0) continue;
            const double a = delta(i, j) - Y.angle(i, j);
            const double ca = std::cos(a);
            const double sa = std::sin(a);
            const double w = E(i) * y * E(j);
            J(p, 2 * i) -= w * sa;
            J(p, 2 * j) = w * sa;
            J(p, 2 * i + 1) += E(j) * y * ca;
            J(p, 2 * j + 1) = E(i) * y * ca;
            J(q, 2 * i) += w * ca;
            J(q, 2 * j) = -w * ca;
            J(q, 2 * i + 1) += E(j) * y * sa;
            J(q, 2 * j + 1) = E(i) * y * sa;
        }
    }
    return J;
}

inline Matrix pq_jacobian(const AdmittanceMatrix& Y, const VoltageProfile& x) {
    return pq_jacobian(Y, x.E, angle_differences(x.theta));
}

struct JacobianPair {
    Matrix J_I;  // dS_I/dx_I, 2n_I x 2n_I
    Matrix J_L;  // dS_I/dx_L, 2n_I x 2n_L
};

/// Splits a full (P, Q) Jacobian into the normalized inverter blocks.
inline JacobianPair split_jacobian(const NetworkCase& c, const Matrix& full) {
    const Index ni = c.n_inverters();
    const Index nl = c.n_loads();
    Vector scale(2 * ni);
    for (Index i = 0; i < ni; ++i) {
        scale(2 * i) = 1.0 / c.buses[static_cast<std::size_t>(i)].P_star;
        scale(2 * i + 1) = 1.0 / c.buses[static_cast<std::size_t>(i)].Q_star;
    }
    JacobianPair out;
    out.J_I = scale.asDiagonal() * full.topLeftCorner(2 * ni, 2 * ni);
    out.J_L = scale.asDiagonal() * full.topRightCorner(2 * ni, 2 * nl);
    return out;
}

inline JacobianPair jacobians(const NetworkCase& c, const AdmittanceMatrix& Y, const VoltageProfile& x) {
    return split_jacobian(c, pq_jacobian(Y, x));
}

// ---------------------------------------------------------------------------
// Algebraic load-bus solution

struct NewtonOptions {
    double tol = 1e-10;
    int max_iter = 50;
};

struct NewtonReport {
    int iterations = 0;
    double residual = 0.0;
};

namespace detail {

/// KCL residuals (P_i + demand, Q_i + demand) at the algebraic buses.
inline Vector kcl_residual(const AdmittanceMatrix& Y, const std::vector<Load>& loads,
                           const std::vector<Index>& algebraic, const VoltageProfile& x) {
    Vector P, Q;
    power_terms(Y, x.E, angle_differences(x.theta), P, Q);
    Vector r(2 * static_cast<Index>(algebraic.size()));
    for (std::size_t k = 0; k < algebraic.size(); ++k) {
        const Index i = algebraic[k];
        const Load& ld = loads[static_cast<std::size_t>(i)];
        r(2 * static_cast<Index>(k)) = P(i) + ld.active(x.E(i));
        r(2 * static_cast<Index>(k) + 1) = Q(i) + ld.reactive(x.E(i));
    }
    return r;
}

inline std::string format_condition(double cond) {
    std::ostringstream os;
    os << "singular Newton matrix (condition estimate " << cond << ")";
    return os.str();
}

}  // namespace detail

/// Newton solve of the KCL equations for the buses in `algebraic`; every
/// other bus keeps its value in `x`. `x` carries the warm start and receives
/// the solution. Throws NumericalError on failure.
inline NewtonReport solve_algebraic(const AdmittanceMatrix& Y, const std::vector<Load>& loads,
                                    const std::vector<Index>& algebraic, VoltageProfile& x,
                                    const NewtonOptions& opt = {}) {
    NewtonReport rep;
    const Index m = static_cast<Index>(algebraic.size());
    if (m == 0) return rep;
    Vector r = detail::kcl_residual(Y, loads, algebraic, x);
    double norm = r.lpNorm<Eigen::Infinity>();
    while (norm > opt.tol) {
        if (rep.iterations >= opt.max_iter) {
            rep.residual = norm;
            throw NumericalError("load-bus Newton did not converge after " + std::to_string(opt.max_iter) +
                                     " iterations",
                                 norm);
        }
        const Matrix full = pq_jacobian(Y, x);
        Matrix A(2 * m, 2 * m);
        for (Index a = 0; a < m; ++a) {
            const Index i = algebraic[static_cast<std::size_t>(a)];
            for (Index b = 0; b < m; ++b) {
                const Index j = algebraic[static_cast<std::size_t>(b)];
                A.block<2, 2>(2 * a, 2 * b) = full.block<2, 2>(2 * i, 2 * j);
            }
            const Load& ld = loads[static_cast<std::size_t>(i)];
            A(2 * a, 2 * a + 1) += ld.dactive_dE(x.E(i));
            A(2 * a + 1, 2 * a + 1) += ld.dreactive_dE(x.E(i));
        }
        Eigen::PartialPivLU<Matrix> lu(A);
        const double rc = lu.rcond();
        if (!(rc > 1e-14)) throw NumericalError(detail::format_condition(1.0 / rc), norm, 1.0 / rc);
        const Vector step = lu.solve(-r);

        double alpha = 1.0;
        VoltageProfile trial = x;
        Vector rt;
        double nt = 0.0;
        for (int halving = 0; halving < 30; ++halving) {
            trial = x;
            for (Index a = 0; a < m; ++a) {
                const Index i = algebraic[static_cast<std::size_t>(a)];
                trial.theta(i) += alpha * step(2 * a);
                trial.E(i) += alpha * step(2 * a + 1);
            }
            rt = detail::kcl_residual(Y, loads, algebraic, trial);
            nt = rt.lpNorm<Eigen::Infinity>();
            if (nt < norm && std::isfinite(nt)) break;
            alpha *= 0.5;
        }
        x = trial;
        r = rt;
        norm = nt;
        ++rep.iterations;
    }
    rep.residual = norm;
    return rep;
}

/// Load sub-profile x_L solving KCL for the given inverter sub-profile.
/// Flat start (theta 0, E 1) unless `x_L_guess` is supplied.
inline VoltageProfile solve_loads(const NetworkCase& c, const AdmittanceMatrix& Y, const VoltageProfile& x_I,
                                  const std::optional<VoltageProfile>& x_L_guess = std::nullopt,
                                  const NewtonOptions& opt = {}, NewtonReport* report = nullptr) {
    const Index ni = c.n_inverters();
    const Index nl = c.n_loads();
    VoltageProfile x(c.size());
    x.theta.head(ni) = x_I.theta;
    x.E.head(ni) = x_I.E;
    if (x_L_guess) {
        x.theta.tail(nl) = x_L_guess->theta;
        x.E.tail(nl) = x_L_guess->E;
    }
    std::vector<Index> alg;
    for (Index i = ni; i < c.size(); ++i) alg.push_back(i);
    const NewtonReport rep = solve_algebraic(Y, c.base_loads(), alg, x, opt);
    if (report) *report = rep;
    return VoltageProfile(x.theta.tail(nl), x.E.tail(nl));
}

// ---------------------------------------------------------------------------
// Proportional-sharing operating point

/// Solves for a profile where the active inverters share P and Q in exact
/// proportion (P_i = rho_P P*_i, Q_i = rho_Q Q*_i), with the first active
/// inverter as angle reference and the mean active-inverter voltage pinned
/// to `e_mean`. Every non-active bus is algebraic (KCL with `loads`).
struct SharingPoint {
    VoltageProfile x;
    double rho_P = 0.0;
    double rho_Q = 0.0;
    int iterations = 0;
};

inline SharingPoint solve_sharing_point(const NetworkCase& c, const AdmittanceMatrix& Y,
                                        const std::vector<Load>& loads, const std::vector<Index>& active,
                                        double e_mean = 1.0, const std::optional<VoltageProfile>& guess = std::nullopt,
                                        const NewtonOptions& opt = {}) {
    const Index n = c.size();
    const Index na = static_cast<Index>(active.size());
    if (na == 0) throw ValidationError("no active inverter");
    std::vector<bool> is_active(static_cast<std::size_t>(n), false);
    for (Index i : active) is_active[static_cast<std::size_t>(i)] = true;
    std::vector<Index> alg;
    for (Index i = 0; i < n; ++i)
        if (!is_active[static_cast<std::size_t>(i)]) alg.push_back(i);
    const Index m = static_cast<Index>(alg.size());

    // unknown layout: [theta of active[1..], E of active, (theta, E) of alg, rho_P, rho_Q]
    const Index nu = (na - 1) + na + 2 * m + 2;
    VoltageProfile x = guess ? *guess : VoltageProfile(n);
    x.theta.array() -= x.theta(active[0]);
    double rho_P = 0.0;
    double rho_Q = 0.0;
    {
        Vector P, Q;
        power_terms(Y, x.E, angle_differences(x.theta), P, Q);
        double sp = 0, sq = 0, pp = 0, qq = 0;
        for (Index i : active) {
            sp += P(i);
            sq += Q(i);
            pp += c.buses[static_cast<std::size_t>(i)].P_star;
            qq += c.buses[static_cast<std::size_t>(i)].Q_star;
        }
        rho_P = sp / pp;
        rho_Q = sq / qq;
    }

    auto residual = [&](const VoltageProfile& v, double rp, double rq) {
        Vector P, Q;
        power_terms(Y, v.E, angle_differences(v.theta), P, Q);
        Vector r(nu);
        Index k = 0;
        for (Index i : active) {
            const Bus& b = c.buses[static_cast<std::size_t>(i)];
            r(k++) = P(i) - rp * b.P_star;
            r(k++) = Q(i) - rq * b.Q_star;
        }
        for (Index i : alg) {
            const Load& ld = loads[static_cast<std::size_t>(i)];
            r(k++) = P(i) + ld.active(v.E(i));
            r(k++) = Q(i) + ld.reactive(v.E(i));
        }
        double mean = 0.0;
        for (Index i : active) mean += v.E(i);
        r(k++) = mean / static_cast<double>(na) - e_mean;
        return r;
    };

    auto apply = [&](VoltageProfile& v, double& rp, double& rq, const Vector& s, double alpha) {
        Index k = 0;
        for (Index a = 1; a < na; ++a) v.theta(active[static_cast<std::size_t>(a)]) += alpha * s(k++);
        for (Index i : active) v.E(i) += alpha * s(k++);
        for (Index i : alg) {
            v.theta(i) += alpha * s(k++);
            v.E(i) += alpha * s(k++);
        }
        rp += alpha * s(k++);
        rq += alpha * s(k++);
    };

    SharingPoint out;
    Vector r = residual(x, rho_P, rho_Q);
    double norm = r.lpNorm<Eigen::Infinity>();
    int it = 0;
    while (norm > opt.tol) {
        if (it >= opt.max_iter)
            throw NumericalError("sharing-point Newton did not converge after " + std::to_string(opt.max_iter) +
                                     " iterations",
                                 norm);
        const Matrix full = pq_jacobian(Y, x);
        // column index of each unknown in the full interleaved state
        std::vector<Index> cols;
        for (Index a = 1; a < na; ++a) cols.push_back(2 * active[static_cast<std::size_t>(a)]);
        for (Index i : active) cols.push_back(2 * i + 1);
        for (Index i : alg) {
            cols.push_back(2 * i);
            cols.push_back(2 * i + 1);
        }
        std::vector<Index> rows;
        for (Index i : active) {
            rows.push_back(2 * i);
            rows.push_back(2 * i + 1);
        }
        for (Index i : alg) {
            rows.push_back(2 * i);
            rows.push_back(2 * i + 1);
        }
        Matrix A = Matrix::Zero(nu, nu);
        const Index ns = static_cast<Index>(cols.size());
        for (Index a = 0; a < static_cast<Index>(rows.size()); ++a)
            for (Index b = 0; b < ns; ++b) A(a, b) = full(rows[static_cast<std::size_t>(a)], cols[static_cast<std::size_t>(b)]);
        Index k = 0;
        for (Index i : active) {
            A(k++, ns) = -c.buses[static_cast<std::size_t>(i)].P_star;
            A(k++, ns + 1) = -c.buses[static_cast<std::size_t>(i)].Q_star;
        }
        for (Index a = 0; a < m; ++a) {
            const Index i = alg[static_cast<std::size_t>(a)];
            const Load& ld = loads[static_cast<std::size_t>(i)];
            const Index row = 2 * na + 2 * a;
            const Index col = (na - 1) + na + 2 * a + 1;
            A(row, col) += ld.dactive_dE(x.E(i));
            A(row + 1, col) += ld.dreactive_dE(x.E(i));
        }
        for (Index a = 0; a < na; ++a) A(nu - 1, (na - 1) + a) = 1.0 / static_cast<double>(na);

        Eigen::PartialPivLU<Matrix> lu(A);
        const double rc = lu.rcond();
        if (!(rc > 1e-14)) throw NumericalError(detail::format_condition(1.0 / rc), norm, 1.0 / rc);
        const Vector s = lu.solve(-r);
        double alpha = 1.0;
        VoltageProfile trial;
        double tp = 0, tq = 0, nt = 0;
        Vector rt;
        for (int h = 0; h < 30; ++h) {
            trial = x;
            tp = rho_P;
            tq = rho_Q;
            apply(trial, tp, tq, s, alpha);
            rt = residual(trial, tp, tq);
            nt = rt.lpNorm<Eigen::Infinity>();
            if (nt < norm && std::isfinite(nt)) break;
            alpha *= 0.5;
        }
        x = trial;
        rho_P = tp;
        rho_Q = tq;
        r = rt;
        norm = nt;
        ++it;
    }
    out.x = x;
    out.rho_P = rho_P;
    out.rho_Q = rho_Q;
    out.iterations = it;
    return out;
}

// ---------------------------------------------------------------------------
// kappa estimate

struct KappaReport {
    double kappa = 0.0;
    Index worst_sample = -1;
    std::vector<Index> rank_deficient;  // sample indices
};

/// ||f_L^+ f_I||_2 at one profile, where 0 = f_I dx_I + f_L dx_L is the
/// linearized load-bus KCL.
inline double kappa_at(const NetworkCase& c, const AdmittanceMatrix& Y, const std::vector<Load>& loads,
                       const VoltageProfile& x, bool* rank_deficient = nullptr) {
    const Index ni = c.n_inverters();
    const Index nl = c.n_loads();
    if (rank_deficient) *rank_deficient = false;
    if (nl == 0) return 0.0;
    const Matrix full = pq_jacobian(Y, x);
    const Matrix fI = full.bottomLeftCorner(2 * nl, 2 * ni);
    Matrix fL = full.bottomRightCorner(2 * nl, 2 * nl);
    for (Index a = 0; a < nl; ++a) {
        const Index i = ni + a;
        const Load& ld = loads[static_cast<std::size_t>(i)];
        fL(2 * a, 2 * a + 1) += ld.dactive_dE(x.E(i));
        fL(2 * a + 1, 2 * a + 1) += ld.dreactive_dE(x.E(i));
    }
    return linalg::spectral_norm(linalg::pseudo_inverse(fL, 1e-9, rank_deficient) * fI);
}

inline KappaReport kappa_bound(const NetworkCase& c, const AdmittanceMatrix& Y, const std::vector<Load>& loads,
                               const std::vector<VoltageProfile>& samples) {
    if (samples.empty()) throw ValidationError("kappa_bound needs a nonempty sample set");
    KappaReport rep;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        bool deficient = false;
        const double k = kappa_at(c, Y, loads, samples[s], &deficient);
        if (deficient) rep.rank_deficient.push_back(static_cast<Index>(s));
        if (k > rep.kappa || rep.worst_sample < 0) {
            rep.kappa = std::max(rep.kappa, k);
            rep.worst_sample = static_cast<Index>(s);
        }
    }
    return rep;
}

inline KappaReport kappa_bound(const NetworkCase& c, const AdmittanceMatrix& Y,
                               const std::vector<VoltageProfile>& samples) {
    return kappa_bound(c, Y, c.base_loads(), samples);
}

// ---------------------------------------------------------------------------
// Existence conditions

struct PowerRange {
    double P_min = 0.0;
    double P_max = 0.0;
    std::optional<double> Q_min;
    std::optional<double> Q_max;
};

enum class ConditionStatus { pass, fail, not_checked };

struct ConditionResult {
    char label = 'a';
    ConditionStatus status = ConditionStatus::not_checked;
    std::string detail;
    std::vector<int> offenders;  // bus ids (or flattened id pairs for lines)
};

struct ExistenceReport {
    std::vector<ConditionResult> conditions;
    bool all_pass() const {
        for (const auto& c : conditions)
            if (c.status == ConditionStatus::fail) return false;
        return true;
    }
    const ConditionResult& at(char label) const {
        for (const auto& c : conditions)
            if (c.label == label) return c;
        throw ValidationError(std::string("no condition ") + label);
    }
};

inline const char* to_string(ConditionStatus s) {
    switch (s) {
        case ConditionStatus::pass: return "pass";
        case ConditionStatus::fail: return "fail";
        default: return "not checked";
    }
}

/// Sufficient conditions (a)-(f) for a power-flow solution inside X_c.
/// `ranges` maps bus id to the user-supplied serviceability range.
inline ExistenceReport check_existence(const NetworkCase& c, const std::map<int, PowerRange>& ranges = {}) {
    ExistenceReport rep;
    const AdmittanceMatrix Y = build_admittance(c);
    const Index n = c.size();
    const Index ni = c.n_inverters();
    auto B = [&](Index j, Index k) { return Y.magnitude(j, k) * std::sin(Y.angle(j, k)); };
    auto id = [&](Index i) { return c.buses[static_cast<std::size_t>(i)].id; };

    ConditionResult a{'a', ConditionStatus::pass, "electrical graph connected", {}};
    if (!graph::connected(n, electrical_edges(c))) a.status = ConditionStatus::fail;
    rep.conditions.push_back(a);

    ConditionResult b{'b', ConditionStatus::pass, "admittance matrix symmetric", {}};
    if ((Y.Y - Y.Y.transpose()).cwiseAbs().maxCoeff() != 0.0) b.status = ConditionStatus::fail;
    rep.conditions.push_back(b);

    double emin = std::numeric_limits<double>::infinity();
    double emax = 0.0;
    for (const auto& bus : c.buses) {
        emin = std::min(emin, bus.E_min);
        emax = std::max(emax, bus.E_max);
    }
    ConditionResult cc{'c', ConditionStatus::pass, "", {}};
    {
        std::ostringstream os;
        os << "2*min E_min = " << 2.0 * emin << " vs max E_max = " << emax;
        cc.detail = os.str();
    }
    if (!(2.0 * emin > emax)) {
        cc.status = ConditionStatus::fail;
        for (Index i = 0; i < n; ++i)
            if (c.buses[static_cast<std::size_t>(i)].E_min == emin) cc.offenders.push_back(id(i));
    }
    rep.conditions.push_back(cc);

    ConditionResult d{'d', ConditionStatus::pass, "I_max <= (pi/2) B_jk per line", {}};
    for (const auto& l : c.lines) {
        if (!(l.I_max <= std::numbers::pi / 2.0 * B(l.from, l.to))) {
            d.status = ConditionStatus::fail;
            d.offenders.push_back(id(l.from));
            d.offenders.push_back(id(l.to));
        }
    }
    rep.conditions.push_back(d);

    ConditionResult e{'e', ConditionStatus::pass, "load-bus susceptance dominance", {}};
    bool any_strict = false;
    for (Index j = ni; j < n; ++j) {
        double lhs_sum = -B(j, j);
        for (Index k = 0; k < ni; ++k) lhs_sum += B(j, k);
        const double lhs = c.buses[static_cast<std::size_t>(j)].E_min * lhs_sum;
        double rhs = 0.0;
        for (Index k = 0; k < n; ++k)
            if (k != j) rhs += B(j, k) * c.buses[static_cast<std::size_t>(k)].E_max;
        if (lhs < rhs) {
            e.status = ConditionStatus::fail;
            e.offenders.push_back(id(j));
        } else if (lhs > rhs) {
            any_strict = true;
        }
    }
    if (n > ni && !any_strict && e.status == ConditionStatus::pass) {
        e.status = ConditionStatus::fail;
        e.detail += " (no load bus satisfies the strict inequality)";
    }
    rep.conditions.push_back(e);

    ConditionResult f{'f', ConditionStatus::not_checked, "no serviceability ranges supplied", {}};
    if (!ranges.empty()) {
        f.status = ConditionStatus::pass;
        f.detail = "checked against supplied ranges";
        for (Index i = 0; i < n; ++i) {
            const Bus& bus = c.buses[static_cast<std::size_t>(i)];
            auto it = ranges.find(bus.id);
            if (it == ranges.end()) continue;
            const PowerRange& r = it->second;
            const double p = bus.is_inverter() ? bus.P_star : -bus.load.active(1.0);
            bool ok = p >= r.P_min && p <= r.P_max;
            if (!bus.is_inverter() && r.Q_min && r.Q_max) {
                const double q = -bus.load.reactive(1.0);
                ok = ok && q >= *r.Q_min && q <= *r.Q_max;
            }
            if (!ok) {
                f.status = ConditionStatus::fail;
                f.offenders.push_back(bus.id);
            }
        }
    }
    rep.conditions.push_back(f);
    return rep;
}

}  // namespace mgrid
