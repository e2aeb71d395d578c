#pragma once

// Reference computations for the tests. Written against raw JSON and plain
// complex arithmetic so that they share no code path with the library.

#include <mgrid/linalg.hpp>

#include <json.hpp>

#include <cmath>
#include <complex>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifndef MGRID_DATA_DIR
#define MGRID_DATA_DIR "data"
#endif

namespace oracle {

using cplx = std::complex<double>;
using CMat = std::vector<std::vector<cplx>>;
using mgrid::Matrix;
using mgrid::Vector;

inline std::string data_path(const std::string& name) { return std::string(MGRID_DATA_DIR) + "/" + name; }

inline std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline std::string data(const std::string& name) { return read_text(data_path(name)); }

/// Bus admittance matrix straight from the case JSON; row k is bus order[k].
inline CMat ybus_from_json(const nlohmann::json& doc, const std::vector<int>& order) {
    const std::size_t n = order.size();
    auto pos = [&](int id) {
        for (std::size_t k = 0; k < n; ++k)
            if (order[k] == id) return k;
        throw std::runtime_error("bus id not in order");
    };
    CMat Y(n, std::vector<cplx>(n, cplx(0.0, 0.0)));
    for (const auto& l : doc.at("lines")) {
        const std::size_t a = pos(l.at("from").get<int>());
        const std::size_t b = pos(l.at("to").get<int>());
        const cplx z(l.at("R").get<double>(), l.at("X").get<double>());
        const cplx y = cplx(1.0, 0.0) / z;
        const double bsh = l.value("B_sh", 0.0);
        Y[a][a] += y + cplx(0.0, bsh * 0.5);
        Y[b][b] += y + cplx(0.0, bsh * 0.5);
        Y[a][b] -= y;
        Y[b][a] -= y;
    }
    for (const auto& bus : doc.at("buses")) {
        if (!bus.contains("shunt")) continue;
        const std::size_t k = pos(bus.at("id").get<int>());
        Y[k][k] += cplx(bus.at("shunt").value("G", 0.0), bus.at("shunt").value("B", 0.0));
    }
    return Y;
}

/// Complex power S_i = V_i conj(sum_j Y_ij V_j).
inline void injections(const CMat& Y, const Vector& theta, const Vector& E, Vector& P, Vector& Q) {
    const std::size_t n = Y.size();
    std::vector<cplx> V(n);
    for (std::size_t k = 0; k < n; ++k) V[k] = std::polar(E(static_cast<mgrid::Index>(k)), theta(static_cast<mgrid::Index>(k)));
    P.resize(static_cast<mgrid::Index>(n));
    Q.resize(static_cast<mgrid::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        cplx I(0.0, 0.0);
        for (std::size_t j = 0; j < n; ++j) I += Y[i][j] * V[j];
        const cplx S = V[i] * std::conj(I);
        P(static_cast<mgrid::Index>(i)) = S.real();
        Q(static_cast<mgrid::Index>(i)) = S.imag();
    }
}

/// Central-difference Jacobian of (P_0, Q_0, P_1, ...) w.r.t. (theta_0, E_0, ...).
inline Matrix fd_jacobian(const CMat& Y, const Vector& theta, const Vector& E, double h = 1e-6) {
    const auto n = static_cast<mgrid::Index>(Y.size());
    Matrix J(2 * n, 2 * n);
    for (mgrid::Index k = 0; k < n; ++k) {
        for (int var = 0; var < 2; ++var) {
            Vector tp = theta, tm = theta, ep = E, em = E;
            if (var == 0) {
                tp(k) += h;
                tm(k) -= h;
            } else {
                ep(k) += h;
                em(k) -= h;
            }
            Vector Pp, Qp, Pm, Qm;
            injections(Y, tp, ep, Pp, Qp);
            injections(Y, tm, em, Pm, Qm);
            for (mgrid::Index i = 0; i < n; ++i) {
                J(2 * i, 2 * k + var) = (Pp(i) - Pm(i)) / (2.0 * h);
                J(2 * i + 1, 2 * k + var) = (Qp(i) - Qm(i)) / (2.0 * h);
            }
        }
    }
    return J;
}

/// Root of F by Newton iteration with a forward-difference Jacobian and
/// step halving. Returns the final residual infinity-norm.
inline double find_root(const std::function<Vector(const Vector&)>& F, Vector& x, int max_iter = 200) {
    Vector r = F(x);
    for (int it = 0; it < max_iter && r.lpNorm<Eigen::Infinity>() > 1e-14; ++it) {
        const mgrid::Index n = x.size();
        Matrix J(r.size(), n);
        for (mgrid::Index k = 0; k < n; ++k) {
            const double h = 1e-7 * std::max(1.0, std::abs(x(k)));
            Vector xp = x;
            xp(k) += h;
            J.col(k) = (F(xp) - r) / h;
        }
        const Vector dx = J.colPivHouseholderQr().solve(-r);
        double step = 1.0;
        for (int half = 0; half < 40; ++half, step *= 0.5) {
            const Vector xn = x + step * dx;
            const Vector rn = F(xn);
            if (rn.lpNorm<Eigen::Infinity>() < r.lpNorm<Eigen::Infinity>()) {
                x = xn;
                r = rn;
                break;
            }
        }
        if (step < 1e-11) break;
    }
    return r.lpNorm<Eigen::Infinity>();
}

/// Graph Laplacian from an edge list over n nodes.
inline Matrix laplacian(int n, const std::vector<std::pair<int, int>>& edges) {
    Matrix L = Matrix::Zero(n, n);
    for (const auto& [a, b] : edges) {
        L(a, b) = L(b, a) = -1.0;
    }
    for (int i = 0; i < n; ++i) L(i, i) = -L.row(i).sum();
    return L;
}

/// Random symmetric matrix whose largest eigenvalue is at most -c.
inline Matrix random_negative_symmetric(int n, double c, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix A(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) A(i, j) = g(rng);
    Matrix S = 0.5 * (A + A.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(S);
    S.diagonal().array() -= es.eigenvalues().maxCoeff() + c;
    return S;
}

}  // namespace oracle
