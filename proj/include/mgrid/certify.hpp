#pragma once

// Robust-stability certification: consensus basis, vertex sets and Jacobian
// hulls, block feasibility, certificate verification and gain synthesis.
//
// Verification of M = [[A^T U + U A + c I + xi U, U], [U, -eps I]] <= s I is
// done through the Schur complement
//     s I - (A^T U + U A + c I + xi U) - U^2 / (eps + s)  >= 0,
// tested with a Cholesky factorization, so that exact eigenvalues are only
// computed when a vertex raises the running maximum.

#include "controller.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "netmodel.hpp"
#include "powerflow.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <queue>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace mgrid {

// ---------------------------------------------------------------------------
// Consensus basis

struct ConsensusBasis {
    Matrix T;
    Index n_inverters = 0;

    /// The first 2 n_I - 2 columns (orthonormal complement of the consensus space).
    Matrix complement() const { return T.leftCols(2 * n_inverters - 2); }
};

inline ConsensusBasis build_basis(Index n_inv) {
    if (n_inv < 2) throw ValidationError("build_basis needs at least two inverters");
    const Index n = 2 * n_inv;
    const Vector vp = consensus_vp(n_inv).normalized();
    const Vector vq = consensus_vq(n_inv).normalized();
    std::vector<Vector> cols;
    for (Index k = 0; k < n && static_cast<Index>(cols.size()) < n - 2; ++k) {
        Vector v = Vector::Unit(n, k);
        for (int pass = 0; pass < 2; ++pass) {
            v -= vp.dot(v) * vp;
            v -= vq.dot(v) * vq;
            for (const auto& c : cols) v -= c.dot(v) * c;
        }
        const double norm = v.norm();
        if (norm < 1e-8) continue;
        cols.push_back(v / norm);
    }
    ConsensusBasis b;
    b.n_inverters = n_inv;
    b.T.resize(n, n);
    for (Index k = 0; k < n - 2; ++k) b.T.col(k) = cols[static_cast<std::size_t>(k)];
    b.T.col(n - 2) = vp;
    b.T.col(n - 1) = vq;
    return b;
}

/// Reduced Laplacian P^T Lbar P on the complement of the consensus space.
inline Matrix reduced_laplacian(const ConsensusBasis& b, const Matrix& Lbar) {
    const Matrix P = b.complement();
    return P.transpose() * Lbar * P;
}

// ---------------------------------------------------------------------------
// Admittance-angle hypothesis

struct AngleReport {
    bool ok = true;
    std::vector<std::string> offenders;
};

/// Checks every off-diagonal admittance angle, reduced modulo pi into
/// (-pi/2, pi/2], against phi in {+-pi/2} or |phi| + gamma <= pi/2. In strict
/// mode a violation throws, naming the offending entry.
inline AngleReport check_angle_hypothesis(const NetworkCase& c, const AdmittanceMatrix& Y, bool strict) {
    AngleReport rep;
    const double half = std::numbers::pi / 2.0;
    for (const auto& l : c.lines) {
        double phi = Y.angle(l.from, l.to);
        while (phi > half + 1e-12) phi -= std::numbers::pi;
        while (phi <= -half + 1e-12) phi += std::numbers::pi;
        const bool lossless = std::abs(std::abs(phi) - half) < 1e-9;
        if (lossless || std::abs(phi) + c.gamma <= half + 1e-12) continue;
        rep.ok = false;
        std::ostringstream os;
        os << "phi_" << c.buses[static_cast<std::size_t>(l.from)].id << "_" << c.buses[static_cast<std::size_t>(l.to)].id
           << " = " << Y.angle(l.from, l.to) << " rad violates the admittance-angle hypothesis";
        rep.offenders.push_back(os.str());
    }
    if (strict && !rep.ok) throw ValidationError(rep.offenders.front());
    return rep;
}

// ---------------------------------------------------------------------------
// Vertex samples

struct VertexSample {
    Vector E;             // per bus
    Vector edge_delta;    // per line, theta_from - theta_to
    VoltageProfile x;     // spanning-tree realization
    bool cycle_consistent = true;
    bool over_range = false;
};

struct VertexSet {
    std::vector<Index> buses;   // buses whose E varies over {E_min, E_max}
    std::vector<Index> lines;   // lines whose delta varies over {-gamma, 0, gamma}
    std::vector<VertexSample> samples;
};

/// Antisymmetric angle-difference matrix from per-line values.
inline Matrix edge_delta_matrix(const NetworkCase& c, const Vector& edge_delta) {
    Matrix d = Matrix::Zero(c.size(), c.size());
    for (std::size_t k = 0; k < c.lines.size(); ++k) {
        const Line& l = c.lines[k];
        d(l.from, l.to) = edge_delta(static_cast<Index>(k));
        d(l.to, l.from) = -edge_delta(static_cast<Index>(k));
    }
    return d;
}

/// Realizes per-line angle differences as bus angles along a BFS spanning
/// tree rooted at bus 0. Non-tree lines take the implied difference.
inline VoltageProfile realize_profile(const NetworkCase& c, const Vector& E, const Vector& edge_delta,
                                      bool* cycle_consistent = nullptr, bool* over_range = nullptr) {
    const Index n = c.size();
    VoltageProfile x(Vector::Zero(n), E);
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    std::vector<bool> tree(c.lines.size(), false);
    std::vector<std::vector<std::size_t>> incident(static_cast<std::size_t>(n));
    for (std::size_t k = 0; k < c.lines.size(); ++k) {
        incident[static_cast<std::size_t>(c.lines[k].from)].push_back(k);
        incident[static_cast<std::size_t>(c.lines[k].to)].push_back(k);
    }
    std::queue<Index> q;
    q.push(0);
    seen[0] = true;
    while (!q.empty()) {
        const Index u = q.front();
        q.pop();
        for (std::size_t k : incident[static_cast<std::size_t>(u)]) {
            const Line& l = c.lines[k];
            const Index v = l.from == u ? l.to : l.from;
            if (seen[static_cast<std::size_t>(v)]) continue;
            seen[static_cast<std::size_t>(v)] = true;
            tree[k] = true;
            const double d = edge_delta(static_cast<Index>(k));
            x.theta(v) = l.from == u ? x.theta(u) - d : x.theta(u) + d;
            q.push(v);
        }
    }
    bool consistent = true;
    bool over = false;
    for (std::size_t k = 0; k < c.lines.size(); ++k) {
        if (tree[k]) continue;
        const Line& l = c.lines[k];
        const double implied = x.theta(l.from) - x.theta(l.to);
        if (std::abs(implied - edge_delta(static_cast<Index>(k))) > 1e-12) consistent = false;
        if (std::abs(implied) > c.gamma + 1e-12) over = true;
    }
    if (cycle_consistent) *cycle_consistent = consistent;
    if (over_range) *over_range = over;
    return x;
}

inline double vertex_count(std::size_t n_buses, std::size_t n_lines) {
    return std::pow(2.0, static_cast<double>(n_buses)) * std::pow(3.0, static_cast<double>(n_lines));
}

/// Calls `fn(E, edge_delta)` for every combination over the given buses and
/// lines; other buses sit at E = 1 and other lines at delta = 0.
inline void for_each_vertex(const NetworkCase& c, const std::vector<Index>& buses, const std::vector<Index>& lines,
                            const std::function<void(const Vector&, const Vector&)>& fn) {
    Vector E = Vector::Ones(c.size());
    Vector delta = Vector::Zero(static_cast<Index>(c.lines.size()));
    const std::size_t nb = buses.size();
    const std::size_t nl = lines.size();
    std::vector<int> digit(nb + nl, 0);
    for (;;) {
        for (std::size_t k = 0; k < nb; ++k) {
            const Bus& b = c.buses[static_cast<std::size_t>(buses[k])];
            E(buses[k]) = digit[k] ? b.E_max : b.E_min;
        }
        for (std::size_t k = 0; k < nl; ++k) delta(lines[k]) = (digit[nb + k] - 1) * c.gamma;
        fn(E, delta);
        std::size_t pos = 0;
        while (pos < digit.size()) {
            const int radix = pos < nb ? 2 : 3;
            if (++digit[pos] < radix) break;
            digit[pos] = 0;
            ++pos;
        }
        if (pos == digit.size()) break;
    }
}

/// Full vertex set over the given buses and lines (default: all of them).
inline VertexSet vertex_samples(const NetworkCase& c, std::vector<Index> buses, std::vector<Index> lines,
                                double budget = 2e6) {
    const double count = vertex_count(buses.size(), lines.size());
    if (count > budget) {
        std::ostringstream os;
        os << "vertex set has " << count << " combinations, over the budget of " << budget
           << "; use the per-block restriction";
        throw ValidationError(os.str());
    }
    VertexSet vs;
    vs.buses = std::move(buses);
    vs.lines = std::move(lines);
    vs.samples.reserve(static_cast<std::size_t>(count));
    for_each_vertex(c, vs.buses, vs.lines, [&](const Vector& E, const Vector& delta) {
        VertexSample s;
        s.E = E;
        s.edge_delta = delta;
        s.x = realize_profile(c, E, delta, &s.cycle_consistent, &s.over_range);
        vs.samples.push_back(std::move(s));
    });
    return vs;
}

inline VertexSet vertex_samples(const NetworkCase& c, double budget = 2e6) {
    const AdmittanceMatrix Y = build_admittance(c);
    check_angle_hypothesis(c, Y, true);
    std::vector<Index> buses(static_cast<std::size_t>(c.size()));
    std::iota(buses.begin(), buses.end(), Index{0});
    std::vector<Index> lines(c.lines.size());
    std::iota(lines.begin(), lines.end(), Index{0});
    return vertex_samples(c, std::move(buses), std::move(lines), budget);
}

/// Seeded random subset of full-network vertex combinations, realized along
/// the spanning tree (flagged samples included).
inline std::vector<VertexSample> random_vertex_samples(const NetworkCase& c, std::size_t count,
                                                       std::uint64_t seed = 20240101) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> bit(0, 1);
    std::uniform_int_distribution<int> tri(-1, 1);
    std::vector<VertexSample> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        VertexSample v;
        v.E.resize(c.size());
        for (Index i = 0; i < c.size(); ++i) {
            const Bus& b = c.buses[static_cast<std::size_t>(i)];
            v.E(i) = bit(rng) ? b.E_max : b.E_min;
        }
        v.edge_delta.resize(static_cast<Index>(c.lines.size()));
        for (Index k = 0; k < v.edge_delta.size(); ++k) v.edge_delta(k) = tri(rng) * c.gamma;
        v.x = realize_profile(c, v.E, v.edge_delta, &v.cycle_consistent, &v.over_range);
        out.push_back(std::move(v));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Blocks and hulls

/// Inverter groups joined by inverter-inverter lines, each sorted ascending.
inline std::vector<std::vector<Index>> blocks_of(const NetworkCase& c) {
    const Index ni = c.n_inverters();
    std::vector<Edge> inner;
    for (const auto& l : c.lines)
        if (l.from < ni && l.to < ni) inner.emplace_back(l.from, l.to);
    const auto label = graph::components(ni, inner);
    const int count = ni ? *std::max_element(label.begin(), label.end()) + 1 : 0;
    std::vector<std::vector<Index>> out(static_cast<std::size_t>(count));
    for (Index i = 0; i < ni; ++i) out[static_cast<std::size_t>(label[static_cast<std::size_t>(i)])].push_back(i);
    return out;
}

enum class HullKind { jbar, dbar };

inline const char* to_string(HullKind k) { return k == HullKind::jbar ? "Jbar" : "Dbar"; }

struct BlockHull {
    std::vector<Index> inverters;  // block members
    std::vector<Index> buses;      // buses the block entries depend on
    std::vector<Index> lines;      // lines the block entries depend on
    Matrix lower, upper;           // entrywise bounds of the 2k x 2k block of J_I
    std::vector<Matrix> samples;   // block Jacobians at the block vertex set
    std::size_t cycle_inconsistent = 0;
    std::size_t over_range = 0;

    Index dim() const { return 2 * static_cast<Index>(inverters.size()); }

    /// Number of entries whose bounds differ.
    int free_entries() const {
        int n = 0;
        for (Index i = 0; i < lower.rows(); ++i)
            for (Index j = 0; j < lower.cols(); ++j)
                if (upper(i, j) > lower(i, j)) ++n;
        return n;
    }

    /// Vertices of the entrywise interval box.
    std::vector<Matrix> box_vertices(double budget) const {
        const int nf = free_entries();
        if (std::pow(2.0, nf) > budget) {
            std::ostringstream os;
            os << "block of " << inverters.size() << " inverters has 2^" << nf
               << " interval vertices, over the vertex budget; use the Jbar-based hull";
            throw ValidationError(os.str());
        }
        std::vector<std::pair<Index, Index>> free;
        for (Index i = 0; i < lower.rows(); ++i)
            for (Index j = 0; j < lower.cols(); ++j)
                if (upper(i, j) > lower(i, j)) free.emplace_back(i, j);
        std::vector<Matrix> out;
        const std::uint64_t total = std::uint64_t{1} << nf;
        out.reserve(total);
        for (std::uint64_t mask = 0; mask < total; ++mask) {
            Matrix D = lower;
            for (int k = 0; k < nf; ++k)
                if (mask >> k & 1U) D(free[static_cast<std::size_t>(k)].first, free[static_cast<std::size_t>(k)].second) =
                    upper(free[static_cast<std::size_t>(k)].first, free[static_cast<std::size_t>(k)].second);
            out.push_back(std::move(D));
        }
        return out;
    }
};

struct IntervalHull {
    HullKind kind = HullKind::jbar;
    Index n_inverters = 0;
    std::vector<BlockHull> blocks;
    AngleReport angles;
    double vertex_budget = 1 << 16;

    /// Generators of block b for feasibility checks.
    std::vector<Matrix> generators(std::size_t b) const {
        if (kind == HullKind::dbar) return blocks[b].box_vertices(vertex_budget);
        return blocks[b].samples;
    }

    /// Smallest sound generator set for product enumeration: the interval box
    /// contains every sample, so it replaces the samples when it is smaller.
    std::vector<Matrix> compact_generators(std::size_t b) const {
        const BlockHull& bh = blocks[b];
        const int nf = bh.free_entries();
        if (kind == HullKind::dbar || (nf <= 16 && std::pow(2.0, nf) < static_cast<double>(bh.samples.size())))
            return bh.box_vertices(vertex_budget);
        return bh.samples;
    }
};

/// Relevant buses (block inverters and their line neighbours) and lines
/// (incident to a block inverter) of one block.
inline void block_support(const NetworkCase& c, const std::vector<Index>& block, std::vector<Index>& buses,
                          std::vector<Index>& lines) {
    std::vector<bool> inb(static_cast<std::size_t>(c.size()), false);
    for (Index i : block) inb[static_cast<std::size_t>(i)] = true;
    std::vector<bool> rel = inb;
    lines.clear();
    for (std::size_t k = 0; k < c.lines.size(); ++k) {
        const Line& l = c.lines[k];
        if (inb[static_cast<std::size_t>(l.from)] || inb[static_cast<std::size_t>(l.to)]) {
            lines.push_back(static_cast<Index>(k));
            rel[static_cast<std::size_t>(l.from)] = true;
            rel[static_cast<std::size_t>(l.to)] = true;
        }
    }
    buses.clear();
    for (Index i = 0; i < c.size(); ++i)
        if (rel[static_cast<std::size_t>(i)]) buses.push_back(i);
}

/// Normalized inverter-row Jacobian block (rows and columns of `block`) at
/// per-line angle differences.
inline Matrix block_jacobian(const NetworkCase& c, const AdmittanceMatrix& Y, const std::vector<Index>& block,
                             const Vector& E, const Vector& edge_delta) {
    const Matrix full = pq_jacobian(Y, E, edge_delta_matrix(c, edge_delta));
    const Index k = static_cast<Index>(block.size());
    Matrix D(2 * k, 2 * k);
    for (Index a = 0; a < k; ++a) {
        const Bus& b = c.buses[static_cast<std::size_t>(block[static_cast<std::size_t>(a)])];
        for (Index bb = 0; bb < k; ++bb) {
            const Index i = block[static_cast<std::size_t>(a)];
            const Index j = block[static_cast<std::size_t>(bb)];
            D.block<2, 2>(2 * a, 2 * bb) = full.block<2, 2>(2 * i, 2 * j);
        }
        D.row(2 * a) /= b.P_star;
        D.row(2 * a + 1) /= b.Q_star;
    }
    return D;
}

/// Per-entry bounds of one block over its restricted vertex combinations.
inline BlockHull entry_bounds(const NetworkCase& c, const AdmittanceMatrix& Y, const std::vector<Index>& block,
                              double budget = 2e6) {
    BlockHull h;
    h.inverters = block;
    block_support(c, block, h.buses, h.lines);
    const double count = vertex_count(h.buses.size(), h.lines.size());
    if (count > budget) throw ValidationError("block vertex set exceeds the sample budget");
    h.samples.reserve(static_cast<std::size_t>(count));
    const Index dim = 2 * static_cast<Index>(block.size());
    h.lower = Matrix::Constant(dim, dim, std::numeric_limits<double>::infinity());
    h.upper = Matrix::Constant(dim, dim, -std::numeric_limits<double>::infinity());
    for_each_vertex(c, h.buses, h.lines, [&](const Vector& E, const Vector& delta) {
        Matrix D = block_jacobian(c, Y, block, E, delta);
        h.lower = h.lower.cwiseMin(D);
        h.upper = h.upper.cwiseMax(D);
        bool consistent = true, over = false;
        realize_profile(c, E, delta, &consistent, &over);
        if (!consistent) ++h.cycle_inconsistent;
        if (over) ++h.over_range;
        h.samples.push_back(std::move(D));
    });
    // Exact ties must not create spurious free entries.
    for (Index i = 0; i < dim; ++i)
        for (Index j = 0; j < dim; ++j)
            if (h.upper(i, j) - h.lower(i, j) <= 1e-15 * std::max(1.0, std::abs(h.upper(i, j)))) h.upper(i, j) = h.lower(i, j);
    return h;
}

/// Per-block hull of J_I. The angle hypothesis is checked and recorded; in
/// strict mode a violation throws.
inline IntervalHull build_hull(const NetworkCase& c, HullKind kind = HullKind::jbar, bool strict = false) {
    const AdmittanceMatrix Y = build_admittance(c);
    IntervalHull h;
    h.kind = kind;
    h.n_inverters = c.n_inverters();
    h.angles = check_angle_hypothesis(c, Y, strict);
    for (const auto& block : blocks_of(c)) h.blocks.push_back(entry_bounds(c, Y, block));
    if (kind == HullKind::dbar)
        for (const auto& b : h.blocks)
            if (std::pow(2.0, b.free_entries()) > h.vertex_budget)
                throw ValidationError("Dbar hull needs blocks of at most two inverters; use the Jbar-based hull");
    return h;
}

// ---------------------------------------------------------------------------
// Block feasibility

struct BlockFeasibility {
    bool pass = true;
    double worst = -std::numeric_limits<double>::infinity();
    Index block = -1;
    Index generator = -1;
    std::vector<double> block_worst;
};

/// Restricts a block generator (and gains) to the surviving inverters of the block.
inline std::vector<Index> surviving_rows(const std::vector<Index>& block, const std::vector<Index>& active) {
    std::vector<Index> rows;
    for (std::size_t a = 0; a < block.size(); ++a) {
        if (std::find(active.begin(), active.end(), block[a]) == active.end()) continue;
        rows.push_back(2 * static_cast<Index>(a));
        rows.push_back(2 * static_cast<Index>(a) + 1);
    }
    return rows;
}

/// Checks lambda_max(D K + K^T D^T) <= -d over every generator of every block,
/// restricted to the `active` inverters (principal submatrices).
inline BlockFeasibility block_feasibility(const GainSet& g, const IntervalHull& hull, double d,
                                          const std::vector<Index>& active) {
    BlockFeasibility out;
    for (std::size_t b = 0; b < hull.blocks.size(); ++b) {
        const BlockHull& bh = hull.blocks[b];
        const std::vector<Index> rows = surviving_rows(bh.inverters, active);
        double bw = -std::numeric_limits<double>::infinity();
        if (rows.empty()) {
            out.block_worst.push_back(bw);
            continue;
        }
        const Matrix Kb = g.stacked(bh.inverters);
        const auto gens = hull.generators(b);
        const Index r = static_cast<Index>(rows.size());
        for (std::size_t k = 0; k < gens.size(); ++k) {
            const Matrix H = gens[k] * Kb;
            Matrix Hs(r, r);
            for (Index i = 0; i < r; ++i)
                for (Index j = 0; j < r; ++j)
                    Hs(i, j) = H(rows[static_cast<std::size_t>(i)], rows[static_cast<std::size_t>(j)]) +
                               H(rows[static_cast<std::size_t>(j)], rows[static_cast<std::size_t>(i)]);
            const double lam = linalg::max_eigenvalue(Hs);
            if (lam > bw) bw = lam;
            if (lam > out.worst) {
                out.worst = lam;
                out.block = static_cast<Index>(b);
                out.generator = static_cast<Index>(k);
            }
        }
        out.block_worst.push_back(bw);
    }
    out.pass = out.worst <= -d;
    return out;
}

inline BlockFeasibility block_feasibility(const GainSet& g, const IntervalHull& hull, double d) {
    std::vector<Index> all(static_cast<std::size_t>(hull.n_inverters));
    std::iota(all.begin(), all.end(), Index{0});
    return block_feasibility(g, hull, d, all);
}

// ---------------------------------------------------------------------------
// Reduced vertex matrices

/// Per-block contributions to A11 = P^T D K Lbar P, which is linear in the
/// block-diagonal D: A11 = sum_b P_b^T D_b (K Lbar P)_b.
struct ReducedVertices {
    ConsensusBasis basis;
    Matrix Lbar1;                                // P^T Lbar P
    std::vector<std::vector<Matrix>> Ahat;       // per block, per generator
    std::vector<std::vector<Matrix>> generators; // per block D generators

    Index dim() const { return 2 * basis.n_inverters - 2; }
    double count() const {
        double n = 1.0;
        for (const auto& a : Ahat) n *= static_cast<double>(a.size());
        return n;
    }
};

inline ReducedVertices reduce_vertices(const NetworkCase& c, const GainSet& g, const IntervalHull& hull,
                                       bool compact = true) {
    ReducedVertices rv;
    const Index ni = c.n_inverters();
    rv.basis = build_basis(ni);
    const CommLaplacian L = laplacian(c.comm_edges, c.inverter_indices());
    const Matrix Lbar = kron_i2(L.L);
    const Matrix P = rv.basis.complement();
    rv.Lbar1 = P.transpose() * Lbar * P;
    const Matrix KLP = g.stacked() * Lbar * P;
    for (std::size_t b = 0; b < hull.blocks.size(); ++b) {
        const BlockHull& bh = hull.blocks[b];
        const Index k = static_cast<Index>(bh.inverters.size());
        Matrix Pb(2 * k, P.cols());
        Matrix Rb(2 * k, P.cols());
        for (Index a = 0; a < k; ++a) {
            const Index i = bh.inverters[static_cast<std::size_t>(a)];
            Pb.middleRows(2 * a, 2) = P.middleRows(2 * i, 2);
            Rb.middleRows(2 * a, 2) = KLP.middleRows(2 * i, 2);
        }
        rv.generators.push_back(compact ? hull.compact_generators(b) : hull.generators(b));
        std::vector<Matrix> blockA;
        blockA.reserve(rv.generators.back().size());
        for (const auto& D : rv.generators.back()) blockA.push_back(Pb.transpose() * D * Rb);
        rv.Ahat.push_back(std::move(blockA));
    }
    return rv;
}

/// Full reduced matrix A11 for one generator tuple.
inline Matrix assemble_A(const ReducedVertices& rv, const std::vector<std::size_t>& tuple) {
    Matrix A = Matrix::Zero(rv.dim(), rv.dim());
    for (std::size_t b = 0; b < rv.Ahat.size(); ++b) A += rv.Ahat[b][tuple[b]];
    return A;
}

namespace detail {

using SmallMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 32, 32>;

/// Visits every tuple of the product of per-block matrix lists, passing the
/// sum of the chosen matrices. Returning false from `fn` stops early.
template <class Mat, class Fn>
void for_each_sum(const std::vector<std::vector<Mat>>& parts, const Mat& offset, Fn&& fn) {
    const std::size_t nb = parts.size();
    std::vector<std::size_t> idx(nb, 0);
    for (const auto& p : parts)
        if (p.empty()) return;
    std::vector<Mat> partial(nb + 1);
    partial[0] = offset;
    for (std::size_t b = 0; b < nb; ++b) partial[b + 1] = partial[b] + parts[b][0];
    for (;;) {
        if (!fn(partial[nb], idx)) return;
        std::size_t b = nb;
        while (b > 0) {
            --b;
            if (++idx[b] < parts[b].size()) break;
            idx[b] = 0;
            if (b == 0) return;
        }
        if (nb == 0) return;
        for (std::size_t k = b; k < nb; ++k) partial[k + 1] = partial[k] + parts[k][idx[k]];
    }
}

template <class Mat>
bool negative_semidefinite_shift(const Mat& A, double s) {
    Mat B = -A;
    B.diagonal().array() += s;
    Eigen::LLT<Mat> llt(B);
    return llt.info() == Eigen::Success;
}

template <class Mat>
double lambda_max_sym(const Mat& A) {
    Eigen::SelfAdjointEigenSolver<Mat> es(A, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(A.rows() - 1);
}

/// Largest eigenvalue over all tuple sums, with Cholesky screening against
/// the running maximum. Optionally keeps the `keep` largest tuples.
struct TupleValue {
    double value;
    std::vector<std::size_t> tuple;
    bool operator<(const TupleValue& o) const { return value > o.value; }  // min-heap on value
};

template <class Mat>
double max_over_tuples(const std::vector<std::vector<Mat>>& parts, const Mat& offset, std::vector<std::size_t>* argmax,
                       std::size_t keep = 0, std::vector<TupleValue>* top = nullptr) {
    double worst = -std::numeric_limits<double>::infinity();
    std::priority_queue<TupleValue> heap;
    for_each_sum(parts, offset, [&](const Mat& S, const std::vector<std::size_t>& idx) {
        double level = worst;
        if (keep > 0 && heap.size() >= keep) level = std::min(level, heap.top().value);
        if (keep > 0 && heap.size() < keep) level = -std::numeric_limits<double>::infinity();
        if (std::isfinite(level) && negative_semidefinite_shift(S, level)) return true;
        const double lam = lambda_max_sym(S);
        if (lam > worst) {
            worst = lam;
            if (argmax) *argmax = idx;
        }
        if (keep > 0) {
            if (heap.size() < keep) {
                heap.push({lam, idx});
            } else if (lam > heap.top().value) {
                heap.pop();
                heap.push({lam, idx});
            }
        }
        return true;
    });
    if (top) {
        top->clear();
        while (!heap.empty()) {
            top->push_back(heap.top());
            heap.pop();
        }
        std::reverse(top->begin(), top->end());
    }
    return worst;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Certificate

enum class ZetaMode { squared, linear };

struct StabilityCertificate {
    Matrix U;
    double eps = 0.0;
    double xi = 0.0;
    double zeta = 0.0;
    double d = 0.0;
    HullKind hull_kind = HullKind::jbar;
    ZetaMode zeta_mode = ZetaMode::squared;
    double zeta_estimate = 0.0;
    bool covers_estimate = false;
    std::string digest;
    // verification log
    double worst_margin = 0.0;
    double vertices = 0.0;
    std::vector<std::vector<std::size_t>> critical;  // worst generator tuples

    double disturbance_term() const { return zeta_mode == ZetaMode::squared ? eps * zeta * zeta : eps * zeta; }
};

/// Field invariants: U symmetric positive definite, eps, xi, zeta, d > 0.
inline void validate(const StabilityCertificate& cert) {
    if (cert.U.rows() == 0 || cert.U.rows() != cert.U.cols()) throw CertificateError("certificate U must be square");
    if ((cert.U - cert.U.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, linalg::max_abs(cert.U)))
        throw CertificateError("certificate U must be symmetric");
    if (!(linalg::min_eigenvalue(cert.U) > 0.0)) throw CertificateError("certificate U must be positive definite");
    if (!(cert.eps > 0.0)) throw CertificateError("certificate eps must be positive");
    if (!(cert.xi > 0.0)) throw CertificateError("certificate xi must be positive");
    if (!(cert.zeta > 0.0)) throw CertificateError("certificate zeta must be positive");
    if (!(cert.d > 0.0)) throw CertificateError("certificate d must be positive");
}

/// Exact largest eigenvalue of M for one reduced matrix A11.
inline double certificate_margin(const StabilityCertificate& cert, const Matrix& A) {
    const Index m = A.rows();
    Matrix M(2 * m, 2 * m);
    M.topLeftCorner(m, m) = A.transpose() * cert.U + cert.U * A + cert.xi * cert.U;
    M.topLeftCorner(m, m).diagonal().array() += cert.disturbance_term();
    M.topRightCorner(m, m) = cert.U;
    M.bottomLeftCorner(m, m) = cert.U;
    M.bottomRightCorner(m, m) = -cert.eps * Matrix::Identity(m, m);
    return linalg::max_eigenvalue(M);
}

struct VerificationReport {
    bool pass = false;
    double worst = -std::numeric_limits<double>::infinity();
    double vertices = 0.0;
    double failing = 0.0;
    std::vector<std::size_t> worst_tuple;
    std::vector<std::pair<double, std::vector<std::size_t>>> top;  // largest margins
};

namespace detail {

template <class Mat>
VerificationReport verify_impl(const ReducedVertices& rv, const StabilityCertificate& cert, double tol,
                               bool stop_at_first_failure, std::size_t keep) {
    const Index m = rv.dim();
    const Mat U = cert.U;
    const Mat U2 = U * U;
    std::vector<std::vector<Mat>> G(rv.Ahat.size());
    for (std::size_t b = 0; b < rv.Ahat.size(); ++b) {
        G[b].reserve(rv.Ahat[b].size());
        for (const auto& A : rv.Ahat[b]) {
            const Mat a = A;
            G[b].push_back(a.transpose() * U + U * a);
        }
    }
    Mat base = cert.xi * U;
    base.diagonal().array() += cert.disturbance_term();

    VerificationReport rep;
    rep.vertices = rv.count();
    std::priority_queue<TupleValue> heap;
    auto exact = [&](const Mat& S) {
        Matrix M(2 * m, 2 * m);
        M.topLeftCorner(m, m) = S;
        M.topRightCorner(m, m) = cert.U;
        M.bottomLeftCorner(m, m) = cert.U;
        M.bottomRightCorner(m, m) = -cert.eps * Matrix::Identity(m, m);
        return linalg::max_eigenvalue(M);
    };
    auto below = [&](const Mat& S, double s) {
        if (!(cert.eps + s > 0.0)) return false;
        Mat B = S + U2 / (cert.eps + s);
        return negative_semidefinite_shift(B, s);
    };
    for_each_sum(G, base, [&](const Mat& S, const std::vector<std::size_t>& idx) {
        double level = rep.worst;
        const bool heap_open = keep > 0 && heap.size() < keep;
        if (keep > 0 && !heap_open) level = std::min(level, heap.top().value);
        bool need_exact = heap_open || !std::isfinite(level) || !below(S, level);
        if (!need_exact) {
            // at or below every tracked level; still count failures above tol
            if (level > tol && !below(S, tol)) rep.failing += 1.0;
            return !(stop_at_first_failure && rep.failing > 0.0);
        }
        const double lam = exact(S);
        if (lam > tol) rep.failing += 1.0;
        if (lam > rep.worst) {
            rep.worst = lam;
            rep.worst_tuple = idx;
        }
        if (keep > 0) {
            if (heap.size() < keep) {
                heap.push({lam, idx});
            } else if (lam > heap.top().value) {
                heap.pop();
                heap.push({lam, idx});
            }
        }
        return !(stop_at_first_failure && rep.failing > 0.0);
    });
    while (!heap.empty()) {
        rep.top.emplace_back(heap.top().value, heap.top().tuple);
        heap.pop();
    }
    std::reverse(rep.top.begin(), rep.top.end());
    rep.pass = rep.failing == 0.0 && rep.worst <= tol;
    return rep;
}

}  // namespace detail

/// Checks M_i <= tol I at every generator tuple. With `stop_at_first_failure`
/// the scan ends at the first violating tuple (the worst value is then a
/// lower bound).
inline VerificationReport verify_certificate(const ReducedVertices& rv, const StabilityCertificate& cert,
                                             double tol = 1e-9, bool stop_at_first_failure = false,
                                             std::size_t keep = 0) {
    validate(cert);
    if (cert.U.rows() != rv.dim()) throw CertificateError("certificate U has the wrong dimension for this case");
    // logged critical tuples first: a corrupted certificate usually fails there
    if (stop_at_first_failure) {
        for (const auto& t : cert.critical) {
            if (t.size() != rv.Ahat.size()) continue;
            bool valid = true;
            for (std::size_t b = 0; b < t.size(); ++b) valid = valid && t[b] < rv.Ahat[b].size();
            if (!valid) continue;
            const double lam = certificate_margin(cert, assemble_A(rv, t));
            if (lam > tol) {
                VerificationReport rep;
                rep.vertices = rv.count();
                rep.failing = 1.0;
                rep.worst = lam;
                rep.worst_tuple = t;
                return rep;
            }
        }
    }
    if (rv.dim() <= 16)
        return detail::verify_impl<detail::SmallMatrix>(rv, cert, tol, stop_at_first_failure, keep);
    return detail::verify_impl<Matrix>(rv, cert, tol, stop_at_first_failure, keep);
}

// ---------------------------------------------------------------------------
// Certificate file and digest

inline std::string sha256_hex(const std::string& data) {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw Error("EVP_MD_CTX_new failed");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, data.data(), data.size()) == 1 && EVP_DigestFinal_ex(ctx, out, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw Error("sha256 digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(out[i]);
    return os.str();
}

/// Digest of the canonical case and gains JSON.
inline std::string certificate_digest(const NetworkCase& c, const GainSet& g) {
    return sha256_hex(case_to_json(c).dump() + "\n" + gains_to_json(c, g).dump());
}

inline Json certificate_to_json(const StabilityCertificate& cert) {
    Json doc;
    const Index m = cert.U.rows();
    std::vector<double> u;
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < m; ++j) u.push_back(cert.U(i, j));
    doc["dim"] = m;
    doc["U"] = u;
    doc["eps"] = cert.eps;
    doc["xi"] = cert.xi;
    doc["zeta"] = cert.zeta;
    doc["d"] = cert.d;
    doc["hull_kind"] = to_string(cert.hull_kind);
    doc["zeta_mode"] = cert.zeta_mode == ZetaMode::squared ? "squared" : "linear";
    doc["zeta_estimate"] = cert.zeta_estimate;
    doc["covers_estimate"] = cert.covers_estimate;
    doc["digest"] = cert.digest;
    doc["verification"] = {{"worst_margin", cert.worst_margin}, {"vertices", cert.vertices}, {"critical", cert.critical}};
    return doc;
}

inline StabilityCertificate parse_certificate(const std::string& text) {
    Json doc;
    try {
        doc = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ParseError("byte " + std::to_string(e.byte), e.what());
    }
    StabilityCertificate cert;
    const Json& jd = detail::require(doc, "dim", "$");
    if (!jd.is_number_integer() || jd.get<long>() <= 0) throw ParseError("$.dim", "expected a positive integer");
    const Index m = jd.get<Index>();
    const Json& ju = detail::require(doc, "U", "$");
    if (!ju.is_array() || static_cast<Index>(ju.size()) != m * m) throw ParseError("$.U", "expected dim*dim numbers");
    cert.U.resize(m, m);
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < m; ++j) {
            const Json& v = ju[static_cast<std::size_t>(i * m + j)];
            if (!v.is_number()) throw ParseError("$.U", "expected numbers");
            cert.U(i, j) = v.get<double>();
        }
    cert.eps = detail::number(doc, "eps", "$");
    cert.xi = detail::number(doc, "xi", "$");
    cert.zeta = detail::number(doc, "zeta", "$");
    cert.d = detail::number(doc, "d", "$");
    const Json& hk = detail::require(doc, "hull_kind", "$");
    if (hk == "Jbar")
        cert.hull_kind = HullKind::jbar;
    else if (hk == "Dbar")
        cert.hull_kind = HullKind::dbar;
    else
        throw ParseError("$.hull_kind", "expected Jbar or Dbar");
    const std::string mode = doc.value("zeta_mode", std::string("squared"));
    if (mode != "squared" && mode != "linear") throw ParseError("$.zeta_mode", "expected squared or linear");
    cert.zeta_mode = mode == "squared" ? ZetaMode::squared : ZetaMode::linear;
    cert.zeta_estimate = doc.value("zeta_estimate", 0.0);
    cert.covers_estimate = doc.value("covers_estimate", false);
    cert.digest = detail::require(doc, "digest", "$").get<std::string>();
    if (doc.contains("verification")) {
        const Json& v = doc.at("verification");
        cert.worst_margin = v.value("worst_margin", 0.0);
        cert.vertices = v.value("vertices", 0.0);
        if (v.contains("critical")) cert.critical = v.at("critical").get<std::vector<std::vector<std::size_t>>>();
    }
    return cert;
}

// ---------------------------------------------------------------------------
// zeta estimate

/// zeta = kappa * max ||J_L|| * ||K|| * sigma_max(Lbar) over the samples.
inline double zeta_estimate(const NetworkCase& c, const AdmittanceMatrix& Y, const GainSet& g,
                            const std::vector<VoltageProfile>& samples, double kappa) {
    if (kappa == 0.0 || c.n_loads() == 0) return 0.0;
    const double k_norm = linalg::spectral_norm(g.stacked());
    if (k_norm == 0.0) return 0.0;
    const CommLaplacian L = laplacian(c.comm_edges, c.inverter_indices());
    const double l_norm = linalg::spectral_norm(kron_i2(L.L));
    double jl = 0.0;
    for (const auto& x : samples) jl = std::max(jl, linalg::spectral_norm(jacobians(c, Y, x).J_L));
    return kappa * jl * k_norm * l_norm;
}

/// Profiles used for kappa and zeta: the operating point plus a seeded random
/// subset of vertex realizations.
inline std::vector<VoltageProfile> kappa_samples(const NetworkCase& c, const std::optional<VoltageProfile>& x0,
                                                 std::size_t count = 512, std::uint64_t seed = 20240101) {
    std::vector<VoltageProfile> out;
    if (x0) out.push_back(*x0);
    for (auto& v : random_vertex_samples(c, count, seed)) out.push_back(std::move(v.x));
    return out;
}

// ---------------------------------------------------------------------------
// Synthesis

struct SynthesisOptions {
    double d_target = 1e-3;         // required block margin
    int stage1_iterations = 400;
    std::size_t working_set = 200;
    int stage2_rounds = 6;
    double pattern_step = 0.1;
    int pattern_sweeps = 30;
    ZetaMode zeta_mode = ZetaMode::squared;
    double zeta_target = 0.0;       // <= 0: certify what the vertex set allows
    std::function<double(const GainSet&)> zeta_estimator;  // overrides zeta_target after stage 1
    std::function<void(const std::string&)> log;
};

/// Radial projection of each gain row onto the rate constraints
/// -b <= K_i(c,:) sum_j L(i,j) s_j <= b over the capacity box.
struct RateBox {
    std::vector<Eigen::Vector2d> lo, hi;  // per inverter, bounds on (P/P*, Q/Q*)
};

inline RateBox capacity_box(const NetworkCase& c) {
    RateBox box;
    for (Index i = 0; i < c.n_inverters(); ++i) {
        const Bus& b = c.buses[static_cast<std::size_t>(i)];
        Capacity cap = b.capacity.value_or(Capacity{0.0, 2.0 * b.P_star, -2.0 * std::abs(b.Q_star), 2.0 * std::abs(b.Q_star)});
        const double p1 = cap.P_min / b.P_star, p2 = cap.P_max / b.P_star;
        const double q1 = cap.Q_min / b.Q_star, q2 = cap.Q_max / b.Q_star;
        box.lo.emplace_back(std::min(p1, p2), std::min(q1, q2));
        box.hi.emplace_back(std::max(p1, p2), std::max(q1, q2));
    }
    return box;
}

/// Largest |K_i(row,:) sum_j L(i,j) s_j| over the capacity box.
inline double rate_extent(const Matrix& L, const RateBox& box, Index i, const Eigen::Vector2d& row) {
    double mx = 0.0, mn = 0.0;
    for (Index j = 0; j < L.cols(); ++j) {
        const double l = L(i, j);
        if (l == 0.0) continue;
        for (int comp = 0; comp < 2; ++comp) {
            const double a = l * row(comp) * box.lo[static_cast<std::size_t>(j)](comp);
            const double b = l * row(comp) * box.hi[static_cast<std::size_t>(j)](comp);
            mx += std::max(a, b);
            mn += std::min(a, b);
        }
    }
    return std::max(std::abs(mx), std::abs(mn));
}

inline bool rate_feasible(const GainSet& g, const Matrix& L, const RateBox& box, double tol = 1e-12) {
    for (Index i = 0; i < g.size(); ++i)
        for (int r = 0; r < 2; ++r) {
            const double b = r == 0 ? g.limits.theta_dot_max : g.limits.E_dot_max;
            if (rate_extent(L, box, i, g.blocks[static_cast<std::size_t>(i)].row(r).transpose()) > b * (1 + tol)) return false;
        }
    return true;
}

inline void project_rates(GainSet& g, const Matrix& L, const RateBox& box) {
    for (Index i = 0; i < g.size(); ++i)
        for (int r = 0; r < 2; ++r) {
            const double b = r == 0 ? g.limits.theta_dot_max : g.limits.E_dot_max;
            auto row = g.blocks[static_cast<std::size_t>(i)].row(r);
            const double ext = rate_extent(L, box, i, row.transpose());
            if (ext > b) row *= b / ext;
        }
}

struct SynthesisResult {
    GainSet gains;
    StabilityCertificate cert;
    BlockFeasibility feasibility;
    VerificationReport verification;
};

namespace detail {

/// Stage 1 for one block: projected subgradient descent on
/// max_D lambda_max(D K + K^T D^T) over the block generators.
inline double stage1_block(GainSet& g, const BlockHull& bh, const std::vector<Matrix>& gens, const Matrix& L,
                           const RateBox& box, const SynthesisOptions& opt) {
    const Index k = static_cast<Index>(bh.inverters.size());
    auto eval_set = [&](const std::vector<std::size_t>& set, std::size_t* arg, Vector* vec) {
        const Matrix Kb = g.stacked(bh.inverters);
        double worst = -std::numeric_limits<double>::infinity();
        for (std::size_t s : set) {
            const Matrix H = gens[s] * Kb;
            const Matrix S = H + H.transpose();
            if (vec) {
                const auto ep = linalg::top_eigenpair(S);
                if (ep.value > worst) {
                    worst = ep.value;
                    *arg = s;
                    *vec = ep.vector;
                }
            } else {
                const double lam = linalg::max_eigenvalue(S);
                if (lam > worst) {
                    worst = lam;
                    if (arg) *arg = s;
                }
            }
        }
        return worst;
    };
    std::vector<std::size_t> all(gens.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    auto full_scan = [&](std::vector<std::size_t>& working) {
        const Matrix Kb = g.stacked(bh.inverters);
        std::vector<std::pair<double, std::size_t>> vals;
        vals.reserve(gens.size());
        for (std::size_t s = 0; s < gens.size(); ++s) {
            const Matrix H = gens[s] * Kb;
            vals.emplace_back(linalg::max_eigenvalue(H + H.transpose()), s);
        }
        const std::size_t keep = std::min(opt.working_set, vals.size());
        std::partial_sort(vals.begin(), vals.begin() + static_cast<long>(keep), vals.end(),
                          [](const auto& a, const auto& b) { return a.first > b.first; });
        working.clear();
        for (std::size_t s = 0; s < keep; ++s) working.push_back(vals[s].second);
        return vals.front().first;
    };

    std::vector<std::size_t> working;
    double best = full_scan(working);
    std::vector<Matrix2> best_blocks;
    for (Index i : bh.inverters) best_blocks.push_back(g.blocks[static_cast<std::size_t>(i)]);
    double scale = 0.0;
    for (Index i : bh.inverters) scale = std::max(scale, g.blocks[static_cast<std::size_t>(i)].norm());
    double step = 0.05 * std::max(scale, 1e-6);
    for (int it = 0; it < opt.stage1_iterations; ++it) {
        std::size_t arg = 0;
        Vector v;
        const double cur = eval_set(working, &arg, &v);
        (void)cur;
        const Matrix grad = 2.0 * gens[arg].transpose() * v * v.transpose();
        for (Index a = 0; a < k; ++a) {
            Matrix2 gb = grad.block<2, 2>(2 * a, 2 * a);
            const double nrm = gb.norm();
            if (nrm > 0.0) g.blocks[static_cast<std::size_t>(bh.inverters[static_cast<std::size_t>(a)])] -= step * gb / std::max(nrm, 1e-300) * 1.0;
        }
        project_rates(g, L, box);
        step *= 0.995;
        if ((it + 1) % 20 == 0 || it + 1 == opt.stage1_iterations) {
            const double full = full_scan(working);
            if (full < best) {
                best = full;
                best_blocks.clear();
                for (Index i : bh.inverters) best_blocks.push_back(g.blocks[static_cast<std::size_t>(i)]);
            }
        }
    }
    for (std::size_t a = 0; a < bh.inverters.size(); ++a) g.blocks[static_cast<std::size_t>(bh.inverters[a])] = best_blocks[a];
    (void)all;
    return best;
}

/// Evaluates xi*(U, eps) = -max_v lambda_max(W A_v W + c eps U^{-1} + U / eps)
/// on an explicit list of tuples, with W = U^{-1/2}.
struct XiProblem {
    const ReducedVertices* rv = nullptr;
    double zeta = 0.0;
    ZetaMode mode = ZetaMode::squared;

    double c_of(double eps) const { return mode == ZetaMode::squared ? eps * zeta * zeta : eps * zeta; }

    /// Per-block transformed generators W (A^T U + U A) W.
    std::vector<std::vector<SmallMatrix>> transformed(const Matrix& U, const Matrix& W) const {
        std::vector<std::vector<SmallMatrix>> out(rv->Ahat.size());
        for (std::size_t b = 0; b < rv->Ahat.size(); ++b) {
            out[b].reserve(rv->Ahat[b].size());
            for (const auto& A : rv->Ahat[b]) out[b].push_back(W * (A.transpose() * U + U * A) * W);
        }
        return out;
    }

    SmallMatrix offset(const Matrix& U, const Matrix& Uinv, double eps) const {
        SmallMatrix O = c_of(eps) * Uinv + U / eps;
        return O;
    }

    /// Max over a tuple list of lambda_max(sum + offset).
    static double max_listed(const std::vector<SmallMatrix>& sums, const SmallMatrix& O) {
        double worst = -std::numeric_limits<double>::infinity();
        for (const auto& S : sums) {
            const SmallMatrix T = S + O;
            if (std::isfinite(worst) && negative_semidefinite_shift(T, worst)) continue;
            worst = std::max(worst, lambda_max_sym(T));
        }
        return worst;
    }
};

/// Golden-section search of a unimodal function on [lo, hi] (log scale).
template <class F>
std::pair<double, double> golden_max_log(F&& f, double lo, double hi, int iters = 40) {
    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = std::log(lo), b = std::log(hi);
    double c = b - gr * (b - a), d = a + gr * (b - a);
    double fc = f(std::exp(c)), fd = f(std::exp(d));
    for (int k = 0; k < iters; ++k) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = f(std::exp(c));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = f(std::exp(d));
        }
    }
    return fc > fd ? std::pair{std::exp(c), fc} : std::pair{std::exp(d), fd};
}

}  // namespace detail

/// Best xi over eps for fixed U on the listed tuples; returns {eps, xi}.
inline std::pair<double, double> best_xi_listed(const detail::XiProblem& xp, const Matrix& U,
                                                const std::vector<std::vector<std::size_t>>& tuples) {
    const Matrix W = linalg::inverse_sqrt(U);
    const Matrix Uinv = U.inverse();
    std::vector<detail::SmallMatrix> sums;
    sums.reserve(tuples.size());
    for (const auto& t : tuples) {
        const Matrix A = assemble_A(*xp.rv, t);
        sums.push_back(W * (A.transpose() * U + U * A) * W);
    }
    const double un = U.norm();
    auto f = [&](double eps) { return -detail::XiProblem::max_listed(sums, xp.offset(U, Uinv, eps)); };
    return detail::golden_max_log(f, 1e-6 * un, 1e3 * un, 60);
}

/// xi*(U, eps) over every tuple; also returns the largest tuples.
inline double xi_full(const detail::XiProblem& xp, const Matrix& U, double eps, std::size_t keep,
                      std::vector<std::vector<std::size_t>>* top) {
    const Matrix W = linalg::inverse_sqrt(U);
    const auto parts = xp.transformed(U, W);
    const detail::SmallMatrix O = xp.offset(U, U.inverse(), eps);
    std::vector<detail::TupleValue> best;
    const double worst = detail::max_over_tuples(parts, O, nullptr, keep, &best);
    if (top) {
        top->clear();
        for (const auto& tv : best) top->push_back(tv.tuple);
    }
    return -worst;
}

/// Two-stage gain and certificate synthesis. Stage 1 drives every block
/// below -d under the rate constraints; stage 2 searches (U, eps, xi) for
/// fixed K on a growing working set of generator tuples.
inline SynthesisResult synthesize_gains(const NetworkCase& c, const IntervalHull& hull, const GainSet& initial,
                                        const SynthesisOptions& opt = {}) {
    auto log = [&](const std::string& s) {
        if (opt.log) opt.log(s);
    };
    if (hull.n_inverters < 2) throw CertificateError("synthesis needs at least two inverters");
    SynthesisResult res;
    GainSet g = initial;
    const CommLaplacian L = laplacian(c.comm_edges, c.inverter_indices());
    if (!L.connected) throw ValidationError("comm graph disconnected");
    const RateBox box = capacity_box(c);
    project_rates(g, L.L, box);

    for (std::size_t b = 0; b < hull.blocks.size(); ++b) {
        const auto gens = hull.generators(b);
        const double w = detail::stage1_block(g, hull.blocks[b], gens, L.L, box, opt);
        std::ostringstream os;
        os << "stage 1 block " << b << ": worst lambda_max = " << w;
        log(os.str());
    }
    res.feasibility = block_feasibility(g, hull, opt.d_target);
    if (!res.feasibility.pass) {
        std::ostringstream os;
        os << "no certificate found: stage 1 reached worst lambda_max " << res.feasibility.worst
           << " > -d = " << -opt.d_target;
        throw CertificateError(os.str());
    }

    // Round-trip the gains through the file format so the certificate covers
    // exactly what a reader of the gains file will load.
    g = parse_gains(c, gains_to_json(c, g).dump());
    res.feasibility = block_feasibility(g, hull, opt.d_target);
    if (!res.feasibility.pass) throw CertificateError("no certificate found: gains lost feasibility on round trip");

    const double zeta_target = opt.zeta_estimator ? opt.zeta_estimator(g) : opt.zeta_target;
    const ReducedVertices rv = reduce_vertices(c, g, hull);
    detail::XiProblem xp{&rv, zeta_target, opt.zeta_mode};
    Matrix U = rv.Lbar1 / rv.Lbar1.norm();

    std::vector<std::vector<std::size_t>> working;
    std::vector<std::vector<std::size_t>> top;
    auto merge = [&](const std::vector<std::vector<std::size_t>>& add) {
        for (const auto& t : add)
            if (std::find(working.begin(), working.end(), t) == working.end()) working.push_back(t);
    };

    // seed the working set at a representative eps
    xp.zeta = 0.0;
    double eps = 1.0;
    xi_full(xp, U, eps, opt.working_set, &top);
    merge(top);

    // zeta: the target if it is certifiable at the initial U, otherwise half
    // of the largest certifiable value on the working set
    double zeta = zeta_target;
    auto feasible_at = [&](double z) {
        xp.zeta = z;
        return best_xi_listed(xp, U, working).second > 0.0;
    };
    if (!(zeta > 0.0) || !feasible_at(zeta)) {
        double lo = 0.0, hi = zeta > 0.0 ? zeta : 1.0;
        if (!(zeta > 0.0))
            while (feasible_at(hi) && hi < 1e6) hi *= 2.0;
        if (!feasible_at(0.0)) throw CertificateError("no certificate found: infeasible even without disturbance");
        for (int k = 0; k < 50; ++k) {
            const double mid = 0.5 * (lo + hi);
            (feasible_at(mid) ? lo : hi) = mid;
        }
        zeta = 0.5 * lo;
    }
    xp.zeta = zeta;
    {
        std::ostringstream os;
        os << "stage 2: zeta = " << zeta;
        log(os.str());
    }

    auto objective = [&](const Matrix& Uc) {
        if (!(linalg::min_eigenvalue(Uc) > 0.0)) return -std::numeric_limits<double>::infinity();
        return best_xi_listed(xp, Uc, working).second;
    };

    double xi_cur = 0.0;
    for (int round = 0; round < opt.stage2_rounds; ++round) {
        double best = objective(U);
        const Index m = U.rows();
        for (int sweep = 0; sweep < opt.pattern_sweeps; ++sweep) {
            bool improved = false;
            for (Index i = 0; i < m; ++i)
                for (Index j = i; j < m; ++j)
                    for (double sgn : {1.0, -1.0}) {
                        Matrix Uc = U;
                        const double delta =
                            Uc(i, j) != 0.0 ? sgn * opt.pattern_step * Uc(i, j) : sgn * 1e-2 * U.norm();
                        Uc(i, j) += delta;
                        if (i != j) Uc(j, i) += delta;
                        const double val = objective(Uc);
                        if (val > best * (1.0 + 1e-9) + 1e-15) {
                            best = val;
                            U = Uc / Uc.norm();
                            improved = true;
                        }
                    }
            if (!improved) break;
        }
        const auto [e, xw] = best_xi_listed(xp, U, working);
        eps = e;
        xi_cur = xi_full(xp, U, eps, opt.working_set, &top);
        std::ostringstream os;
        os << "stage 2 round " << round << ": working-set xi = " << xw << ", full xi = " << xi_cur
           << ", working set " << working.size();
        log(os.str());
        const std::size_t before = working.size();
        merge(top);
        if (xi_cur >= xw * (1.0 - 1e-9) - 1e-15 || working.size() == before) break;
    }
    if (!(xi_cur > 0.0)) throw CertificateError("no certificate found: stage 2 did not reach a positive xi");

    StabilityCertificate cert;
    cert.U = U;
    cert.eps = eps;
    cert.xi = xi_cur * (1.0 - 1e-6);
    cert.zeta = zeta;
    cert.d = -res.feasibility.worst * (1.0 - 1e-9);
    cert.hull_kind = hull.kind;
    cert.zeta_mode = opt.zeta_mode;
    cert.zeta_estimate = zeta_target;
    cert.covers_estimate = zeta_target > 0.0 && zeta >= zeta_target;
    cert.digest = certificate_digest(c, g);
    res.verification = verify_certificate(rv, cert, 1e-9, false, 16);
    if (!res.verification.pass) throw CertificateError("no certificate found: final verification failed");
    cert.worst_margin = res.verification.worst;
    cert.vertices = res.verification.vertices;
    for (const auto& tv : res.verification.top) cert.critical.push_back(tv.second);
    res.gains = g;
    res.cert = cert;
    return res;
}

}  // namespace mgrid
