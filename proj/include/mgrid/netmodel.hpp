#pragma once

// Microgrid data model: buses, lines, communication graph, admittance matrix.
//
// Internal bus order is inverters first (ascending id) then loads (ascending
// id), so the state x = [x_I, x_L] splits as an index range. All quantities
// are per-unit; angles are radians and frequencies rad/s internally, while the
// case file carries degrees and Hz.

#include "errors.hpp"
#include "linalg.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace mgrid {

using Complex = std::complex<double>;
using ComplexMatrix = Eigen::MatrixXcd;
using Json = nlohmann::json;

enum class BusKind { inverter, load };
enum class LoadModel { none, constant_power, constant_impedance };

/// Demand at a bus. Consumption is positive: a constant-power load absorbs
/// (P, Q); a constant-impedance load absorbs (G E^2, B E^2), i.e. it is the
/// shunt admittance G - jB.
struct Load {
    LoadModel model = LoadModel::none;
    double P = 0.0;
    double Q = 0.0;
    double G = 0.0;
    double B = 0.0;

    double active(double E) const {
        switch (model) {
            case LoadModel::constant_power: return P;
            case LoadModel::constant_impedance: return G * E * E;
            default: return 0.0;
        }
    }
    double reactive(double E) const {
        switch (model) {
            case LoadModel::constant_power: return Q;
            case LoadModel::constant_impedance: return B * E * E;
            default: return 0.0;
        }
    }
    double dactive_dE(double E) const { return model == LoadModel::constant_impedance ? 2.0 * G * E : 0.0; }
    double dreactive_dE(double E) const { return model == LoadModel::constant_impedance ? 2.0 * B * E : 0.0; }

    /// Adds a step of (dP, dQ) measured at nominal voltage.
    void add_step(double dP, double dQ) {
        if (model == LoadModel::constant_impedance) {
            G += dP;
            B += dQ;
        } else {
            model = LoadModel::constant_power;
            P += dP;
            Q += dQ;
        }
    }

    bool operator==(const Load&) const = default;
};

/// Active/reactive capacity box of an inverter (per-unit).
struct Capacity {
    double P_min = 0.0;
    double P_max = 0.0;
    double Q_min = 0.0;
    double Q_max = 0.0;
    bool operator==(const Capacity&) const = default;
};

struct Bus {
    int id = 0;
    BusKind kind = BusKind::load;
    double E_min = 0.0;
    double E_max = 0.0;
    double P_star = 0.0;  // inverter only
    double Q_star = 0.0;  // inverter only
    Load load;            // load only
    Complex shunt{0.0, 0.0};  // fixed network shunt admittance G + jB
    std::optional<Capacity> capacity;  // inverter only

    bool is_inverter() const { return kind == BusKind::inverter; }
    bool operator==(const Bus&) const = default;
};

/// Branch between internal bus indices `from` and `to`.
struct Line {
    Index from = 0;
    Index to = 0;
    double R = 0.0;
    double X = 0.0;
    double B_sh = 0.0;  // total line charging
    double I_max = 0.0;

    Complex series_admittance() const { return 1.0 / Complex(R, X); }
    bool operator==(const Line&) const = default;
};

using Edge = std::pair<Index, Index>;

struct NetworkCase {
    std::vector<Bus> buses;
    std::vector<Line> lines;
    std::vector<Edge> comm_edges;  // internal indices, first < second
    double gamma = 0.0;            // branch angle limit, rad
    double omega0 = 0.0;           // nominal angular frequency, rad/s
    double base_power = 0.0;       // MVA
    double base_voltage = 0.0;     // kV

    Index size() const { return static_cast<Index>(buses.size()); }
    Index n_inverters() const {
        return static_cast<Index>(std::count_if(buses.begin(), buses.end(),
                                                [](const Bus& b) { return b.is_inverter(); }));
    }
    Index n_loads() const { return size() - n_inverters(); }

    Index index_of(int id) const {
        for (std::size_t i = 0; i < buses.size(); ++i)
            if (buses[i].id == id) return static_cast<Index>(i);
        throw ValidationError("unknown bus id " + std::to_string(id));
    }

    std::vector<Index> inverter_indices() const {
        std::vector<Index> out(static_cast<std::size_t>(n_inverters()));
        std::iota(out.begin(), out.end(), Index{0});
        return out;
    }

    std::vector<Load> base_loads() const {
        std::vector<Load> out;
        out.reserve(buses.size());
        for (const auto& b : buses) out.push_back(b.load);
        return out;
    }

    bool operator==(const NetworkCase&) const = default;
};

namespace graph {

/// Connected-component label per node (labels are 0..k-1 in first-seen order).
inline std::vector<int> components(Index n, const std::vector<Edge>& edges) {
    std::vector<std::vector<Index>> adj(static_cast<std::size_t>(n));
    for (const auto& [a, b] : edges) {
        adj[static_cast<std::size_t>(a)].push_back(b);
        adj[static_cast<std::size_t>(b)].push_back(a);
    }
    std::vector<int> label(static_cast<std::size_t>(n), -1);
    int next = 0;
    for (Index s = 0; s < n; ++s) {
        if (label[static_cast<std::size_t>(s)] >= 0) continue;
        std::vector<Index> stack{s};
        label[static_cast<std::size_t>(s)] = next;
        while (!stack.empty()) {
            const Index u = stack.back();
            stack.pop_back();
            for (Index v : adj[static_cast<std::size_t>(u)]) {
                if (label[static_cast<std::size_t>(v)] < 0) {
                    label[static_cast<std::size_t>(v)] = next;
                    stack.push_back(v);
                }
            }
        }
        ++next;
    }
    return label;
}

inline bool connected(Index n, const std::vector<Edge>& edges) {
    if (n <= 1) return true;
    const auto label = components(n, edges);
    return std::all_of(label.begin(), label.end(), [](int l) { return l == 0; });
}

}  // namespace graph

inline std::vector<Edge> electrical_edges(const NetworkCase& c) {
    std::vector<Edge> out;
    out.reserve(c.lines.size());
    for (const auto& l : c.lines) out.emplace_back(l.from, l.to);
    return out;
}

// ---------------------------------------------------------------------------
// Validation

inline void validate(const NetworkCase& c) {
    const Index n = c.size();
    if (n == 0) throw ValidationError("case has no buses");
    std::set<int> ids;
    bool loads_started = false;
    for (Index i = 0; i < n; ++i) {
        const Bus& b = c.buses[static_cast<std::size_t>(i)];
        const std::string tag = "bus " + std::to_string(b.id);
        if (!ids.insert(b.id).second) throw ValidationError(tag + ": duplicate bus id");
        if (!(b.E_min > 0.0 && b.E_min < b.E_max))
            throw ValidationError(tag + ": voltage bounds must satisfy 0 < E_min < E_max");
        if (b.is_inverter()) {
            if (loads_started) throw ValidationError(tag + ": inverter buses must precede load buses");
            if (b.P_star == 0.0 || b.Q_star == 0.0)
                throw ValidationError(tag + ": inverter requires nonzero P_star and Q_star");
            if (b.load.model != LoadModel::none)
                throw ValidationError(tag + ": inverter buses carry no load model");
        } else {
            loads_started = true;
            if (b.capacity) throw ValidationError(tag + ": capacity applies to inverter buses only");
        }
    }
    std::set<Edge> seen;
    for (const auto& l : c.lines) {
        if (l.from < 0 || l.to < 0 || l.from >= n || l.to >= n)
            throw ValidationError("line references an unknown bus");
        if (l.from == l.to) throw ValidationError("line endpoints must differ");
        if (l.R == 0.0 && l.X == 0.0)
            throw ValidationError("singular line impedance (R = X = 0) between buses " +
                                  std::to_string(c.buses[static_cast<std::size_t>(l.from)].id) + " and " +
                                  std::to_string(c.buses[static_cast<std::size_t>(l.to)].id));
        const Edge key{std::min(l.from, l.to), std::max(l.from, l.to)};
        if (!seen.insert(key).second) throw ValidationError("duplicate line between the same pair of buses");
    }
    if (!graph::connected(n, electrical_edges(c))) throw ValidationError("electrical graph connected: violated");

    const Index ni = c.n_inverters();
    std::set<Edge> comm;
    for (const auto& [a, b] : c.comm_edges) {
        if (a < 0 || b < 0 || a >= ni || b >= ni)
            throw ValidationError("comm edge must join two inverter buses");
        if (a == b) throw ValidationError("comm graph must be simple (self loop found)");
        if (!comm.insert({std::min(a, b), std::max(a, b)}).second)
            throw ValidationError("comm graph must be simple (duplicate edge found)");
    }
    if (!graph::connected(ni, c.comm_edges)) throw ValidationError("comm graph disconnected");
    if (!(c.gamma >= 0.0 && c.gamma < std::numbers::pi / 2))
        throw ValidationError("gamma must lie in [0, pi/2)");
}

// ---------------------------------------------------------------------------
// Case file (JSON) parsing and serialization

namespace detail {

inline const Json& require(const Json& obj, const char* key, const std::string& path) {
    if (!obj.is_object() || !obj.contains(key)) throw ParseError(path + "." + key, "missing field");
    return obj.at(key);
}

inline double number(const Json& obj, const char* key, const std::string& path) {
    const Json& v = require(obj, key, path);
    if (!v.is_number()) throw ParseError(path + "." + key, "expected a number");
    return v.get<double>();
}

inline double number_or(const Json& obj, const char* key, double fallback, const std::string& path) {
    if (!obj.contains(key)) return fallback;
    return number(obj, key, path);
}

inline int integer(const Json& v, const std::string& path) {
    if (!v.is_number_integer()) throw ParseError(path, "expected an integer bus id");
    return v.get<int>();
}

}  // namespace detail

/// Parses and validates case-file JSON text.
inline NetworkCase parse_case(const std::string& text) {
    Json doc;
    try {
        doc = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ParseError("byte " + std::to_string(e.byte), e.what());
    }
    using detail::number;
    using detail::require;

    const Json& jbuses = require(doc, "buses", "$");
    if (!jbuses.is_array()) throw ParseError("$.buses", "expected an array");
    std::vector<Bus> buses;
    for (std::size_t k = 0; k < jbuses.size(); ++k) {
        const Json& jb = jbuses[k];
        const std::string path = "$.buses[" + std::to_string(k) + "]";
        Bus b;
        b.id = detail::integer(require(jb, "id", path), path + ".id");
        const Json& kind = require(jb, "kind", path);
        if (kind == "inverter")
            b.kind = BusKind::inverter;
        else if (kind == "load")
            b.kind = BusKind::load;
        else
            throw ParseError(path + ".kind", "expected \"inverter\" or \"load\"");
        b.E_min = number(jb, "E_min", path);
        b.E_max = number(jb, "E_max", path);
        if (b.is_inverter()) {
            b.P_star = number(jb, "P_star", path);
            b.Q_star = number(jb, "Q_star", path);
            if (jb.contains("capacity")) {
                const Json& jc = jb.at("capacity");
                const std::string cp = path + ".capacity";
                b.capacity = Capacity{number(jc, "P_min", cp), number(jc, "P_max", cp), number(jc, "Q_min", cp),
                                      number(jc, "Q_max", cp)};
            }
        } else if (jb.contains("load")) {
            const Json& jl = jb.at("load");
            const std::string lp = path + ".load";
            const Json& model = require(jl, "model", lp);
            if (model == "constant_power") {
                b.load.model = LoadModel::constant_power;
                b.load.P = number(jl, "P", lp);
                b.load.Q = number(jl, "Q", lp);
                if (jl.contains("G") || jl.contains("B"))
                    throw ValidationError(lp + ": constant_power load takes only P and Q");
            } else if (model == "constant_impedance") {
                b.load.model = LoadModel::constant_impedance;
                b.load.G = number(jl, "G", lp);
                b.load.B = number(jl, "B", lp);
                if (jl.contains("P") || jl.contains("Q"))
                    throw ValidationError(lp + ": constant_impedance load takes only G and B");
            } else {
                throw ParseError(lp + ".model", "expected \"constant_power\" or \"constant_impedance\"");
            }
        }
        if (jb.contains("shunt")) {
            const Json& js = jb.at("shunt");
            b.shunt = Complex(detail::number_or(js, "G", 0.0, path + ".shunt"),
                              detail::number_or(js, "B", 0.0, path + ".shunt"));
        }
        buses.push_back(b);
    }
    std::stable_sort(buses.begin(), buses.end(), [](const Bus& a, const Bus& b) {
        if (a.kind != b.kind) return a.kind == BusKind::inverter;
        return a.id < b.id;
    });

    NetworkCase c;
    c.buses = std::move(buses);
    std::map<int, Index> index;
    for (std::size_t i = 0; i < c.buses.size(); ++i) {
        if (!index.emplace(c.buses[i].id, static_cast<Index>(i)).second)
            throw ValidationError("bus " + std::to_string(c.buses[i].id) + ": duplicate bus id");
    }
    auto lookup = [&](int id, const std::string& path) {
        auto it = index.find(id);
        if (it == index.end()) throw ValidationError(path + ": unknown bus id " + std::to_string(id));
        return it->second;
    };

    const Json& jlines = require(doc, "lines", "$");
    if (!jlines.is_array()) throw ParseError("$.lines", "expected an array");
    for (std::size_t k = 0; k < jlines.size(); ++k) {
        const Json& jl = jlines[k];
        const std::string path = "$.lines[" + std::to_string(k) + "]";
        Line l;
        l.from = lookup(detail::integer(require(jl, "from", path), path + ".from"), path);
        l.to = lookup(detail::integer(require(jl, "to", path), path + ".to"), path);
        l.R = number(jl, "R", path);
        l.X = number(jl, "X", path);
        l.B_sh = detail::number_or(jl, "B_sh", 0.0, path);
        l.I_max = number(jl, "I_max", path);
        c.lines.push_back(l);
    }

    const Json& jcomm = require(doc, "comm_edges", "$");
    if (!jcomm.is_array()) throw ParseError("$.comm_edges", "expected an array");
    for (std::size_t k = 0; k < jcomm.size(); ++k) {
        const std::string path = "$.comm_edges[" + std::to_string(k) + "]";
        const Json& e = jcomm[k];
        if (!e.is_array() || e.size() != 2) throw ParseError(path, "expected a pair of bus ids");
        const Index a = lookup(detail::integer(e[0], path + "[0]"), path);
        const Index b = lookup(detail::integer(e[1], path + "[1]"), path);
        c.comm_edges.emplace_back(std::min(a, b), std::max(a, b));
    }

    const Json& jp = require(doc, "params", "$");
    c.gamma = number(jp, "gamma_deg", "$.params") * std::numbers::pi / 180.0;
    c.omega0 = 2.0 * std::numbers::pi * number(jp, "f0_hz", "$.params");
    c.base_power = number(jp, "base_mva", "$.params");
    c.base_voltage = number(jp, "base_kv", "$.params");

    validate(c);
    return c;
}

inline Json case_to_json(const NetworkCase& c) {
    Json doc;
    Json buses = Json::array();
    for (const auto& b : c.buses) {
        Json jb{{"id", b.id}, {"kind", b.is_inverter() ? "inverter" : "load"}, {"E_min", b.E_min}, {"E_max", b.E_max}};
        if (b.is_inverter()) {
            jb["P_star"] = b.P_star;
            jb["Q_star"] = b.Q_star;
            if (b.capacity)
                jb["capacity"] = {{"P_min", b.capacity->P_min},
                                  {"P_max", b.capacity->P_max},
                                  {"Q_min", b.capacity->Q_min},
                                  {"Q_max", b.capacity->Q_max}};
        } else if (b.load.model == LoadModel::constant_power) {
            jb["load"] = {{"model", "constant_power"}, {"P", b.load.P}, {"Q", b.load.Q}};
        } else if (b.load.model == LoadModel::constant_impedance) {
            jb["load"] = {{"model", "constant_impedance"}, {"G", b.load.G}, {"B", b.load.B}};
        }
        if (b.shunt != Complex(0.0, 0.0)) jb["shunt"] = {{"G", b.shunt.real()}, {"B", b.shunt.imag()}};
        buses.push_back(jb);
    }
    doc["buses"] = buses;
    Json lines = Json::array();
    for (const auto& l : c.lines) {
        lines.push_back({{"from", c.buses[static_cast<std::size_t>(l.from)].id},
                         {"to", c.buses[static_cast<std::size_t>(l.to)].id},
                         {"R", l.R},
                         {"X", l.X},
                         {"B_sh", l.B_sh},
                         {"I_max", l.I_max}});
    }
    doc["lines"] = lines;
    Json comm = Json::array();
    for (const auto& [a, b] : c.comm_edges)
        comm.push_back({c.buses[static_cast<std::size_t>(a)].id, c.buses[static_cast<std::size_t>(b)].id});
    doc["comm_edges"] = comm;
    doc["params"] = {{"gamma_deg", c.gamma * 180.0 / std::numbers::pi},
                     {"f0_hz", c.omega0 / (2.0 * std::numbers::pi)},
                     {"base_mva", c.base_power},
                     {"base_kv", c.base_voltage}};
    return doc;
}

inline std::string serialize_case(const NetworkCase& c) { return case_to_json(c).dump(2); }

// ---------------------------------------------------------------------------
// Admittance matrix

struct AdmittanceMatrix {
    ComplexMatrix Y;
    Matrix magnitude;  // |Y_ij|
    Matrix angle;      // arg Y_ij

    Index size() const { return Y.rows(); }
    bool connected(Index i, Index j) const { return magnitude(i, j) > 0.0; }
};

/// Bus admittance matrix. Constant-impedance loads stay on the load side of
/// the KCL balance unless `impedance_loads_as_shunts` is set.
inline AdmittanceMatrix build_admittance(const NetworkCase& c, bool impedance_loads_as_shunts = false) {
    const Index n = c.size();
    AdmittanceMatrix a;
    a.Y = ComplexMatrix::Zero(n, n);
    for (const auto& l : c.lines) {
        if (l.R == 0.0 && l.X == 0.0) throw ValidationError("singular line impedance (R = X = 0)");
        const Complex y = l.series_admittance();
        const Complex half_charging(0.0, l.B_sh / 2.0);
        a.Y(l.from, l.from) += y + half_charging;
        a.Y(l.to, l.to) += y + half_charging;
        a.Y(l.from, l.to) -= y;
        a.Y(l.to, l.from) -= y;
    }
    for (Index i = 0; i < n; ++i) {
        const Bus& b = c.buses[static_cast<std::size_t>(i)];
        a.Y(i, i) += b.shunt;
        if (impedance_loads_as_shunts && b.load.model == LoadModel::constant_impedance)
            a.Y(i, i) += Complex(b.load.G, -b.load.B);
    }
    a.magnitude = a.Y.cwiseAbs();
    a.angle.resize(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) a.angle(i, j) = std::arg(a.Y(i, j));
    return a;
}

// ---------------------------------------------------------------------------
// Communication Laplacian

struct CommLaplacian {
    std::vector<Index> nodes;  // active inverter indices, ascending
    std::vector<Edge> edges;   // surviving edges (internal bus indices)
    Matrix L;                  // |nodes| x |nodes|
    bool connected = true;
};

/// Laplacian of the comm subgraph induced on `active` (edges touching an
/// inactive inverter are dropped). Disconnection is reported, not thrown.
inline CommLaplacian laplacian(const std::vector<Edge>& comm_edges, std::vector<Index> active) {
    std::sort(active.begin(), active.end());
    active.erase(std::unique(active.begin(), active.end()), active.end());
    CommLaplacian out;
    out.nodes = active;
    const Index m = static_cast<Index>(active.size());
    out.L = Matrix::Zero(m, m);
    auto pos = [&](Index bus) -> Index {
        auto it = std::lower_bound(active.begin(), active.end(), bus);
        return (it != active.end() && *it == bus) ? static_cast<Index>(it - active.begin()) : -1;
    };
    std::vector<Edge> local;
    for (const auto& [a, b] : comm_edges) {
        const Index pa = pos(a);
        const Index pb = pos(b);
        if (pa < 0 || pb < 0) continue;
        out.edges.emplace_back(a, b);
        local.emplace_back(pa, pb);
        out.L(pa, pa) += 1.0;
        out.L(pb, pb) += 1.0;
        out.L(pa, pb) -= 1.0;
        out.L(pb, pa) -= 1.0;
    }
    out.connected = graph::connected(m, local);
    return out;
}

/// L (x) I_2: the Laplacian acting on stacked (P, Q) pairs.
inline Matrix kron_i2(const Matrix& L) {
    Matrix out = Matrix::Zero(2 * L.rows(), 2 * L.cols());
    for (Index i = 0; i < L.rows(); ++i)
        for (Index j = 0; j < L.cols(); ++j) {
            out(2 * i, 2 * j) = L(i, j);
            out(2 * i + 1, 2 * j + 1) = L(i, j);
        }
    return out;
}

}  // namespace mgrid
