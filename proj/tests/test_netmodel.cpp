#include "oracles.hpp"

#include <mgrid/netmodel.hpp>

#include <gtest/gtest.h>

using namespace mgrid;

namespace {

NetworkCase ieee14() { return parse_case(oracle::data("ieee14.json")); }

std::vector<int> ids_of(const NetworkCase& c) {
    std::vector<int> out;
    for (const auto& b : c.buses) out.push_back(b.id);
    return out;
}

}  // namespace

TEST(CaseParse, Ieee14Layout) {
    const NetworkCase c = ieee14();
    EXPECT_EQ(c.size(), 14);
    EXPECT_EQ(c.n_inverters(), 5);
    EXPECT_EQ(c.lines.size(), 20u);
    const std::vector<int> inv{1, 2, 3, 6, 8};
    for (Index i = 0; i < 5; ++i) EXPECT_EQ(c.buses[static_cast<std::size_t>(i)].id, inv[static_cast<std::size_t>(i)]);
    EXPECT_NEAR(c.gamma, 15.0 * std::numbers::pi / 180.0, 1e-15);
    EXPECT_NEAR(c.omega0, 2.0 * std::numbers::pi * 50.0, 1e-12);
    EXPECT_NO_THROW(validate(c));
}

TEST(CaseParse, RoundTripIsIdentity) {
    const NetworkCase c = ieee14();
    EXPECT_EQ(parse_case(serialize_case(c)), c);
    const NetworkCase z = parse_case(oracle::data("ieee14_zip.json"));
    EXPECT_EQ(parse_case(serialize_case(z)), z);
}

TEST(CaseParse, MissingFieldNamesPath) {
    auto doc = nlohmann::json::parse(oracle::data("tri2.json"));
    doc["buses"][1].erase("P_star");
    try {
        parse_case(doc.dump());
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(e.where().find("buses[1]"), std::string::npos) << e.where();
    }
    EXPECT_THROW(parse_case("{not json"), ParseError);
}

TEST(CaseParse, RejectsBadVoltageBox) {
    auto doc = nlohmann::json::parse(oracle::data("tri2.json"));
    doc["buses"][0]["E_min"] = 1.2;
    EXPECT_THROW(validate(parse_case(doc.dump())), Error);
}

TEST(CaseValidate, DisconnectedElectricalGraph) {
    auto doc = nlohmann::json::parse(oracle::data("tri2.json"));
    doc["lines"].erase(2);
    doc["lines"].erase(1);
    try {
        validate(parse_case(doc.dump()));
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_STREQ(e.what(), "electrical graph connected: violated");
    }
}

TEST(CaseValidate, DisconnectedCommGraph) {
    auto doc = nlohmann::json::parse(oracle::data("tri2.json"));
    doc["comm_edges"] = nlohmann::json::array();
    EXPECT_THROW(validate(parse_case(doc.dump())), ValidationError);
}

TEST(CaseValidate, SingularLineImpedance) {
    auto doc = nlohmann::json::parse(oracle::data("tri2.json"));
    doc["lines"][0]["R"] = 0.0;
    doc["lines"][0]["X"] = 0.0;
    EXPECT_THROW(validate(parse_case(doc.dump())), ValidationError);
}

TEST(Admittance, MatchesNaiveAssembly) {
    for (const char* name : {"ieee14.json", "tri2.json", "acyclic3.json"}) {
        const NetworkCase c = parse_case(oracle::data(name));
        const AdmittanceMatrix Y = build_admittance(c);
        const auto ref = oracle::ybus_from_json(nlohmann::json::parse(oracle::data(name)), ids_of(c));
        for (Index i = 0; i < c.size(); ++i)
            for (Index j = 0; j < c.size(); ++j)
                EXPECT_LT(std::abs(Y.Y(i, j) - ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]), 1e-12)
                    << name << " (" << i << "," << j << ")";
        EXPECT_LT((Y.Y - Y.Y.transpose()).cwiseAbs().maxCoeff(), 1e-15);
    }
}

TEST(Admittance, ImpedanceLoadsAsShunts) {
    const NetworkCase z = parse_case(oracle::data("ieee14_zip.json"));
    const AdmittanceMatrix a = build_admittance(z);
    const AdmittanceMatrix b = build_admittance(z, true);
    const Index k = z.index_of(10);
    const Load& ld = z.buses[static_cast<std::size_t>(k)].load;
    EXPECT_NEAR((b.Y(k, k) - a.Y(k, k)).real(), ld.G, 1e-15);
    EXPECT_NEAR((b.Y(k, k) - a.Y(k, k)).imag(), -ld.B, 1e-15);
}

TEST(Laplacian, Ieee14NullSpace) {
    const NetworkCase c = ieee14();
    const CommLaplacian L = laplacian(c.comm_edges, c.inverter_indices());
    ASSERT_EQ(L.L.rows(), 5);
    EXPECT_TRUE(L.connected);
    EXPECT_LT((L.L * Vector::Ones(5)).norm(), 1e-15);
    Eigen::SelfAdjointEigenSolver<Matrix> es(L.L);
    EXPECT_LT(std::abs(es.eigenvalues()(0)), 1e-12);
    EXPECT_GT(es.eigenvalues()(1), 1e-6);
    std::vector<std::pair<int, int>> e;
    for (const auto& [a, b] : c.comm_edges) e.emplace_back(static_cast<int>(a), static_cast<int>(b));
    EXPECT_LT((L.L - oracle::laplacian(5, e)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Laplacian, InducedSubgraphDropsEdges) {
    const NetworkCase c = ieee14();
    const CommLaplacian L = laplacian(c.comm_edges, {1, 2, 3, 4});
    EXPECT_EQ(L.L.rows(), 4);
    for (const auto& [a, b] : L.edges) {
        EXPECT_NE(a, 0);
        EXPECT_NE(b, 0);
    }
    EXPECT_TRUE(L.connected);
    const Matrix k = kron_i2(L.L);
    EXPECT_EQ(k.rows(), 8);
    EXPECT_DOUBLE_EQ(k(0, 0), L.L(0, 0));
    EXPECT_DOUBLE_EQ(k(0, 1), 0.0);
}
