#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>
#include <unistd.h>

#ifndef MGRID_CLI
#define MGRID_CLI "mgrid"
#endif

namespace fs = std::filesystem;

namespace {

fs::path scratch() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / ("mgrid_cli_" + std::to_string(::getpid()));
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

std::string quoted(const std::string& s) { return "'" + s + "'"; }

/// Runs the CLI with `args`; stdout and stderr go to files in the scratch dir.
int run(const std::string& args, std::string* out = nullptr) {
    const fs::path o = scratch() / "stdout.txt";
    const std::string cmd = quoted(MGRID_CLI) + " " + args + " >" + quoted(o.string()) + " 2>" +
                            quoted((scratch() / "stderr.txt").string());
    const int st = std::system(cmd.c_str());
    if (out) *out = oracle::read_text(o.string());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string data(const std::string& name) { return quoted(oracle::data_path(name)); }

std::string write(const std::string& name, const std::string& text) {
    const fs::path p = scratch() / name;
    std::ofstream(p) << text;
    return quoted(p.string());
}

}  // namespace

TEST(Cli, CheckCaseOk) {
    std::string out;
    EXPECT_EQ(run("check-case " + data("ieee14.json"), &out), 0);
    EXPECT_NE(out.find("14 buses"), std::string::npos);
    EXPECT_NE(out.find("(f) not checked"), std::string::npos) << out;
}

TEST(Cli, ValidationFailuresExitOne) {
    EXPECT_EQ(run("check-case " + quoted((scratch() / "missing.json").string())), 1);
    EXPECT_EQ(run("check-case " + write("broken.json", "{\"buses\": [")), 1);
    auto doc = nlohmann::json::parse(oracle::data("tri2.json"));
    doc["comm_edges"] = nlohmann::json::array();
    EXPECT_EQ(run("check-case " + write("nocomm.json", doc.dump())), 1);
    EXPECT_EQ(run("no-such-command"), 1);
    EXPECT_EQ(run("bounds " + data("tri2.json") + " --kind Qbar"), 1);
}

TEST(Cli, NumericalFailureExitsTwo) {
    auto doc = nlohmann::json::parse(oracle::data("tri2.json"));
    doc["buses"][2]["load"]["P"] = 40.0;
    EXPECT_EQ(run("simulate " + write("heavy.json", doc.dump()) + " " + data("tri2_gains.json") + " " +
                  data("scenario_steady.json")),
              2);
}

TEST(Cli, CertificateRejectionExitsThree) {
    EXPECT_EQ(run("certify " + data("ieee14.json") + " " + data("ieee14_reference_gains.json")), 3);
    EXPECT_EQ(run("certify " + data("ieee14.json") + " " + data("ieee14_reference_gains.json") + " --cert " +
                  data("ieee14_synth_cert.json")),
              3);
    auto cert = nlohmann::json::parse(oracle::data("ieee14_synth_cert.json"));
    cert["xi"] = -1.0;
    EXPECT_EQ(run("certify " + data("ieee14.json") + " " + data("ieee14_synth_gains.json") + " --cert " +
                  write("bad_cert.json", cert.dump())),
              3);
}

TEST(Cli, BundledCertificateAccepted) {
    std::string out;
    EXPECT_EQ(run("certify " + data("ieee14.json") + " " + data("ieee14_synth_gains.json") + " --cert " +
                      data("ieee14_synth_cert.json"),
                  &out),
              0);
    EXPECT_NE(out.find("certificate accepted"), std::string::npos) << out;
}

TEST(Cli, SimulateThenMetrics) {
    const fs::path trace = scratch() / "trace.csv";
    auto sc = nlohmann::json::parse(oracle::data("scenario_steady.json"));
    sc["sim"]["t_end"] = 0.5;
    ASSERT_EQ(run("simulate " + data("tri2.json") + " " + data("tri2_gains.json") + " " + write("short.json", sc.dump()) +
                  " --out " + quoted(trace.string())),
              0);
    const std::string csv = oracle::read_text(trace.string());
    EXPECT_EQ(csv.rfind("t,theta_0,theta_1,theta_2,E_0,E_1,E_2,P_0,P_1,Q_0,Q_1,f_0,f_1,", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 502);
    std::string out;
    EXPECT_EQ(run("metrics " + quoted(trace.string()), &out), 0);
    EXPECT_NE(out.find("final_share_err_P"), std::string::npos);
    EXPECT_EQ(run("metrics " + write("junk.csv", "t,a\n0,zz\n")), 1);
}

TEST(Cli, SynthesizeWritesGainsAndCertificate) {
    const fs::path g = scratch() / "tri2_synth.json";
    ASSERT_EQ(run("synthesize " + data("tri2.json") + " --init " + data("tri2_gains.json") + " --out " +
                  quoted(g.string())),
              0);
    const fs::path cert = scratch() / "tri2_synth.cert.json";
    ASSERT_TRUE(fs::exists(cert));
    EXPECT_EQ(run("certify " + data("tri2.json") + " " + quoted(g.string()) + " --cert " + quoted(cert.string())), 0);
}
