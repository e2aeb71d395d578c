// mgrid command-line front end.
//
// Exit codes: 0 ok, 1 validation, 2 numerical failure, 3 certificate rejection.

#include <mgrid/mgrid.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw mgrid::ValidationError("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void dump(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw mgrid::ValidationError("cannot write " + path);
    out << text;
}

mgrid::NetworkCase load_case(const std::string& path) {
    mgrid::NetworkCase c = mgrid::parse_case(slurp(path));
    mgrid::validate(c);
    return c;
}

mgrid::HullKind hull_kind(const std::string& s) {
    if (s == "Jbar" || s == "jbar") return mgrid::HullKind::jbar;
    if (s == "Dbar" || s == "dbar") return mgrid::HullKind::dbar;
    throw mgrid::ValidationError("hull kind must be Jbar or Dbar");
}

std::string id_of(const mgrid::NetworkCase& c, mgrid::Index i) { return std::to_string(c.buses[static_cast<std::size_t>(i)].id); }

int cmd_check_case(const std::string& path) {
    const auto c = load_case(path);
    std::cout << "case: " << c.size() << " buses (" << c.n_inverters() << " inverters, " << c.n_loads()
              << " loads), " << c.lines.size() << " lines, " << c.comm_edges.size() << " comm links\n";
    const auto rep = mgrid::check_existence(c);
    for (const auto& r : rep.conditions) {
        std::cout << "  (" << r.label << ") " << mgrid::to_string(r.status) << ": " << r.detail << "\n";
        for (const auto& o : r.offenders) std::cout << "      " << o << "\n";
    }
    std::cout << "existence conditions: " << (rep.all_pass() ? "all pass" : "not all pass") << "\n";
    return 0;
}

int cmd_bounds(const std::string& path, const std::string& kind, bool strict) {
    const auto c = load_case(path);
    const auto hull = mgrid::build_hull(c, hull_kind(kind), strict);
    for (const auto& w : hull.angles.offenders) std::cout << "warning: " << w << "\n";
    std::cout << std::setprecision(10);
    for (std::size_t b = 0; b < hull.blocks.size(); ++b) {
        const auto& bh = hull.blocks[b];
        std::cout << "block " << b << ": inverters";
        for (auto i : bh.inverters) std::cout << " " << id_of(c, i);
        std::cout << "; " << bh.buses.size() << " buses, " << bh.lines.size() << " lines, " << bh.samples.size()
                  << " samples (" << bh.cycle_inconsistent << " cycle-inconsistent, " << bh.over_range
                  << " over range); " << bh.free_entries() << " free entries\n";
        std::cout << "  lower =\n" << bh.lower << "\n  upper =\n" << bh.upper << "\n";
    }
    return 0;
}

int cmd_certify(const std::string& case_path, const std::string& gains_path, const std::string& cert_path,
                double d) {
    const auto c = load_case(case_path);
    const auto g = mgrid::parse_gains(c, slurp(gains_path));
    if (cert_path.empty()) {
        const auto hull = mgrid::build_hull(c);
        const auto bf = mgrid::block_feasibility(g, hull, d);
        std::cout << "block feasibility (lambda_max <= " << -d << "): " << (bf.pass ? "pass" : "fail")
                  << ", worst " << bf.worst << "\n";
        for (std::size_t b = 0; b < bf.block_worst.size(); ++b) std::cout << "  block " << b << ": " << bf.block_worst[b] << "\n";
        return bf.pass ? 0 : 3;
    }
    const auto cert = mgrid::parse_certificate(slurp(cert_path));
    mgrid::validate(cert);
    if (cert.digest != mgrid::certificate_digest(c, g))
        throw mgrid::CertificateError("certificate digest does not match this case and gains");
    const auto hull = mgrid::build_hull(c, cert.hull_kind);
    const auto bf = mgrid::block_feasibility(g, hull, cert.d);
    std::cout << "block feasibility at d = " << cert.d << ": " << (bf.pass ? "pass" : "fail") << " (worst " << bf.worst
              << ")\n";
    const auto rv = mgrid::reduce_vertices(c, g, hull);
    const auto rep = mgrid::verify_certificate(rv, cert);
    std::cout << "verified " << rep.vertices << " vertex tuples: worst margin " << rep.worst << ", failing "
              << rep.failing << "\n";
    std::cout << "zeta = " << cert.zeta << " (estimate " << cert.zeta_estimate << ", "
              << (cert.covers_estimate ? "covered" : "not covered") << ")\n";
    if (!bf.pass || !rep.pass) throw mgrid::CertificateError("certificate rejected");
    std::cout << "certificate accepted\n";
    return 0;
}

int cmd_synthesize(const std::string& case_path, const std::string& out, const std::string& cert_out,
                   const std::string& init, double d) {
    const auto c = load_case(case_path);
    const auto hull = mgrid::build_hull(c);
    for (const auto& w : hull.angles.offenders) std::cerr << "warning: " << w << "\n";
    mgrid::GainSet g0;
    if (!init.empty()) {
        g0 = mgrid::parse_gains(c, slurp(init));
    } else {
        g0.blocks.assign(static_cast<std::size_t>(c.n_inverters()), mgrid::Matrix2::Zero());
        for (auto& k : g0.blocks) k << -0.02, 0.0, 0.0, -0.01;
    }
    const auto Y = mgrid::build_admittance(c);
    std::optional<mgrid::VoltageProfile> x0;
    try {
        x0 = mgrid::solve_sharing_point(c, Y, c.base_loads(), c.inverter_indices()).x;
    } catch (const mgrid::NumericalError&) {
    }
    const auto samples = mgrid::kappa_samples(c, x0);
    const double kappa = mgrid::kappa_bound(c, Y, samples).kappa;
    mgrid::SynthesisOptions opt;
    opt.d_target = d;
    opt.zeta_estimator = [&](const mgrid::GainSet& g) { return mgrid::zeta_estimate(c, Y, g, samples, kappa); };
    opt.log = [](const std::string& s) { std::cerr << s << "\n"; };
    const auto res = mgrid::synthesize_gains(c, hull, g0, opt);
    const std::string gains_text = mgrid::gains_to_json(c, res.gains).dump(2) + "\n";
    const std::string cert_text = mgrid::certificate_to_json(res.cert).dump(2) + "\n";
    if (out.empty()) {
        std::cout << gains_text << cert_text;
    } else {
        dump(out, gains_text);
        std::string cpath = cert_out;
        if (cpath.empty()) {
            cpath = out;
            const auto dot = cpath.rfind(".json");
            cpath = (dot == std::string::npos ? cpath : cpath.substr(0, dot)) + ".cert.json";
        }
        dump(cpath, cert_text);
        std::cerr << "wrote " << out << " and " << cpath << "\n";
    }
    std::cerr << "kappa = " << kappa << ", zeta = " << res.cert.zeta << " (estimate " << res.cert.zeta_estimate
              << "), xi = " << res.cert.xi << ", eps = " << res.cert.eps << ", worst margin "
              << res.cert.worst_margin << "\n";
    return 0;
}

int cmd_simulate(const std::string& case_path, const std::string& gains_path, const std::string& scenario_path,
                 const std::string& out) {
    const auto c = load_case(case_path);
    const auto g = mgrid::parse_gains(c, slurp(gains_path));
    const auto sc = mgrid::parse_scenario(slurp(scenario_path));
    const auto res = mgrid::run_scenario(c, g, sc, mgrid::SimConfig::from(sc.sim));
    if (out.empty()) {
        mgrid::write_csv(std::cout, res.trace);
    } else {
        std::ofstream f(out);
        if (!f) throw mgrid::ValidationError("cannot write " + out);
        mgrid::write_csv(f, res.trace);
    }
    if (res.uncertified) std::cerr << "warning: comm graph disconnected during the run; sharing is not certified\n";
    return 0;
}

int cmd_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw mgrid::ValidationError("cannot open " + path);
    const auto m = mgrid::metrics(mgrid::read_csv(in));
    std::cout << std::setprecision(10);
    std::cout << "final_share_err_P " << m.final_share_err_P << "\n";
    std::cout << "final_share_err_Q " << m.final_share_err_Q << "\n";
    std::cout << "max_freq_dev_hz " << m.max_freq_dev << "\n";
    std::cout << "final_freq_dev_hz " << m.final_freq_dev << "\n";
    std::cout << "max_voltage_dev " << m.max_voltage_dev << "\n";
    std::cout << "max_branch_angle_rad " << m.max_branch_angle << "\n";
    std::cout << "angle_violation_rows " << m.angle_violations << "\n";
    std::cout << "clamp_rows " << m.clamp_rows << "\n";
    std::cout << "settle_time_P " << m.settle_time_P << "\n";
    std::cout << "settle_time_Q " << m.settle_time_Q << "\n";
    for (const auto& [col, r] : m.E_range) std::cout << col << " " << r.first << " " << r.second << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"microgrid consensus-control simulator and certification toolkit"};
    app.require_subcommand(1);

    std::string case_path, gains_path, scenario_path, cert_path, out, cert_out, init, kind = "Jbar", trace_path;
    bool strict = false;
    double d = 1e-3;

    auto* check = app.add_subcommand("check-case", "report the operating-point existence conditions");
    check->add_option("case", case_path)->required();

    auto* bounds = app.add_subcommand("bounds", "per-block Jacobian hull and entry bounds");
    bounds->add_option("case", case_path)->required();
    bounds->add_option("--kind", kind, "Jbar or Dbar");
    bounds->add_flag("--strict", strict, "reject cases that violate the admittance-angle hypothesis");

    auto* certify = app.add_subcommand("certify", "check block feasibility, or verify a certificate");
    certify->add_option("case", case_path)->required();
    certify->add_option("gains", gains_path)->required();
    certify->add_option("--cert", cert_path, "certificate to verify");
    certify->add_option("--d", d, "required block margin when no certificate is given");

    auto* synth = app.add_subcommand("synthesize", "synthesize gains and a stability certificate");
    synth->add_option("case", case_path)->required();
    synth->add_option("--out", out, "gains output; the certificate goes next to it as .cert.json");
    synth->add_option("--cert-out", cert_out, "certificate output path");
    synth->add_option("--init", init, "initial gains");
    synth->add_option("--d", d, "block margin target");

    auto* sim = app.add_subcommand("simulate", "run a scenario and write the CSV trace");
    sim->add_option("case", case_path)->required();
    sim->add_option("gains", gains_path)->required();
    sim->add_option("scenario", scenario_path)->required();
    sim->add_option("--out", out, "trace output (default: stdout)");

    auto* met = app.add_subcommand("metrics", "summarize a CSV trace");
    met->add_option("trace", trace_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*check) return cmd_check_case(case_path);
        if (*bounds) return cmd_bounds(case_path, kind, strict);
        if (*certify) return cmd_certify(case_path, gains_path, cert_path, d);
        if (*synth) return cmd_synthesize(case_path, out, cert_out, init, d);
        if (*sim) return cmd_simulate(case_path, gains_path, scenario_path, out);
        if (*met) return cmd_metrics(trace_path);
    } catch (const mgrid::CertificateError& e) {
        std::cerr << "certificate error: " << e.what() << "\n";
        return 3;
    } catch (const mgrid::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const mgrid::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const mgrid::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const mgrid::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
