#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "json.hpp"

#include "mfstop/cli.hpp"

using namespace mfstop;
using namespace mfstop::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& work_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "mfstop_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

fs::path write_config(const std::string& name, const std::string& text) {
    const fs::path p = work_dir() / name;
    std::ofstream f(p, std::ios::binary);
    f << text;
    REQUIRE(f.good());
    return p;
}

int run(const std::string& args) {
    const std::string cmd = std::string(MFSTOP_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<std::string> data_rows(const std::string& csv) {
    std::vector<std::string> rows;
    std::istringstream in(csv);
    std::string line;
    bool past_header = false;
    while (std::getline(in, line)) {
        if (line.rfind("#", 0) == 0) continue;
        if (!past_header) {
            past_header = true; // column header
            continue;
        }
        rows.push_back(line);
    }
    return rows;
}

} // namespace

TEST_CASE("config parsing covers the full key set and rejects typos") {
    const std::string text = "# experiment record\n"
                             "problem = mf_ou\n"
                             "param.kappa = 2.5\n"
                             "param.sigma0 = 0.4\n"
                             "initial = gaussian:0.5,0.2\n"
                             "t0 = 0.25\n"
                             "horizon = 2.0\n"
                             "steps = 40   # inline comment\n"
                             "paths = 333\n"
                             "seed = 98765\n"
                             "mode = lattice\n"
                             "basis = poly2+moments+payoff\n"
                             "tie_eps = 1e-9\n"
                             "ridge_lambda = 0.001\n"
                             "lattice_points = 200\n"
                             "quad_points = 16\n"
                             "lattice_margin = 0.5\n"
                             "threads = 2\n"
                             "checks = dpp, flow\n"
                             "out = somewhere\n";
    const auto cfg = parse_config_text(text);
    CHECK(cfg.problem == "mf_ou");
    CHECK(cfg.overrides.at("kappa") == 2.5);
    CHECK(cfg.overrides.at("sigma0") == 0.4);
    CHECK(cfg.initial == "gaussian:0.5,0.2");
    CHECK(cfg.t0 == 0.25);
    CHECK(cfg.horizon == 2.0);
    CHECK(cfg.steps == 40);
    CHECK(cfg.paths == 333);
    CHECK(cfg.seed == 98765);
    CHECK(cfg.mode == "lattice");
    CHECK(cfg.basis == "poly2+moments+payoff");
    CHECK(cfg.tie_eps == 1e-9);
    CHECK(cfg.ridge_lambda == 0.001);
    CHECK(cfg.lattice_points == 200);
    CHECK(cfg.quad_points == 16);
    CHECK(cfg.lattice_margin == 0.5);
    CHECK(cfg.threads == 2);
    CHECK(cfg.checks == std::vector<std::string>{"dpp", "flow"});
    CHECK(cfg.out == "somewhere");

    const auto inst = cfg.instance();
    CHECK(inst.spec.name == "mf_ou");
    CHECK(inst.grid().steps() == 40);
    const auto scfg = cfg.solver();
    CHECK(scfg.lattice_points == 200);
    CHECK(scfg.basis.moments);
    CHECK(scfg.basis.payoff);

    CHECK_THROWS_AS(parse_config_text("problem = gbm_put\nnot_a_key = 3\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_config_text("problem gbm_put\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_config_text("steps = twelve\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_config_text("seed = -4\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_config_text("param. = 1\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_config_text("= 1\n"), InvalidArgument);
}

TEST_CASE("config validation guards the instance invariants") {
    RunConfig cfg;
    cfg.problem = "gbm_put";
    CHECK_NOTHROW(cfg.instance());

    RunConfig bad = cfg;
    bad.paths = 1;
    CHECK_THROWS_AS(bad.instance(), InvalidArgument);
    bad = cfg;
    bad.steps = 0;
    CHECK_THROWS_AS(bad.instance(), InvalidArgument);
    bad = cfg;
    bad.horizon = bad.t0;
    CHECK_THROWS_AS(bad.instance(), InvalidArgument);
    bad = cfg;
    bad.mode = "magic";
    CHECK_THROWS_AS(bad.instance(), InvalidArgument);
    bad = cfg;
    bad.threads = 0;
    CHECK_THROWS_AS(bad.instance(), InvalidArgument);
    bad = cfg;
    bad.problem = "nosuch";
    CHECK_THROWS_AS(bad.instance(), InvalidArgument);
    bad = cfg;
    bad.problem.clear();
    CHECK_THROWS_AS(bad.instance(), InvalidArgument);
}

TEST_CASE("initial-law descriptors parse and reject malformed input") {
    NoiseSource noise(4);
    const auto point = parse_initial_law("point:0.7").sample(3, 1, noise);
    for (std::size_t i = 0; i < 3; ++i) CHECK(point.row(i)[0] == 0.7);
    const auto uni = parse_initial_law("uniform:-1,1").sample(4, 1, noise);
    CHECK(uni.row(0)[0] == -1.0);
    CHECK(uni.row(1)[0] == 1.0);
    const auto gauss = parse_initial_law("gaussian:0.0,1.0");
    CHECK_NOTHROW(gauss.sample(8, 1, noise));

    CHECK_THROWS_AS(parse_initial_law("point:"), InvalidArgument);
    CHECK_THROWS_AS(parse_initial_law("uniform:1"), InvalidArgument);
    CHECK_THROWS_AS(parse_initial_law("gaussian:1"), InvalidArgument);
    CHECK_THROWS_AS(parse_initial_law("dirichlet:1,2"), InvalidArgument);
    CHECK_THROWS_AS(parse_initial_law("point:a,b"), InvalidArgument);
}

TEST_CASE("digest identifies the experiment, not the execution") {
    RunConfig cfg;
    cfg.problem = "gbm_put";
    cfg.seed = 7;
    const auto base = cfg.digest();
    CHECK(base.size() == 16);
    CHECK(cfg.digest() == base); // stable

    RunConfig other = cfg;
    other.seed = 8;
    CHECK(other.digest() != base);
    other = cfg;
    other.overrides["sigma0"] = 0.3;
    CHECK(other.digest() != base);

    // Execution details must not move the digest: outputs embedding it have
    // to stay byte-identical across thread counts and output locations.
    other = cfg;
    other.threads = 8;
    other.out = "elsewhere";
    CHECK(other.digest() == base);

    CHECK(cfg.canonical().find("problem=gbm_put\n") != std::string::npos);
    CHECK(cfg.canonical().find("seed=7\n") != std::string::npos);
    CHECK(cfg.canonical().find("checks=flow,marginals,dpp,disintegration,family,growth,hjb\n") !=
          std::string::npos);
}

TEST_CASE("simulate writes versioned deterministic flow files") {
    const auto dir = work_dir();
    const auto cfg = write_config("sim_det.cfg", "problem = det_running\n"
                                                 "initial = uniform:-1,1\n"
                                                 "paths = 64\n"
                                                 "steps = 10\n"
                                                 "seed = 5\n");
    REQUIRE(run("simulate --config " + cfg.string() + " --out " + (dir / "s1").string()) == 0);
    const auto flow = slurp(dir / "s1/flow.csv");
    CHECK(flow.rfind("# schema_version=1\n", 0) == 0);
    CHECK(flow.find("# command=simulate\n") != std::string::npos);
    CHECK(flow.find("# digest=") != std::string::npos);
    CHECK(flow.find("s,mean,second_moment\n") != std::string::npos);
    const auto rows = data_rows(flow);
    REQUIRE(rows.size() == 11);
    // Frozen dynamics: every row carries the same moments, only s moves.
    for (const auto& row : rows) {
        double s = 0.0, mean = 0.0, m2 = 0.0;
        REQUIRE(std::sscanf(row.c_str(), "%lg,%lg,%lg", &s, &mean, &m2) == 3);
        CHECK(mean == 0.0);
        CHECK(m2 == 1.0);
    }

    REQUIRE(run("simulate --config " + cfg.string() + " --out " + (dir / "s2").string()) == 0);
    CHECK(slurp(dir / "s2/flow.csv") == flow); // same config + seed, same bytes
    CHECK(slurp(dir / "s2/paths.csv") == slurp(dir / "s1/paths.csv"));

    const auto gbm = write_config("sim_gbm.cfg", "problem = gbm_put\n"
                                                 "initial = point:1.0\n"
                                                 "paths = 1000\n"
                                                 "steps = 50\n"
                                                 "seed = 11\n");
    REQUIRE(run("simulate --config " + gbm.string() + " --out " + (dir / "g1").string()) == 0);
    CHECK(data_rows(slurp(dir / "g1/flow.csv")).size() == 51);

    // Thread count must not leak into any byte of the artifacts.
    REQUIRE(run("simulate --config " + gbm.string() + " --threads 4 --out " +
                (dir / "g4").string()) == 0);
    CHECK(slurp(dir / "g4/flow.csv") == slurp(dir / "g1/flow.csv"));
    CHECK(slurp(dir / "g4/paths.csv") == slurp(dir / "g1/paths.csv"));
}

TEST_CASE("price reports the battery value exactly and the put at oracle scale") {
    const auto dir = work_dir();
    const auto det = write_config("price_det.cfg", "problem = det_running\n"
                                                   "initial = uniform:-1,1\n"
                                                   "paths = 64\n"
                                                   "steps = 16\n"
                                                   "seed = 3\n");
    REQUIRE(run("price --config " + det.string() + " --out " + (dir / "pd").string()) == 0);
    const auto jd = json::parse(slurp(dir / "pd/price.json"));
    CHECK(std::abs(jd["root_value"].get<double>() - 1.0) <= 1e-12);
    CHECK(std::abs(jd["disintegrated_value"].get<double>() - 1.0) <= 1e-12);
    CHECK(std::abs(jd["policy_lower_bound"].get<double>() - 1.0) <= 1e-12);
    CHECK(jd["schema_version"] == 1);
    CHECK(jd["command"] == "price");
    CHECK(jd["digest"].is_string());

    // Zero-rate American put = European put; lattice mode hits the
    // closed-form 0.0797 well inside 1%.
    const auto put = write_config("price_put.cfg", "problem = gbm_put\n"
                                                   "initial = point:1.0\n"
                                                   "paths = 1000\n"
                                                   "steps = 200\n"
                                                   "seed = 17\n"
                                                   "mode = lattice\n");
    REQUIRE(run("price --config " + put.string() + " --out " + (dir / "pp").string()) == 0);
    const auto jp = json::parse(slurp(dir / "pp/price.json"));
    const double bs = 0.079655674554058; // Black-Scholes put, sigma 0.2, T 1, at the money
    CHECK(std::abs(jp["root_value"].get<double>() - bs) <= 0.01 * bs);
    // Point mass: disintegrating over identical particles is the same number.
    CHECK(std::abs(jp["root_value"].get<double>() - jp["disintegrated_value"].get<double>()) <=
          1e-12);
    // Fresh-noise policy execution is a genuine lower bound up to MC noise.
    const double lb = jp["policy_lower_bound"].get<double>();
    const double lb_se = jp["policy_se"].get<double>();
    CHECK(lb <= jp["root_value"].get<double>() + 3.0 * lb_se);
    CHECK(lb >= 0.9 * bs - 3.0 * lb_se);

    // Same config and seed, different thread count: byte-identical report.
    REQUIRE(run("price --config " + put.string() + " --threads 3 --out " +
                (dir / "pp3").string()) == 0);
    CHECK(slurp(dir / "pp3/price.json") == slurp(dir / "pp/price.json"));
}

TEST_CASE("policy exports a reusable rule and exercise profile") {
    const auto dir = work_dir();
    const auto cfg = write_config("policy.cfg", "problem = mf_ou\n"
                                                "initial = uniform:-1,1\n"
                                                "paths = 256\n"
                                                "steps = 16\n"
                                                "seed = 7\n"
                                                "mode = lattice\n"
                                                "lattice_margin = 0.75\n");
    REQUIRE(run("policy --config " + cfg.string() + " --out " + (dir / "pol").string()) == 0);

    const auto rule = stopping::rule_from_json(slurp(dir / "pol/rule.json"));
    CHECK(rule.grid.steps() == 16);
    CHECK(rule.mode == stopping::StoppingRule::Mode::Lattice);
    const auto spec = coeffs::make_builtin("mf_ou");
    const double x = 0.1;
    CHECK(std::isfinite(rule.continuation(spec, 0, &x)));
    CHECK(rule.exercise(spec, 16, &x)); // terminal node always stops

    const auto csv = slurp(dir / "pol/policy.csv");
    CHECK(csv.find("s,exercise_fraction,stopped_cumulative\n") != std::string::npos);
    const auto rows = data_rows(csv);
    REQUIRE(rows.size() == 17);
    double prev = -1.0;
    for (const auto& row : rows) {
        double s = 0.0, exe = 0.0, done = 0.0;
        REQUIRE(std::sscanf(row.c_str(), "%lg,%lg,%lg", &s, &exe, &done) == 3);
        CHECK(exe >= 0.0);
        CHECK(exe <= 1.0);
        CHECK(done >= prev); // stopped fraction is cumulative
        prev = done;
    }
    double s = 0.0, exe = 0.0, done = 0.0;
    REQUIRE(std::sscanf(rows.back().c_str(), "%lg,%lg,%lg", &s, &exe, &done) == 3);
    CHECK(exe == 1.0);
    CHECK(done == 1.0);
}

TEST_CASE("validate emits json lines and drives the exit code") {
    const auto dir = work_dir();
    const auto det = write_config("val_det.cfg", "problem = det_quadratic\n"
                                                 "initial = uniform:-1,1\n"
                                                 "paths = 64\n"
                                                 "steps = 16\n"
                                                 "seed = 3\n"
                                                 "checks = flow,dpp,disintegration,family\n");
    REQUIRE(run("validate --config " + det.string() + " --out " + (dir / "v1").string()) == 0);
    std::istringstream lines(slurp(dir / "v1/reports.jsonl"));
    std::string line;
    std::size_t n_lines = 0;
    while (std::getline(lines, line)) {
        const auto j = json::parse(line); // every line is standalone JSON
        if (n_lines == 0) {
            CHECK(j["command"] == "validate");
            CHECK(j["schema_version"] == 1);
        } else {
            CHECK(j["pass"] == true);
            CHECK(j["statistic"].get<double>() <= 1e-10);
        }
        ++n_lines;
    }
    CHECK(n_lines == 5); // header + one line per check

    CHECK(run("validate --config " + det.string() + " --checks nope --out " +
              (dir / "v2").string()) == kExitUsage);

    // Too coarse a grid honestly fails the residual check.
    const auto coarse = write_config("val_coarse.cfg", "problem = mf_ou\n"
                                                       "initial = uniform:-1,1\n"
                                                       "paths = 256\n"
                                                       "steps = 4\n"
                                                       "seed = 7\n"
                                                       "mode = lattice\n"
                                                       "lattice_margin = 0.75\n"
                                                       "checks = hjb\n");
    REQUIRE(run("validate --config " + coarse.string() + " --out " + (dir / "v3").string()) ==
            kExitValidation);
    const auto failed = slurp(dir / "v3/reports.jsonl");
    CHECK(failed.find("\"pass\":false") != std::string::npos);
}

TEST_CASE("hjb-residual writes the region csv") {
    const auto dir = work_dir();
    const auto cfg = write_config("hjb.cfg", "problem = mf_ou\n"
                                             "initial = uniform:-1,1\n"
                                             "paths = 256\n"
                                             "steps = 16\n"
                                             "seed = 7\n"
                                             "mode = lattice\n"
                                             "lattice_margin = 0.75\n");
    REQUIRE(run("hjb-residual --config " + cfg.string() + " --out " + (dir / "h1").string()) == 0);
    const auto csv = slurp(dir / "h1/residuals.csv");
    CHECK(csv.find("t,x,moment_1,branch1,branch2,residual,region\n") != std::string::npos);
    CHECK(csv.find(",continuation\n") != std::string::npos);
    CHECK(csv.find(",stopping\n") != std::string::npos);
    CHECK(csv.find(",boundary\n") != std::string::npos); // free-boundary layer is tagged
}

TEST_CASE("exit codes separate usage, numerical, and validation failures") {
    const auto dir = work_dir();
    CHECK(run("price --config " + (dir / "missing.cfg").string()) == kExitUsage);
    CHECK(run("bogus-subcommand") == kExitUsage);
    CHECK(run("") == kExitUsage);
    CHECK(run("list-problems") == 0);

    const auto bad = write_config("bad_problem.cfg", "problem = nosuch\n");
    CHECK(run("price --config " + bad.string() + " --out " + (dir / "e1").string()) ==
          kExitUsage);

    // A wildly explosive volatility override trips the divergence guard.
    const auto div = write_config("diverge.cfg", "problem = gbm_put\n"
                                                 "initial = point:1.0\n"
                                                 "param.sigma0 = 50.0\n"
                                                 "paths = 64\n"
                                                 "steps = 50\n"
                                                 "seed = 1\n");
    CHECK(run("simulate --config " + div.string() + " --out " + (dir / "e2").string()) ==
          kExitNumerical);
}
