#include "mfstop/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mfstop/errors.hpp"
#include "mfstop/harness.hpp"
#include "mfstop/hjb.hpp"
#include "mfstop/mkvsde.hpp"

namespace mfstop::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, sep)) out.push_back(trim(tok));
    if (!s.empty() && s.back() == sep) out.push_back("");
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos == value.size() && std::isfinite(v)) return v;
    } catch (const std::exception&) {
    }
    throw InvalidArgument("config: bad numeric value for '" + key + "': " + value);
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(value, &pos);
        if (pos == value.size() && value[0] != '-') return v;
    } catch (const std::exception&) {
    }
    throw InvalidArgument("config: bad integer value for '" + key + "': " + value);
}

std::string join(const std::vector<std::string>& items) {
    std::string s;
    for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + items[i];
    return s;
}

std::vector<std::string> effective_checks(const RunConfig& cfg) {
    return cfg.checks.empty() ? known_checks() : cfg.checks;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InvalidArgument("cannot open output file: " + path.string());
    f << content;
    f.flush();
    if (!f.good()) throw InvalidArgument("write failed: " + path.string());
}

fs::path out_dir(const RunConfig& cfg) {
    fs::path dir(cfg.out.empty() ? "." : cfg.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw InvalidArgument("cannot create output directory: " + dir.string());
    return dir;
}

/// Comment header embedded in every CSV artifact.
std::string csv_header(const char* command, const RunConfig& cfg) {
    std::string h = "# schema_version=1\n";
    h += std::string("# command=") + command + "\n";
    h += "# digest=" + cfg.digest() + "\n";
    h += "# problem=" + cfg.problem + "\n";
    h += "# seed=" + std::to_string(cfg.seed) + "\n";
    return h;
}

} // namespace

mkv::SimResult simulate_for(const RunConfig& cfg, const coeffs::ProblemInstance& inst) {
    NoiseSource noise(cfg.seed);
    const auto init = inst.initial.sample(cfg.paths, inst.spec.dim_x, noise);
    mkv::SimOptions so;
    so.threads = cfg.threads;
    return mkv::simulate_mkv(inst.spec, init, inst.grid(), noise, 0, so);
}

stopping::SnellSolution solve_for(const RunConfig& cfg, const coeffs::ProblemInstance& inst,
                                  const mkv::SimResult& sim) {
    const auto scfg = cfg.solver();
    if (cfg.mode == "lattice") return stopping::snell_backward_lattice(inst.spec, sim.flow, scfg);
    return stopping::snell_backward_regression(inst.spec, sim.paths, sim.flow, scfg);
}

PriceResult price_for(const RunConfig& cfg) {
    const auto inst = cfg.instance();
    const auto sim = simulate_for(cfg, inst);
    const auto sol = solve_for(cfg, inst, sim);

    // Extended value at the representative initial state (the ensemble mean);
    // at node 0 a path's initial particle is the state itself, so augmented
    // bases are well defined here.
    const auto& init = sim.flow.ensembles[0];
    std::vector<double> xbar(static_cast<std::size_t>(inst.spec.dim_x), 0.0);
    for (std::size_t p = 0; p < init.size(); ++p)
        for (std::size_t c = 0; c < xbar.size(); ++c) xbar[c] += init.row(p)[c];
    for (double& v : xbar) v /= static_cast<double>(init.size());

    const auto pol = stopping::execute_policy(sol.rule, inst.spec, init, sim.flow,
                                              NoiseSource(cfg.seed).derived(0x706f6c6963ULL),
                                              cfg.solver());

    PriceResult out;
    out.root_value = std::max(inst.spec.terminal(xbar.data()),
                              sol.rule.continuation(inst.spec, 0, xbar.data(), xbar.data()));
    out.disintegrated_value = sol.surface.root_value;
    out.disintegrated_se = sol.surface.root_se;
    out.policy_lower_bound = pol.mean;
    out.policy_se = pol.se;
    return out;
}

namespace {

int cmd_simulate(const RunConfig& cfg) {
    const auto inst = cfg.instance();
    const auto sim = simulate_for(cfg, inst);
    const auto dir = out_dir(cfg);
    const std::size_t M = inst.steps;

    std::string flow = csv_header("simulate", cfg);
    flow += "s,mean,second_moment\n";
    std::string paths = csv_header("simulate", cfg);
    paths += "s,min,max,mean,sd\n";
    for (std::size_t k = 0; k <= M; ++k) {
        const auto& ens = sim.flow.ensembles[k];
        const double n = static_cast<double>(ens.size());
        double mean = 0.0, m2 = 0.0, lo = ens.row(0)[0], hi = ens.row(0)[0];
        for (std::size_t p = 0; p < ens.size(); ++p) {
            const double x = ens.row(p)[0];
            mean += x;
            m2 += x * x;
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        mean /= n;
        m2 /= n;
        double ss = 0.0;
        for (std::size_t p = 0; p < ens.size(); ++p) {
            const double d = ens.row(p)[0] - mean;
            ss += d * d;
        }
        const double sd = std::sqrt(ss / (n - 1.0));
        const double s = sim.flow.grid.nodes[k];
        flow += g17(s) + "," + g17(mean) + "," + g17(m2) + "\n";
        paths += g17(s) + "," + g17(lo) + "," + g17(hi) + "," + g17(mean) + "," + g17(sd) + "\n";
    }
    const auto flow_path = dir / "flow.csv";
    const auto paths_path = dir / "paths.csv";
    write_file(flow_path, flow);
    write_file(paths_path, paths);
    std::printf("digest=%s\nwrote %s\nwrote %s\n", cfg.digest().c_str(),
                flow_path.string().c_str(), paths_path.string().c_str());
    return 0;
}

int cmd_price(const RunConfig& cfg) {
    const auto pr = price_for(cfg);
    const auto dir = out_dir(cfg);

    json j;
    j["schema_version"] = 1;
    j["command"] = "price";
    j["digest"] = cfg.digest();
    j["problem"] = cfg.problem;
    j["mode"] = cfg.mode;
    j["seed"] = cfg.seed;
    j["n_paths"] = cfg.paths;
    j["n_steps"] = cfg.steps;
    j["root_value"] = pr.root_value;
    j["disintegrated_value"] = pr.disintegrated_value;
    j["disintegrated_se"] = pr.disintegrated_se;
    j["policy_lower_bound"] = pr.policy_lower_bound;
    j["policy_se"] = pr.policy_se;
    const auto price_path = dir / "price.json";
    write_file(price_path, j.dump() + "\n");
    std::printf("digest=%s\nroot_vtilde=%.12g\ndisintegrated=%.12g se=%.3g\n"
                "policy_lower_bound=%.12g se=%.3g\nwrote %s\n",
                cfg.digest().c_str(), pr.root_value, pr.disintegrated_value, pr.disintegrated_se,
                pr.policy_lower_bound, pr.policy_se, price_path.string().c_str());
    return 0;
}

int cmd_policy(const RunConfig& cfg) {
    const auto inst = cfg.instance();
    const auto sim = simulate_for(cfg, inst);
    const auto sol = solve_for(cfg, inst, sim);
    const auto dir = out_dir(cfg);

    json rule = json::parse(stopping::rule_to_json(sol.rule));
    rule["digest"] = cfg.digest();
    const auto rule_path = dir / "rule.json";
    write_file(rule_path, rule.dump(2) + "\n");

    const auto stops = stopping::optimal_stop_times(sol.rule, inst.spec, sim.paths);
    const std::size_t M = inst.steps;
    const double n = static_cast<double>(sim.paths.paths);
    std::string csv = csv_header("policy", cfg);
    csv += "s,exercise_fraction,stopped_cumulative\n";
    for (std::size_t k = 0; k <= M; ++k) {
        std::size_t exe = 0, done = 0;
        for (std::size_t p = 0; p < sim.paths.paths; ++p) {
            if (sol.rule.exercise(inst.spec, k, sim.paths.state(p, k), sim.paths.state(p, 0)))
                ++exe;
            if (stops[p] <= k) ++done;
        }
        csv += g17(sim.paths.grid.nodes[k]) + "," + g17(static_cast<double>(exe) / n) + "," +
               g17(static_cast<double>(done) / n) + "\n";
    }
    const auto csv_path = dir / "policy.csv";
    write_file(csv_path, csv);
    std::printf("digest=%s\nwrote %s\nwrote %s\n", cfg.digest().c_str(),
                rule_path.string().c_str(), csv_path.string().c_str());
    return 0;
}

int cmd_validate(const RunConfig& cfg) {
    const auto checks = effective_checks(cfg);
    const auto& known = known_checks();
    for (const auto& c : checks)
        if (std::find(known.begin(), known.end(), c) == known.end()) {
            std::fprintf(stderr, "error: unknown check '%s' (known: %s)\n", c.c_str(),
                         join(known).c_str());
            return kExitUsage;
        }
    const auto inst = cfg.instance();
    const auto reports =
        harness::run_validation_suite(inst, checks, cfg.paths, cfg.seed, cfg.solver());

    json head;
    head["schema_version"] = 1;
    head["command"] = "validate";
    head["digest"] = cfg.digest();
    std::string lines = head.dump() + "\n";
    bool all_pass = true;
    for (const auto& rep : reports) {
        lines += harness::report_to_json(rep) + "\n";
        all_pass = all_pass && rep.pass;
    }
    const auto dir = out_dir(cfg);
    const auto report_path = dir / "reports.jsonl";
    write_file(report_path, lines);
    std::fputs(harness::summary_table(reports).c_str(), stdout);
    std::printf("digest=%s\nwrote %s\n", cfg.digest().c_str(), report_path.string().c_str());
    return all_pass ? 0 : kExitValidation;
}

int cmd_hjb_residual(const RunConfig& cfg) {
    const auto inst = cfg.instance();
    const auto sim = simulate_for(cfg, inst);
    const auto sol = solve_for(cfg, inst, sim);
    const auto rep = hjb::region_residual_report(sol, inst.spec, sim.flow);
    const auto dir = out_dir(cfg);
    const auto csv_path = dir / "residuals.csv";
    write_file(csv_path, csv_header("hjb-residual", cfg) + hjb::report_to_csv(rep));
    std::printf("digest=%s\ncontinuation: n=%zu mean=%.6g max=%.6g\nboundary rows: %zu\n"
                "stopping: n=%zu max|u-g|=%.6g\nwrote %s\n",
                cfg.digest().c_str(), rep.continuation_count, rep.continuation_mean,
                rep.continuation_max, rep.boundary_count, rep.stopping_count, rep.stopping_max,
                csv_path.string().c_str());
    return 0;
}

int cmd_list_problems() {
    std::printf("%-15s %5s %6s %8s  %s\n", "name", "dim_x", "noise", "moments", "description");
    for (const auto& name : coeffs::builtin_names()) {
        const auto spec = coeffs::make_builtin(name);
        std::printf("%-15s %5d %6d %8zu  %s\n", name.c_str(), spec.dim_x, spec.dim_w,
                    spec.moments.size(), coeffs::builtin_blurb(name).c_str());
    }
    return 0;
}

} // namespace

const std::vector<std::string>& known_checks() {
    static const std::vector<std::string> names = {"flow",   "marginals", "dpp", "disintegration",
                                                   "family", "growth",    "hjb"};
    return names;
}

coeffs::InitialLaw parse_initial_law(const std::string& text) {
    const auto colon = text.find(':');
    const std::string kind = trim(text.substr(0, colon));
    std::vector<double> nums;
    if (colon != std::string::npos)
        for (const auto& tok : split(text.substr(colon + 1), ','))
            nums.push_back(parse_double("initial", tok));
    if (kind == "point") {
        if (nums.empty()) throw InvalidArgument("config: initial point needs coordinates");
        return coeffs::InitialLaw::point_mass(nums);
    }
    if (kind == "uniform") {
        if (nums.size() < 2)
            throw InvalidArgument("config: initial uniform needs at least two atoms");
        std::vector<std::vector<double>> atoms;
        for (double v : nums) atoms.push_back({v});
        return coeffs::InitialLaw::finite_uniform(atoms);
    }
    if (kind == "gaussian") {
        if (nums.size() != 2) throw InvalidArgument("config: initial gaussian is gaussian:mean,sd");
        return coeffs::InitialLaw::gaussian({nums[0]}, {nums[1]});
    }
    throw InvalidArgument("config: unknown initial law '" + text +
                          "' (point:v[,v..], uniform:a,b[,..], gaussian:mean,sd)");
}

coeffs::ProblemInstance RunConfig::instance() const {
    if (problem.empty()) throw InvalidArgument("config: 'problem' is required");
    if (paths < 2) throw InvalidArgument("config: paths must be at least 2");
    if (steps < 1) throw InvalidArgument("config: steps must be at least 1");
    if (!(horizon > t0)) throw InvalidArgument("config: horizon must exceed t0");
    if (mode != "regression" && mode != "lattice")
        throw InvalidArgument("config: mode must be regression or lattice");
    if (threads < 1) throw InvalidArgument("config: threads must be positive");
    coeffs::ProblemInstance inst;
    inst.spec = coeffs::make_builtin(problem, overrides);
    inst.t0 = t0;
    inst.horizon = horizon;
    inst.steps = steps;
    inst.initial = parse_initial_law(initial);
    if (mode == "lattice" && inst.spec.dim_x != 1)
        throw InvalidArgument("config: lattice mode needs a 1-d problem");
    return inst;
}

stopping::SolverConfig RunConfig::solver() const {
    stopping::SolverConfig s;
    s.basis = stopping::FeatureBasis::parse(basis);
    s.tie_eps = tie_eps;
    s.ridge_lambda = ridge_lambda;
    s.threads = threads;
    s.lattice_points = lattice_points;
    s.quad_points = quad_points;
    s.lattice_margin = lattice_margin;
    return s;
}

std::string RunConfig::canonical() const {
    std::string s;
    s += "basis=" + basis + "\n";
    s += "checks=" + join(effective_checks(*this)) + "\n";
    s += "horizon=" + g17(horizon) + "\n";
    s += "initial=" + initial + "\n";
    s += "lattice_margin=" + g17(lattice_margin) + "\n";
    s += "lattice_points=" + std::to_string(lattice_points) + "\n";
    s += "mode=" + mode + "\n";
    for (const auto& [key, value] : overrides) s += "param." + key + "=" + g17(value) + "\n";
    s += "paths=" + std::to_string(paths) + "\n";
    s += "problem=" + problem + "\n";
    s += "quad_points=" + std::to_string(quad_points) + "\n";
    s += "ridge_lambda=" + g17(ridge_lambda) + "\n";
    s += "seed=" + std::to_string(seed) + "\n";
    s += "steps=" + std::to_string(steps) + "\n";
    s += "t0=" + g17(t0) + "\n";
    s += "tie_eps=" + g17(tie_eps) + "\n";
    return s;
}

std::string RunConfig::digest() const {
    std::uint64_t h = 14695981039346656037ULL;
    for (const unsigned char c : canonical()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InvalidArgument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw InvalidArgument("config line " + std::to_string(lineno) + ": empty key");
        if (key == "problem") {
            cfg.problem = value;
        } else if (key.rfind("param.", 0) == 0) {
            const std::string name = key.substr(6);
            if (name.empty())
                throw InvalidArgument("config line " + std::to_string(lineno) +
                                      ": empty parameter name");
            cfg.overrides[name] = parse_double(key, value);
        } else if (key == "initial") {
            cfg.initial = value;
        } else if (key == "t0") {
            cfg.t0 = parse_double(key, value);
        } else if (key == "horizon") {
            cfg.horizon = parse_double(key, value);
        } else if (key == "steps") {
            cfg.steps = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "paths") {
            cfg.paths = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "seed") {
            cfg.seed = parse_u64(key, value);
        } else if (key == "mode") {
            cfg.mode = value;
        } else if (key == "basis") {
            cfg.basis = value;
        } else if (key == "tie_eps") {
            cfg.tie_eps = parse_double(key, value);
        } else if (key == "ridge_lambda") {
            cfg.ridge_lambda = parse_double(key, value);
        } else if (key == "lattice_points") {
            cfg.lattice_points = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "quad_points") {
            cfg.quad_points = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "lattice_margin") {
            cfg.lattice_margin = parse_double(key, value);
        } else if (key == "threads") {
            cfg.threads = static_cast<int>(parse_u64(key, value));
        } else if (key == "checks") {
            cfg.checks.clear();
            for (const auto& tok : split(value, ','))
                if (!tok.empty()) cfg.checks.push_back(tok);
        } else if (key == "out") {
            cfg.out = value;
        } else {
            throw InvalidArgument("config line " + std::to_string(lineno) + ": unknown key '" +
                                  key + "'");
        }
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InvalidArgument("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"mfstop: mean-field optimal stopping solver"};
    app.require_subcommand(1);

    std::string config_path, out_flag, mode_flag, checks_flag;
    std::uint64_t seed_flag = 0;
    int threads_flag = 1;

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config file")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--seed", seed_flag, "override the config seed");
        sub->add_option("--out", out_flag, "override the output directory");
        sub->add_option("--mode", mode_flag, "override the solver mode")
            ->check(CLI::IsMember({"regression", "lattice"}));
        sub->add_option("--threads", threads_flag, "override the worker thread count")
            ->check(CLI::PositiveNumber);
    };

    auto* sim = app.add_subcommand("simulate", "simulate the particle system, write flow CSVs");
    add_common(sim);
    auto* price = app.add_subcommand("price", "solve the stopping problem, write the value report");
    add_common(price);
    auto* policy = app.add_subcommand("policy", "export the trained rule and exercise profile");
    add_common(policy);
    auto* validate = app.add_subcommand("validate", "run structural-identity checks");
    add_common(validate);
    validate->add_option("--checks", checks_flag, "comma list of checks to run");
    auto* hjb_cmd = app.add_subcommand("hjb-residual", "sample the variational-inequality residual");
    add_common(hjb_cmd);
    app.add_subcommand("list-problems", "list builtin problems");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    CLI::App* active = app.get_subcommands().front();
    try {
        if (active->get_name() == "list-problems") return cmd_list_problems();
        RunConfig cfg = parse_config_file(config_path);
        if (active->count("--seed")) cfg.seed = seed_flag;
        if (active->count("--out")) cfg.out = out_flag;
        if (active->count("--mode")) cfg.mode = mode_flag;
        if (active->count("--threads")) cfg.threads = threads_flag;
        if (active == validate && validate->count("--checks")) {
            cfg.checks.clear();
            for (const auto& tok : split(checks_flag, ','))
                if (!tok.empty()) cfg.checks.push_back(tok);
        }
        if (active == sim) return cmd_simulate(cfg);
        if (active == price) return cmd_price(cfg);
        if (active == policy) return cmd_policy(cfg);
        if (active == validate) return cmd_validate(cfg);
        if (active == hjb_cmd) return cmd_hjb_residual(cfg);
        std::fprintf(stderr, "error: unhandled subcommand\n");
        return kExitUsage;
    } catch (const InvalidArgument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kExitNumerical;
    }
}

} // namespace mfstop::cli
