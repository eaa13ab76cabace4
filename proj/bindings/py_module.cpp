// Python bindings for the main operations: configuration, simulation,
// pricing, validation, and the residual report. Everything routes through
// the same RunConfig pipeline as the command-line tool, so a python session
// and a config file describe the identical experiment (same digests, same
// numbers).
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mfstop/cli.hpp"
#include "mfstop/coeffs.hpp"
#include "mfstop/harness.hpp"
#include "mfstop/hjb.hpp"
#include "mfstop/mkvsde.hpp"
#include "mfstop/stopping.hpp"

namespace py = pybind11;
using namespace mfstop;

namespace {

py::dict report_to_dict(const harness::ValidationReport& rep) {
    py::dict d;
    d["check"] = rep.check;
    d["problem"] = rep.problem;
    d["mode"] = rep.mode;
    d["seed"] = rep.seed;
    d["n_paths"] = rep.n_paths;
    d["n_steps"] = rep.n_steps;
    d["statistic"] = rep.statistic;
    d["tolerance"] = rep.tolerance;
    d["se"] = rep.se;
    d["threshold"] = rep.threshold;
    d["pass"] = rep.pass;
    d["detail"] = rep.detail;
    return d;
}

py::dict simulate(const cli::RunConfig& cfg) {
    const auto inst = cfg.instance();
    const auto sim = cli::simulate_for(cfg, inst);
    const auto& grid = sim.paths.grid;
    const std::size_t M = grid.steps();
    const auto dim = static_cast<std::size_t>(sim.paths.dim);

    py::array_t<double> paths({sim.paths.paths, M + 1, dim});
    std::copy(sim.paths.states.begin(), sim.paths.states.end(), paths.mutable_data());

    py::list times, mean, second;
    for (std::size_t k = 0; k <= M; ++k) {
        times.append(grid.nodes[k]);
        const auto& mu = sim.flow.ensembles[k];
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t p = 0; p < mu.size(); ++p) {
            m1 += mu.row(p)[0];
            m2 += mu.row(p)[0] * mu.row(p)[0];
        }
        mean.append(m1 / static_cast<double>(mu.size()));
        second.append(m2 / static_cast<double>(mu.size()));
    }

    py::dict out;
    out["digest"] = cfg.digest();
    out["times"] = times;
    out["mean"] = mean;
    out["second_moment"] = second;
    out["paths"] = paths;
    return out;
}

py::dict price(const cli::RunConfig& cfg) {
    const auto pr = cli::price_for(cfg);
    py::dict out;
    out["digest"] = cfg.digest();
    out["root_value"] = pr.root_value;
    out["disintegrated_value"] = pr.disintegrated_value;
    out["disintegrated_se"] = pr.disintegrated_se;
    out["policy_lower_bound"] = pr.policy_lower_bound;
    out["policy_se"] = pr.policy_se;
    return out;
}

py::dict policy(const cli::RunConfig& cfg) {
    const auto inst = cfg.instance();
    const auto sim = cli::simulate_for(cfg, inst);
    const auto sol = cli::solve_for(cfg, inst, sim);
    const std::size_t M = inst.steps;

    const auto stops = stopping::optimal_stop_times(sol.rule, inst.spec, sim.paths);
    py::list exercise_fraction, stopped_cumulative;
    for (std::size_t k = 0; k <= M; ++k) {
        std::size_t exe = 0, done = 0;
        for (std::size_t p = 0; p < sim.paths.paths; ++p) {
            const double* x = sim.paths.state(p, k);
            if (sol.rule.exercise(inst.spec, k, x, x)) ++exe;
            if (stops[p] <= k) ++done;
        }
        exercise_fraction.append(static_cast<double>(exe) /
                                 static_cast<double>(sim.paths.paths));
        stopped_cumulative.append(static_cast<double>(done) /
                                  static_cast<double>(sim.paths.paths));
    }

    py::dict out;
    out["digest"] = cfg.digest();
    out["rule_json"] = stopping::rule_to_json(sol.rule);
    out["exercise_fraction"] = exercise_fraction;
    out["stopped_cumulative"] = stopped_cumulative;
    return out;
}

py::list validate(const cli::RunConfig& cfg) {
    const auto inst = cfg.instance();
    const auto checks = cfg.checks.empty() ? cli::known_checks() : cfg.checks;
    const auto reports =
        harness::run_validation_suite(inst, checks, cfg.paths, cfg.seed, cfg.solver());
    py::list out;
    for (const auto& rep : reports) out.append(report_to_dict(rep));
    return out;
}

py::dict hjb_residual(const cli::RunConfig& cfg) {
    const auto inst = cfg.instance();
    const auto sim = cli::simulate_for(cfg, inst);
    const auto sol = cli::solve_for(cfg, inst, sim);
    const auto rep = hjb::region_residual_report(sol, inst.spec, sim.flow);

    const std::size_t n = rep.rows.size();
    py::array_t<double> t(n), residual(n);
    py::array_t<double> x({n, static_cast<std::size_t>(rep.dim_x)});
    py::list region;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& row = rep.rows[i];
        t.mutable_at(i) = row.t;
        residual.mutable_at(i) = row.residual;
        for (std::size_t c = 0; c < row.x.size(); ++c) x.mutable_at(i, c) = row.x[c];
        region.append(row.stopping ? "stopping" : (row.boundary ? "boundary" : "continuation"));
    }

    py::dict out;
    out["digest"] = cfg.digest();
    out["continuation_count"] = rep.continuation_count;
    out["continuation_mean"] = rep.continuation_mean;
    out["continuation_max"] = rep.continuation_max;
    out["boundary_count"] = rep.boundary_count;
    out["stopping_count"] = rep.stopping_count;
    out["stopping_max"] = rep.stopping_max;
    out["t"] = t;
    out["x"] = x;
    out["residual"] = residual;
    out["region"] = region;
    return out;
}

} // namespace

PYBIND11_MODULE(_mfstop, m) {
    m.doc() = "Optimal stopping for mean-field (McKean-Vlasov) dynamics: interacting-particle "
              "simulation, Snell-envelope solvers, and a validation harness.";

    py::class_<cli::RunConfig>(m, "RunConfig",
                               "One experiment: the same flat key-value record the command-line "
                               "tool reads. `out` and `threads` never affect results or digests.")
        .def(py::init<>())
        .def_readwrite("problem", &cli::RunConfig::problem)
        .def_readwrite("overrides", &cli::RunConfig::overrides)
        .def_readwrite("initial", &cli::RunConfig::initial)
        .def_readwrite("t0", &cli::RunConfig::t0)
        .def_readwrite("horizon", &cli::RunConfig::horizon)
        .def_readwrite("steps", &cli::RunConfig::steps)
        .def_readwrite("paths", &cli::RunConfig::paths)
        .def_readwrite("seed", &cli::RunConfig::seed)
        .def_readwrite("mode", &cli::RunConfig::mode)
        .def_readwrite("basis", &cli::RunConfig::basis)
        .def_readwrite("tie_eps", &cli::RunConfig::tie_eps)
        .def_readwrite("ridge_lambda", &cli::RunConfig::ridge_lambda)
        .def_readwrite("lattice_points", &cli::RunConfig::lattice_points)
        .def_readwrite("quad_points", &cli::RunConfig::quad_points)
        .def_readwrite("lattice_margin", &cli::RunConfig::lattice_margin)
        .def_readwrite("threads", &cli::RunConfig::threads)
        .def_readwrite("checks", &cli::RunConfig::checks)
        .def("canonical", &cli::RunConfig::canonical,
             "Canonical key=value rendering of the experiment-relevant fields.")
        .def("digest", &cli::RunConfig::digest,
             "16-hex-digit hash of canonical(); identifies the experiment, not the execution.")
        .def_static("from_text", &cli::parse_config_text, py::arg("text"),
                    "Parse config-file text (throws ValueError on unknown or malformed keys).")
        .def("__repr__", [](const cli::RunConfig& cfg) {
            return "<RunConfig " + cfg.digest() + ": " +
                   (cfg.problem.empty() ? std::string("(no problem)") : cfg.problem) + ">";
        });

    m.def("builtin_names", &coeffs::builtin_names, "Names of the built-in problems.");
    m.def("builtin_blurb", &coeffs::builtin_blurb, py::arg("name"),
          "One-line description of a built-in problem.");
    m.def("known_checks", [] { return cli::known_checks(); },
          "Check names accepted by validate().");

    m.def("simulate", &simulate, py::arg("config"),
          "Coupled particle simulation. Returns dict with times, per-node mean and second "
          "moment of the first coordinate, and the full path array (paths, steps+1, dim).");
    m.def("price", &price, py::arg("config"),
          "Solve and price: root value at the mean initial state, disintegrated value with "
          "standard error, and an out-of-sample policy lower bound.");
    m.def("policy", &policy, py::arg("config"),
          "Trained stopping rule as JSON plus per-node exercise fraction and the cumulative "
          "fraction of paths already stopped.");
    m.def("validate", &validate, py::arg("config"),
          "Run the named checks from config.checks (all known checks when empty); one dict "
          "per report.");
    m.def("hjb_residual", &hjb_residual, py::arg("config"),
          "Region residual report for the solved surface: summary statistics plus per-row "
          "t, x, residual and region labels.");

    py::register_exception<InvalidArgument>(m, "InvalidArgumentError", PyExc_ValueError);
}
