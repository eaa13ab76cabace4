#ifndef MFSTOP_CLI_HPP
#define MFSTOP_CLI_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mfstop/coeffs.hpp"
#include "mfstop/mkvsde.hpp"
#include "mfstop/stopping.hpp"

namespace mfstop::cli {

/**
 * One experiment = one flat key-value config file. Lines are `key = value`,
 * blank lines and `#` comments ignored, no includes. Keys:
 *
 *   problem          builtin name (required)
 *   param.<name>     numeric override forwarded to the builtin
 *   initial          point:v[,v..] | uniform:a,b[,..] | gaussian:mean,sd
 *   t0, horizon      time window (horizon > t0)
 *   steps, paths     grid steps M >= 1, particles N >= 2
 *   seed             uint64 noise seed
 *   mode             regression | lattice (lattice needs a 1-d problem)
 *   basis            feature-basis descriptor (see FeatureBasis::parse)
 *   tie_eps, ridge_lambda, lattice_points, quad_points, lattice_margin
 *   threads          worker threads (outputs do not depend on it)
 *   checks           comma list for `validate` (default: every known check)
 *   out              output directory (default ".")
 *
 * Unknown keys are rejected: a config file is a reproducible experiment
 * record, so typos must not silently fall back to defaults.
 */
struct RunConfig {
    std::string problem;
    std::map<std::string, double> overrides;
    std::string initial = "point:1.0";
    double t0 = 0.0;
    double horizon = 1.0;
    std::size_t steps = 50;
    std::size_t paths = 1024;
    std::uint64_t seed = 1;
    std::string mode = "regression";
    std::string basis = "default";
    double tie_eps = 0.0;
    double ridge_lambda = 0.0;
    std::size_t lattice_points = 400;
    std::size_t quad_points = 24;
    double lattice_margin = 0.25;
    int threads = 1;
    std::vector<std::string> checks;
    std::string out = ".";

    /// Validates and materializes the problem instance (throws InvalidArgument).
    coeffs::ProblemInstance instance() const;
    /// Solver knobs from the config (basis parsed from the descriptor).
    stopping::SolverConfig solver() const;

    /**
     * Canonical `key=value` rendering of every experiment-relevant field in
     * fixed order. `out` and `threads` are excluded on purpose: neither may
     * change what is computed, and the digest below is embedded in output
     * files that must stay byte-identical across thread counts.
     */
    std::string canonical() const;
    /// FNV-1a 64-bit hash of canonical(), 16 hex digits.
    std::string digest() const;
};

/// Parses config text / file; throws InvalidArgument on malformed or unknown keys.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

/// Coupled particle simulation for a config: fresh noise from cfg.seed,
/// initial law sampled at cfg.paths particles, cfg.threads workers.
mkv::SimResult simulate_for(const RunConfig& cfg, const coeffs::ProblemInstance& inst);

/// Snell solve on an existing simulation, dispatched on cfg.mode.
stopping::SnellSolution solve_for(const RunConfig& cfg, const coeffs::ProblemInstance& inst,
                                  const mkv::SimResult& sim);

/// Everything the price command reports, minus the file I/O. root_value is
/// the extended value at the ensemble-mean initial state; the disintegrated
/// pair averages node-0 values over the initial ensemble; the policy pair is
/// an out-of-sample lower bound from executing the trained rule on fresh
/// noise.
struct PriceResult {
    double root_value = 0.0;
    double disintegrated_value = 0.0;
    double disintegrated_se = 0.0;
    double policy_lower_bound = 0.0;
    double policy_se = 0.0;
};

PriceResult price_for(const RunConfig& cfg);

/// Initial-law descriptor used by the `initial` key.
coeffs::InitialLaw parse_initial_law(const std::string& text);

/// Check names accepted by `validate` (the harness dispatcher's vocabulary).
const std::vector<std::string>& known_checks();

/// Process exit codes (0 = success).
inline constexpr int kExitUsage = 2;      // bad flags, config, or check names
inline constexpr int kExitNumerical = 3;  // divergence/capacity/coefficient failures
inline constexpr int kExitValidation = 4; // validate ran and at least one check failed

/**
 * Full command-line entry point: subcommands simulate, price, policy,
 * validate, hjb-residual, list-problems; flags --config, --seed, --out,
 * --mode, --checks, --threads override the config file. Never throws; all
 * failures map onto the exit codes above.
 */
int run_cli(int argc, const char* const* argv);

} // namespace mfstop::cli

#endif
