#ifndef MFSTOP_HARNESS_HPP
#define MFSTOP_HARNESS_HPP

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mfstop/coeffs.hpp"
#include "mfstop/stopping.hpp"

namespace mfstop::harness {

/**
 * One validation outcome. The digest fields (problem, mode, seed, n_paths,
 * n_steps) reproduce the run bit-for-bit; pass holds iff
 * statistic <= threshold, and the threshold composition is always explicit:
 * threshold = tolerance + 2 * se, with se = 0 for exact identities and
 * calibrated bounds. detail carries the human-readable breakdown.
 */
struct ValidationReport {
    std::string check;
    std::string problem;
    std::string mode;
    std::uint64_t seed = 0;
    std::size_t n_paths = 0;
    std::size_t n_steps = 0;
    double statistic = 0.0;
    double tolerance = 0.0;
    double se = 0.0;
    double threshold = 0.0;
    bool pass = false;
    std::string detail;
};

/// One JSON object per report (single line, stable key order).
std::string report_to_json(const ValidationReport& report);

/// Fixed-width summary: one row per report plus a PASS/FAIL verdict column.
std::string summary_table(const std::vector<ValidationReport>& reports);

struct DppOptions {
    /// Intermediate time; must sit on a grid node strictly inside (t0, T).
    /// NaN selects the node nearest the midpoint.
    double t_mid = std::numeric_limits<double>::quiet_NaN();
    double tolerance_rel = 0.01;
    double tolerance_abs = 0.0;
};

/**
 * Two-point dynamic-programming check on the trained regression surface.
 * LHS is the root value of the full backward induction. RHS re-runs the
 * induction on [t0, t_mid] with the full surface's node values as terminal
 * data, then evaluates the resulting rule pathwise on the same paths
 * (common random numbers): running reward until the rule stops, payoff if it
 * stops before t_mid, the stored surface value at t_mid otherwise. The
 * statistic |LHS - RHS| measures how well the root value is reproduced by
 * following the solver's own policy to the intermediate date; it is exactly
 * zero on deterministic problems. threshold = tolerance_abs +
 * tolerance_rel * |LHS| + 2 * se with se the paired standard error.
 */
ValidationReport dpp_check(const coeffs::ProblemInstance& inst, std::size_t n_paths,
                           std::uint64_t seed, const stopping::SolverConfig& cfg = {},
                           const DppOptions& opts = {});

/**
 * Consistency of the averaged conditional value with direct execution: the
 * regression solve on the coupled system gives per-particle root values whose
 * mean is the extended-problem estimate; the same trained rule executed
 * pathwise on the same coupled paths gives the direct estimate. statistic =
 * |mean difference|, threshold = allowance + 2 * paired SE.
 */
ValidationReport disintegration_check(const coeffs::ProblemInstance& inst, std::size_t n_paths,
                                      std::uint64_t seed, const stopping::SolverConfig& cfg = {},
                                      double allowance = 0.01);

/**
 * Enlarging the rule family must not move the value: train once with the
 * initial-law-blind basis and once with the initial-point-augmented basis on
 * the same paths; statistic = |root difference|, threshold =
 * tolerance + 2 * paired SE.
 */
ValidationReport stopping_family_invariance_check(const coeffs::ProblemInstance& inst,
                                                  std::size_t n_paths, std::uint64_t seed,
                                                  const stopping::SolverConfig& cfg = {},
                                                  double tolerance = 0.005);

struct AuditOptions {
    /// Perturbation budgets, largest first; |x - y| + W2(mu, nu) <= delta.
    std::vector<double> deltas{0.08, 0.04, 0.02};
    std::size_t x_probes = 33;   // states per probed node
    std::size_t node_stride = 4; // probe every node_stride-th time node
    double growth_bound = 0.75;  // calibrated across the shipped problems
};

/**
 * Growth and continuity audit of the trained value surface, one growth and
 * one continuity report per instance. Growth: max over probes of
 * |u| / (1 + |x|^2 + ||mu||_2^2) against the calibrated bound. Continuity:
 * per delta level, the max of |u(t,x,mu) - u(t,y,nu)| over probe pairs with
 * |x - y| + W2(mu, nu) <= delta (nu a translate of the node marginal, whose
 * W2 distance is exactly the shift); the statistic is the largest increase
 * between consecutive levels, so pass means the maxima decrease as the
 * budget shrinks.
 */
std::vector<ValidationReport> growth_continuity_audit(
    const std::vector<coeffs::ProblemInstance>& battery, std::size_t n_paths, std::uint64_t seed,
    const stopping::SolverConfig& cfg = {}, const AuditOptions& opts = {});

/**
 * Named-check dispatcher used by the validate command. Known names: dpp,
 * flow, marginals, disintegration, family, growth (emits the growth and
 * continuity reports), hjb (lattice region-residual mean over the smooth
 * continuation rows). Unknown names throw InvalidArgument. Each check
 * re-derives its inputs from (inst, n_paths, seed) so the emitted digests
 * are self-contained.
 */
std::vector<ValidationReport> run_validation_suite(const coeffs::ProblemInstance& inst,
                                                   const std::vector<std::string>& checks,
                                                   std::size_t n_paths, std::uint64_t seed,
                                                   const stopping::SolverConfig& cfg = {});

} // namespace mfstop::harness

#endif
