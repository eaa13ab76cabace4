#ifndef MFSTOP_STOPPING_HPP
#define MFSTOP_STOPPING_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "mfstop/coeffs.hpp"
#include "mfstop/mkvsde.hpp"

namespace mfstop::stopping {

/**
 * Regression feature set over (x, Lambda(mu)) and optionally the path's
 * initial point. Feature order is fixed and documented by describe():
 * constant, x coordinates, upper-triangle x products (degree 2), moment
 * coordinates, moment-x products, payoff g(x), quadratic hinges
 * ((x_c - knot)^+)^2 per knot and coordinate, initial-point coordinates and
 * initial-current products.
 *
 * Hinges give the basis C1 piecewise-quadratic flexibility near payoff
 * kinks, where the max-update of the backward induction otherwise inflates
 * values by the local fit error; declare them via "qknots(a,b,...)".
 */
struct FeatureBasis {
    int x_degree = 2;
    bool moments = true;
    bool cross = true;
    bool payoff = true;
    bool initial = false;
    std::vector<double> knots;

    std::size_t count(int dim, int n_moments) const;
    void eval(const coeffs::CoefficientSpec& spec, const double* x, const double* lam,
              const double* x0, double* out) const;
    std::string describe() const;
    static FeatureBasis parse(const std::string& text);
};

struct SolverConfig {
    FeatureBasis basis;
    double tie_eps = 0.0;
    double ridge_lambda = 0.0; // > 0: ridge for rank-deficient nodes instead of pivoted QR
    int threads = 1;

    std::size_t lattice_points = 400;
    int quad_points = 24;
    double lattice_margin = 0.25; // padding as a fraction of the observed support width
    double escape_cap = 1e-6;    // transition mass allowed beyond the lattice
    double lattice_tie_eps = 1e-10;
};

/**
 * Exercise rule: stop at the first node where the continuation estimate does
 * not beat the payoff by more than tie_eps; the terminal node always
 * exercises. The rule reads the state and the stored moment coordinates of
 * its training flow, nothing else.
 */
struct StoppingRule {
    enum class Mode { Regression, Lattice };

    Mode mode = Mode::Regression;
    TimeGrid grid;
    int dim = 1;
    double tie_eps = 0.0;

    FeatureBasis basis;
    std::vector<std::vector<double>> beta; // nodes 0..M-1
    std::vector<std::uint8_t> flagged;     // rank-deficient regression nodes

    std::vector<double> lattice_x;
    std::vector<std::vector<double>> lattice_cont; // nodes 0..M-1

    std::vector<std::vector<double>> lambda; // moment coordinates, nodes 0..M

    double continuation(const coeffs::CoefficientSpec& spec, std::size_t k, const double* x,
                        const double* x0 = nullptr) const;
    bool exercise(const coeffs::CoefficientSpec& spec, std::size_t k, const double* x,
                  const double* x0 = nullptr) const;
};

/// Value estimates: per training path (regression) or per lattice node.
struct ValueSurface {
    StoppingRule::Mode mode = StoppingRule::Mode::Regression;
    TimeGrid grid;
    std::vector<std::vector<double>> values; // [node][path or lattice index]
    std::vector<double> lattice_x;
    double root_value = 0.0;
    double root_se = 0.0;
};

struct SnellSolution {
    StoppingRule rule;
    ValueSurface surface;
};

/**
 * Backward regression induction over simulated paths: at node k the target
 * V(k+1) + f(s_k, X_k, Lambda_k) dt is regressed on the basis features, the
 * per-path value is max(payoff, fitted continuation). Singular designs use
 * the rank-revealing pivoted solve (exact in-sample projection) and flag the
 * node; a declared ridge_lambda > 0 switches the fallback to ridge.
 */
SnellSolution snell_backward_regression(const coeffs::CoefficientSpec& spec,
                                        const mkv::PathBundle& paths,
                                        const mkv::MeasureFlow& flow,
                                        const SolverConfig& cfg = {});

/**
 * Regression induction truncated at node k_end (1 <= k_end <= M): the
 * recursion runs on the prefix grid through k_end and starts from the
 * supplied per-path values at that node instead of the payoff (pass nullptr
 * for the payoff). The returned grids are the prefix; with k_end = M and no
 * terminal override this is snell_backward_regression.
 */
SnellSolution snell_backward_regression_window(const coeffs::CoefficientSpec& spec,
                                               const mkv::PathBundle& paths,
                                               const mkv::MeasureFlow& flow, std::size_t k_end,
                                               const std::vector<double>* terminal_values,
                                               const SolverConfig& cfg = {});

/**
 * Exact 1-d dynamic programming on a lattice covering the flow support plus
 * margin. One-step conditional expectations integrate the Euler transition
 * with Gauss-Hermite quadrature; the interpolation is cubic in the interior
 * and the final step evaluates the terminal payoff exactly. Quadrature mass
 * beyond the lattice is clamped to the edge and must stay under escape_cap.
 */
SnellSolution snell_backward_lattice(const coeffs::CoefficientSpec& spec,
                                     const mkv::MeasureFlow& flow, const SolverConfig& cfg = {});

/// Surface value at (node k, state x); lattice mode interpolates.
double lattice_value_at(const SnellSolution& sol, std::size_t k, double x);

/// Smallest exercise node per path (M when the rule never triggers early).
std::vector<std::size_t> optimal_stop_times(const StoppingRule& rule,
                                            const coeffs::CoefficientSpec& spec,
                                            const mkv::PathBundle& paths);

/// Accumulated gain of stopping path p at node stop_k: running rewards along
/// the unstopped flow's moment coordinates plus the payoff at the stop.
double realized_gain(const StoppingRule& rule, const coeffs::CoefficientSpec& spec,
                     const mkv::PathBundle& paths, std::size_t p, std::size_t stop_k);

/// Out-of-sample policy value: fresh decoupled paths from starts against the
/// flow, stopped by the rule.
struct PolicyValue {
    double mean = 0.0;
    double se = 0.0;
    std::vector<std::size_t> stops;
};

PolicyValue execute_policy(const StoppingRule& rule, const coeffs::CoefficientSpec& spec,
                           const measure::ParticleEnsemble& starts, const mkv::MeasureFlow& flow,
                           const NoiseSource& noise, const SolverConfig& cfg = {});

/// V(t0) = E[Vtilde(t0, xi, mu)]: coupled system from the instance's initial
/// law, regression solve on its own paths, average of the node-0 values.
struct DisintegrationResult {
    double value = 0.0;
    double se = 0.0;
    SnellSolution solution;
    mkv::SimResult sim;
};

DisintegrationResult disintegrate_value(const coeffs::ProblemInstance& inst,
                                        std::size_t n_particles, const NoiseSource& noise,
                                        const SolverConfig& cfg = {});

/// Gain-process sample S[k][p] = V(k, path p) + running reward accumulated
/// before node k along the training paths.
std::vector<std::vector<double>> snell_path(const coeffs::CoefficientSpec& spec,
                                            const SnellSolution& sol,
                                            const mkv::PathBundle& paths);

/// Per-node mean increments of S with standard errors: the discrete Snell
/// supermartingale diagnostic.
struct SnellIncrements {
    std::vector<double> mean_increment;
    std::vector<double> se;
};

SnellIncrements snell_increments(const coeffs::CoefficientSpec& spec, const SnellSolution& sol,
                                 const mkv::PathBundle& paths);

/// Documented JSON layouts (schema_version, grid, basis, coefficient arrays).
std::string rule_to_json(const StoppingRule& rule);
StoppingRule rule_from_json(const std::string& text);
std::string surface_to_json(const ValueSurface& surface);

} // namespace mfstop::stopping

#endif
