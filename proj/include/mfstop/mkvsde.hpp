#ifndef MFSTOP_MKVSDE_HPP
#define MFSTOP_MKVSDE_HPP

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mfstop/coeffs.hpp"
#include "mfstop/grid.hpp"
#include "mfstop/measure.hpp"
#include "mfstop/rng.hpp"

namespace mfstop::mkv {

struct SimOptions {
    int threads = 1;
    double divergence_bound = 1e8;
};

/// Node marginals of a simulated system; ensembles[k] lives at grid.nodes[k].
struct MeasureFlow {
    TimeGrid grid;
    std::vector<measure::ParticleEnsemble> ensembles;

    std::size_t nodes() const { return ensembles.size(); }

    /// Flow restricted to [s_from, T]; node k maps to k - from.
    MeasureFlow suffix(std::size_t from) const {
        MeasureFlow out;
        out.grid = grid.suffix(from);
        out.ensembles.assign(ensembles.begin() + static_cast<std::ptrdiff_t>(from),
                             ensembles.end());
        return out;
    }
};

/// Moment coordinates of every flow node, in spec declaration order.
std::vector<coeffs::MomentVector> flow_moments(const MeasureFlow& flow,
                                               const std::vector<coeffs::MomentFunctional>& funcs);

/// Simulated paths with their driving increments, row-major throughout:
/// states[p][k][c], increments[p][k][j].
struct PathBundle {
    TimeGrid grid;
    int dim = 1;
    int dim_w = 1;
    std::size_t paths = 0;
    std::vector<double> states;
    std::vector<double> increments;

    double* state(std::size_t p, std::size_t k) {
        return states.data() + (p * (grid.steps() + 1) + k) * static_cast<std::size_t>(dim);
    }
    const double* state(std::size_t p, std::size_t k) const {
        return states.data() + (p * (grid.steps() + 1) + k) * static_cast<std::size_t>(dim);
    }
    double* incr(std::size_t p, std::size_t k) {
        return increments.data() + (p * grid.steps() + k) * static_cast<std::size_t>(dim_w);
    }
    const double* incr(std::size_t p, std::size_t k) const {
        return increments.data() + (p * grid.steps() + k) * static_cast<std::size_t>(dim_w);
    }

    measure::ParticleEnsemble ensemble_at(std::size_t k) const;
};

struct SimResult {
    PathBundle paths;
    MeasureFlow flow;
};

/**
 * Interacting Euler particle system: particle i reads the empirical measure
 * of the whole (never stopped) population at each node and noise substream
 * (i, step_offset + k). The flow is the recorded node marginals; a restart
 * from a stored marginal passes the original node index as step_offset.
 */
SimResult simulate_mkv(const coeffs::CoefficientSpec& spec,
                       const measure::ParticleEnsemble& initial, const TimeGrid& grid,
                       const NoiseSource& noise, std::size_t step_offset = 0,
                       const SimOptions& opts = {});

/**
 * Decoupled Euler paths against a frozen flow: coefficients read
 * flow.ensembles[k], not the simulated population. Noise is addressed at
 * (path_offset + p, step_offset + k); with offsets (i, 0) a single decoupled
 * path reproduces particle i of simulate_mkv bitwise whenever the flow is the
 * one that system realized.
 */
PathBundle simulate_decoupled(const coeffs::CoefficientSpec& spec,
                              const measure::ParticleEnsemble& starts, const MeasureFlow& flow,
                              const NoiseSource& noise, std::size_t path_offset = 0,
                              std::size_t step_offset = 0, const SimOptions& opts = {});

/// Same-start convenience: n_paths copies of x.
PathBundle simulate_decoupled(const coeffs::CoefficientSpec& spec, const std::vector<double>& x,
                              const MeasureFlow& flow, const NoiseSource& noise,
                              std::size_t n_paths, std::size_t path_offset = 0,
                              std::size_t step_offset = 0, const SimOptions& opts = {});

/**
 * Picard iteration for the measure flow: flow^0 is the initial ensemble held
 * constant in time; each sweep simulates the decoupled system against the
 * previous flow with the same noise tensor and records the new marginals.
 * gap_trace[m] is the sup-node W2 between sweeps m and m+1.
 */
struct PicardResult {
    MeasureFlow flow;
    std::vector<double> gap_trace;
    bool converged = false;
    std::size_t iterations = 0;
};

PicardResult picard_flow(const coeffs::CoefficientSpec& spec,
                         const measure::ParticleEnsemble& initial, const TimeGrid& grid,
                         const NoiseSource& noise, double tol, std::size_t max_iter,
                         const SimOptions& opts = {});

/// Deterministic Fisher-Yates permutation of 0..n-1 keyed by seed.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

/**
 * Marginal-law invariance: the same initial sample is pushed through the
 * particle system under two particle-noise pairings (identity and perm);
 * statistic is the max-node W2 between the resulting flows against the
 * envelope c * N^(-1/4).
 */
struct MarginalInvarianceResult {
    std::vector<double> per_node;
    double statistic = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

MarginalInvarianceResult check_marginal_invariance(const coeffs::CoefficientSpec& spec,
                                                   const measure::ParticleEnsemble& initial,
                                                   const std::vector<std::size_t>& perm,
                                                   const TimeGrid& grid, const NoiseSource& noise,
                                                   double c, const SimOptions& opts = {});

/**
 * Flow property as a structural identity: restarting the particle system at
 * node k_mid from its stored states, and the decoupled bundle from its stored
 * states against the flow restriction, must reproduce the original tails
 * exactly (same noise addressing). Gaps are max-abs state differences.
 */
struct FlowPropertyResult {
    double path_gap = 0.0;
    double flow_gap = 0.0;
};

FlowPropertyResult check_flow_property(const coeffs::CoefficientSpec& spec,
                                       const std::vector<double>& x,
                                       const measure::ParticleEnsemble& initial,
                                       const TimeGrid& grid, std::size_t k_mid,
                                       std::size_t n_paths, const NoiseSource& noise,
                                       const SimOptions& opts = {});

/// E[sup_k |X_k|^p] over decoupled paths from x against the flow of mu,
/// relative to 1 + |x|^p + ||mu||_2^p.
struct MomentBoundResult {
    double ratio = 0.0;
    double numerator = 0.0;
    double denominator = 0.0;
};

MomentBoundResult moment_bound_check(const coeffs::CoefficientSpec& spec,
                                     const std::vector<double>& x,
                                     const measure::ParticleEnsemble& mu, const TimeGrid& grid,
                                     int p, std::size_t n_paths, const NoiseSource& noise,
                                     const SimOptions& opts = {});

} // namespace mfstop::mkv

#endif
