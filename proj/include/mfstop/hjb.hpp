#ifndef MFSTOP_HJB_HPP
#define MFSTOP_HJB_HPP

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mfstop/coeffs.hpp"
#include "mfstop/measure.hpp"
#include "mfstop/mkvsde.hpp"
#include "mfstop/stopping.hpp"

namespace mfstop::hjb {

/// One monomial coeff * t^t_pow * prod_e x_e^x_pow[e] * prod_k lam_k^lam_pow[k]
/// of the outer map. Missing vectors mean all-zero exponents.
struct CylTerm {
    double coeff = 1.0;
    int t_pow = 0;
    std::vector<int> x_pow;
    std::vector<int> lam_pow;
};

/**
 * phi(t,x,mu) = psi(t, x, <h_1,mu>, ..., <h_K,mu>) with a polynomial outer map
 * psi, given as a sum of monomials. All (t,x,lambda)-partials are symbolic,
 * and the measure derivatives collapse onto the moment test functions:
 *
 *   d_mu phi(t,x,mu)(y)     = sum_k d_{lam_k} psi * grad h_k(y)
 *   d_y d_mu phi(t,x,mu)(y) = sum_k d_{lam_k} psi * hess h_k(y)
 *
 * Degree-<=2 h's keep the empirical lift of phi polynomial in each particle,
 * which is what makes the central-difference oracle below exact for them up
 * to rounding.
 */
struct CylindricalFunction {
    int dim_x = 1;
    std::vector<coeffs::MomentFunctional> moments;
    std::vector<CylTerm> terms;

    /// Throws InvalidArgument when a term's exponent vectors disagree with
    /// dim_x / moments.size() or carry a negative power.
    void validate() const;

    /**
     * Outer polynomial with per-factor derivative orders (falling powers):
     * order 0 everywhere evaluates psi itself; dt=1 gives d_t psi; dx/dlam
     * are exponent-order vectors of length dim_x / K (nullptr = all zero).
     */
    double outer(double t, const double* x, const double* lam, int dt = 0,
                 const int* dx = nullptr, const int* dlam = nullptr) const;

    double eval(double t, const double* x, const measure::ParticleEnsemble& mu) const;

    /// d_mu phi(t,x,mu)(y) written to out[dim_x]; lam already evaluated.
    void lions(double t, const double* x, const double* lam, const double* y,
               double* out) const;

    /// d_y d_mu phi(t,x,mu)(y) written to out[dim_x*dim_x] row-major.
    void lions_jacobian(double t, const double* x, const double* lam, const double* y,
                        double* out) const;
};

/**
 * (d_t + L_t) phi at (t, x, mu). All five generator terms are evaluated:
 * d_t phi, <b, d_x phi>, (1/2) tr(sigma sigma^T d^2_x phi), and the two
 * measure terms with their mu-integrals taken as ensemble averages — the same
 * representation of measures the solver uses everywhere.
 */
double apply_generator(const CylindricalFunction& phi, const coeffs::CoefficientSpec& spec,
                       double t, const double* x, const measure::ParticleEnsemble& mu);

/**
 * Central-difference estimate of d_mu phi(mu)(y_i) through the empirical
 * lift: component j is N * (phi(mu^{i,j,+h}) - phi(mu^{i,j,-h})) / (2h) where
 * mu^{i,j,+-h} bumps coordinate j of particle i. Works on any callable, so it
 * is an oracle independent of the symbolic machinery above.
 */
std::vector<double> lions_fd_oracle(
    const std::function<double(const measure::ParticleEnsemble&)>& phi,
    const measure::ParticleEnsemble& mu, std::size_t i, double h);

/// max{ d_t u + L_t u + f, g - u } at (t, x, mu) for an analytic test surface.
double vi_residual(const CylindricalFunction& u, const coeffs::CoefficientSpec& spec,
                   double t, const double* x, const measure::ParticleEnsemble& mu);

/**
 * Numeric variant for a 1-d surface u(t, x) evaluated along the measure flow.
 * Time differencing at fixed x then absorbs the two measure-transport terms
 * of L_t (chain rule through the moment coordinates), so the residual only
 * needs the classical x-partials:
 *
 *   branch1 = (u(t+dt,x) - u(t-dt,x)) / (2 dt) + b d_x u + (1/2) sigma^2 d^2_x u + f.
 *
 * mu supplies the moment coordinates b, sigma and f read at time t.
 */
double vi_residual(const std::function<double(double, double)>& u,
                   const coeffs::CoefficientSpec& spec, double t, double x,
                   const measure::ParticleEnsemble& mu, double dt, double dx);

struct ResidualRow {
    double t = 0.0;
    std::vector<double> x;
    std::vector<double> lam;
    double branch1 = 0.0;  // d_t u + L_t u + f
    double branch2 = 0.0;  // g - u
    double residual = 0.0; // |branch1| in continuation rows, |u - g| in stopping rows
    bool stopping = false;
    // Continuation row whose difference stencil reaches into the stopping
    // region: the surface is only C^1 across the exercise boundary, so the
    // classical residual there measures the kink, not the equation.
    bool boundary = false;
};

struct RegionReport {
    int dim_x = 1;
    std::size_t n_moments = 0;
    std::vector<ResidualRow> rows;
    std::size_t continuation_count = 0;
    std::size_t stopping_count = 0;
    std::size_t boundary_count = 0;
    double continuation_max = 0.0;
    double continuation_mean = 0.0;
    double stopping_max = 0.0;
};

struct ReportOptions {
    // Sampled time window as fractions of the step count; endpoints stay
    // interior because the time stencil needs both neighbours and the expiry
    // kink would otherwise dominate the difference quotient.
    double time_lo = 0.05;
    double time_hi = 0.90;
    // Fraction of the observed flow support trimmed per side before sampling
    // states; keeps the stencil away from extrapolation territory.
    double support_trim = 0.10;
    // Regression mode samples training-flow particles with a stride that caps
    // the per-node row count.
    std::size_t max_points_per_node = 64;
};

/**
 * Classifies sampled surface points by the exercise predicate and reports
 * |d_t u + L_t u + f| over the continuation region and |u - g| over the
 * stopping region. Lattice surfaces are sampled at their own nodes (interior
 * to the trimmed support) with lattice-step differences; regression surfaces
 * are sampled at training particles and differentiated with small central
 * differences of the fitted continuation. Continuation rows whose stencil
 * neighbours (time or space) fall in the stopping region are tagged boundary
 * and excluded from the continuation statistics: the residual check applies
 * where the surface is smooth, and across the free boundary it is only C^1,
 * so a straddling stencil reads the kink rather than the equation. Boundary
 * rows stay in `rows` (and the CSV) for inspection. Report-only: never
 * throws on large residuals.
 */
RegionReport region_residual_report(const stopping::SnellSolution& sol,
                                    const coeffs::CoefficientSpec& spec,
                                    const mkv::MeasureFlow& flow,
                                    const ReportOptions& opts = {});

/// CSV with header t,x_0..,moment_0..,branch1,branch2,residual,region.
std::string report_to_csv(const RegionReport& report);

} // namespace mfstop::hjb

#endif
