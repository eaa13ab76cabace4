#ifndef MFSTOP_COEFFS_HPP
#define MFSTOP_COEFFS_HPP

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mfstop/errors.hpp"
#include "mfstop/grid.hpp"
#include "mfstop/measure.hpp"
#include "mfstop/rng.hpp"

namespace mfstop::coeffs {

/**
 * Test function h with closed-form gradient and Hessian; measures enter the
 * coefficients only through empirical averages <h, mu>. Degree is capped at 2
 * so central differences on particle positions are exact for these h.
 */
struct MomentFunctional {
    enum class Kind { CoordinateMean, SecondMoment, Polynomial };

    Kind kind = Kind::CoordinateMean;
    int i = 0;
    int j = 0;
    std::vector<int> alpha; // Polynomial multi-index, |alpha| <= 2

    static MomentFunctional coordinate_mean(int i);
    static MomentFunctional second_moment(int i, int j);
    static MomentFunctional polynomial(std::vector<int> alpha);

    double eval_h(const double* y, int dim) const;
    void grad_h(const double* y, int dim, double* out) const;   // d values
    void hess_h(const double* y, int dim, double* out) const;   // d*d row-major
    double eval(const measure::ParticleEnsemble& mu) const;     // <h, mu>
    std::string describe() const;
};

using MomentVector = std::vector<double>;

/// Lambda(mu) = (<h_1,mu>, ..., <h_K,mu>) in declaration order.
MomentVector eval_moments(const measure::ParticleEnsemble& mu,
                          const std::vector<MomentFunctional>& funcs);

/**
 * Problem coefficients. Measure dependence is cylindrical: every map reads mu
 * only through the declared moment coordinates, so a step can evaluate
 * Lambda(mu) once and reuse it for all particles.
 *
 * Maps write into caller storage: drift d values, diffusion d*m row-major.
 */
struct CoefficientSpec {
    int dim_x = 1;
    int dim_w = 1;
    std::vector<MomentFunctional> moments;

    std::function<void(double, const double*, const double*, double*)> drift;
    std::function<void(double, const double*, const double*, double*)> diffusion;
    std::function<double(double, const double*, const double*)> running;
    std::function<double(const double*)> terminal;

    double declared_lipschitz = 1.0;
    double declared_growth = 1.0;

    std::string name = "custom";
    std::map<std::string, double> params;

    std::size_t moment_count() const { return moments.size(); }
};

/// Moment-coordinate views with finiteness checks. Non-finite output throws
/// CoefficientError naming the offending map.
std::vector<double> eval_b(const CoefficientSpec& spec, double t, const std::vector<double>& x,
                           const measure::ParticleEnsemble& mu);
std::vector<double> eval_sigma(const CoefficientSpec& spec, double t, const std::vector<double>& x,
                               const measure::ParticleEnsemble& mu);
double eval_f(const CoefficientSpec& spec, double t, const std::vector<double>& x,
              const measure::ParticleEnsemble& mu);
double eval_g(const CoefficientSpec& spec, const std::vector<double>& x);

/// Initial data xi. Sampling is deterministic given (N, noise seed); the
/// finite-uniform law is stratified (particle i gets atom i mod n), which
/// represents the law exactly whenever n divides N.
struct InitialLaw {
    enum class Kind { Point, FiniteUniform, Gaussian, Explicit };

    Kind kind = Kind::Point;
    std::vector<double> point;
    std::vector<std::vector<double>> atoms;
    std::vector<double> gauss_mean;
    std::vector<double> gauss_std;
    measure::ParticleEnsemble explicit_sample;

    static InitialLaw point_mass(std::vector<double> x);
    static InitialLaw finite_uniform(std::vector<std::vector<double>> atoms);
    static InitialLaw gaussian(std::vector<double> mean, std::vector<double> stddev);
    static InitialLaw explicit_list(measure::ParticleEnsemble sample);

    measure::ParticleEnsemble sample(std::size_t n, int dim, const NoiseSource& noise) const;
};

struct ProblemInstance {
    CoefficientSpec spec;
    double t0 = 0.0;
    double horizon = 1.0;
    std::size_t steps = 50;
    InitialLaw initial;

    TimeGrid grid() const { return TimeGrid::uniform(t0, horizon, steps); }
};

/// One audit probe: a point in the domain of the coefficient maps.
struct Probe {
    double t = 0.0;
    std::vector<double> x;
    measure::ParticleEnsemble mu;
};

/**
 * Report-only audit of the standing assumptions on a probe set: Lipschitz
 * ratios for b and sigma over same-t probe pairs, growth ratios for f and g.
 * Exceeding declared constants is recorded, never thrown.
 */
struct AuditReport {
    double max_lipschitz_b = 0.0;
    double max_lipschitz_sigma = 0.0;
    double max_growth_f = 0.0;
    double max_growth_g = 0.0;
    bool within_declared = true;
    std::vector<std::string> violations;
};

AuditReport audit_assumptions(const CoefficientSpec& spec, const std::vector<Probe>& probes);

/// Builtin problem library; make_builtin applies parameter overrides on top
/// of defaults and rejects unknown keys.
std::vector<std::string> builtin_names();
std::string builtin_blurb(const std::string& name);
CoefficientSpec make_builtin(const std::string& name,
                             const std::map<std::string, double>& overrides = {});

} // namespace mfstop::coeffs

#endif
