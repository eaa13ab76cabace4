#include "mfstop/coeffs.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace mfstop::coeffs {

namespace {

bool all_finite(const double* v, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k)
        if (!std::isfinite(v[k])) return false;
    return true;
}

std::string fmt(const char* pattern, double a, double b) {
    char buf[160];
    std::snprintf(buf, sizeof buf, pattern, a, b);
    return buf;
}

} // namespace

MomentFunctional MomentFunctional::coordinate_mean(int i) {
    if (i < 0) throw InvalidArgument("MomentFunctional: negative coordinate");
    MomentFunctional m;
    m.kind = Kind::CoordinateMean;
    m.i = i;
    return m;
}

MomentFunctional MomentFunctional::second_moment(int i, int j) {
    if (i < 0 || j < 0) throw InvalidArgument("MomentFunctional: negative coordinate");
    MomentFunctional m;
    m.kind = Kind::SecondMoment;
    m.i = i;
    m.j = j;
    return m;
}

MomentFunctional MomentFunctional::polynomial(std::vector<int> alpha) {
    int total = 0;
    for (int a : alpha) {
        if (a < 0) throw InvalidArgument("MomentFunctional: negative exponent");
        total += a;
    }
    if (total > 2) throw InvalidArgument("MomentFunctional: polynomial degree above 2");
    MomentFunctional m;
    m.kind = Kind::Polynomial;
    m.alpha = std::move(alpha);
    return m;
}

double MomentFunctional::eval_h(const double* y, int dim) const {
    switch (kind) {
    case Kind::CoordinateMean:
        if (i >= dim) throw InvalidArgument("MomentFunctional: coordinate out of range");
        return y[i];
    case Kind::SecondMoment:
        if (i >= dim || j >= dim) throw InvalidArgument("MomentFunctional: coordinate out of range");
        return y[i] * y[j];
    case Kind::Polynomial: {
        if (alpha.size() > static_cast<std::size_t>(dim))
            throw InvalidArgument("MomentFunctional: multi-index longer than dim");
        double v = 1.0;
        for (std::size_t k = 0; k < alpha.size(); ++k)
            for (int r = 0; r < alpha[k]; ++r) v *= y[k];
        return v;
    }
    }
    return 0.0;
}

void MomentFunctional::grad_h(const double* y, int dim, double* out) const {
    std::fill(out, out + dim, 0.0);
    switch (kind) {
    case Kind::CoordinateMean:
        out[i] = 1.0;
        return;
    case Kind::SecondMoment:
        out[i] += y[j];
        out[j] += y[i];
        return;
    case Kind::Polynomial:
        for (std::size_t k = 0; k < alpha.size(); ++k) {
            if (alpha[k] == 0) continue;
            double v = static_cast<double>(alpha[k]);
            if (alpha[k] == 2) v *= y[k];
            for (std::size_t l = 0; l < alpha.size(); ++l)
                if (l != k && alpha[l] > 0)
                    for (int r = 0; r < alpha[l]; ++r) v *= y[l];
            out[k] = v;
        }
        return;
    }
}

void MomentFunctional::hess_h(const double* y, int dim, double* out) const {
    (void)y;
    std::fill(out, out + static_cast<std::size_t>(dim) * dim, 0.0);
    switch (kind) {
    case Kind::CoordinateMean:
        return;
    case Kind::SecondMoment:
        out[i * dim + j] += 1.0;
        out[j * dim + i] += 1.0;
        return;
    case Kind::Polynomial:
        // Degree <= 2: the Hessian is constant.
        for (std::size_t k = 0; k < alpha.size(); ++k) {
            if (alpha[k] == 2) out[k * static_cast<std::size_t>(dim) + k] = 2.0;
            if (alpha[k] == 1)
                for (std::size_t l = k + 1; l < alpha.size(); ++l)
                    if (alpha[l] == 1) {
                        out[k * static_cast<std::size_t>(dim) + l] = 1.0;
                        out[l * static_cast<std::size_t>(dim) + k] = 1.0;
                    }
        }
        return;
    }
}

double MomentFunctional::eval(const measure::ParticleEnsemble& mu) const {
    if (mu.empty()) throw InvalidArgument("MomentFunctional: empty ensemble");
    double acc = 0.0;
    const std::size_t n = mu.size();
    for (std::size_t p = 0; p < n; ++p) acc += eval_h(mu.row(p), mu.dim);
    return acc / static_cast<double>(n);
}

std::string MomentFunctional::describe() const {
    char buf[96];
    switch (kind) {
    case Kind::CoordinateMean:
        std::snprintf(buf, sizeof buf, "mean(%d)", i);
        return buf;
    case Kind::SecondMoment:
        std::snprintf(buf, sizeof buf, "moment2(%d,%d)", i, j);
        return buf;
    case Kind::Polynomial: {
        std::string s = "poly(";
        for (std::size_t k = 0; k < alpha.size(); ++k) {
            if (k) s += ',';
            s += std::to_string(alpha[k]);
        }
        return s + ")";
    }
    }
    return "?";
}

MomentVector eval_moments(const measure::ParticleEnsemble& mu,
                          const std::vector<MomentFunctional>& funcs) {
    MomentVector lam(funcs.size());
    for (std::size_t k = 0; k < funcs.size(); ++k) lam[k] = funcs[k].eval(mu);
    return lam;
}

std::vector<double> eval_b(const CoefficientSpec& spec, double t, const std::vector<double>& x,
                           const measure::ParticleEnsemble& mu) {
    if (x.size() != static_cast<std::size_t>(spec.dim_x))
        throw InvalidArgument("eval_b: state dimension mismatch");
    const MomentVector lam = eval_moments(mu, spec.moments);
    std::vector<double> out(static_cast<std::size_t>(spec.dim_x));
    spec.drift(t, x.data(), lam.data(), out.data());
    if (!all_finite(out.data(), out.size()))
        throw CoefficientError("drift returned a non-finite value");
    return out;
}

std::vector<double> eval_sigma(const CoefficientSpec& spec, double t, const std::vector<double>& x,
                               const measure::ParticleEnsemble& mu) {
    if (x.size() != static_cast<std::size_t>(spec.dim_x))
        throw InvalidArgument("eval_sigma: state dimension mismatch");
    const MomentVector lam = eval_moments(mu, spec.moments);
    std::vector<double> out(static_cast<std::size_t>(spec.dim_x) *
                            static_cast<std::size_t>(spec.dim_w));
    spec.diffusion(t, x.data(), lam.data(), out.data());
    if (!all_finite(out.data(), out.size()))
        throw CoefficientError("diffusion returned a non-finite value");
    return out;
}

double eval_f(const CoefficientSpec& spec, double t, const std::vector<double>& x,
              const measure::ParticleEnsemble& mu) {
    if (x.size() != static_cast<std::size_t>(spec.dim_x))
        throw InvalidArgument("eval_f: state dimension mismatch");
    const MomentVector lam = eval_moments(mu, spec.moments);
    const double v = spec.running(t, x.data(), lam.data());
    if (!std::isfinite(v)) throw CoefficientError("running reward returned a non-finite value");
    return v;
}

double eval_g(const CoefficientSpec& spec, const std::vector<double>& x) {
    if (x.size() != static_cast<std::size_t>(spec.dim_x))
        throw InvalidArgument("eval_g: state dimension mismatch");
    const double v = spec.terminal(x.data());
    if (!std::isfinite(v)) throw CoefficientError("terminal reward returned a non-finite value");
    return v;
}

InitialLaw InitialLaw::point_mass(std::vector<double> x) {
    InitialLaw law;
    law.kind = Kind::Point;
    law.point = std::move(x);
    return law;
}

InitialLaw InitialLaw::finite_uniform(std::vector<std::vector<double>> atoms) {
    if (atoms.empty()) throw InvalidArgument("InitialLaw: empty atom set");
    InitialLaw law;
    law.kind = Kind::FiniteUniform;
    law.atoms = std::move(atoms);
    return law;
}

InitialLaw InitialLaw::gaussian(std::vector<double> mean, std::vector<double> stddev) {
    if (mean.size() != stddev.size())
        throw InvalidArgument("InitialLaw: gaussian mean/std size mismatch");
    InitialLaw law;
    law.kind = Kind::Gaussian;
    law.gauss_mean = std::move(mean);
    law.gauss_std = std::move(stddev);
    return law;
}

InitialLaw InitialLaw::explicit_list(measure::ParticleEnsemble sample) {
    InitialLaw law;
    law.kind = Kind::Explicit;
    law.explicit_sample = std::move(sample);
    return law;
}

measure::ParticleEnsemble InitialLaw::sample(std::size_t n, int dim,
                                             const NoiseSource& noise) const {
    if (n == 0) throw InvalidArgument("InitialLaw: need at least one particle");
    measure::ParticleEnsemble out(dim, std::vector<double>(n * static_cast<std::size_t>(dim)));
    switch (kind) {
    case Kind::Point:
        if (point.size() != static_cast<std::size_t>(dim))
            throw InvalidArgument("InitialLaw: point dimension mismatch");
        for (std::size_t i = 0; i < n; ++i)
            std::copy(point.begin(), point.end(), out.row(i));
        return out;
    case Kind::FiniteUniform:
        for (const auto& a : atoms)
            if (a.size() != static_cast<std::size_t>(dim))
                throw InvalidArgument("InitialLaw: atom dimension mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            const auto& a = atoms[i % atoms.size()];
            std::copy(a.begin(), a.end(), out.row(i));
        }
        return out;
    case Kind::Gaussian:
        if (gauss_mean.size() != static_cast<std::size_t>(dim))
            throw InvalidArgument("InitialLaw: gaussian dimension mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            double* r = out.row(i);
            for (int c = 0; c < dim; ++c)
                r[c] = gauss_mean[static_cast<std::size_t>(c)] +
                       gauss_std[static_cast<std::size_t>(c)] *
                           noise.normal(i, NoiseSource::kInitStream, static_cast<std::uint64_t>(c));
        }
        return out;
    case Kind::Explicit:
        if (explicit_sample.dim != dim || explicit_sample.size() != n)
            throw InvalidArgument("InitialLaw: explicit sample shape mismatch");
        return explicit_sample;
    }
    throw InvalidArgument("InitialLaw: unknown kind");
}

AuditReport audit_assumptions(const CoefficientSpec& spec, const std::vector<Probe>& probes) {
    AuditReport rep;
    const std::size_t d = static_cast<std::size_t>(spec.dim_x);
    const std::size_t dm = d * static_cast<std::size_t>(spec.dim_w);

    for (std::size_t a = 0; a < probes.size(); ++a) {
        const Probe& pa = probes[a];
        const double nx = std::sqrt(
            std::inner_product(pa.x.begin(), pa.x.end(), pa.x.begin(), 0.0));
        const double nmu = measure::norm2(pa.mu);
        const double denom_q = 1.0 + nx * nx + nmu * nmu;
        const double fr = std::abs(eval_f(spec, pa.t, pa.x, pa.mu)) / denom_q;
        const double gr = std::abs(eval_g(spec, pa.x)) / (1.0 + nx * nx);
        rep.max_growth_f = std::max(rep.max_growth_f, fr);
        rep.max_growth_g = std::max(rep.max_growth_g, gr);
        if (fr > spec.declared_growth)
            rep.violations.push_back("f growth " + fmt("%.6g > declared %.6g", fr, spec.declared_growth));
        if (gr > spec.declared_growth)
            rep.violations.push_back("g growth " + fmt("%.6g > declared %.6g", gr, spec.declared_growth));

        for (std::size_t b = a + 1; b < probes.size(); ++b) {
            const Probe& pb = probes[b];
            // Lipschitz in (x, mu) uniformly in t: compare at the shared time t_a.
            const auto ba = eval_b(spec, pa.t, pa.x, pa.mu);
            const auto bb = eval_b(spec, pa.t, pb.x, pb.mu);
            const auto sa = eval_sigma(spec, pa.t, pa.x, pa.mu);
            const auto sb = eval_sigma(spec, pa.t, pb.x, pb.mu);
            double dx = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = pa.x[k] - pb.x[k];
                dx += diff * diff;
            }
            const double denom = std::sqrt(dx) + measure::wasserstein2(pa.mu, pb.mu);
            double db = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = ba[k] - bb[k];
                db += diff * diff;
            }
            double ds = 0.0;
            for (std::size_t k = 0; k < dm; ++k) {
                const double diff = sa[k] - sb[k];
                ds += diff * diff;
            }
            if (denom < 1e-14) continue; // identical probe points
            const double rb = std::sqrt(db) / denom;
            const double rs = std::sqrt(ds) / denom;
            rep.max_lipschitz_b = std::max(rep.max_lipschitz_b, rb);
            rep.max_lipschitz_sigma = std::max(rep.max_lipschitz_sigma, rs);
            if (rb > spec.declared_lipschitz)
                rep.violations.push_back("b lipschitz " +
                                         fmt("%.6g > declared %.6g", rb, spec.declared_lipschitz));
            if (rs > spec.declared_lipschitz)
                rep.violations.push_back("sigma lipschitz " +
                                         fmt("%.6g > declared %.6g", rs, spec.declared_lipschitz));
        }
    }
    rep.within_declared = rep.violations.empty();
    return rep;
}

namespace {

struct BuiltinDef {
    std::string blurb;
    std::map<std::string, double> defaults;
    CoefficientSpec (*build)(const std::map<std::string, double>&);
};

CoefficientSpec build_gbm_put(const std::map<std::string, double>& p) {
    CoefficientSpec s;
    const double sigma0 = p.at("sigma0");
    const double strike = p.at("strike");
    s.dim_x = 1;
    s.dim_w = 1;
    s.drift = [](double, const double*, const double*, double* out) { out[0] = 0.0; };
    s.diffusion = [sigma0](double, const double* x, const double*, double* out) {
        out[0] = sigma0 * x[0];
    };
    s.running = [](double, const double*, const double*) { return 0.0; };
    s.terminal = [strike](const double* x) { return std::max(strike - x[0], 0.0); };
    s.declared_lipschitz = sigma0;
    s.declared_growth = std::max(1.0, strike);
    return s;
}

CoefficientSpec build_mf_ou(const std::map<std::string, double>& p) {
    CoefficientSpec s;
    const double kappa = p.at("kappa");
    const double sigma0 = p.at("sigma0");
    s.dim_x = 1;
    s.dim_w = 1;
    s.moments = {MomentFunctional::coordinate_mean(0)};
    s.drift = [kappa](double, const double* x, const double* lam, double* out) {
        out[0] = kappa * (lam[0] - x[0]);
    };
    s.diffusion = [sigma0](double, const double*, const double*, double* out) {
        out[0] = sigma0;
    };
    s.running = [](double, const double*, const double*) { return 0.0; };
    s.terminal = [](const double* x) { return x[0] * x[0]; };
    s.declared_lipschitz = 2.0 * kappa;
    s.declared_growth = 1.0;
    return s;
}

CoefficientSpec build_etf_meanfield(const std::map<std::string, double>& p) {
    CoefficientSpec s;
    const double alpha = p.at("alpha");
    const double sigma0 = p.at("sigma0");
    const double rho = p.at("rho");
    const double strike = p.at("strike");
    s.dim_x = 1;
    s.dim_w = 1;
    s.moments = {MomentFunctional::coordinate_mean(0)};
    s.drift = [alpha](double, const double* x, const double* lam, double* out) {
        out[0] = alpha * lam[0] * x[0];
    };
    s.diffusion = [sigma0, rho](double, const double* x, const double* lam, double* out) {
        out[0] = sigma0 * (1.0 + rho * lam[0]) * x[0];
    };
    s.running = [](double, const double*, const double*) { return 0.0; };
    s.terminal = [strike](const double* x) { return std::max(strike - x[0], 0.0); };
    // Products of x and m(mu) are only locally Lipschitz; constants below are
    // calibrated to the unit-scale operating range and checked by the audit.
    s.declared_lipschitz = 2.0;
    s.declared_growth = std::max(1.0, strike);
    return s;
}

CoefficientSpec build_frozen(double running_value, int payoff_degree) {
    CoefficientSpec s;
    s.dim_x = 1;
    s.dim_w = 1;
    s.drift = [](double, const double*, const double*, double* out) { out[0] = 0.0; };
    s.diffusion = [](double, const double*, const double*, double* out) { out[0] = 0.0; };
    s.running = [running_value](double, const double*, const double*) { return running_value; };
    if (payoff_degree == 0)
        s.terminal = [](const double*) { return 0.0; };
    else if (payoff_degree == 1)
        s.terminal = [](const double* x) { return x[0]; };
    else
        s.terminal = [](const double* x) { return x[0] * x[0]; };
    s.declared_lipschitz = 0.0;
    s.declared_growth = 1.0;
    return s;
}

const std::map<std::string, BuiltinDef>& builtin_defs() {
    static const std::map<std::string, BuiltinDef> defs = {
        {"gbm_put",
         {"zero-rate GBM with put payoff (no measure coupling)",
          {{"sigma0", 0.2}, {"strike", 1.0}},
          &build_gbm_put}},
        {"mf_ou",
         {"mean-field OU: drift kappa*(m(mu)-x), constant vol, quadratic payoff",
          {{"kappa", 1.0}, {"sigma0", 0.3}},
          &build_mf_ou}},
        {"etf_meanfield",
         {"GBM-type index: drift alpha*m(mu)*x, vol sigma0*(1+rho*m(mu))*x, put payoff",
          {{"alpha", 0.05}, {"sigma0", 0.2}, {"rho", 0.25}, {"strike", 1.0}},
          &build_etf_meanfield}},
        {"det_running",
         {"frozen state, unit running reward (exact-value battery)",
          {},
          [](const std::map<std::string, double>&) { return build_frozen(1.0, 0); }}},
        {"det_linear",
         {"frozen state, identity payoff (exact-value battery)",
          {},
          [](const std::map<std::string, double>&) { return build_frozen(0.0, 1); }}},
        {"det_quadratic",
         {"frozen state, quadratic payoff (exact-value battery)",
          {},
          [](const std::map<std::string, double>&) { return build_frozen(0.0, 2); }}},
    };
    return defs;
}

} // namespace

std::vector<std::string> builtin_names() {
    std::vector<std::string> names;
    for (const auto& [name, def] : builtin_defs()) names.push_back(name);
    return names;
}

std::string builtin_blurb(const std::string& name) {
    const auto it = builtin_defs().find(name);
    if (it == builtin_defs().end()) throw InvalidArgument("unknown builtin problem: " + name);
    return it->second.blurb;
}

CoefficientSpec make_builtin(const std::string& name,
                             const std::map<std::string, double>& overrides) {
    const auto it = builtin_defs().find(name);
    if (it == builtin_defs().end()) throw InvalidArgument("unknown builtin problem: " + name);
    std::map<std::string, double> params = it->second.defaults;
    for (const auto& [key, value] : overrides) {
        if (params.find(key) == params.end())
            throw InvalidArgument("unknown parameter '" + key + "' for problem " + name);
        params[key] = value;
    }
    CoefficientSpec spec = it->second.build(params);
    spec.name = name;
    spec.params = params;
    return spec;
}

} // namespace mfstop::coeffs
