#include "mfstop/hjb.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "mfstop/errors.hpp"

namespace mfstop::hjb {

namespace {

// d^o/dv^o of v^p as a falling power; 0^0 = 1 so zero exponents are neutral.
double dpow(double v, int p, int o) {
    if (o > p) return 0.0;
    double c = 1.0;
    for (int r = 0; r < o; ++r) c *= static_cast<double>(p - r);
    double m = 1.0;
    for (int r = 0; r < p - o; ++r) m *= v;
    return c * m;
}

int pow_at(const std::vector<int>& pows, std::size_t idx) {
    return idx < pows.size() ? pows[idx] : 0;
}

void check_finite(const double* v, std::size_t n, const char* what) {
    for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(v[i])) throw CoefficientError(std::string(what) + " returned a non-finite value");
}

} // namespace

void CylindricalFunction::validate() const {
    if (dim_x < 1) throw InvalidArgument("CylindricalFunction: dim_x must be positive");
    for (const CylTerm& term : terms) {
        if (term.t_pow < 0) throw InvalidArgument("CylindricalFunction: negative t power");
        if (term.x_pow.size() > static_cast<std::size_t>(dim_x))
            throw InvalidArgument("CylindricalFunction: x exponents exceed dim_x");
        if (term.lam_pow.size() > moments.size())
            throw InvalidArgument("CylindricalFunction: lambda exponents exceed moment count");
        for (int p : term.x_pow)
            if (p < 0) throw InvalidArgument("CylindricalFunction: negative x power");
        for (int p : term.lam_pow)
            if (p < 0) throw InvalidArgument("CylindricalFunction: negative lambda power");
    }
}

double CylindricalFunction::outer(double t, const double* x, const double* lam, int dt,
                                  const int* dx, const int* dlam) const {
    const std::size_t K = moments.size();
    double sum = 0.0;
    for (const CylTerm& term : terms) {
        double v = term.coeff * dpow(t, term.t_pow, dt);
        for (int e = 0; e < dim_x && v != 0.0; ++e)
            v *= dpow(x[e], pow_at(term.x_pow, static_cast<std::size_t>(e)), dx ? dx[e] : 0);
        for (std::size_t k = 0; k < K && v != 0.0; ++k)
            v *= dpow(lam[k], pow_at(term.lam_pow, k), dlam ? dlam[k] : 0);
        sum += v;
    }
    return sum;
}

double CylindricalFunction::eval(double t, const double* x,
                                 const measure::ParticleEnsemble& mu) const {
    const coeffs::MomentVector lam = coeffs::eval_moments(mu, moments);
    return outer(t, x, lam.data());
}

void CylindricalFunction::lions(double t, const double* x, const double* lam, const double* y,
                                double* out) const {
    const std::size_t K = moments.size();
    std::fill(out, out + dim_x, 0.0);
    std::vector<int> dlam(K, 0);
    std::vector<double> gh(static_cast<std::size_t>(dim_x));
    for (std::size_t k = 0; k < K; ++k) {
        dlam[k] = 1;
        const double w = outer(t, x, lam, 0, nullptr, dlam.data());
        dlam[k] = 0;
        if (w == 0.0) continue;
        moments[k].grad_h(y, dim_x, gh.data());
        for (int c = 0; c < dim_x; ++c) out[c] += w * gh[c];
    }
}

void CylindricalFunction::lions_jacobian(double t, const double* x, const double* lam,
                                         const double* y, double* out) const {
    const std::size_t K = moments.size();
    const std::size_t dd = static_cast<std::size_t>(dim_x) * static_cast<std::size_t>(dim_x);
    std::fill(out, out + dd, 0.0);
    std::vector<int> dlam(K, 0);
    std::vector<double> hh(dd);
    for (std::size_t k = 0; k < K; ++k) {
        dlam[k] = 1;
        const double w = outer(t, x, lam, 0, nullptr, dlam.data());
        dlam[k] = 0;
        if (w == 0.0) continue;
        moments[k].hess_h(y, dim_x, hh.data());
        for (std::size_t c = 0; c < dd; ++c) out[c] += w * hh[c];
    }
}

double apply_generator(const CylindricalFunction& phi, const coeffs::CoefficientSpec& spec,
                       double t, const double* x, const measure::ParticleEnsemble& mu) {
    phi.validate();
    if (phi.dim_x != spec.dim_x)
        throw InvalidArgument("apply_generator: test function and spec dimension differ");
    if (mu.dim != spec.dim_x) throw InvalidArgument("apply_generator: ensemble dimension mismatch");
    if (mu.size() == 0) throw InvalidArgument("apply_generator: empty ensemble");

    const int d = spec.dim_x;
    const int m = spec.dim_w;
    const coeffs::MomentVector lam = coeffs::eval_moments(mu, phi.moments);
    const coeffs::MomentVector spec_lam = coeffs::eval_moments(mu, spec.moments);

    double out = phi.outer(t, x, lam.data(), 1, nullptr, nullptr);

    std::vector<double> b(static_cast<std::size_t>(d));
    std::vector<double> sig(static_cast<std::size_t>(d) * static_cast<std::size_t>(m));
    spec.drift(t, x, spec_lam.data(), b.data());
    check_finite(b.data(), b.size(), "drift");
    spec.diffusion(t, x, spec_lam.data(), sig.data());
    check_finite(sig.data(), sig.size(), "diffusion");

    std::vector<int> dx(static_cast<std::size_t>(d), 0);
    for (int c = 0; c < d; ++c) {
        dx[static_cast<std::size_t>(c)] = 1;
        out += b[static_cast<std::size_t>(c)] * phi.outer(t, x, lam.data(), 0, dx.data(), nullptr);
        dx[static_cast<std::size_t>(c)] = 0;
    }
    for (int c = 0; c < d; ++c) {
        for (int e = 0; e < d; ++e) {
            double a = 0.0;
            for (int j = 0; j < m; ++j)
                a += sig[static_cast<std::size_t>(c * m + j)] * sig[static_cast<std::size_t>(e * m + j)];
            if (a == 0.0) continue;
            dx[static_cast<std::size_t>(c)] += 1;
            dx[static_cast<std::size_t>(e)] += 1;
            out += 0.5 * a * phi.outer(t, x, lam.data(), 0, dx.data(), nullptr);
            dx[static_cast<std::size_t>(c)] -= 1;
            dx[static_cast<std::size_t>(e)] -= 1;
        }
    }

    // Measure terms: empirical averages of <b(y), d_mu phi(y)> and
    // (1/2) tr(sigma sigma^T(y) d_y d_mu phi(y)) over the ensemble.
    if (!phi.moments.empty()) {
        const std::size_t N = mu.size();
        std::vector<double> grad(static_cast<std::size_t>(d));
        std::vector<double> jac(static_cast<std::size_t>(d) * static_cast<std::size_t>(d));
        double acc = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            const double* y = mu.row(i);
            spec.drift(t, y, spec_lam.data(), b.data());
            check_finite(b.data(), b.size(), "drift");
            spec.diffusion(t, y, spec_lam.data(), sig.data());
            check_finite(sig.data(), sig.size(), "diffusion");
            phi.lions(t, x, lam.data(), y, grad.data());
            phi.lions_jacobian(t, x, lam.data(), y, jac.data());
            double term = 0.0;
            for (int c = 0; c < d; ++c) term += b[static_cast<std::size_t>(c)] * grad[static_cast<std::size_t>(c)];
            for (int c = 0; c < d; ++c) {
                for (int e = 0; e < d; ++e) {
                    double a = 0.0;
                    for (int j = 0; j < m; ++j)
                        a += sig[static_cast<std::size_t>(c * m + j)] *
                             sig[static_cast<std::size_t>(e * m + j)];
                    term += 0.5 * a * jac[static_cast<std::size_t>(c * d + e)];
                }
            }
            acc += term;
        }
        out += acc / static_cast<double>(mu.size());
    }
    return out;
}

std::vector<double> lions_fd_oracle(
    const std::function<double(const measure::ParticleEnsemble&)>& phi,
    const measure::ParticleEnsemble& mu, std::size_t i, double h) {
    if (!(h > 0.0)) throw InvalidArgument("lions_fd_oracle: bump h must be positive");
    if (i >= mu.size()) throw InvalidArgument("lions_fd_oracle: particle index out of range");
    const int d = mu.dim;
    const double scale = static_cast<double>(mu.size()) / (2.0 * h);
    measure::ParticleEnsemble bumped = mu;
    const std::size_t base = i * static_cast<std::size_t>(d);
    std::vector<double> out(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        const double saved = bumped.data[base + static_cast<std::size_t>(j)];
        bumped.data[base + static_cast<std::size_t>(j)] = saved + h;
        const double up = phi(bumped);
        bumped.data[base + static_cast<std::size_t>(j)] = saved - h;
        const double down = phi(bumped);
        bumped.data[base + static_cast<std::size_t>(j)] = saved;
        out[static_cast<std::size_t>(j)] = scale * (up - down);
    }
    return out;
}

double vi_residual(const CylindricalFunction& u, const coeffs::CoefficientSpec& spec, double t,
                   const double* x, const measure::ParticleEnsemble& mu) {
    const double gen = apply_generator(u, spec, t, x, mu);
    const std::vector<double> xv(x, x + spec.dim_x);
    const double f = coeffs::eval_f(spec, t, xv, mu);
    const double g = coeffs::eval_g(spec, xv);
    return std::max(gen + f, g - u.eval(t, x, mu));
}

double vi_residual(const std::function<double(double, double)>& u,
                   const coeffs::CoefficientSpec& spec, double t, double x,
                   const measure::ParticleEnsemble& mu, double dt, double dx) {
    if (spec.dim_x != 1)
        throw InvalidArgument("vi_residual: the numeric-surface variant is one-dimensional");
    if (!(dt > 0.0) || !(dx > 0.0)) throw InvalidArgument("vi_residual: step sizes must be positive");
    const coeffs::MomentVector lam = coeffs::eval_moments(mu, spec.moments);
    double b = 0.0;
    std::vector<double> sig(static_cast<std::size_t>(spec.dim_w));
    spec.drift(t, &x, lam.data(), &b);
    check_finite(&b, 1, "drift");
    spec.diffusion(t, &x, lam.data(), sig.data());
    check_finite(sig.data(), sig.size(), "diffusion");
    double a = 0.0;
    for (double s : sig) a += s * s;

    const double uc = u(t, x);
    const double du_t = (u(t + dt, x) - u(t - dt, x)) / (2.0 * dt);
    const double up = u(t, x + dx);
    const double down = u(t, x - dx);
    const double du_x = (up - down) / (2.0 * dx);
    const double d2u = (up - 2.0 * uc + down) / (dx * dx);
    const double f = spec.running(t, &x, lam.data());
    check_finite(&f, 1, "running");
    const double g = spec.terminal(&x);
    check_finite(&g, 1, "terminal");
    return std::max(du_t + b * du_x + 0.5 * a * d2u + f, g - uc);
}

namespace {

// Value surface evaluated at arbitrary (node, state): the max of obstacle and
// fitted continuation in regression mode, interpolated node values in lattice
// mode, the exact terminal payoff at the last node in both.
double surface_value(const stopping::SnellSolution& sol, const coeffs::CoefficientSpec& spec,
                     std::size_t k, const double* x) {
    const std::size_t M = sol.rule.grid.steps();
    if (sol.rule.mode == stopping::StoppingRule::Mode::Lattice)
        return stopping::lattice_value_at(sol, k, x[0]);
    if (k >= M) return spec.terminal(x);
    const double cont = sol.rule.continuation(spec, k, x);
    return std::max(spec.terminal(x), cont);
}

struct Window {
    std::vector<double> lo;
    std::vector<double> hi;
    std::vector<double> width; // untrimmed support width per coordinate
    bool contains(const double* x, int d) const {
        for (int e = 0; e < d; ++e)
            if (x[e] < lo[static_cast<std::size_t>(e)] || x[e] > hi[static_cast<std::size_t>(e)])
                return false;
        return true;
    }
};

Window support_window(const mkv::MeasureFlow& flow, int d, double trim,
                      const std::vector<double>& fallback_lo,
                      const std::vector<double>& fallback_hi) {
    Window w;
    w.lo.assign(static_cast<std::size_t>(d), std::numeric_limits<double>::infinity());
    w.hi.assign(static_cast<std::size_t>(d), -std::numeric_limits<double>::infinity());
    for (const auto& ens : flow.ensembles)
        for (std::size_t i = 0; i < ens.size(); ++i)
            for (int e = 0; e < d; ++e) {
                const double v = ens.row(i)[e];
                auto ue = static_cast<std::size_t>(e);
                w.lo[ue] = std::min(w.lo[ue], v);
                w.hi[ue] = std::max(w.hi[ue], v);
            }
    w.width.resize(static_cast<std::size_t>(d));
    for (int e = 0; e < d; ++e) {
        auto ue = static_cast<std::size_t>(e);
        // Degenerate (deterministic) supports fall back to the surface's own
        // extent so exact battery problems still produce sample points.
        if (!(w.hi[ue] > w.lo[ue]) && ue < fallback_lo.size()) {
            w.lo[ue] = fallback_lo[ue];
            w.hi[ue] = fallback_hi[ue];
        }
        const double width = w.hi[ue] - w.lo[ue];
        w.width[ue] = width;
        if (width > 0.0) {
            w.lo[ue] += trim * width;
            w.hi[ue] -= trim * width;
        }
    }
    return w;
}

} // namespace

RegionReport region_residual_report(const stopping::SnellSolution& sol,
                                    const coeffs::CoefficientSpec& spec,
                                    const mkv::MeasureFlow& flow, const ReportOptions& opts) {
    const stopping::StoppingRule& rule = sol.rule;
    const stopping::ValueSurface& surf = sol.surface;
    const int d = rule.dim;
    if (spec.dim_x != d) throw InvalidArgument("region_residual_report: spec dimension mismatch");
    if (flow.nodes() != surf.grid.nodes.size())
        throw InvalidArgument("region_residual_report: flow and surface grids differ");
    if (rule.mode == stopping::StoppingRule::Mode::Regression && rule.basis.initial)
        throw InvalidArgument(
            "region_residual_report: initial-augmented bases carry path identity; "
            "evaluate the plain basis");
    if (!(opts.time_lo >= 0.0) || !(opts.time_hi <= 1.0) || !(opts.time_lo < opts.time_hi) ||
        !(opts.support_trim >= 0.0) || !(opts.support_trim < 0.5))
        throw InvalidArgument("region_residual_report: malformed sampling options");

    const bool lattice = rule.mode == stopping::StoppingRule::Mode::Lattice;
    const TimeGrid& grid = surf.grid;
    const std::size_t M = grid.steps();

    RegionReport rep;
    rep.dim_x = d;
    rep.n_moments = spec.moments.size();

    std::vector<double> fb_lo, fb_hi;
    if (lattice && !rule.lattice_x.empty()) {
        fb_lo.assign(1, rule.lattice_x.front());
        fb_hi.assign(1, rule.lattice_x.back());
    }
    const Window win = support_window(flow, d, opts.support_trim, fb_lo, fb_hi);

    std::size_t k_lo = static_cast<std::size_t>(
        std::ceil(opts.time_lo * static_cast<double>(M)));
    std::size_t k_hi = static_cast<std::size_t>(
        std::floor(opts.time_hi * static_cast<double>(M)));
    k_lo = std::max<std::size_t>(k_lo, 1);
    k_hi = std::min(k_hi, M - 1);

    double cont_sum = 0.0;
    std::vector<double> b(static_cast<std::size_t>(d));
    std::vector<double> sig(static_cast<std::size_t>(d) * static_cast<std::size_t>(spec.dim_w));
    // Per-coordinate difference step, shared by the stencil and the boundary
    // probe so "neighbour" means exactly the points the quotient touches.
    std::vector<double> hs(static_cast<std::size_t>(d));
    for (std::size_t c = 0; c < hs.size(); ++c)
        hs[c] = lattice ? rule.lattice_x[1] - rule.lattice_x[0]
                        : std::max(1e-6, 1e-4 * std::max(win.width[c], 1.0));

    for (std::size_t k = k_lo; k <= k_hi; ++k) {
        const double t = grid.nodes[k];
        const double span = grid.nodes[k + 1] - grid.nodes[k - 1];
        const double* lam = rule.lambda[k].data();

        // Collect the sample states for this node.
        std::vector<std::vector<double>> pts;
        if (lattice) {
            for (std::size_t j = 1; j + 1 < rule.lattice_x.size(); ++j) {
                const double xj = rule.lattice_x[j];
                if (win.contains(&xj, 1)) pts.push_back({xj});
            }
        } else {
            const auto& ens = flow.ensembles[k];
            const std::size_t stride =
                std::max<std::size_t>(1, ens.size() / std::max<std::size_t>(1, opts.max_points_per_node));
            for (std::size_t i = 0; i < ens.size() && pts.size() < opts.max_points_per_node;
                 i += stride) {
                const double* y = ens.row(i);
                if (win.contains(y, d)) pts.emplace_back(y, y + d);
            }
        }

        for (const auto& xv : pts) {
            const double* x = xv.data();
            ResidualRow row;
            row.t = t;
            row.x = xv;
            row.lam = rule.lambda[k];
            const double u0 = surface_value(sol, spec, k, x);
            const double g = spec.terminal(x);
            check_finite(&g, 1, "terminal");
            row.branch2 = g - u0;

            // Classical x-terms at (t, x, lambda_k); time differencing along
            // the flow absorbs the measure-transport part of the generator.
            spec.drift(t, x, lam, b.data());
            check_finite(b.data(), b.size(), "drift");
            spec.diffusion(t, x, lam, sig.data());
            check_finite(sig.data(), sig.size(), "diffusion");
            const double f = spec.running(t, x, lam);
            check_finite(&f, 1, "running");

            double branch1 =
                (surface_value(sol, spec, k + 1, x) - surface_value(sol, spec, k - 1, x)) / span + f;
            std::vector<double> xb = xv;
            for (int c = 0; c < d; ++c) {
                auto uc = static_cast<std::size_t>(c);
                const double hc = hs[uc];
                xb[uc] = xv[uc] + hc;
                const double up = surface_value(sol, spec, k, xb.data());
                xb[uc] = xv[uc] - hc;
                const double down = surface_value(sol, spec, k, xb.data());
                xb[uc] = xv[uc];
                branch1 += b[uc] * (up - down) / (2.0 * hc);
                double a = 0.0;
                for (int j = 0; j < spec.dim_w; ++j)
                    a += sig[static_cast<std::size_t>(c * spec.dim_w + j)] *
                         sig[static_cast<std::size_t>(c * spec.dim_w + j)];
                branch1 += 0.5 * a * (up - 2.0 * u0 + down) / (hc * hc);
                for (int e = c + 1; e < d; ++e) {
                    auto ue = static_cast<std::size_t>(e);
                    double ac = 0.0;
                    for (int j = 0; j < spec.dim_w; ++j)
                        ac += sig[static_cast<std::size_t>(c * spec.dim_w + j)] *
                              sig[static_cast<std::size_t>(e * spec.dim_w + j)];
                    if (ac == 0.0) continue;
                    const double he = hs[ue];
                    xb[uc] = xv[uc] + hc;
                    xb[ue] = xv[ue] + he;
                    double cross = surface_value(sol, spec, k, xb.data());
                    xb[ue] = xv[ue] - he;
                    cross -= surface_value(sol, spec, k, xb.data());
                    xb[uc] = xv[uc] - hc;
                    cross += surface_value(sol, spec, k, xb.data());
                    xb[ue] = xv[ue] + he;
                    cross -= surface_value(sol, spec, k, xb.data());
                    xb[uc] = xv[uc];
                    xb[ue] = xv[ue];
                    branch1 += ac * cross / (4.0 * hc * he);
                }
            }
            row.branch1 = branch1;

            row.stopping = rule.exercise(spec, k, x);
            if (row.stopping) {
                row.residual = std::abs(u0 - g);
                rep.stopping_count += 1;
                rep.stopping_max = std::max(rep.stopping_max, row.residual);
            } else {
                row.residual = std::abs(branch1);
                // The quotient reads the equation only while the whole stencil
                // stays in the continuation region; across the exercise
                // boundary the surface is merely C^1 and the quotient measures
                // the kink. Expiry itself is already kept out by time_hi.
                bool near = rule.exercise(spec, k - 1, x) ||
                            (k + 1 < M && rule.exercise(spec, k + 1, x));
                for (int c = 0; c < d && !near; ++c) {
                    auto uc = static_cast<std::size_t>(c);
                    xb[uc] = xv[uc] + hs[uc];
                    near = rule.exercise(spec, k, xb.data());
                    xb[uc] = xv[uc] - hs[uc];
                    near = near || rule.exercise(spec, k, xb.data());
                    xb[uc] = xv[uc];
                }
                row.boundary = near;
                if (row.boundary) {
                    rep.boundary_count += 1;
                } else {
                    rep.continuation_count += 1;
                    rep.continuation_max = std::max(rep.continuation_max, row.residual);
                    cont_sum += row.residual;
                }
            }
            rep.rows.push_back(std::move(row));
        }
    }
    if (rep.continuation_count > 0)
        rep.continuation_mean = cont_sum / static_cast<double>(rep.continuation_count);
    return rep;
}

std::string report_to_csv(const RegionReport& report) {
    std::string out = "t";
    char buf[160];
    if (report.dim_x == 1) {
        out += ",x";
    } else {
        for (int e = 0; e < report.dim_x; ++e) {
            std::snprintf(buf, sizeof buf, ",x_%d", e);
            out += buf;
        }
    }
    for (std::size_t k = 0; k < report.n_moments; ++k) {
        std::snprintf(buf, sizeof buf, ",moment_%zu", k + 1);
        out += buf;
    }
    out += ",branch1,branch2,residual,region\n";
    for (const ResidualRow& row : report.rows) {
        std::snprintf(buf, sizeof buf, "%.17g", row.t);
        out += buf;
        for (double v : row.x) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out += buf;
        }
        for (double v : row.lam) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out += buf;
        }
        std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%s\n", row.branch1, row.branch2,
                      row.residual,
                      row.stopping ? "stopping" : (row.boundary ? "boundary" : "continuation"));
        out += buf;
    }
    return out;
}

} // namespace mfstop::hjb
