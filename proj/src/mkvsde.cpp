#include "mfstop/mkvsde.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mfstop/parallel.hpp"

namespace mfstop::mkv {

namespace {

std::uint64_t splitmix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
}

/// One Euler step writing node k+1 of every path. Reductions stay with the
/// caller; writes are disjoint per path, so the thread count cannot change a
/// single bit of the result.
void euler_step(const coeffs::CoefficientSpec& spec, PathBundle& b, std::size_t k,
                const double* lam, const NoiseSource& noise, std::size_t pofs,
                std::size_t noise_step, const SimOptions& opts) {
    const int d = spec.dim_x;
    const int m = spec.dim_w;
    const double t = b.grid.nodes[k];
    const double dt = b.grid.dt(k);
    const double sq = std::sqrt(dt);
    parallel_for(b.paths, opts.threads, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> bv(static_cast<std::size_t>(d));
        std::vector<double> sv(static_cast<std::size_t>(d) * static_cast<std::size_t>(m));
        for (std::size_t p = lo; p < hi; ++p) {
            const double* x = b.state(p, k);
            double* nx = b.state(p, k + 1);
            double* dw = b.incr(p, k);
            spec.drift(t, x, lam, bv.data());
            spec.diffusion(t, x, lam, sv.data());
            for (int j = 0; j < m; ++j)
                dw[j] = sq * noise.normal(pofs + p, noise_step, static_cast<std::uint64_t>(j));
            for (int c = 0; c < d; ++c) {
                double v = x[c] + bv[c] * dt;
                for (int j = 0; j < m; ++j) v += sv[c * m + j] * dw[j];
                nx[c] = v;
            }
        }
    });
    // Serial guard; re-evaluates the offending particle to attribute blame.
    for (std::size_t p = 0; p < b.paths; ++p) {
        const double* nx = b.state(p, k + 1);
        bool bad = false;
        for (int c = 0; c < d; ++c)
            if (!std::isfinite(nx[c]) || std::abs(nx[c]) > opts.divergence_bound) bad = true;
        if (!bad) continue;
        std::vector<double> bv(static_cast<std::size_t>(d));
        std::vector<double> sv(static_cast<std::size_t>(d) * static_cast<std::size_t>(m));
        spec.drift(t, b.state(p, k), lam, bv.data());
        spec.diffusion(t, b.state(p, k), lam, sv.data());
        for (double v : bv)
            if (!std::isfinite(v)) throw CoefficientError("drift returned a non-finite value");
        for (double v : sv)
            if (!std::isfinite(v)) throw CoefficientError("diffusion returned a non-finite value");
        char msg[128];
        std::snprintf(msg, sizeof msg, "state left divergence bound %.3g at node %zu, particle %zu",
                      opts.divergence_bound, k + 1, p);
        throw DivergenceError(k + 1, p, msg);
    }
}

PathBundle make_bundle(const coeffs::CoefficientSpec& spec, const TimeGrid& grid,
                       const measure::ParticleEnsemble& starts) {
    if (starts.empty()) throw InvalidArgument("simulate: empty initial ensemble");
    if (starts.dim != spec.dim_x)
        throw InvalidArgument("simulate: initial ensemble dimension mismatch");
    PathBundle b;
    b.grid = grid;
    b.dim = spec.dim_x;
    b.dim_w = spec.dim_w;
    b.paths = starts.size();
    b.states.assign(b.paths * (grid.steps() + 1) * static_cast<std::size_t>(b.dim), 0.0);
    b.increments.assign(b.paths * grid.steps() * static_cast<std::size_t>(b.dim_w), 0.0);
    for (std::size_t p = 0; p < b.paths; ++p)
        std::copy(starts.row(p), starts.row(p) + b.dim, b.state(p, 0));
    return b;
}

/// Upper estimate of sup-node discrepancy used inside Picard sweeps: exact W2
/// where affordable, identity-coupling L2 beyond the assignment cap (both
/// ensembles index the same particle family under common noise).
double ensemble_gap(const measure::ParticleEnsemble& a, const measure::ParticleEnsemble& b) {
    if (a.dim == 1) return measure::wasserstein2_1d(a, b);
    if (a.size() <= 256) return measure::wasserstein2_exact(a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double diff = a.data[i] - b.data[i];
        acc += diff * diff;
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

} // namespace

std::vector<coeffs::MomentVector> flow_moments(const MeasureFlow& flow,
                                               const std::vector<coeffs::MomentFunctional>& funcs) {
    std::vector<coeffs::MomentVector> lam(flow.nodes());
    for (std::size_t k = 0; k < flow.nodes(); ++k)
        lam[k] = coeffs::eval_moments(flow.ensembles[k], funcs);
    return lam;
}

measure::ParticleEnsemble PathBundle::ensemble_at(std::size_t k) const {
    measure::ParticleEnsemble e(dim, std::vector<double>(paths * static_cast<std::size_t>(dim)));
    for (std::size_t p = 0; p < paths; ++p)
        std::copy(state(p, k), state(p, k) + dim, e.row(p));
    return e;
}

SimResult simulate_mkv(const coeffs::CoefficientSpec& spec,
                       const measure::ParticleEnsemble& initial, const TimeGrid& grid,
                       const NoiseSource& noise, std::size_t step_offset, const SimOptions& opts) {
    SimResult res;
    res.paths = make_bundle(spec, grid, initial);
    res.flow.grid = grid;
    res.flow.ensembles.resize(grid.steps() + 1);
    res.flow.ensembles[0] = initial;
    for (std::size_t k = 0; k < grid.steps(); ++k) {
        // Moments come from the current population, in fixed particle order.
        coeffs::MomentVector lam(spec.moments.size());
        for (std::size_t f = 0; f < spec.moments.size(); ++f) {
            double acc = 0.0;
            for (std::size_t p = 0; p < res.paths.paths; ++p)
                acc += spec.moments[f].eval_h(res.paths.state(p, k), spec.dim_x);
            lam[f] = acc / static_cast<double>(res.paths.paths);
        }
        euler_step(spec, res.paths, k, lam.data(), noise, 0, step_offset + k, opts);
        res.flow.ensembles[k + 1] = res.paths.ensemble_at(k + 1);
    }
    return res;
}

PathBundle simulate_decoupled(const coeffs::CoefficientSpec& spec,
                              const measure::ParticleEnsemble& starts, const MeasureFlow& flow,
                              const NoiseSource& noise, std::size_t path_offset,
                              std::size_t step_offset, const SimOptions& opts) {
    if (flow.ensembles.size() != flow.grid.steps() + 1)
        throw InvalidArgument("simulate_decoupled: flow node count does not match its grid");
    for (const auto& e : flow.ensembles)
        if (e.empty() || e.dim != spec.dim_x)
            throw InvalidArgument("simulate_decoupled: flow ensemble shape mismatch");
    PathBundle b = make_bundle(spec, flow.grid, starts);
    for (std::size_t k = 0; k < b.grid.steps(); ++k) {
        const coeffs::MomentVector lam = coeffs::eval_moments(flow.ensembles[k], spec.moments);
        euler_step(spec, b, k, lam.data(), noise, path_offset, step_offset + k, opts);
    }
    return b;
}

PathBundle simulate_decoupled(const coeffs::CoefficientSpec& spec, const std::vector<double>& x,
                              const MeasureFlow& flow, const NoiseSource& noise,
                              std::size_t n_paths, std::size_t path_offset,
                              std::size_t step_offset, const SimOptions& opts) {
    if (x.size() != static_cast<std::size_t>(spec.dim_x))
        throw InvalidArgument("simulate_decoupled: start point dimension mismatch");
    measure::ParticleEnsemble starts(spec.dim_x,
                                     std::vector<double>(n_paths * x.size()));
    for (std::size_t p = 0; p < n_paths; ++p)
        std::copy(x.begin(), x.end(), starts.row(p));
    return simulate_decoupled(spec, starts, flow, noise, path_offset, step_offset, opts);
}

PicardResult picard_flow(const coeffs::CoefficientSpec& spec,
                         const measure::ParticleEnsemble& initial, const TimeGrid& grid,
                         const NoiseSource& noise, double tol, std::size_t max_iter,
                         const SimOptions& opts) {
    PicardResult res;
    res.flow.grid = grid;
    res.flow.ensembles.assign(grid.steps() + 1, initial);
    for (std::size_t it = 0; it < max_iter; ++it) {
        const PathBundle b = simulate_decoupled(spec, initial, res.flow, noise, 0, 0, opts);
        MeasureFlow next;
        next.grid = grid;
        next.ensembles.resize(grid.steps() + 1);
        double gap = 0.0;
        for (std::size_t k = 0; k <= grid.steps(); ++k) {
            next.ensembles[k] = b.ensemble_at(k);
            gap = std::max(gap, ensemble_gap(res.flow.ensembles[k], next.ensembles[k]));
        }
        res.flow = std::move(next);
        res.gap_trace.push_back(gap);
        res.iterations = it + 1;
        if (gap <= tol) {
            res.converged = true;
            break;
        }
    }
    return res;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::uint64_t s = seed;
    for (std::size_t i = n; i > 1; --i) {
        s += 0x9e3779b97f4a7c15ull;
        const std::size_t j = static_cast<std::size_t>(splitmix(s) % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

MarginalInvarianceResult check_marginal_invariance(const coeffs::CoefficientSpec& spec,
                                                   const measure::ParticleEnsemble& initial,
                                                   const std::vector<std::size_t>& perm,
                                                   const TimeGrid& grid, const NoiseSource& noise,
                                                   double c, const SimOptions& opts) {
    const std::size_t n = initial.size();
    if (perm.size() != n)
        throw InvalidArgument("check_marginal_invariance: permutation size mismatch");
    std::vector<char> seen(n, 0);
    for (std::size_t v : perm) {
        if (v >= n || seen[v])
            throw InvalidArgument("check_marginal_invariance: not a permutation");
        seen[v] = 1;
    }
    measure::ParticleEnsemble permuted(initial.dim, std::vector<double>(initial.data.size()));
    for (std::size_t i = 0; i < n; ++i)
        std::copy(initial.row(perm[i]), initial.row(perm[i]) + initial.dim, permuted.row(i));

    const SimResult a = simulate_mkv(spec, initial, grid, noise, 0, opts);
    const SimResult b = simulate_mkv(spec, permuted, grid, noise, 0, opts);

    MarginalInvarianceResult res;
    res.per_node.resize(grid.steps() + 1);
    for (std::size_t k = 0; k <= grid.steps(); ++k) {
        res.per_node[k] = measure::wasserstein2(a.flow.ensembles[k], b.flow.ensembles[k]);
        res.statistic = std::max(res.statistic, res.per_node[k]);
    }
    res.threshold = c * std::pow(static_cast<double>(n), -0.25);
    res.pass = res.statistic <= res.threshold;
    return res;
}

FlowPropertyResult check_flow_property(const coeffs::CoefficientSpec& spec,
                                       const std::vector<double>& x,
                                       const measure::ParticleEnsemble& initial,
                                       const TimeGrid& grid, std::size_t k_mid,
                                       std::size_t n_paths, const NoiseSource& noise,
                                       const SimOptions& opts) {
    if (k_mid == 0 || k_mid >= grid.steps())
        throw InvalidArgument("check_flow_property: k_mid must be interior");
    const SimResult sim = simulate_mkv(spec, initial, grid, noise, 0, opts);
    const NoiseSource pn = noise.derived(0x70617468ull);

    FlowPropertyResult res;

    // Decoupled bundle and its restart against the flow restriction.
    const PathBundle ext = simulate_decoupled(spec, x, sim.flow, pn, n_paths, 0, 0, opts);
    const MeasureFlow tail = sim.flow.suffix(k_mid);
    const PathBundle re =
        simulate_decoupled(spec, ext.ensemble_at(k_mid), tail, pn, 0, k_mid, opts);
    for (std::size_t p = 0; p < n_paths; ++p)
        for (std::size_t k = k_mid; k <= grid.steps(); ++k)
            for (int cc = 0; cc < spec.dim_x; ++cc)
                res.path_gap = std::max(
                    res.path_gap, std::abs(ext.state(p, k)[cc] - re.state(p, k - k_mid)[cc]));

    // Coupled system restarted from its own stored marginal.
    const SimResult re2 =
        simulate_mkv(spec, sim.flow.ensembles[k_mid], tail.grid, noise, k_mid, opts);
    for (std::size_t k = k_mid; k <= grid.steps(); ++k) {
        const auto& orig = sim.flow.ensembles[k];
        const auto& rest = re2.flow.ensembles[k - k_mid];
        for (std::size_t i = 0; i < orig.data.size(); ++i)
            res.flow_gap = std::max(res.flow_gap, std::abs(orig.data[i] - rest.data[i]));
    }
    return res;
}

MomentBoundResult moment_bound_check(const coeffs::CoefficientSpec& spec,
                                     const std::vector<double>& x,
                                     const measure::ParticleEnsemble& mu, const TimeGrid& grid,
                                     int p, std::size_t n_paths, const NoiseSource& noise,
                                     const SimOptions& opts) {
    if (p <= 0 || p % 2 != 0) throw InvalidArgument("moment_bound_check: p must be even positive");
    const SimResult sim = simulate_mkv(spec, mu, grid, noise, 0, opts);
    const PathBundle b =
        simulate_decoupled(spec, x, sim.flow, noise.derived(0x6d6f6dull), n_paths, 0, 0, opts);

    double acc = 0.0;
    for (std::size_t q = 0; q < b.paths; ++q) {
        double sup = 0.0;
        for (std::size_t k = 0; k <= grid.steps(); ++k) {
            double norm = 0.0;
            const double* st = b.state(q, k);
            for (int cc = 0; cc < spec.dim_x; ++cc) norm += st[cc] * st[cc];
            sup = std::max(sup, norm);
        }
        acc += std::pow(sup, p / 2.0);
    }
    MomentBoundResult res;
    res.numerator = acc / static_cast<double>(b.paths);
    double xnorm = 0.0;
    for (double v : x) xnorm += v * v;
    res.denominator =
        1.0 + std::pow(std::sqrt(xnorm), p) + std::pow(measure::norm2(mu), p);
    res.ratio = res.numerator / res.denominator;
    return res;
}

} // namespace mfstop::mkv
