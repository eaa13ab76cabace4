#include "mfstop/stopping.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "mfstop/parallel.hpp"

namespace mfstop::stopping {

using nlohmann::json;

// ---- feature basis ---------------------------------------------------------

std::size_t FeatureBasis::count(int dim, int n_moments) const {
    if (x_degree < 1 || x_degree > 2)
        throw InvalidArgument("FeatureBasis: x_degree must be 1 or 2");
    const std::size_t d = static_cast<std::size_t>(dim);
    const std::size_t K = static_cast<std::size_t>(n_moments);
    std::size_t n = 1 + d;
    if (x_degree >= 2) n += d * (d + 1) / 2;
    if (moments) n += K;
    if (cross) n += K * d;
    if (payoff) n += 1;
    n += knots.size() * d;
    if (initial) n += d + d * d;
    return n;
}

void FeatureBasis::eval(const coeffs::CoefficientSpec& spec, const double* x, const double* lam,
                        const double* x0, double* out) const {
    const int d = spec.dim_x;
    const int K = static_cast<int>(spec.moments.size());
    std::size_t idx = 0;
    out[idx++] = 1.0;
    for (int c = 0; c < d; ++c) out[idx++] = x[c];
    if (x_degree >= 2)
        for (int c = 0; c < d; ++c)
            for (int e = c; e < d; ++e) out[idx++] = x[c] * x[e];
    if (moments)
        for (int k = 0; k < K; ++k) out[idx++] = lam[k];
    if (cross)
        for (int k = 0; k < K; ++k)
            for (int c = 0; c < d; ++c) out[idx++] = lam[k] * x[c];
    if (payoff) out[idx++] = spec.terminal(x);
    for (double c : knots)
        for (int e = 0; e < d; ++e) {
            const double hnge = std::max(x[e] - c, 0.0);
            out[idx++] = hnge * hnge;
        }
    if (initial) {
        if (x0 == nullptr)
            throw InvalidArgument("FeatureBasis: initial-point features need the path start");
        for (int c = 0; c < d; ++c) out[idx++] = x0[c];
        for (int c = 0; c < d; ++c)
            for (int e = 0; e < d; ++e) out[idx++] = x0[c] * x[e];
    }
}

std::string FeatureBasis::describe() const {
    std::string s = x_degree >= 2 ? "poly2" : "poly1";
    if (moments) s += "+moments";
    if (cross) s += "+cross";
    if (payoff) s += "+payoff";
    if (!knots.empty()) {
        s += "+qknots(";
        char buf[40];
        for (std::size_t i = 0; i < knots.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%s%.17g", i ? "," : "", knots[i]);
            s += buf;
        }
        s += ")";
    }
    if (initial) s += "+initial";
    return s;
}

FeatureBasis FeatureBasis::parse(const std::string& text) {
    if (text == "default" || text.empty()) return FeatureBasis{};
    FeatureBasis b;
    b.x_degree = 2;
    b.moments = b.cross = b.payoff = b.initial = false;
    std::stringstream ss(text);
    std::string tok;
    bool saw_poly = false;
    while (std::getline(ss, tok, '+')) {
        if (tok == "poly1") {
            b.x_degree = 1;
            saw_poly = true;
        } else if (tok == "poly2") {
            b.x_degree = 2;
            saw_poly = true;
        } else if (tok == "moments") {
            b.moments = true;
        } else if (tok == "cross") {
            b.cross = true;
        } else if (tok == "payoff") {
            b.payoff = true;
        } else if (tok == "initial") {
            b.initial = true;
        } else if (tok.rfind("qknots(", 0) == 0 && tok.back() == ')') {
            std::stringstream ks(tok.substr(7, tok.size() - 8));
            std::string num;
            while (std::getline(ks, num, ',')) {
                std::size_t pos = 0;
                double v = 0.0;
                try {
                    v = std::stod(num, &pos);
                } catch (const std::exception&) {
                    pos = 0;
                }
                if (pos != num.size())
                    throw InvalidArgument("FeatureBasis: bad knot '" + num + "'");
                b.knots.push_back(v);
            }
            if (b.knots.empty()) throw InvalidArgument("FeatureBasis: qknots needs values");
        } else {
            throw InvalidArgument("FeatureBasis: unknown token '" + tok + "'");
        }
    }
    if (!saw_poly) throw InvalidArgument("FeatureBasis: descriptor must name poly1 or poly2");
    return b;
}

// ---- shared helpers --------------------------------------------------------

namespace {

void require_flow_matches(const mkv::MeasureFlow& flow, const TimeGrid& grid) {
    if (flow.ensembles.size() != grid.steps() + 1 || flow.grid.nodes != grid.nodes)
        throw InvalidArgument("stopping: flow grid does not match the path grid");
}

double norm_cdf(double z) { return 0.5 * std::erfc(-z * 0.7071067811865475244); }
double norm_pdf(double z) { return 0.3989422804014326779 * std::exp(-0.5 * z * z); }

/// Least squares with rank-revealing pivoted QR. Rank-deficient designs are
/// flagged; with ridge_lambda > 0 they are re-solved as ridge instead (the
/// declared-lambda fallback), otherwise the pivoted projection is used.
/// The rank threshold is prescribed well above machine precision: features
/// are O(1)-scaled, so pivots ten orders below the leading one carry no
/// signal, only roundoff. Eigen's default (~eps) lets exactly-duplicate
/// columns (point-mass initial laws, augmented bases) slip through as
/// spurious pivots whose huge cancelling coefficients pollute the fit.
Eigen::VectorXd solve_ls(const Eigen::MatrixXd& A, const Eigen::VectorXd& y, double ridge_lambda,
                         bool& flagged) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    qr.setThreshold(1e-10);
    const Eigen::Index r = qr.rank();
    flagged = r < A.cols();
    if (flagged && ridge_lambda > 0.0) {
        Eigen::MatrixXd gram = A.transpose() * A;
        gram.diagonal().array() += ridge_lambda * static_cast<double>(A.rows());
        return gram.ldlt().solve(A.transpose() * y);
    }
    if (!flagged) return qr.solve(y);
    // Basic solution on the r leading pivot columns. Eigen's solve()
    // truncates at the epsilon-scale pivot count fixed during factorization,
    // which admits spurious pivots from exactly-duplicate columns
    // (point-mass initial laws, augmented bases); their huge cancelling
    // coefficients pollute the fit, so re-truncate at the prescribed rank.
    Eigen::VectorXd c = y;
    c.applyOnTheLeft(qr.householderQ().setLength(r).adjoint());
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(A.cols());
    if (r > 0) {
        const Eigen::VectorXd z =
            qr.matrixQR().topLeftCorner(r, r).triangularView<Eigen::Upper>().solve(c.head(r));
        for (Eigen::Index i = 0; i < r; ++i) beta(qr.colsPermutation().indices()(i)) = z(i);
    }
    return beta;
}

/// Gauss-Hermite rule for E[phi(Z)], Z standard normal: Jacobi matrix of the
/// probabilists' Hermite recurrence, weights from the first eigenvector row.
void gauss_hermite(int n, std::vector<double>& nodes, std::vector<double>& weights) {
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) {
        const double b = std::sqrt(static_cast<double>(i));
        jac(i, i - 1) = b;
        jac(i - 1, i) = b;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jac);
    nodes.resize(static_cast<std::size_t>(n));
    weights.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        nodes[static_cast<std::size_t>(i)] = es.eigenvalues()(i);
        const double v = es.eigenvectors()(0, i);
        weights[static_cast<std::size_t>(i)] = v * v;
    }
}

/// Cubic 4-point interpolation on a uniform lattice, linear in edge cells.
/// Queries are expected clamped to [lo, lo + h*(n-1)].
double interp_uniform(const std::vector<double>& vals, double lo, double h, double y) {
    const std::size_t n = vals.size();
    double s = (y - lo) / h;
    if (s <= 0.0) return vals.front();
    if (s >= static_cast<double>(n - 1)) return vals.back();
    std::size_t j = static_cast<std::size_t>(s);
    if (j > n - 2) j = n - 2;
    const double u = s - static_cast<double>(j);
    if (j >= 1 && j + 2 < n) {
        const double f0 = vals[j - 1];
        const double f1 = vals[j];
        const double f2 = vals[j + 1];
        const double f3 = vals[j + 2];
        return f1 + u * ((f2 - f0) / 2.0 +
                         u * ((2.0 * f0 - 5.0 * f1 + 4.0 * f2 - f3) / 2.0 +
                              u * ((f3 - f0 + 3.0 * (f1 - f2)) / 2.0)));
    }
    return vals[j] + u * (vals[j + 1] - vals[j]);
}

double sd_of(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : v) {
        const double d = x - mean;
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

} // namespace

// ---- regression solver -----------------------------------------------------

SnellSolution snell_backward_regression(const coeffs::CoefficientSpec& spec,
                                        const mkv::PathBundle& paths,
                                        const mkv::MeasureFlow& flow, const SolverConfig& cfg) {
    return snell_backward_regression_window(spec, paths, flow, paths.grid.steps(), nullptr, cfg);
}

SnellSolution snell_backward_regression_window(const coeffs::CoefficientSpec& spec,
                                               const mkv::PathBundle& paths,
                                               const mkv::MeasureFlow& flow, std::size_t k_end,
                                               const std::vector<double>* terminal_values,
                                               const SolverConfig& cfg) {
    require_flow_matches(flow, paths.grid);
    if (paths.dim != spec.dim_x)
        throw InvalidArgument("snell_backward_regression: path dimension mismatch");
    if (k_end < 1 || k_end > paths.grid.steps())
        throw InvalidArgument("snell_backward_regression_window: k_end outside [1, M]");
    if (terminal_values && terminal_values->size() != paths.paths)
        throw InvalidArgument("snell_backward_regression_window: terminal values per path");
    const std::size_t M = k_end;
    const std::size_t N = paths.paths;
    const int d = spec.dim_x;
    const int K = static_cast<int>(spec.moments.size());
    const std::size_t F = cfg.basis.count(d, K);
    const auto lam = mkv::flow_moments(flow, spec.moments);
    const TimeGrid wgrid(std::vector<double>(
        paths.grid.nodes.begin(), paths.grid.nodes.begin() + static_cast<std::ptrdiff_t>(M) + 1));

    SnellSolution sol;
    sol.rule.mode = StoppingRule::Mode::Regression;
    sol.rule.grid = wgrid;
    sol.rule.dim = d;
    sol.rule.tie_eps = cfg.tie_eps;
    sol.rule.basis = cfg.basis;
    sol.rule.beta.assign(M, {});
    sol.rule.flagged.assign(M, 0);
    sol.rule.lambda.assign(M + 1, {});
    for (std::size_t k = 0; k <= M; ++k) sol.rule.lambda[k] = lam[k];

    sol.surface.mode = StoppingRule::Mode::Regression;
    sol.surface.grid = wgrid;
    sol.surface.values.assign(M + 1, std::vector<double>(N));

    if (terminal_values) {
        sol.surface.values[M] = *terminal_values;
    } else {
        parallel_for(N, cfg.threads, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t p = lo; p < hi; ++p)
                sol.surface.values[M][p] = spec.terminal(paths.state(p, M));
        });
    }

    Eigen::MatrixXd A(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(F));
    Eigen::VectorXd y(static_cast<Eigen::Index>(N));
    std::vector<double> payoff_k(N);

    for (std::size_t k = M; k-- > 0;) {
        const double t = paths.grid.nodes[k];
        const double dt = paths.grid.dt(k);
        const double* lk = lam[k].data();
        parallel_for(N, cfg.threads, [&](std::size_t lo, std::size_t hi) {
            std::vector<double> feat(F);
            for (std::size_t p = lo; p < hi; ++p) {
                const double* x = paths.state(p, k);
                cfg.basis.eval(spec, x, lk, paths.state(p, 0), feat.data());
                for (std::size_t c = 0; c < F; ++c)
                    A(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(c)) = feat[c];
                payoff_k[p] = spec.terminal(x);
                y(static_cast<Eigen::Index>(p)) =
                    sol.surface.values[k + 1][p] + spec.running(t, x, lk) * dt;
            }
        });
        for (std::size_t p = 0; p < N; ++p)
            if (!std::isfinite(y(static_cast<Eigen::Index>(p))))
                throw CoefficientError("regression target is non-finite");

        bool flag = false;
        const Eigen::VectorXd beta = solve_ls(A, y, cfg.ridge_lambda, flag);
        const Eigen::VectorXd fitted = A * beta;
        sol.rule.flagged[k] = flag ? 1 : 0;
        sol.rule.beta[k].assign(beta.data(), beta.data() + beta.size());
        auto& vk = sol.surface.values[k];
        for (std::size_t p = 0; p < N; ++p)
            vk[p] = std::max(payoff_k[p], fitted(static_cast<Eigen::Index>(p)));
    }

    sol.surface.root_value = mean_of(sol.surface.values[0]);
    // SE of the root as a mean estimate: dispersion of the node-0 target.
    std::vector<double> root_target(N);
    for (std::size_t p = 0; p < N; ++p) root_target[p] = y(static_cast<Eigen::Index>(p));
    sol.surface.root_se =
        sd_of(root_target, mean_of(root_target)) / std::sqrt(static_cast<double>(N));
    return sol;
}

// ---- lattice solver --------------------------------------------------------

SnellSolution snell_backward_lattice(const coeffs::CoefficientSpec& spec,
                                     const mkv::MeasureFlow& flow, const SolverConfig& cfg) {
    if (spec.dim_x != 1 || spec.dim_w != 1)
        throw InvalidArgument("snell_backward_lattice: lattice mode is 1-d only");
    if (cfg.lattice_points < 8)
        throw InvalidArgument("snell_backward_lattice: need at least 8 lattice points");
    if (cfg.quad_points < 2)
        throw InvalidArgument("snell_backward_lattice: need at least 2 quadrature points");
    const std::size_t M = flow.grid.steps();
    require_flow_matches(flow, flow.grid);
    const auto lam = mkv::flow_moments(flow, spec.moments);

    double support_lo = flow.ensembles[0].data[0];
    double support_hi = support_lo;
    for (const auto& e : flow.ensembles)
        for (double v : e.data) {
            support_lo = std::min(support_lo, v);
            support_hi = std::max(support_hi, v);
        }
    double width = support_hi - support_lo;
    if (width < 1e-12) width = std::max(1.0, std::abs(support_lo));
    const double lo = support_lo - cfg.lattice_margin * width;
    const double hi = support_hi + cfg.lattice_margin * width;
    const std::size_t J = cfg.lattice_points;
    const double h = (hi - lo) / static_cast<double>(J - 1);

    std::vector<double> z;
    std::vector<double> w;
    gauss_hermite(cfg.quad_points, z, w);

    SnellSolution sol;
    sol.rule.mode = StoppingRule::Mode::Lattice;
    sol.rule.grid = flow.grid;
    sol.rule.dim = 1;
    sol.rule.tie_eps = cfg.lattice_tie_eps;
    sol.rule.lattice_x.resize(J);
    for (std::size_t j = 0; j < J; ++j)
        sol.rule.lattice_x[j] = lo + h * static_cast<double>(j);
    sol.rule.lattice_cont.assign(M, std::vector<double>(J));
    sol.rule.lambda.assign(M + 1, {});
    for (std::size_t k = 0; k <= M; ++k) sol.rule.lambda[k] = lam[k];

    sol.surface.mode = StoppingRule::Mode::Lattice;
    sol.surface.grid = flow.grid;
    sol.surface.lattice_x = sol.rule.lattice_x;
    sol.surface.values.assign(M + 1, std::vector<double>(J));
    for (std::size_t j = 0; j < J; ++j)
        sol.surface.values[M][j] = spec.terminal(&sol.rule.lattice_x[j]);

    // Terminal step. The payoff may carry a kink, and sampling it with the
    // Hermite rule injects a node-frequency error (the kink's position inside
    // the quadrature window shifts from one centre to the next) that the
    // residual diagnostics amplify by 1/h^2. Instead, integrate a piecewise-
    // linear table of the payoff exactly against the Gaussian transition; the
    // table is anchored to the lattice, so the kink sits at a fixed spot and
    // the one bad cell contributes a smooth O(h^2) bias rather than a sawtooth.
    {
        const std::size_t k = M - 1;
        const double t = flow.grid.nodes[k];
        const double dt = flow.grid.dt(k);
        const double sqdt = std::sqrt(dt);
        const double* lk = lam[k].data();
        auto& cont_k = sol.rule.lattice_cont[k];
        auto& val_k = sol.surface.values[k];

        std::vector<double> mean_j(J);
        std::vector<double> vol_j(J);
        std::vector<double> f_j(J);
        double need_lo = lo;
        double need_hi = hi;
        bool any_quad = false;
        for (std::size_t j = 0; j < J; ++j) {
            const double x = sol.rule.lattice_x[j];
            double b;
            double s;
            spec.drift(t, &x, lk, &b);
            spec.diffusion(t, &x, lk, &s);
            f_j[j] = spec.running(t, &x, lk);
            mean_j[j] = x + b * dt;
            vol_j[j] = std::abs(s) * sqdt;
            if (vol_j[j] >= 1e-14 * (1.0 + std::abs(mean_j[j]))) {
                any_quad = true;
                need_lo = std::min(need_lo, mean_j[j] - 8.5 * vol_j[j]);
                need_hi = std::max(need_hi, mean_j[j] + 8.5 * vol_j[j]);
            }
        }

        std::vector<double> gsub;
        double sub_lo = lo;
        double hsub = h;
        if (any_quad) {
            hsub = h / 4.0;
            sub_lo = lo - hsub * std::ceil(std::max(0.0, lo - need_lo) / hsub);
            const auto nsub = static_cast<std::size_t>(
                                  std::ceil((need_hi - sub_lo) / hsub)) + 2;
            gsub.resize(nsub);
            for (std::size_t i = 0; i < nsub; ++i) {
                const double y = sub_lo + hsub * static_cast<double>(i);
                gsub[i] = spec.terminal(&y);
            }
        }

        parallel_for(J, cfg.threads, [&](std::size_t jlo, std::size_t jhi) {
            for (std::size_t j = jlo; j < jhi; ++j) {
                const double x = sol.rule.lattice_x[j];
                const double mean = mean_j[j];
                const double vol = vol_j[j];
                double cont;
                if (vol < 1e-14 * (1.0 + std::abs(mean))) {
                    cont = spec.terminal(&mean);
                } else {
                    const auto i1 = static_cast<std::size_t>(std::max(
                        0.0, std::floor((mean - 8.5 * vol - sub_lo) / hsub)));
                    const auto i2 = std::min(
                        gsub.size() - 1,
                        static_cast<std::size_t>(std::ceil((mean + 8.5 * vol - sub_lo) / hsub)));
                    double acc = 0.0;
                    double cum = norm_cdf((sub_lo + hsub * static_cast<double>(i1) - mean) / vol);
                    double pdf = norm_pdf((sub_lo + hsub * static_cast<double>(i1) - mean) / vol);
                    for (std::size_t i = i1; i < i2; ++i) {
                        const double y1 = sub_lo + hsub * static_cast<double>(i);
                        const double z2 = (y1 + hsub - mean) / vol;
                        const double cum2 = norm_cdf(z2);
                        const double pdf2 = norm_pdf(z2);
                        const double mass = cum2 - cum;
                        if (mass > 0.0) {
                            const double slope = (gsub[i + 1] - gsub[i]) / hsub;
                            acc += gsub[i] * mass +
                                   slope * ((mean - y1) * mass + vol * (pdf - pdf2));
                        }
                        cum = cum2;
                        pdf = pdf2;
                    }
                    cont = acc;
                }
                cont_k[j] = cont + f_j[j] * dt;
                val_k[j] = std::max(spec.terminal(&x), cont_k[j]);
            }
        });
        for (std::size_t j = 0; j < J; ++j)
            if (!std::isfinite(val_k[j]))
                throw CoefficientError("lattice continuation is non-finite");
    }

    for (std::size_t k = M - 1; k-- > 0;) {
        const double t = flow.grid.nodes[k];
        const double dt = flow.grid.dt(k);
        const double sqdt = std::sqrt(dt);
        const double* lk = lam[k].data();
        const auto& next = sol.surface.values[k + 1];
        auto& cont_k = sol.rule.lattice_cont[k];
        auto& val_k = sol.surface.values[k];
        std::vector<double> escape(J, 0.0);
        parallel_for(J, cfg.threads, [&](std::size_t jlo, std::size_t jhi) {
            for (std::size_t j = jlo; j < jhi; ++j) {
                const double x = sol.rule.lattice_x[j];
                double b;
                double s;
                spec.drift(t, &x, lk, &b);
                spec.diffusion(t, &x, lk, &s);
                const double f = spec.running(t, &x, lk);
                const double mean = x + b * dt;
                const double vol = std::abs(s) * sqdt;
                double cont;
                if (vol < 1e-14 * (1.0 + std::abs(mean))) {
                    cont = interp_uniform(next, lo, h, std::clamp(mean, lo, hi));
                    if (mean < lo || mean > hi) escape[j] = 1.0;
                } else {
                    double acc = 0.0;
                    for (std::size_t q = 0; q < z.size(); ++q) {
                        const double yq = mean + vol * z[q];
                        if (yq < lo || yq > hi) escape[j] += w[q];
                        acc += w[q] * interp_uniform(next, lo, h, std::clamp(yq, lo, hi));
                    }
                    cont = acc;
                }
                cont_k[j] = cont + f * dt;
                val_k[j] = std::max(spec.terminal(&x), cont_k[j]);
            }
        });
        // The margin band exists to absorb quadrature tails, so the escape cap
        // binds only where values can influence support queries: inside the
        // flow support plus the interpolation stencil around it.
        for (std::size_t j = 0; j < J; ++j) {
            const double x = sol.rule.lattice_x[j];
            if (x >= support_lo - 2.0 * h && x <= support_hi + 2.0 * h &&
                escape[j] > cfg.escape_cap) {
                char buf[160];
                std::snprintf(buf, sizeof(buf),
                              "lattice transition mass %.3e beyond the grid at node %zu, point "
                              "%zu exceeds the cap %.3e; widen lattice_margin or refine",
                              escape[j], k, j, cfg.escape_cap);
                throw CapacityError(buf);
            }
            if (!std::isfinite(val_k[j]))
                throw CoefficientError("lattice continuation is non-finite");
        }
    }

    // Root with the same semantics as the regression surface: the value
    // disintegrated over the flow's initial ensemble.
    const auto& init = flow.ensembles[0];
    std::vector<double> v0(init.size());
    for (std::size_t i = 0; i < init.size(); ++i)
        v0[i] = interp_uniform(sol.surface.values[0], lo, h,
                               std::clamp(init.data[i], lo, hi));
    sol.surface.root_value = mean_of(v0);
    sol.surface.root_se = sd_of(v0, sol.surface.root_value) /
                          std::sqrt(static_cast<double>(v0.size()));
    return sol;
}

double lattice_value_at(const SnellSolution& sol, std::size_t k, double x) {
    if (sol.surface.mode != StoppingRule::Mode::Lattice)
        throw InvalidArgument("lattice_value_at: not a lattice surface");
    const auto& lx = sol.surface.lattice_x;
    const double lo = lx.front();
    const double h = lx[1] - lx[0];
    return interp_uniform(sol.surface.values[k], lo, h, std::clamp(x, lo, lx.back()));
}

// ---- rule evaluation -------------------------------------------------------

double StoppingRule::continuation(const coeffs::CoefficientSpec& spec, std::size_t k,
                                  const double* x, const double* x0) const {
    if (k >= grid.steps())
        throw InvalidArgument("StoppingRule: continuation undefined at the terminal node");
    if (mode == Mode::Regression) {
        const std::size_t F = basis.count(dim, static_cast<int>(spec.moments.size()));
        if (beta[k].size() != F)
            throw InvalidArgument("StoppingRule: coefficient size does not match basis");
        std::vector<double> feat(F);
        basis.eval(spec, x, lambda[k].data(), x0, feat.data());
        double acc = 0.0;
        for (std::size_t c = 0; c < F; ++c) acc += beta[k][c] * feat[c];
        return acc;
    }
    const double lo = lattice_x.front();
    const double h = lattice_x[1] - lattice_x[0];
    return interp_uniform(lattice_cont[k], lo, h, std::clamp(x[0], lo, lattice_x.back()));
}

bool StoppingRule::exercise(const coeffs::CoefficientSpec& spec, std::size_t k, const double* x,
                            const double* x0) const {
    if (k >= grid.steps()) return true;
    return continuation(spec, k, x, x0) <= spec.terminal(x) + tie_eps;
}

std::vector<std::size_t> optimal_stop_times(const StoppingRule& rule,
                                            const coeffs::CoefficientSpec& spec,
                                            const mkv::PathBundle& paths) {
    if (paths.grid.nodes != rule.grid.nodes)
        throw InvalidArgument("optimal_stop_times: path grid does not match the rule");
    const std::size_t M = paths.grid.steps();
    std::vector<std::size_t> stops(paths.paths, M);
    for (std::size_t p = 0; p < paths.paths; ++p) {
        const double* x0 = paths.state(p, 0);
        for (std::size_t k = 0; k < M; ++k) {
            if (rule.exercise(spec, k, paths.state(p, k), x0)) {
                stops[p] = k;
                break;
            }
        }
    }
    return stops;
}

double realized_gain(const StoppingRule& rule, const coeffs::CoefficientSpec& spec,
                     const mkv::PathBundle& paths, std::size_t p, std::size_t stop_k) {
    double acc = 0.0;
    for (std::size_t j = 0; j < stop_k; ++j)
        acc += spec.running(paths.grid.nodes[j], paths.state(p, j), rule.lambda[j].data()) *
               paths.grid.dt(j);
    return acc + spec.terminal(paths.state(p, stop_k));
}

PolicyValue execute_policy(const StoppingRule& rule, const coeffs::CoefficientSpec& spec,
                           const measure::ParticleEnsemble& starts, const mkv::MeasureFlow& flow,
                           const NoiseSource& noise, const SolverConfig& cfg) {
    mkv::SimOptions opts;
    opts.threads = cfg.threads;
    const mkv::PathBundle bundle = mkv::simulate_decoupled(spec, starts, flow, noise, 0, 0, opts);
    PolicyValue res;
    res.stops = optimal_stop_times(rule, spec, bundle);
    std::vector<double> gains(bundle.paths);
    for (std::size_t p = 0; p < bundle.paths; ++p)
        gains[p] = realized_gain(rule, spec, bundle, p, res.stops[p]);
    res.mean = mean_of(gains);
    res.se = sd_of(gains, res.mean) / std::sqrt(static_cast<double>(gains.size()));
    return res;
}

DisintegrationResult disintegrate_value(const coeffs::ProblemInstance& inst,
                                        std::size_t n_particles, const NoiseSource& noise,
                                        const SolverConfig& cfg) {
    DisintegrationResult res;
    const auto initial = inst.initial.sample(n_particles, inst.spec.dim_x, noise);
    mkv::SimOptions opts;
    opts.threads = cfg.threads;
    res.sim = mkv::simulate_mkv(inst.spec, initial, inst.grid(), noise, 0, opts);
    res.solution = snell_backward_regression(inst.spec, res.sim.paths, res.sim.flow, cfg);
    const auto& v0 = res.solution.surface.values[0];
    res.value = mean_of(v0);
    res.se = sd_of(v0, res.value) / std::sqrt(static_cast<double>(v0.size()));
    return res;
}

std::vector<std::vector<double>> snell_path(const coeffs::CoefficientSpec& spec,
                                            const SnellSolution& sol,
                                            const mkv::PathBundle& paths) {
    if (sol.surface.mode != StoppingRule::Mode::Regression)
        throw InvalidArgument("snell_path: needs a regression surface");
    const std::size_t M = paths.grid.steps();
    const std::size_t N = paths.paths;
    std::vector<std::vector<double>> s(M + 1, std::vector<double>(N));
    std::vector<double> cum(N, 0.0);
    for (std::size_t k = 0; k <= M; ++k) {
        for (std::size_t p = 0; p < N; ++p) s[k][p] = sol.surface.values[k][p] + cum[p];
        if (k == M) break;
        const double t = paths.grid.nodes[k];
        const double dt = paths.grid.dt(k);
        for (std::size_t p = 0; p < N; ++p)
            cum[p] += spec.running(t, paths.state(p, k), sol.rule.lambda[k].data()) * dt;
    }
    return s;
}

SnellIncrements snell_increments(const coeffs::CoefficientSpec& spec, const SnellSolution& sol,
                                 const mkv::PathBundle& paths) {
    const auto s = snell_path(spec, sol, paths);
    const std::size_t M = paths.grid.steps();
    const std::size_t N = paths.paths;
    SnellIncrements out;
    out.mean_increment.resize(M);
    out.se.resize(M);
    std::vector<double> inc(N);
    for (std::size_t k = 0; k < M; ++k) {
        for (std::size_t p = 0; p < N; ++p) inc[p] = s[k + 1][p] - s[k][p];
        out.mean_increment[k] = mean_of(inc);
        out.se[k] = sd_of(inc, out.mean_increment[k]) / std::sqrt(static_cast<double>(N));
    }
    return out;
}

// ---- serialization ---------------------------------------------------------

std::string rule_to_json(const StoppingRule& rule) {
    json j;
    j["schema_version"] = 1;
    j["kind"] = "stopping_rule";
    j["mode"] = rule.mode == StoppingRule::Mode::Regression ? "regression" : "lattice";
    j["dim"] = rule.dim;
    j["tie_eps"] = rule.tie_eps;
    j["grid"] = rule.grid.nodes;
    j["lambda"] = rule.lambda;
    if (rule.mode == StoppingRule::Mode::Regression) {
        j["basis"] = rule.basis.describe();
        j["beta"] = rule.beta;
        j["flagged"] = rule.flagged;
    } else {
        j["lattice_x"] = rule.lattice_x;
        j["lattice_cont"] = rule.lattice_cont;
    }
    return j.dump(2);
}

StoppingRule rule_from_json(const std::string& text) {
    json j = json::parse(text);
    if (!j.contains("kind") || j["kind"] != "stopping_rule")
        throw InvalidArgument("rule_from_json: not a stopping_rule document");
    if (j["schema_version"].get<int>() != 1)
        throw InvalidArgument("rule_from_json: unsupported schema_version");
    StoppingRule rule;
    rule.mode = j["mode"] == "regression" ? StoppingRule::Mode::Regression
                                          : StoppingRule::Mode::Lattice;
    rule.dim = j["dim"].get<int>();
    rule.tie_eps = j["tie_eps"].get<double>();
    rule.grid = TimeGrid(j["grid"].get<std::vector<double>>());
    rule.lambda = j["lambda"].get<std::vector<std::vector<double>>>();
    if (rule.mode == StoppingRule::Mode::Regression) {
        rule.basis = FeatureBasis::parse(j["basis"].get<std::string>());
        rule.beta = j["beta"].get<std::vector<std::vector<double>>>();
        rule.flagged = j["flagged"].get<std::vector<std::uint8_t>>();
    } else {
        rule.lattice_x = j["lattice_x"].get<std::vector<double>>();
        rule.lattice_cont = j["lattice_cont"].get<std::vector<std::vector<double>>>();
    }
    return rule;
}

std::string surface_to_json(const ValueSurface& surface) {
    json j;
    j["schema_version"] = 1;
    j["kind"] = "value_surface";
    j["mode"] = surface.mode == StoppingRule::Mode::Regression ? "regression" : "lattice";
    j["grid"] = surface.grid.nodes;
    j["root_value"] = surface.root_value;
    j["root_se"] = surface.root_se;
    if (surface.mode == StoppingRule::Mode::Lattice) j["lattice_x"] = surface.lattice_x;
    j["values"] = surface.values;
    return j.dump(2);
}

} // namespace mfstop::stopping
