#include "mfstop/measure.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mfstop::measure {

namespace {

void require_comparable(const ParticleEnsemble& mu, const ParticleEnsemble& nu) {
    if (mu.dim != nu.dim)
        throw InvalidArgument("wasserstein2: dimension mismatch");
    if (mu.size() != nu.size())
        throw InvalidArgument("wasserstein2: particle counts differ (equal-N contract)");
    if (mu.empty())
        throw InvalidArgument("wasserstein2: empty ensemble");
}

/// Min-cost perfect matching on an n x n cost matrix (shortest augmenting
/// path with potentials). Returns the optimal total cost.
double assignment_cost(const std::vector<double>& cost, std::size_t n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1, 0.0);
    std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match[j0];
            std::size_t j1 = 0;
            double delta = inf;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    double total = 0.0;
    for (std::size_t j = 1; j <= n; ++j) total += cost[(match[j] - 1) * n + (j - 1)];
    return total;
}

} // namespace

double norm2(const ParticleEnsemble& mu) {
    if (mu.empty()) throw InvalidArgument("norm2: empty ensemble");
    double acc = 0.0;
    for (double v : mu.data) acc += v * v;
    return std::sqrt(acc / static_cast<double>(mu.size()));
}

std::vector<double> mean(const ParticleEnsemble& mu) {
    if (mu.empty()) throw InvalidArgument("mean: empty ensemble");
    std::vector<double> m(static_cast<std::size_t>(mu.dim), 0.0);
    const std::size_t n = mu.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double* y = mu.row(i);
        for (int c = 0; c < mu.dim; ++c) m[static_cast<std::size_t>(c)] += y[c];
    }
    for (double& v : m) v /= static_cast<double>(n);
    return m;
}

double wasserstein2_1d(const ParticleEnsemble& mu, const ParticleEnsemble& nu) {
    require_comparable(mu, nu);
    if (mu.dim != 1) throw InvalidArgument("wasserstein2_1d: requires d = 1");
    std::vector<double> a = mu.data;
    std::vector<double> b = nu.data;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

double wasserstein2_exact(const ParticleEnsemble& mu, const ParticleEnsemble& nu,
                          std::size_t cap) {
    require_comparable(mu, nu);
    const std::size_t n = mu.size();
    if (n > cap)
        throw CapacityError("wasserstein2_exact: ensemble size exceeds assignment cap");
    std::vector<double> cost(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* a = mu.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const double* b = nu.row(j);
            double c = 0.0;
            for (int k = 0; k < mu.dim; ++k) {
                const double diff = a[k] - b[k];
                c += diff * diff;
            }
            cost[i * n + j] = c;
        }
    }
    const double total = assignment_cost(cost, n);
    // Tiny negatives can appear through potential arithmetic on equal points.
    return std::sqrt(std::max(0.0, total / static_cast<double>(n)));
}

double wasserstein2(const ParticleEnsemble& mu, const ParticleEnsemble& nu, std::size_t cap) {
    require_comparable(mu, nu);
    if (mu.dim == 1) return wasserstein2_1d(mu, nu);
    return wasserstein2_exact(mu, nu, cap);
}

} // namespace mfstop::measure
