#ifndef MFSTOP_MEASURE_HPP
#define MFSTOP_MEASURE_HPP

#include <cstddef>
#include <vector>

#include "mfstop/errors.hpp"

namespace mfstop::measure {

/**
 * Empirical measure with uniform weights: N particles in R^d, row-major.
 * All estimators in the project consume laws through this type only.
 */
struct ParticleEnsemble {
    int dim = 1;
    std::vector<double> data;

    ParticleEnsemble() = default;
    ParticleEnsemble(int d, std::vector<double> values) : dim(d), data(std::move(values)) {
        if (dim <= 0) throw InvalidArgument("ParticleEnsemble: dim must be positive");
        if (data.size() % static_cast<std::size_t>(dim) != 0)
            throw InvalidArgument("ParticleEnsemble: data size not a multiple of dim");
    }

    /// 1-d convenience.
    static ParticleEnsemble from_1d(std::vector<double> xs) {
        return ParticleEnsemble(1, std::move(xs));
    }

    std::size_t size() const { return data.size() / static_cast<std::size_t>(dim); }
    bool empty() const { return data.empty(); }
    double* row(std::size_t i) { return data.data() + i * static_cast<std::size_t>(dim); }
    const double* row(std::size_t i) const {
        return data.data() + i * static_cast<std::size_t>(dim);
    }
};

/// ||mu||_2 = W2(mu, delta_0) = sqrt(mean of |x|^2).
double norm2(const ParticleEnsemble& mu);

/// Componentwise mean.
std::vector<double> mean(const ParticleEnsemble& mu);

/// Exact W2 for d = 1 via the sorted (comonotone) coupling. O(N log N).
double wasserstein2_1d(const ParticleEnsemble& mu, const ParticleEnsemble& nu);

/// Exact W2 for any d via optimal assignment. O(N^3); refuses N > cap.
double wasserstein2_exact(const ParticleEnsemble& mu, const ParticleEnsemble& nu,
                          std::size_t cap = 256);

/// Dispatch: sorted route for d = 1, assignment otherwise.
double wasserstein2(const ParticleEnsemble& mu, const ParticleEnsemble& nu,
                    std::size_t cap = 256);

} // namespace mfstop::measure

#endif
