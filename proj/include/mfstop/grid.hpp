#ifndef MFSTOP_GRID_HPP
#define MFSTOP_GRID_HPP

#include <cstddef>
#include <vector>

#include "mfstop/errors.hpp"

namespace mfstop {

/// Strictly increasing time nodes s_0 < ... < s_M covering [t0, T].
struct TimeGrid {
    std::vector<double> nodes;

    TimeGrid() = default;
    explicit TimeGrid(std::vector<double> n) : nodes(std::move(n)) { validate(); }

    static TimeGrid uniform(double t0, double T, std::size_t steps) {
        if (!(T > t0)) throw InvalidArgument("TimeGrid: horizon must satisfy T > t0");
        if (steps == 0) throw InvalidArgument("TimeGrid: need at least one step");
        std::vector<double> n(steps + 1);
        for (std::size_t k = 0; k <= steps; ++k)
            n[k] = t0 + (T - t0) * static_cast<double>(k) / static_cast<double>(steps);
        n.back() = T;
        return TimeGrid(std::move(n));
    }

    std::size_t steps() const { return nodes.empty() ? 0 : nodes.size() - 1; }
    double t0() const { return nodes.front(); }
    double horizon() const { return nodes.back(); }
    double dt(std::size_t k) const { return nodes[k + 1] - nodes[k]; }

    /// Grid restricted to nodes [from, M]; node indices shift by -from.
    TimeGrid suffix(std::size_t from) const {
        return TimeGrid(std::vector<double>(nodes.begin() + static_cast<std::ptrdiff_t>(from),
                                            nodes.end()));
    }

private:
    void validate() const {
        if (nodes.size() < 2) throw InvalidArgument("TimeGrid: need at least two nodes");
        for (std::size_t k = 0; k + 1 < nodes.size(); ++k)
            if (!(nodes[k] < nodes[k + 1]))
                throw InvalidArgument("TimeGrid: nodes must be strictly increasing");
    }
};

} // namespace mfstop

#endif
