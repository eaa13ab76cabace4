#ifndef MFSTOP_ERRORS_HPP
#define MFSTOP_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mfstop {

/// Malformed input: dimension mismatch, bad grid, unknown name, bad config value.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A coefficient map returned a non-finite value.
class CoefficientError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A simulated state left the declared divergence bound. Carries the offending
/// step and particle so the failure is reproducible.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::size_t step, std::size_t particle, const std::string& what)
        : std::runtime_error(what), step(step), particle(particle) {}
    std::size_t step;
    std::size_t particle;
};

/// A declared capacity was exceeded (assignment size cap, lattice escape mass).
class CapacityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace mfstop

#endif
