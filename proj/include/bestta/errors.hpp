#pragma once

#include <stdexcept>
#include <string>

namespace bestta {

// Base class for every error the library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionMismatch : Error {
    using Error::Error;
};

struct InvalidShape : Error {
    using Error::Error;
};

struct NonPositiveStyleSigma : Error {
    using Error::Error;
};

// Blend denominator of the target-std estimator collapsed; the caller is
// expected to skip the optimizer step for this image, never to clamp.
struct DegenerateDenominator : Error {
    using Error::Error;
};

struct StaleCache : Error {
    using Error::Error;
};

struct EmptySource : Error {
    using Error::Error;
};

struct NonFiniteGradient : Error {
    using Error::Error;
};

struct ConvergenceFailure : Error {
    using Error::Error;
};

struct InvalidSeverity : Error {
    using Error::Error;
};

struct DegenerateInput : Error {
    using Error::Error;
};

struct EmptyDataset : Error {
    using Error::Error;
};

struct IoFailure : Error {
    using Error::Error;
};

} // namespace bestta
