#pragma once

#include <stdexcept>
#include <string>

namespace transfergrid {

// Exit-code mapping used by the CLI: usage 1, data 2, divergence 3.

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingDivergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Representer parameters changed while they were supposed to be frozen.
struct FreezeViolation : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace transfergrid
