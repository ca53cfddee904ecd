// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>

namespace recon {

// Bad user configuration; the CLI maps it to exit code 2.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Singular systems, non-finite losses; the CLI maps it to exit code 3.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace recon
