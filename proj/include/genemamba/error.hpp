#pragma once

#include <stdexcept>
#include <string>

namespace genemamba {

// Exception hierarchy. The CLI maps these onto its exit codes:
// ConfigError/InputError/DataError/StateError -> 2, NumericError -> 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace genemamba
