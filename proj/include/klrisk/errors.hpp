#pragma once

#include <stdexcept>
#include <string>

namespace klrisk {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "Error"; }
};

struct DomainError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "DomainError"; }
};

struct UnsupportedFamily : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "UnsupportedFamily"; }
};

struct AssumptionError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "AssumptionError"; }
};

struct NonConvergence : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "NonConvergence"; }
};

struct ConfigError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "ConfigError"; }
};

struct IoError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "IoError"; }
};

}  // namespace klrisk
