#pragma once

#include <stdexcept>
#include <string>

namespace emea {

// Error categories. The CLI maps each category to an exit code and prints
// category() as the machine-parsable prefix of its one-line error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
};

#define EMEA_DEFINE_ERROR(Name, tag)                             \
  class Name : public Error {                                    \
   public:                                                       \
    using Error::Error;                                          \
    const char* category() const noexcept override { return tag; } \
  };

EMEA_DEFINE_ERROR(DimensionError, "dimension")
EMEA_DEFINE_ERROR(ContractError, "contract")
EMEA_DEFINE_ERROR(ConfigError, "config")
EMEA_DEFINE_ERROR(UsageError, "usage")
EMEA_DEFINE_ERROR(DataError, "data")
EMEA_DEFINE_ERROR(ParseError, "parse")
EMEA_DEFINE_ERROR(LoadError, "load")
EMEA_DEFINE_ERROR(DependencyError, "dependency")

#undef EMEA_DEFINE_ERROR

}  // namespace emea
