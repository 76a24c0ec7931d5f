#pragma once

#include <stdexcept>
#include <string>

namespace muxsim {

// Base of every error the library raises. Callers that don't care about the
// exact failure can catch this one.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MUXSIM_DEFINE_ERROR(Name)          \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

MUXSIM_DEFINE_ERROR(PastEvent);
MUXSIM_DEFINE_ERROR(SchemaError);
MUXSIM_DEFINE_ERROR(EmptyTrace);
MUXSIM_DEFINE_ERROR(EmptyBatch);
MUXSIM_DEFINE_ERROR(EmptySamples);
MUXSIM_DEFINE_ERROR(Degenerate);
MUXSIM_DEFINE_ERROR(NoConfig);
MUXSIM_DEFINE_ERROR(PoolExhausted);
MUXSIM_DEFINE_ERROR(Infeasible);
MUXSIM_DEFINE_ERROR(ConfigError);

#undef MUXSIM_DEFINE_ERROR

}  // namespace muxsim
