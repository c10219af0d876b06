#pragma once

#include "doctest.h"
#include "fvla/error.hpp"

namespace fvla::testing {

/// Runs fn and returns the code of the fvla::Error it throws.
inline ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an fvla::Error");
  return ErrorCode::InvalidArgument;
}

}  // namespace fvla::testing
