#pragma once

#include <gtest/gtest.h>

#include "graded/verify.hpp"

// Runs a property check at the default seed and reports its measured value on failure.
#define EXPECT_CHECK_PASSES(check)                                                         \
  do {                                                                                     \
    const graded::CheckResult r_ = (check)(graded::VerifyOptions{});                       \
    EXPECT_TRUE(r_.pass) << r_.suite << '/' << r_.name << ": " << r_.detail << " (measured " \
                         << r_.measured << ", threshold " << r_.threshold << ')';         \
  } while (0)
