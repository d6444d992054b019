// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace medtune::cli {

inline constexpr std::string_view kVersion = "0.1.0";

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeFailure = 1;
inline constexpr int kInputError = 2;

// Runs one invocation; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// 19988480 -> "19,988,480".
std::string group_thousands(unsigned long long value);

}  // namespace medtune::cli
