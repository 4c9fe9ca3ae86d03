// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit status: 0 success, 1 usage or configuration
// error, 2 data, file, checkpoint or numeric error.
#pragma once

#include <iosfwd>

namespace lqat::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lqat::cli
