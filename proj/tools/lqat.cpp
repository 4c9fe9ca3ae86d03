// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "lqat/cli.hpp"

int main(int argc, char** argv) { return lqat::cli::run(argc, argv, std::cout, std::cerr); }
