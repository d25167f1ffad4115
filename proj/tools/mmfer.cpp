// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include <iostream>

#include "mmfer/cli.hpp"

int main(int argc, char** argv) {
  return mmfer::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
