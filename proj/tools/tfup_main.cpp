// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

int main(int argc, char** argv) { return tfup::cli::run(argc, argv); }
