// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace tfup::cli {

// Exit codes: 0 success, 2 usage/config error, 3 data/format error,
// 4 numerical failure.
int run(int argc, char** argv);

}  // namespace tfup::cli
