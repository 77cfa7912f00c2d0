// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "json.hpp"

namespace tfup {

// Which stages of the double filter are applied when building the cache.
enum class FilterMode { kNone, kConfidence, kPrototype, kDouble };
// Which similarity weights feed the cache term.
enum class MeasureMode { kFeature, kSemantic, kMultiLevel };
// Inference path for trained adapters.
enum class AdapterMode { kAdapter, kAdapterCache };
enum class OptimizerKind { kSgd, kAdam };
enum class Schedule { kConstant, kCosine };

struct TrainConfig {
  double theta = 0.95;      // confidence threshold for the pseudo-label mask
  double lambda_md = 1.0;   // weight on the marginal entropy loss
  double alpha = 0.2;       // image residual ratio
  double beta = 0.5;        // text residual ratio
  std::size_t reduction = 4;  // hidden width = max(1, d / reduction)
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double learning_rate = 0.01;
  double momentum = 0.9;
  Schedule schedule = Schedule::kConstant;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
};

struct RunConfig {
  double logit_scale = 100.0;
  std::size_t K = 16;
  std::size_t N = 8;
  double gamma = 1.0;
  bool eq4_global = false;
  FilterMode filter = FilterMode::kDouble;
  MeasureMode measure = MeasureMode::kMultiLevel;
  AdapterMode tfupt_mode = AdapterMode::kAdapter;
  TrainConfig train;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the first out-of-range field.
  void validate() const;
};

std::string to_string(FilterMode m);
std::string to_string(MeasureMode m);
std::string to_string(AdapterMode m);
std::string to_string(OptimizerKind m);
std::string to_string(Schedule m);

FilterMode parse_filter_mode(const std::string& s);
MeasureMode parse_measure_mode(const std::string& s);
AdapterMode parse_adapter_mode(const std::string& s);
OptimizerKind parse_optimizer(const std::string& s);
Schedule parse_schedule(const std::string& s);

// Kebab-case keys matching the CLI flag names, in a fixed order.
nlohmann::ordered_json to_json(const RunConfig& cfg);
// Overlays every key present in `j`; unknown keys are a ConfigError.
void apply_json(RunConfig& cfg, const nlohmann::json& j);

}  // namespace tfup
