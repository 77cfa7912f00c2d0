// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "tfup/config.hpp"

#include <array>
#include <cmath>

#include "tfup/errors.hpp"

namespace tfup {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

template <typename Enum, std::size_t Count>
Enum parse_enum(const std::string& s, const char* what, const std::array<Enum, Count>& all) {
  for (auto e : all) {
    if (to_string(e) == s) return e;
  }
  throw ConfigError(std::string("unknown ") + what + ": '" + s + "'");
}

}  // namespace

void RunConfig::validate() const {
  check(std::isfinite(logit_scale) && logit_scale > 0, "logit-scale must be > 0");
  check(N >= 1, "n must be >= 1");
  check(K >= N, "k must be >= n (got k=" + std::to_string(K) + ", n=" + std::to_string(N) + ")");
  check(std::isfinite(gamma) && gamma >= 0, "gamma must be >= 0");
  check(train.theta > 0 && train.theta <= 1, "theta must lie in (0, 1]");
  check(train.alpha >= 0 && train.alpha <= 1, "alpha must lie in [0, 1]");
  check(train.beta >= 0 && train.beta <= 1, "beta must lie in [0, 1]");
  check(std::isfinite(train.lambda_md) && train.lambda_md >= 0, "lambda-md must be >= 0");
  check(train.reduction >= 1, "hidden-reduction must be >= 1");
  check(std::isfinite(train.learning_rate) && train.learning_rate >= 0,
        "learning-rate must be >= 0");
  check(train.momentum >= 0 && train.momentum < 1, "momentum must lie in [0, 1)");
  check(train.batch_size >= 1, "batch-size must be >= 1");
  check(train.lambda_md == 0 || train.batch_size >= 2,
        "batch-size must be >= 2 when lambda-md > 0");
}

std::string to_string(FilterMode m) {
  switch (m) {
    case FilterMode::kNone: return "none";
    case FilterMode::kConfidence: return "confidence";
    case FilterMode::kPrototype: return "prototype";
    case FilterMode::kDouble: return "double";
  }
  return "?";
}

std::string to_string(MeasureMode m) {
  switch (m) {
    case MeasureMode::kFeature: return "feature";
    case MeasureMode::kSemantic: return "semantic";
    case MeasureMode::kMultiLevel: return "multi-level";
  }
  return "?";
}

std::string to_string(AdapterMode m) {
  return m == AdapterMode::kAdapter ? "adapter" : "adapter+cache";
}

std::string to_string(OptimizerKind m) { return m == OptimizerKind::kSgd ? "sgd" : "adam"; }

std::string to_string(Schedule m) { return m == Schedule::kConstant ? "constant" : "cosine"; }

FilterMode parse_filter_mode(const std::string& s) {
  return parse_enum(s, "filter mode",
                    std::array{FilterMode::kNone, FilterMode::kConfidence,
                               FilterMode::kPrototype, FilterMode::kDouble});
}

MeasureMode parse_measure_mode(const std::string& s) {
  return parse_enum(s, "measure mode",
                    std::array{MeasureMode::kFeature, MeasureMode::kSemantic,
                               MeasureMode::kMultiLevel});
}

AdapterMode parse_adapter_mode(const std::string& s) {
  return parse_enum(s, "tfup-t mode", std::array{AdapterMode::kAdapter, AdapterMode::kAdapterCache});
}

OptimizerKind parse_optimizer(const std::string& s) {
  return parse_enum(s, "optimizer", std::array{OptimizerKind::kSgd, OptimizerKind::kAdam});
}

Schedule parse_schedule(const std::string& s) {
  return parse_enum(s, "schedule", std::array{Schedule::kConstant, Schedule::kCosine});
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["logit-scale"] = cfg.logit_scale;
  j["k"] = cfg.K;
  j["n"] = cfg.N;
  j["gamma"] = cfg.gamma;
  j["eq4-global"] = cfg.eq4_global;
  j["filter"] = to_string(cfg.filter);
  j["measure"] = to_string(cfg.measure);
  j["tfupt-mode"] = to_string(cfg.tfupt_mode);
  j["theta"] = cfg.train.theta;
  j["lambda-md"] = cfg.train.lambda_md;
  j["alpha"] = cfg.train.alpha;
  j["beta"] = cfg.train.beta;
  j["hidden-reduction"] = cfg.train.reduction;
  j["optimizer"] = to_string(cfg.train.optimizer);
  j["learning-rate"] = cfg.train.learning_rate;
  j["momentum"] = cfg.train.momentum;
  j["schedule"] = to_string(cfg.train.schedule);
  j["epochs"] = cfg.train.epochs;
  j["batch-size"] = cfg.train.batch_size;
  j["seed"] = cfg.seed;
  return j;
}

void apply_json(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config document must be a key-value object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "logit-scale") cfg.logit_scale = v.get<double>();
      else if (key == "k") cfg.K = v.get<std::size_t>();
      else if (key == "n") cfg.N = v.get<std::size_t>();
      else if (key == "gamma") cfg.gamma = v.get<double>();
      else if (key == "eq4-global") cfg.eq4_global = v.get<bool>();
      else if (key == "filter") cfg.filter = parse_filter_mode(v.get<std::string>());
      else if (key == "measure") cfg.measure = parse_measure_mode(v.get<std::string>());
      else if (key == "tfupt-mode") cfg.tfupt_mode = parse_adapter_mode(v.get<std::string>());
      else if (key == "theta") cfg.train.theta = v.get<double>();
      else if (key == "lambda-md") cfg.train.lambda_md = v.get<double>();
      else if (key == "alpha") cfg.train.alpha = v.get<double>();
      else if (key == "beta") cfg.train.beta = v.get<double>();
      else if (key == "hidden-reduction") cfg.train.reduction = v.get<std::size_t>();
      else if (key == "optimizer") cfg.train.optimizer = parse_optimizer(v.get<std::string>());
      else if (key == "learning-rate") cfg.train.learning_rate = v.get<double>();
      else if (key == "momentum") cfg.train.momentum = v.get<double>();
      else if (key == "schedule") cfg.train.schedule = parse_schedule(v.get<std::string>());
      else if (key == "epochs") cfg.train.epochs = v.get<std::size_t>();
      else if (key == "batch-size") cfg.train.batch_size = v.get<std::size_t>();
      else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown config key: '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

}  // namespace tfup
