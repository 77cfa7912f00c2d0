// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tfup/config.hpp"
#include "tfup/embedding_store.hpp"
#include "tfup/zeroshot.hpp"

namespace tfup {

struct EvalReport {
  std::string mode;
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;           // 0 for classes without samples
  std::vector<std::vector<std::uint64_t>> confusion;  // [truth][predicted]
  std::uint64_t samples = 0;
  nlohmann::ordered_json config;

  bool operator==(const EvalReport&) const = default;
};

EvalReport evaluate(std::span<const int> predicted, std::span<const int> truth,
                    std::size_t num_classes, std::string mode = {});

// Resolves ground truth for `ids` through the manifest; throws DataError for
// any id without a label.
EvalReport evaluate(const PredictionBatch& predictions, const std::vector<std::string>& ids,
                    const DatasetManifest& manifest, std::string mode = {});

struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t dim = 64;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double sigma = 0.6;       // spread of image samples around their class center
  double text_noise = 3.0;  // offset of the class text feature from its center
  std::uint64_t seed = 7;

  void validate() const;
};

// Train, test and class-text embeddings with a labelled manifest.
struct Fixture {
  EmbeddingMatrix train;
  EmbeddingMatrix test;
  EmbeddingMatrix text;
  DatasetManifest manifest;
};

// Planted clusters: C random unit centers; samples are
// normalize(center + sigma * g / sqrt(d)), text rows
// normalize(center + text_noise * g / sqrt(d)) with g standard normal.
Fixture generate_synthetic(const SyntheticSpec& spec);

// Labels of `ids` from the manifest, in order.
std::vector<int> ground_truth_labels(const DatasetManifest& manifest,
                                     const std::vector<std::string>& ids);

// Mode stack, filter variants and measure variants; one report per cell,
// each echoing the config it ran with.
std::vector<EvalReport> ablation_suite(const Fixture& fixture, const RunConfig& cfg);

// Line-delimited JSON: a versioned header line, then one record per report.
std::string report_lines(const std::vector<EvalReport>& reports);
std::vector<EvalReport> parse_report_lines(const std::string& text);
void emit_report(const std::vector<EvalReport>& reports, const std::filesystem::path& path);
std::vector<EvalReport> read_report(const std::filesystem::path& path);

}  // namespace tfup
