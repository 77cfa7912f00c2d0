// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "tfup/cache_builder.hpp"
#include "tfup/config.hpp"
#include "tfup/matrix.hpp"
#include "tfup/zeroshot.hpp"

namespace tfup {

// Two-layer bottleneck MLP applied row-wise: relu(x W1 + b1) W2 + b2.
struct Mlp {
  Matrix w1;               // d x h
  std::vector<double> b1;  // h
  Matrix w2;               // h x d
  std::vector<double> b2;  // d

  static Mlp zeros(std::size_t d, std::size_t h);
  std::size_t dim() const noexcept { return w1.rows(); }
  std::size_t hidden() const noexcept { return w1.cols(); }

  std::array<std::span<double>, 4> tensors();
  std::array<std::span<const double>, 4> tensors() const;

  bool operator==(const Mlp&) const = default;
};

struct AdapterParams {
  Mlp image;
  Mlp text;
  double alpha = 0.0;
  double beta = 0.0;

  bool operator==(const AdapterParams&) const = default;
};

// Fresh adapters: W1 ~ U(-1/sqrt(d), 1/sqrt(d)), everything else zero, so
// the adapted features start equal to the inputs.
AdapterParams init_adapter(std::size_t d, const RunConfig& cfg);

Matrix mlp_forward(const Mlp& mlp, const Matrix& x);

// ratio * MLP(x) + (1 - ratio) * x, rows re-normalized. ratio == 0 returns x.
Matrix adapter_forward(const Matrix& feats, const Mlp& mlp, double ratio);
EmbeddingMatrix adapter_forward(const EmbeddingMatrix& feats, const Mlp& mlp, double ratio);

struct MaskedLoss {
  double loss = 0.0;
  std::vector<std::uint8_t> mask;  // 1 where max(prob row) >= theta
};

// Mean of -log p[row, pseudo[row]] over rows passing the threshold; 0 if none.
MaskedLoss ce_masked_loss(const Matrix& probs, std::span<const int> pseudo, double theta);

// log C minus the entropy of the batch-mean distribution; in [0, log C].
double marginal_entropy_loss(const Matrix& probs);

struct LossTerms {
  double ce = 0.0;
  double md = 0.0;
  double total = 0.0;
  std::vector<std::uint8_t> mask;
};

struct AdapterGrads {
  Mlp image;
  Mlp text;
};

struct LossAndGrad {
  LossTerms loss;
  AdapterGrads grads;
};

// Objective L_ce + lambda_md * L_md on one batch of image features against
// all class text features, using cfg's logit scale, theta and lambda_md.
// alpha and beta are taken from `params`.
LossTerms adapter_loss(const Matrix& image_batch, const Matrix& text, std::span<const int> pseudo,
                       const AdapterParams& params, const RunConfig& cfg);

// Same objective plus exact gradients for every MLP weight and bias.
LossAndGrad adapter_backward(const Matrix& image_batch, const Matrix& text,
                             std::span<const int> pseudo, const AdapterParams& params,
                             const RunConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double ce_loss = 0.0;
  double md_loss = 0.0;
  double mask_fraction = 0.0;
  double pseudo_accuracy = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainReport {
  double initial_pseudo_accuracy = 0.0;
  std::vector<EpochRecord> epochs;

  bool operator==(const TrainReport&) const = default;
};

struct TrainResult {
  AdapterParams params;
  TrainReport report;
};

// Pseudo-labels come from tfup_classify on the frozen features and stay
// fixed; the confidence mask is re-evaluated on the current adapters.
TrainResult train(const EmbeddingMatrix& train_feats, const EmbeddingMatrix& text,
                  const CacheModel& cache, const RunConfig& cfg);

// Same loop with caller-supplied pseudo-labels.
TrainResult train_with_labels(const EmbeddingMatrix& train_feats, const EmbeddingMatrix& text,
                              std::span<const int> pseudo, const RunConfig& cfg);

PredictionBatch tfupt_classify(const EmbeddingMatrix& test, const AdapterParams& params,
                               const EmbeddingMatrix& text, const CacheModel& cache,
                               const RunConfig& cfg, AdapterMode mode);

// TFA1 checkpoint: "TFA1", u32 d, u32 h, f32 alpha, f32 beta, u64 seed,
// u32 epoch, then image W1, b1, W2, b2 and text W1, b1, W2, b2 as f32.
struct AdapterCheckpoint {
  AdapterParams params;
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
};

std::vector<unsigned char> encode_adapter(const AdapterCheckpoint& ckpt);
AdapterCheckpoint decode_adapter(std::span<const unsigned char> bytes);
void save_adapter(const AdapterCheckpoint& ckpt, const std::filesystem::path& path);
AdapterCheckpoint load_adapter(const std::filesystem::path& path);

// One JSON object per line: a header with the config echo, then one record per epoch.
std::string train_report_lines(const TrainReport& report, const RunConfig& cfg);

}  // namespace tfup
