// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "tfup/embedding_store.hpp"
#include "tfup/matrix.hpp"

namespace tfup {

// Positive multiplier applied to cosine similarities before the softmax.
class LogitScale {
 public:
  explicit LogitScale(double scale);
  double value() const noexcept { return scale_; }

 private:
  double scale_;
};

struct PredictionBatch {
  Matrix raw;    // B x C logits
  Matrix probs;  // B x C, row-stochastic
  std::vector<int> labels;
  std::vector<double> confidence;
};

struct ArgmaxResult {
  std::vector<int> labels;
  std::vector<double> confidence;
};

// scale * feats * text^T. Rows are assumed unit-norm, so entries are scaled cosines.
Matrix similarity_logits(const Matrix& feats, const Matrix& text, LogitScale scale);
Matrix similarity_logits(const EmbeddingMatrix& feats, const EmbeddingMatrix& text,
                         LogitScale scale);

// Row softmax with max subtraction. Throws NumericalError on non-finite input.
Matrix softmax_rows(const Matrix& raw);

// Per-row argmax and maximum; ties go to the lowest index.
ArgmaxResult predict(const Matrix& scores);

// Packs raw logits with their softmax and argmax.
PredictionBatch make_prediction(Matrix raw);

PredictionBatch zeroshot_classify(const EmbeddingMatrix& feats, const EmbeddingMatrix& text,
                                  LogitScale scale);

}  // namespace tfup
