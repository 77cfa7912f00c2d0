// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "tfup/zeroshot.hpp"

#include <cmath>

namespace tfup {

LogitScale::LogitScale(double scale) : scale_(scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw ConfigError("logit scale must be a positive finite number, got " +
                      std::to_string(scale));
  }
}

Matrix similarity_logits(const Matrix& feats, const Matrix& text, LogitScale scale) {
  Matrix out = matmul_nt(feats, text);
  for (double& v : out.data()) v *= scale.value();
  return out;
}

Matrix similarity_logits(const EmbeddingMatrix& feats, const EmbeddingMatrix& text,
                         LogitScale scale) {
  require_same_dim(feats, text, "similarity_logits");
  return similarity_logits(feats.values(), text.values(), scale);
}

Matrix softmax_rows(const Matrix& raw) {
  Matrix out(raw.rows(), raw.cols());
  for (std::size_t i = 0; i < raw.rows(); ++i) {
    const auto in = raw.row(i);
    auto o = out.row(i);
    double mx = -INFINITY;
    for (double v : in) {
      if (!std::isfinite(v)) {
        throw NumericalError("softmax input row " + std::to_string(i) + " is not finite");
      }
      mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

ArgmaxResult predict(const Matrix& scores) {
  ArgmaxResult out;
  out.labels.resize(scores.rows());
  out.confidence.resize(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto r = scores.row(i);
    std::size_t best = 0;
    for (std::size_t c = 1; c < r.size(); ++c) {
      if (r[c] > r[best]) best = c;
    }
    out.labels[i] = static_cast<int>(best);
    out.confidence[i] = r.empty() ? 0.0 : r[best];
  }
  return out;
}

PredictionBatch make_prediction(Matrix raw) {
  PredictionBatch batch;
  batch.probs = softmax_rows(raw);
  batch.raw = std::move(raw);
  auto am = predict(batch.probs);
  batch.labels = std::move(am.labels);
  batch.confidence = std::move(am.confidence);
  return batch;
}

PredictionBatch zeroshot_classify(const EmbeddingMatrix& feats, const EmbeddingMatrix& text,
                                  LogitScale scale) {
  return make_prediction(similarity_logits(feats, text, scale));
}

}  // namespace tfup
