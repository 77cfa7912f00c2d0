// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "tfup/msm_inference.hpp"

#include <cmath>

namespace tfup {

namespace {

void require_stochastic(std::span<const double> v, const char* which) {
  double sum = 0.0;
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericalError(std::string(which) + " has non-finite entries");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-4) {
    throw NumericalError(std::string(which) + " is not a probability vector (sum " +
                         std::to_string(sum) + ")");
  }
}

}  // namespace

Matrix feature_similarity(const Matrix& test_feats, const Matrix& proto_feats) {
  return matmul_nt(test_feats, proto_feats);
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw ShapeError("kl_divergence: length mismatch " + std::to_string(p.size()) + " vs " +
                     std::to_string(q.size()));
  }
  require_stochastic(p, "kl_divergence P");
  require_stochastic(q, "kl_divergence Q");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::max(p[i], kProbabilityFloor);
    const double qi = std::max(q[i], kProbabilityFloor);
    kl += p[i] * std::log(pi / qi);
  }
  // flooring can push the sum a hair below zero
  return std::max(kl, 0.0);
}

Matrix semantic_similarity(const Matrix& test_probs, const Matrix& proto_probs) {
  if (proto_probs.rows() == 0) throw DataError("semantic_similarity: empty cache");
  if (test_probs.cols() != proto_probs.cols()) {
    throw ShapeError("semantic_similarity: class count mismatch " +
                     std::to_string(test_probs.cols()) + " vs " +
                     std::to_string(proto_probs.cols()));
  }
  const std::size_t P = proto_probs.rows();
  if (P == 1) {
    for (std::size_t i = 0; i < test_probs.rows(); ++i) require_stochastic(test_probs.row(i), "test probs");
    require_stochastic(proto_probs.row(0), "prototype probs");
    return Matrix(test_probs.rows(), 1, 1.0);
  }
  Matrix divergence(test_probs.rows(), P);
  for (std::size_t i = 0; i < test_probs.rows(); ++i) {
    for (std::size_t p = 0; p < P; ++p) {
      divergence(i, p) = kl_divergence(test_probs.row(i), proto_probs.row(p));
    }
  }
  Matrix w = softmax_rows(divergence);
  for (double& v : w.data()) v = 1.0 - v;
  return w;
}

Matrix multi_level(const Matrix& w_cont, const Matrix& w_sem) {
  require_same_shape(w_cont, w_sem, "multi_level");
  Matrix out = w_cont;
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] *= w_sem.data()[i];
  return out;
}

Matrix similarity_prediction(const Matrix& w_fsm, const Matrix& proto_labels) {
  return matmul(w_fsm, proto_labels);
}

Matrix fuse(const Matrix& logits_test, const Matrix& logits_sim, double gamma) {
  require_same_shape(logits_test, logits_sim, "fuse");
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  Matrix out = logits_test;
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] += gamma * logits_sim.data()[i];
  return out;
}

SimilarityWeights similarity_weights(const Matrix& test_feats, const Matrix& test_probs,
                                     const Matrix& proto_feats, const Matrix& proto_probs,
                                     MeasureMode measure) {
  if (proto_feats.rows() == 0) throw DataError("empty cache");
  SimilarityWeights w;
  w.w_cont = measure == MeasureMode::kSemantic
                 ? Matrix(test_feats.rows(), proto_feats.rows(), 1.0)
                 : feature_similarity(test_feats, proto_feats);
  w.w_sem = measure == MeasureMode::kFeature
                ? Matrix(test_feats.rows(), proto_feats.rows(), 1.0)
                : semantic_similarity(test_probs, proto_probs);
  w.w_fsm = multi_level(w.w_cont, w.w_sem);
  return w;
}

Matrix cache_logits(const Matrix& test_feats, const Matrix& test_probs,
                    const Matrix& proto_feats, const Matrix& proto_probs,
                    const Matrix& proto_labels, double gamma, MeasureMode measure) {
  const auto w = similarity_weights(test_feats, test_probs, proto_feats, proto_probs, measure);
  return fuse(test_probs, similarity_prediction(w.w_fsm, proto_labels), gamma);
}

void require_cache_scale(const CacheModel& cache, const RunConfig& cfg) {
  if (static_cast<float>(cfg.logit_scale) != cache.meta.logit_scale) {
    throw ConfigError("logit scale " + std::to_string(cfg.logit_scale) +
                      " differs from the cache's " + std::to_string(cache.meta.logit_scale));
  }
}

PredictionBatch tfup_classify(const EmbeddingMatrix& test, const CacheModel& cache,
                              const EmbeddingMatrix& text, const RunConfig& cfg) {
  require_same_dim(test, text, "tfup_classify");
  require_same_dim(test, cache.proto_features, "tfup_classify");
  if (cache.size() == 0) throw DataError("tfup_classify: cache is empty");
  if (cache.proto_labels.cols() != text.rows()) {
    throw ShapeError("cache has " + std::to_string(cache.proto_labels.cols()) +
                     " classes but text has " + std::to_string(text.rows()));
  }
  require_cache_scale(cache, cfg);
  const Matrix test_values = test.values();
  const Matrix test_probs =
      softmax_rows(similarity_logits(test_values, text.values(), LogitScale(cfg.logit_scale)));
  return make_prediction(cache_logits(test_values, test_probs, cache.proto_features.values(),
                                      cache.proto_probs, cache.proto_labels, cfg.gamma,
                                      cfg.measure));
}

}  // namespace tfup
