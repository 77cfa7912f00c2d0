// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>

#include "tfup/cache_builder.hpp"
#include "tfup/config.hpp"
#include "tfup/matrix.hpp"
#include "tfup/zeroshot.hpp"

namespace tfup {

inline constexpr double kProbabilityFloor = 1e-12;

struct SimilarityWeights {
  Matrix w_cont;  // B x P feature-level (raw cosine)
  Matrix w_sem;   // B x P semantic-level
  Matrix w_fsm;   // B x P combined
};

// Raw cosine between test rows and prototype rows.
Matrix feature_similarity(const Matrix& test_feats, const Matrix& proto_feats);

// sum_i p_i log(p_i / q_i) with both sides floored at kProbabilityFloor.
// Throws NumericalError when either input sums to 1 +- more than 1e-4.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Row i: 1 - softmax over prototypes of KL(test_probs[i] || proto_probs[p]).
// A single-prototype cache gets weight 1 instead of the degenerate 0.
// Throws DataError for an empty cache.
Matrix semantic_similarity(const Matrix& test_probs, const Matrix& proto_probs);

// Elementwise product.
Matrix multi_level(const Matrix& w_cont, const Matrix& w_sem);

// w_fsm * proto_labels.
Matrix similarity_prediction(const Matrix& w_fsm, const Matrix& proto_labels);

// logits_test + gamma * logits_sim.
Matrix fuse(const Matrix& logits_test, const Matrix& logits_sim, double gamma);

// Feature mode pins w_sem to 1, semantic mode pins w_cont to 1.
SimilarityWeights similarity_weights(const Matrix& test_feats, const Matrix& test_probs,
                                     const Matrix& proto_feats, const Matrix& proto_probs,
                                     MeasureMode measure);

// Fused logits from already-computed test probabilities.
Matrix cache_logits(const Matrix& test_feats, const Matrix& test_probs,
                    const Matrix& proto_feats, const Matrix& proto_probs,
                    const Matrix& proto_labels, double gamma, MeasureMode measure);

// Training-free classification against a prototype cache. `raw` of the
// result holds the fused logits; probs are their softmax.
PredictionBatch tfup_classify(const EmbeddingMatrix& test, const CacheModel& cache,
                              const EmbeddingMatrix& text, const RunConfig& cfg);

// Throws ConfigError unless `cfg.logit_scale` matches the scale the cache
// probabilities were computed with.
void require_cache_scale(const CacheModel& cache, const RunConfig& cfg);

}  // namespace tfup
