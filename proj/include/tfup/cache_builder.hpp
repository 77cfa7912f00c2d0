// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tfup/config.hpp"
#include "tfup/embedding_store.hpp"
#include "tfup/matrix.hpp"

namespace tfup {

struct PseudoLabelSet {
  std::size_t num_classes = 0;
  std::vector<int> labels;          // per training row
  std::vector<double> confidence;   // per training row, max zero-shot probability

  // Row indices per class, ascending.
  std::vector<std::vector<std::size_t>> by_class() const;
};

struct CacheMeta {
  std::uint32_t K = 0;
  std::uint32_t N = 0;
  std::uint32_t num_classes = 0;
  std::uint32_t dim = 0;
  float logit_scale = 0.0f;
  std::vector<std::uint32_t> per_class_counts;

  bool operator==(const CacheMeta&) const = default;
};

// Feature cache: prototype keys with one-hot pseudo-label values.
//
// Numeric blocks are held at float32 precision so an in-memory cache equals
// its serialized form exactly.
struct CacheModel {
  EmbeddingMatrix proto_features;  // P x d, ids are the source sample ids
  Matrix proto_labels;             // P x C one-hot
  Matrix proto_probs;              // P x C softmax of scaled prototype-text cosines
  CacheMeta meta;

  std::size_t size() const noexcept { return proto_features.rows(); }
  bool operator==(const CacheModel&) const = default;
};

PseudoLabelSet pseudo_label(const Matrix& train_probs);

// Per class: the min(K, available) most confident rows, confidence
// descending, lower row index first on ties.
std::vector<std::vector<std::size_t>> confidence_filter(const PseudoLabelSet& pl, std::size_t K);

// score[i] = sum_j cos(f_i, f_j) over all rows, self term included.
std::vector<double> prototype_score(const Matrix& class_feats);

// Positions of the min(N, size) largest scores, descending, lower index first on ties.
std::vector<std::size_t> prototype_filter(std::span<const double> scores, std::size_t N);

// Pseudo-label, filter and package the cache per cfg (K, N, logit scale,
// filter mode, eq4 scope). Classes with no pseudo-labeled rows contribute
// nothing; see cache_warnings().
CacheModel build_cache(const EmbeddingMatrix& train, const EmbeddingMatrix& text,
                       const RunConfig& cfg);

// Human-readable notes for classes that ended up with no prototypes.
std::vector<std::string> cache_warnings(const CacheModel& cm);

// Cache file: "TFC1", u32 K, N, C, d, f32 scale, C x u32 per-class counts,
// then P x d features, P x C labels, P x C probs as f32, then the id block.
void save_cache(const CacheModel& cm, const std::filesystem::path& path);
CacheModel load_cache(const std::filesystem::path& path);
std::vector<unsigned char> encode_cache(const CacheModel& cm);
CacheModel decode_cache(std::span<const unsigned char> bytes);

}  // namespace tfup
