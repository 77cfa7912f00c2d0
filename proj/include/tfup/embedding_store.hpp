// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tfup/matrix.hpp"

namespace tfup {

// Row-major float32 feature rows keyed by unique sample ids.
//
// Storage is float32 to match the on-disk layout bit for bit; every consumer
// widens to double (see values()) before reducing.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t dim, std::vector<float> data, std::vector<std::string> ids);

  // Rounds `values` to float32. `ids.size()` must equal `values.rows()`.
  static EmbeddingMatrix from_matrix(const Matrix& values, std::vector<std::string> ids);

  std::size_t rows() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }

  std::span<const float> row(std::size_t r) const { return {data_.data() + r * dim_, dim_}; }
  const std::vector<float>& data() const noexcept { return data_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::string& id(std::size_t r) const { return ids_[r]; }

  // Index of `id`, if present.
  std::optional<std::size_t> find(const std::string& id) const;

  // Widened copy for numeric work.
  Matrix values() const;

  // Rows selected by index, in the given order.
  EmbeddingMatrix select(std::span<const std::size_t> rows) const;

  bool operator==(const EmbeddingMatrix&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<float> data_;
  std::vector<std::string> ids_;
};

// Binary embedding file: "TFB1", u32 rows, u32 dim, rows*dim f32 (LE,
// row-major), then one '\n'-terminated id per row.
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
EmbeddingMatrix decode_embeddings(std::span<const unsigned char> bytes);
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);
std::vector<unsigned char> encode_embeddings(const EmbeddingMatrix& m);

// Divides each row by its Euclidean norm (computed in double). Throws
// NumericalError naming the sample id for rows with norm <= 1e-12.
EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m);
void l2_normalize_rows(Matrix& m);

// load_embeddings followed by l2_normalize; the single ingestion point.
EmbeddingMatrix load_canonical(const std::filesystem::path& path);

void require_same_dim(const EmbeddingMatrix& a, const EmbeddingMatrix& b, const char* what);

enum class Split { kTrain, kTest };

const char* to_string(Split s);

struct ManifestEntry {
  std::string sample_id;
  Split split = Split::kTrain;
  std::optional<int> class_index;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;

  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::optional<int> ground_truth(const std::string& sample_id) const;
};

// Manifest: CSV with header `sample_id,split,class_index`; class_index empty
// for unlabeled rows. Class names: one per line, order defines indices.
DatasetManifest load_manifest(const std::filesystem::path& manifest_path,
                              const std::filesystem::path& class_names_path);
std::vector<std::string> load_class_names(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& man, const std::filesystem::path& manifest_path,
                   const std::filesystem::path& class_names_path);

struct ValidationIssue {
  enum class Kind { kUnresolvedId, kDuplicateId, kClassOutOfRange };
  Kind kind;
  std::string sample_id;
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const noexcept { return issues.empty(); }
};

// Checks manifest entries (optionally only those of `split`) against `m`.
ValidationReport validate_manifest(const DatasetManifest& man, const EmbeddingMatrix& m,
                                   std::optional<Split> split = std::nullopt);

}  // namespace tfup
