// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "tfup/embedding_store.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "tfup/binary_io.hpp"

namespace tfup {

namespace {

constexpr std::string_view kEmbeddingMagic = "TFB1";
constexpr double kMinNorm = 1e-12;

std::string trim_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::size_t dim, std::vector<float> data,
                                 std::vector<std::string> ids)
    : dim_(dim), data_(std::move(data)), ids_(std::move(ids)) {
  if (data_.size() != ids_.size() * dim_) {
    throw ShapeError("embedding data holds " + std::to_string(data_.size()) +
                     " scalars, expected " + std::to_string(ids_.size()) + " rows x " +
                     std::to_string(dim_));
  }
  std::unordered_set<std::string_view> seen;
  seen.reserve(ids_.size());
  for (const auto& id : ids_) {
    if (id.empty()) throw DataError("empty sample id");
    if (id.find('\n') != std::string::npos) throw DataError("sample id contains newline");
    if (!seen.insert(id).second) throw DataError("duplicate sample id: " + id);
  }
}

EmbeddingMatrix EmbeddingMatrix::from_matrix(const Matrix& values, std::vector<std::string> ids) {
  if (values.rows() != ids.size()) {
    throw ShapeError("row count " + std::to_string(values.rows()) + " != id count " +
                     std::to_string(ids.size()));
  }
  std::vector<float> data(values.data().size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(values.data()[i]);
  return EmbeddingMatrix(values.cols(), std::move(data), std::move(ids));
}

std::optional<std::size_t> EmbeddingMatrix::find(const std::string& id) const {
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i] == id) return i;
  }
  return std::nullopt;
}

Matrix EmbeddingMatrix::values() const {
  Matrix out(rows(), dim_);
  for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = data_[i];
  return out;
}

EmbeddingMatrix EmbeddingMatrix::select(std::span<const std::size_t> rows) const {
  std::vector<float> data;
  data.reserve(rows.size() * dim_);
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  for (auto r : rows) {
    const auto src = row(r);
    data.insert(data.end(), src.begin(), src.end());
    ids.push_back(ids_[r]);
  }
  return EmbeddingMatrix(dim_, std::move(data), std::move(ids));
}

EmbeddingMatrix decode_embeddings(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kEmbeddingMagic, "TFB1 embedding");
  const std::uint32_t rows = r.u32();
  const std::uint32_t dim = r.u32();
  const std::uint64_t count = std::uint64_t{rows} * dim;
  if (r.remaining() < count * 4) {
    throw FormatError("truncated payload: header declares " + std::to_string(rows) + "x" +
                          std::to_string(dim) + " floats",
                      r.offset() + r.remaining());
  }
  std::vector<float> data(count);
  for (auto& v : data) v = r.f32();
  const std::size_t id_offset = r.offset();
  auto ids = io::read_id_block(r, rows);
  try {
    return EmbeddingMatrix(dim, std::move(data), std::move(ids));
  } catch (const DataError& e) {
    throw FormatError(std::string("invalid id block: ") + e.what(), id_offset);
  }
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_embeddings(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

std::vector<unsigned char> encode_embeddings(const EmbeddingMatrix& m) {
  io::ByteWriter w;
  w.magic(kEmbeddingMagic);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.dim()));
  for (float v : m.data()) w.f32(v);
  io::write_id_block(w, m.ids());
  return w.take();
}

void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  io::write_file(path, encode_embeddings(m));
}

void l2_normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double ss = 0.0;
    for (double v : r) ss += v * v;
    const double norm = std::sqrt(ss);
    if (!(norm > kMinNorm)) {
      throw NumericalError("row " + std::to_string(i) + " has zero norm");
    }
    for (double& v : r) v /= norm;
  }
}

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  std::vector<float> data(m.data().size());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto src = m.row(i);
    double ss = 0.0;
    for (float v : src) ss += double{v} * double{v};
    const double norm = std::sqrt(ss);
    if (!std::isfinite(norm)) throw NumericalError("non-finite row for sample " + m.id(i));
    if (!(norm > kMinNorm)) throw NumericalError("zero-norm row for sample " + m.id(i));
    for (std::size_t k = 0; k < src.size(); ++k) {
      data[i * m.dim() + k] = static_cast<float>(double{src[k]} / norm);
    }
  }
  return EmbeddingMatrix(m.dim(), std::move(data), m.ids());
}

EmbeddingMatrix load_canonical(const std::filesystem::path& path) {
  return l2_normalize(load_embeddings(path));
}

void require_same_dim(const EmbeddingMatrix& a, const EmbeddingMatrix& b, const char* what) {
  if (a.dim() != b.dim()) {
    throw ShapeError(std::string(what) + ": dimension mismatch " + std::to_string(a.dim()) +
                     " vs " + std::to_string(b.dim()));
  }
}

const char* to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

std::optional<int> DatasetManifest::ground_truth(const std::string& sample_id) const {
  for (const auto& e : entries) {
    if (e.sample_id == sample_id) return e.class_index;
  }
  return std::nullopt;
}

std::vector<std::string> load_class_names(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    line = trim_cr(line);
    if (line.empty()) continue;
    names.push_back(line);
  }
  if (names.empty()) throw DataError(path.string() + ": no class names");
  return names;
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_path,
                              const std::filesystem::path& class_names_path) {
  DatasetManifest man;
  man.class_names = load_class_names(class_names_path);

  std::ifstream in(manifest_path);
  if (!in) throw ConfigError("cannot open file: " + manifest_path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty()) continue;
    if (lineno == 1 && line == "sample_id,split,class_index") continue;

    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 3) {
      throw DataError(manifest_path.string() + ":" + std::to_string(lineno) +
                      ": expected 3 fields, got " + std::to_string(fields.size()));
    }

    ManifestEntry e;
    e.sample_id = fields[0];
    if (fields[1] == "train") {
      e.split = Split::kTrain;
    } else if (fields[1] == "test") {
      e.split = Split::kTest;
    } else {
      throw DataError(manifest_path.string() + ":" + std::to_string(lineno) +
                      ": unknown split '" + fields[1] + "'");
    }
    if (!fields[2].empty()) {
      try {
        std::size_t used = 0;
        e.class_index = std::stoi(fields[2], &used);
        if (used != fields[2].size()) throw std::invalid_argument("trailing");
      } catch (const std::logic_error&) {
        throw DataError(manifest_path.string() + ":" + std::to_string(lineno) +
                        ": bad class index '" + fields[2] + "'");
      }
    }
    man.entries.push_back(std::move(e));
  }
  return man;
}

void save_manifest(const DatasetManifest& man, const std::filesystem::path& manifest_path,
                   const std::filesystem::path& class_names_path) {
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write file: " + manifest_path.string());
  out << "sample_id,split,class_index\n";
  for (const auto& e : man.entries) {
    out << e.sample_id << ',' << to_string(e.split) << ',';
    if (e.class_index) out << *e.class_index;
    out << '\n';
  }
  std::ofstream names(class_names_path, std::ios::trunc);
  if (!names) throw ConfigError("cannot write file: " + class_names_path.string());
  for (const auto& n : man.class_names) names << n << '\n';
}

ValidationReport validate_manifest(const DatasetManifest& man, const EmbeddingMatrix& m,
                                   std::optional<Split> split) {
  ValidationReport report;
  using Kind = ValidationIssue::Kind;

  std::unordered_map<std::string_view, std::size_t> rows;
  rows.reserve(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) rows.emplace(m.id(i), i);

  std::unordered_set<std::string_view> seen;
  const auto num_classes = static_cast<long long>(man.num_classes());
  for (const auto& e : man.entries) {
    if (split && e.split != *split) continue;
    if (!seen.insert(e.sample_id).second) {
      report.issues.push_back({Kind::kDuplicateId, e.sample_id,
                               "duplicate manifest id: " + e.sample_id});
    }
    if (!rows.contains(e.sample_id)) {
      report.issues.push_back({Kind::kUnresolvedId, e.sample_id,
                               "unresolved id (no embedding row): " + e.sample_id});
    }
    if (e.class_index && (*e.class_index < 0 || *e.class_index >= num_classes)) {
      report.issues.push_back({Kind::kClassOutOfRange, e.sample_id,
                               "class index out of range: " + std::to_string(*e.class_index) +
                                   " for " + e.sample_id + " (C=" +
                                   std::to_string(num_classes) + ")"});
    }
  }
  return report;
}

}  // namespace tfup
