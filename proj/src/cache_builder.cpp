// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "tfup/cache_builder.hpp"

#include <algorithm>
#include <numeric>

#include "tfup/binary_io.hpp"
#include "tfup/zeroshot.hpp"

namespace tfup {

namespace {

constexpr std::string_view kCacheMagic = "TFC1";

// Indices of `keys` ordered by key descending, index ascending on ties.
std::vector<std::size_t> rank_descending(std::span<const double> keys) {
  std::vector<std::size_t> order(keys.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return keys[a] > keys[b]; });
  return order;
}

// Row sums of cand * pool^T.
std::vector<double> summed_cosines(const Matrix& cand, const Matrix& pool) {
  const Matrix sims = matmul_nt(cand, pool);
  std::vector<double> out(cand.rows(), 0.0);
  for (std::size_t i = 0; i < sims.rows(); ++i) {
    for (double v : sims.row(i)) out[i] += v;
  }
  return out;
}

Matrix rows_of(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::ranges::copy(m.row(rows[i]), out.row(i).begin());
  }
  return out;
}

Matrix round_to_f32(Matrix m) {
  for (double& v : m.data()) v = static_cast<float>(v);
  return m;
}

}  // namespace

std::vector<std::vector<std::size_t>> PseudoLabelSet::by_class() const {
  std::vector<std::vector<std::size_t>> groups(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    groups[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  return groups;
}

PseudoLabelSet pseudo_label(const Matrix& train_probs) {
  auto am = predict(train_probs);
  return PseudoLabelSet{train_probs.cols(), std::move(am.labels), std::move(am.confidence)};
}

std::vector<std::vector<std::size_t>> confidence_filter(const PseudoLabelSet& pl, std::size_t K) {
  if (K < 1) throw ConfigError("confidence filter requires K >= 1");
  auto groups = pl.by_class();
  for (auto& rows : groups) {
    std::vector<double> conf(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) conf[i] = pl.confidence[rows[i]];
    // rows is ascending, so rank ties resolve to the lower row index
    const auto order = rank_descending(conf);
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < std::min(K, order.size()); ++i) kept.push_back(rows[order[i]]);
    rows = std::move(kept);
  }
  return groups;
}

std::vector<double> prototype_score(const Matrix& class_feats) {
  return summed_cosines(class_feats, class_feats);
}

std::vector<std::size_t> prototype_filter(std::span<const double> scores, std::size_t N) {
  if (N < 1) throw ConfigError("prototype filter requires N >= 1");
  auto order = rank_descending(scores);
  order.resize(std::min(N, order.size()));
  return order;
}

CacheModel build_cache(const EmbeddingMatrix& train, const EmbeddingMatrix& text,
                       const RunConfig& cfg) {
  cfg.validate();
  require_same_dim(train, text, "build_cache");
  const LogitScale scale(cfg.logit_scale);
  const std::size_t C = text.rows();

  const Matrix train_values = train.values();
  const Matrix text_values = text.values();
  const auto pl = pseudo_label(softmax_rows(similarity_logits(train_values, text_values, scale)));

  std::vector<std::vector<std::size_t>> candidates;
  switch (cfg.filter) {
    case FilterMode::kNone:
    case FilterMode::kPrototype:
      candidates = pl.by_class();
      break;
    case FilterMode::kConfidence:
    case FilterMode::kDouble:
      candidates = confidence_filter(pl, cfg.K);
      break;
  }

  std::vector<std::vector<std::size_t>> selected = candidates;
  if (cfg.filter == FilterMode::kPrototype || cfg.filter == FilterMode::kDouble) {
    const std::size_t keep = cfg.filter == FilterMode::kDouble ? cfg.N : cfg.K;
    Matrix pool;
    if (cfg.eq4_global) {
      std::vector<std::size_t> all;
      for (const auto& rows : candidates) all.insert(all.end(), rows.begin(), rows.end());
      pool = rows_of(train_values, all);
    }
    for (std::size_t c = 0; c < C; ++c) {
      const Matrix class_feats = rows_of(train_values, candidates[c]);
      const auto scores =
          cfg.eq4_global ? summed_cosines(class_feats, pool) : prototype_score(class_feats);
      const auto picks = prototype_filter(scores, keep);
      selected[c].clear();
      for (auto p : picks) selected[c].push_back(candidates[c][p]);
    }
  }

  std::vector<std::size_t> rows;
  CacheMeta meta;
  meta.K = static_cast<std::uint32_t>(cfg.K);
  meta.N = static_cast<std::uint32_t>(cfg.N);
  meta.num_classes = static_cast<std::uint32_t>(C);
  meta.dim = static_cast<std::uint32_t>(train.dim());
  meta.logit_scale = static_cast<float>(cfg.logit_scale);
  for (const auto& s : selected) {
    meta.per_class_counts.push_back(static_cast<std::uint32_t>(s.size()));
    rows.insert(rows.end(), s.begin(), s.end());
  }

  CacheModel cm;
  cm.proto_features = train.select(rows);
  cm.proto_labels = Matrix(rows.size(), C);
  for (std::size_t p = 0; p < rows.size(); ++p) {
    cm.proto_labels(p, static_cast<std::size_t>(pl.labels[rows[p]])) = 1.0;
  }
  cm.proto_probs = round_to_f32(softmax_rows(
      similarity_logits(cm.proto_features.values(), text_values, LogitScale(meta.logit_scale))));
  cm.meta = std::move(meta);
  return cm;
}

std::vector<std::string> cache_warnings(const CacheModel& cm) {
  std::vector<std::string> out;
  for (std::size_t c = 0; c < cm.meta.per_class_counts.size(); ++c) {
    if (cm.meta.per_class_counts[c] == 0) {
      out.push_back("class " + std::to_string(c) + " has no prototypes");
    }
  }
  if (cm.size() == 1) out.push_back("cache holds a single prototype");
  return out;
}

std::vector<unsigned char> encode_cache(const CacheModel& cm) {
  io::ByteWriter w;
  w.magic(kCacheMagic);
  w.u32(cm.meta.K);
  w.u32(cm.meta.N);
  w.u32(cm.meta.num_classes);
  w.u32(cm.meta.dim);
  w.f32(cm.meta.logit_scale);
  for (auto n : cm.meta.per_class_counts) w.u32(n);
  for (float v : cm.proto_features.data()) w.f32(v);
  for (double v : cm.proto_labels.data()) w.f32(static_cast<float>(v));
  for (double v : cm.proto_probs.data()) w.f32(static_cast<float>(v));
  io::write_id_block(w, cm.proto_features.ids());
  return w.take();
}

CacheModel decode_cache(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kCacheMagic, "TFC1 cache (format version 1)");
  CacheModel cm;
  cm.meta.K = r.u32();
  cm.meta.N = r.u32();
  cm.meta.num_classes = r.u32();
  cm.meta.dim = r.u32();
  cm.meta.logit_scale = r.f32();
  const std::size_t C = cm.meta.num_classes;
  const std::size_t d = cm.meta.dim;
  if (r.remaining() < C * 4) throw FormatError("truncated payload", r.offset() + r.remaining());
  std::uint64_t P = 0;
  for (std::size_t c = 0; c < C; ++c) {
    cm.meta.per_class_counts.push_back(r.u32());
    P += cm.meta.per_class_counts.back();
  }
  if (r.remaining() < P * (d + 2 * C) * 4) {
    throw FormatError("truncated payload: meta declares " + std::to_string(P) + " prototypes",
                      r.offset() + r.remaining());
  }
  std::vector<float> feats(P * d);
  for (auto& v : feats) v = r.f32();
  cm.proto_labels = Matrix(P, C);
  for (auto& v : cm.proto_labels.data()) v = r.f32();
  cm.proto_probs = Matrix(P, C);
  for (auto& v : cm.proto_probs.data()) v = r.f32();
  const std::size_t id_offset = r.offset();
  auto ids = io::read_id_block(r, P);
  try {
    cm.proto_features = EmbeddingMatrix(d, std::move(feats), std::move(ids));
  } catch (const DataError& e) {
    throw FormatError(std::string("invalid id block: ") + e.what(), id_offset);
  }

  // Each label row must be one-hot and its class must agree with the counts.
  std::size_t p = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::uint32_t k = 0; k < cm.meta.per_class_counts[c]; ++k, ++p) {
      const auto row = cm.proto_labels.row(p);
      for (std::size_t j = 0; j < C; ++j) {
        if (row[j] != (j == c ? 1.0 : 0.0)) {
          throw FormatError("label row " + std::to_string(p) + " is not one-hot for class " +
                                std::to_string(c),
                            id_offset);
        }
      }
    }
  }
  return cm;
}

void save_cache(const CacheModel& cm, const std::filesystem::path& path) {
  io::write_file(path, encode_cache(cm));
}

CacheModel load_cache(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_cache(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace tfup
