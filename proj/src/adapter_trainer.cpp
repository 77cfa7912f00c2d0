// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "tfup/adapter_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "tfup/binary_io.hpp"
#include "tfup/msm_inference.hpp"

namespace tfup {

namespace {

constexpr std::string_view kAdapterMagic = "TFA1";

// Intermediate values of one adapter application, kept for the backward pass.
struct AdapterTrace {
  double ratio = 0.0;
  Matrix input;   // n x d
  Matrix pre;     // n x h, before relu
  Matrix hidden;  // n x h
  Matrix output;  // n x d, normalized
  std::vector<double> norms;
};

AdapterTrace trace_adapter(const Matrix& x, const Mlp& mlp, double ratio) {
  AdapterTrace t;
  t.ratio = ratio;
  t.input = x;
  if (ratio == 0.0) {
    t.output = x;
    return t;
  }
  t.pre = matmul(x, mlp.w1);
  for (std::size_t i = 0; i < t.pre.rows(); ++i) {
    auto r = t.pre.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += mlp.b1[j];
  }
  t.hidden = t.pre;
  for (double& v : t.hidden.data()) v = std::max(v, 0.0);
  Matrix out = matmul(t.hidden, mlp.w2);
  t.norms.resize(x.rows());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const auto xr = x.row(i);
    double ss = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      r[j] = ratio * (r[j] + mlp.b2[j]) + (1.0 - ratio) * xr[j];
      ss += r[j] * r[j];
    }
    const double norm = std::sqrt(ss);
    if (!(norm > 1e-12) || !std::isfinite(norm)) {
      throw NumericalError("adapter output row " + std::to_string(i) + " has degenerate norm");
    }
    t.norms[i] = norm;
    for (double& v : r) v /= norm;
  }
  t.output = std::move(out);
  return t;
}

// Accumulates MLP gradients for d(loss)/d(output) = `d_out`.
void backprop_adapter(const AdapterTrace& t, const Mlp& mlp, const Matrix& d_out, Mlp& grad) {
  if (t.ratio == 0.0) return;
  const std::size_t n = t.input.rows();
  const std::size_t d = t.input.cols();
  // through y = u / |u| and u = ratio * mlp(x) + (1 - ratio) x
  Matrix d_mlp(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = t.output.row(i);
    const auto dy = d_out.row(i);
    double proj = 0.0;
    for (std::size_t j = 0; j < d; ++j) proj += y[j] * dy[j];
    auto dm = d_mlp.row(i);
    for (std::size_t j = 0; j < d; ++j) dm[j] = t.ratio * (dy[j] - y[j] * proj) / t.norms[i];
  }
  const Matrix dw2 = matmul_tn(t.hidden, d_mlp);
  for (std::size_t k = 0; k < dw2.data().size(); ++k) grad.w2.data()[k] += dw2.data()[k];
  for (std::size_t i = 0; i < n; ++i) {
    const auto dm = d_mlp.row(i);
    for (std::size_t j = 0; j < d; ++j) grad.b2[j] += dm[j];
  }
  Matrix d_pre = matmul_nt(d_mlp, mlp.w2);
  for (std::size_t k = 0; k < d_pre.data().size(); ++k) {
    if (!(t.pre.data()[k] > 0.0)) d_pre.data()[k] = 0.0;
  }
  const Matrix dw1 = matmul_tn(t.input, d_pre);
  for (std::size_t k = 0; k < dw1.data().size(); ++k) grad.w1.data()[k] += dw1.data()[k];
  for (std::size_t i = 0; i < n; ++i) {
    const auto dp = d_pre.row(i);
    for (std::size_t j = 0; j < dp.size(); ++j) grad.b1[j] += dp[j];
  }
}

struct ForwardState {
  AdapterTrace image;
  AdapterTrace text;
  Matrix probs;
  LossTerms loss;
};

ForwardState forward_objective(const Matrix& image_batch, const Matrix& text,
                               std::span<const int> pseudo, const AdapterParams& params,
                               const RunConfig& cfg) {
  if (pseudo.size() != image_batch.rows()) {
    throw ShapeError("pseudo-label count " + std::to_string(pseudo.size()) + " != batch rows " +
                     std::to_string(image_batch.rows()));
  }
  ForwardState s;
  s.image = trace_adapter(image_batch, params.image, params.alpha);
  s.text = trace_adapter(text, params.text, params.beta);
  s.probs = softmax_rows(similarity_logits(s.image.output, s.text.output, LogitScale(cfg.logit_scale)));
  auto ce = ce_masked_loss(s.probs, pseudo, cfg.train.theta);
  s.loss.ce = ce.loss;
  s.loss.mask = std::move(ce.mask);
  s.loss.md = marginal_entropy_loss(s.probs);
  s.loss.total = s.loss.ce + cfg.train.lambda_md * s.loss.md;
  return s;
}

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

// Per-tensor optimizer state over the eight adapter tensors.
class Optimizer {
 public:
  Optimizer(const TrainConfig& tc, const AdapterParams& params) : tc_(tc) {
    for (auto t : tensors(params)) {
      first_.emplace_back(t.size(), 0.0);
      second_.emplace_back(t.size(), 0.0);
    }
  }

  void step(AdapterParams& params, AdapterGrads& grads, double lr) {
    ++t_;
    auto ps = tensors(params);
    auto gs = grad_tensors(grads);
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto p = ps[k];
      auto g = gs[k];
      auto& m = first_[k];
      auto& v = second_[k];
      if (tc_.optimizer == OptimizerKind::kSgd) {
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = tc_.momentum * m[i] + g[i];
          p[i] -= lr * m[i];
        }
      } else {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = b1 * m[i] + (1.0 - b1) * g[i];
          v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
          p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
      }
    }
  }

 private:
  static std::array<std::span<double>, 8> join(std::array<std::span<double>, 4> a,
                                                std::array<std::span<double>, 4> b) {
    return {a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]};
  }
  static std::array<std::span<double>, 8> tensors(AdapterParams& p) {
    return join(p.image.tensors(), p.text.tensors());
  }
  static std::array<std::span<const double>, 8> tensors(const AdapterParams& p) {
    auto a = p.image.tensors();
    auto b = p.text.tensors();
    return {a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]};
  }
  static std::array<std::span<double>, 8> grad_tensors(AdapterGrads& g) {
    return join(g.image.tensors(), g.text.tensors());
  }

  TrainConfig tc_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

double agreement(std::span<const int> a, std::span<const int> b) {
  if (a.empty()) return 0.0;
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.size());
}

std::vector<int> adapter_labels(const Matrix& feats, const Matrix& text,
                                const AdapterParams& params, double scale) {
  const Matrix img = adapter_forward(feats, params.image, params.alpha);
  const Matrix txt = adapter_forward(text, params.text, params.beta);
  return predict(similarity_logits(img, txt, LogitScale(scale))).labels;
}

void write_mlp(io::ByteWriter& w, const Mlp& mlp) {
  for (auto t : mlp.tensors()) {
    for (double v : t) w.f32(static_cast<float>(v));
  }
}

void read_mlp(io::ByteReader& r, Mlp& mlp) {
  for (auto t : mlp.tensors()) {
    for (double& v : t) v = r.f32();
  }
}

}  // namespace

Mlp Mlp::zeros(std::size_t d, std::size_t h) {
  return Mlp{Matrix(d, h), std::vector<double>(h, 0.0), Matrix(h, d), std::vector<double>(d, 0.0)};
}

std::array<std::span<double>, 4> Mlp::tensors() {
  return {std::span<double>(w1.data()), std::span<double>(b1), std::span<double>(w2.data()),
          std::span<double>(b2)};
}

std::array<std::span<const double>, 4> Mlp::tensors() const {
  return {std::span<const double>(w1.data()), std::span<const double>(b1),
          std::span<const double>(w2.data()), std::span<const double>(b2)};
}

AdapterParams init_adapter(std::size_t d, const RunConfig& cfg) {
  if (d == 0) throw ShapeError("adapter dimension must be positive");
  const std::size_t h = std::max<std::size_t>(1, d / cfg.train.reduction);
  std::mt19937_64 rng(cfg.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  AdapterParams p;
  p.image = Mlp::zeros(d, h);
  p.text = Mlp::zeros(d, h);
  p.image.w1 = uniform_matrix(d, h, bound, rng);
  p.text.w1 = uniform_matrix(d, h, bound, rng);
  p.alpha = cfg.train.alpha;
  p.beta = cfg.train.beta;
  return p;
}

Matrix mlp_forward(const Mlp& mlp, const Matrix& x) {
  Matrix hid = matmul(x, mlp.w1);
  for (std::size_t i = 0; i < hid.rows(); ++i) {
    auto r = hid.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = std::max(r[j] + mlp.b1[j], 0.0);
  }
  Matrix out = matmul(hid, mlp.w2);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += mlp.b2[j];
  }
  return out;
}

Matrix adapter_forward(const Matrix& feats, const Mlp& mlp, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("residual ratio must lie in [0, 1]");
  if (feats.cols() != mlp.dim()) {
    throw ShapeError("adapter expects dimension " + std::to_string(mlp.dim()) + ", got " +
                     std::to_string(feats.cols()));
  }
  return trace_adapter(feats, mlp, ratio).output;
}

EmbeddingMatrix adapter_forward(const EmbeddingMatrix& feats, const Mlp& mlp, double ratio) {
  if (ratio == 0.0) return feats;
  return EmbeddingMatrix::from_matrix(adapter_forward(feats.values(), mlp, ratio), feats.ids());
}

MaskedLoss ce_masked_loss(const Matrix& probs, std::span<const int> pseudo, double theta) {
  if (pseudo.size() != probs.rows()) throw ShapeError("ce_masked_loss: label count mismatch");
  MaskedLoss out;
  out.mask.assign(probs.rows(), 0);
  double sum = 0.0;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto r = probs.row(i);
    if (*std::max_element(r.begin(), r.end()) < theta) continue;
    const auto y = static_cast<std::size_t>(pseudo[i]);
    if (y >= r.size()) throw DataError("pseudo label out of range");
    out.mask[i] = 1;
    sum += -std::log(std::max(r[y], kProbabilityFloor));
    ++kept;
  }
  out.loss = kept == 0 ? 0.0 : sum / static_cast<double>(kept);
  return out;
}

double marginal_entropy_loss(const Matrix& probs) {
  if (probs.rows() == 0) throw DataError("marginal_entropy_loss: empty batch");
  const std::size_t C = probs.cols();
  std::vector<double> h(C, 0.0);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto r = probs.row(i);
    for (std::size_t c = 0; c < C; ++c) h[c] += r[c];
  }
  double neg_entropy = 0.0;
  for (double& v : h) {
    v /= static_cast<double>(probs.rows());
    neg_entropy += v * std::log(std::max(v, kProbabilityFloor));
  }
  return std::max(0.0, std::log(static_cast<double>(C)) + neg_entropy);
}

LossTerms adapter_loss(const Matrix& image_batch, const Matrix& text, std::span<const int> pseudo,
                       const AdapterParams& params, const RunConfig& cfg) {
  return forward_objective(image_batch, text, pseudo, params, cfg).loss;
}

LossAndGrad adapter_backward(const Matrix& image_batch, const Matrix& text,
                             std::span<const int> pseudo, const AdapterParams& params,
                             const RunConfig& cfg) {
  ForwardState s = forward_objective(image_batch, text, pseudo, params, cfg);
  const Matrix& P = s.probs;
  const std::size_t B = P.rows();
  const std::size_t C = P.cols();

  // d(total)/d(logits)
  Matrix d_logits(B, C);
  const auto kept = static_cast<double>(std::count(s.loss.mask.begin(), s.loss.mask.end(), 1));
  for (std::size_t i = 0; i < B; ++i) {
    if (!s.loss.mask[i]) continue;
    auto dz = d_logits.row(i);
    const auto p = P.row(i);
    for (std::size_t c = 0; c < C; ++c) dz[c] = p[c] / kept;
    dz[static_cast<std::size_t>(pseudo[i])] -= 1.0 / kept;
  }
  const double lambda = cfg.train.lambda_md;
  if (lambda > 0.0) {
    std::vector<double> h(C, 0.0);
    for (std::size_t i = 0; i < B; ++i) {
      for (std::size_t c = 0; c < C; ++c) h[c] += P(i, c);
    }
    // g_c = d(L_md)/d(P_ic) = (log h_c + 1) / B
    std::vector<double> g(C);
    for (std::size_t c = 0; c < C; ++c) {
      h[c] /= static_cast<double>(B);
      g[c] = (std::log(std::max(h[c], kProbabilityFloor)) + (h[c] >= kProbabilityFloor ? 1.0 : 0.0)) /
             static_cast<double>(B);
    }
    for (std::size_t i = 0; i < B; ++i) {
      const auto p = P.row(i);
      double pg = 0.0;
      for (std::size_t c = 0; c < C; ++c) pg += p[c] * g[c];
      auto dz = d_logits.row(i);
      for (std::size_t c = 0; c < C; ++c) dz[c] += lambda * p[c] * (g[c] - pg);
    }
  }

  const double scale = cfg.logit_scale;
  Matrix d_img = matmul(d_logits, s.text.output);
  Matrix d_txt = matmul_tn(d_logits, s.image.output);
  for (double& v : d_img.data()) v *= scale;
  for (double& v : d_txt.data()) v *= scale;

  LossAndGrad out;
  out.grads.image = Mlp::zeros(params.image.dim(), params.image.hidden());
  out.grads.text = Mlp::zeros(params.text.dim(), params.text.hidden());
  backprop_adapter(s.image, params.image, d_img, out.grads.image);
  backprop_adapter(s.text, params.text, d_txt, out.grads.text);
  out.loss = std::move(s.loss);
  return out;
}

TrainResult train(const EmbeddingMatrix& train_feats, const EmbeddingMatrix& text,
                  const CacheModel& cache, const RunConfig& cfg) {
  const auto pseudo = tfup_classify(train_feats, cache, text, cfg).labels;
  return train_with_labels(train_feats, text, pseudo, cfg);
}

TrainResult train_with_labels(const EmbeddingMatrix& train_feats, const EmbeddingMatrix& text,
                              std::span<const int> pseudo, const RunConfig& cfg) {
  cfg.validate();
  require_same_dim(train_feats, text, "train");
  if (train_feats.rows() == 0) throw DataError("train: no training rows");
  if (pseudo.size() != train_feats.rows()) throw ShapeError("train: pseudo-label count mismatch");

  const TrainConfig& tc = cfg.train;
  const Matrix feats = train_feats.values();
  const Matrix text_values = text.values();
  const std::size_t M = feats.rows();
  const std::size_t d = feats.cols();
  const std::size_t min_batch = tc.lambda_md > 0.0 ? 2 : 1;

  TrainResult result;
  result.params = init_adapter(d, cfg);
  AdapterParams& params = result.params;
  result.report.initial_pseudo_accuracy =
      agreement(adapter_labels(feats, text_values, params, cfg.logit_scale), pseudo);

  // shuffling draws from its own stream so initialization does not depend on it
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  Optimizer opt(tc, params);
  std::vector<std::size_t> order(M);
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::size_t steps_per_epoch = 0;
  for (std::size_t start = 0; start < M; start += tc.batch_size) {
    if (std::min(M, start + tc.batch_size) - start >= min_batch) ++steps_per_epoch;
  }
  const double total_steps = static_cast<double>(steps_per_epoch * tc.epochs);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    std::size_t seen = 0;
    std::size_t masked = 0;
    for (std::size_t start = 0; start < M; start += tc.batch_size) {
      const std::size_t end = std::min(M, start + tc.batch_size);
      if (end - start < min_batch) continue;
      Matrix batch(end - start, d);
      std::vector<int> labels(end - start);
      for (std::size_t i = start; i < end; ++i) {
        std::ranges::copy(feats.row(order[i]), batch.row(i - start).begin());
        labels[i - start] = pseudo[order[i]];
      }
      auto lg = adapter_backward(batch, text_values, labels, params, cfg);
      double lr = tc.learning_rate;
      if (tc.schedule == Schedule::kCosine && total_steps > 0) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      }
      opt.step(params, lg.grads, lr);
      ++step;
      ++batches;
      rec.ce_loss += lg.loss.ce;
      rec.md_loss += lg.loss.md;
      seen += end - start;
      masked += static_cast<std::size_t>(std::count(lg.loss.mask.begin(), lg.loss.mask.end(), 1));
    }
    if (batches > 0) {
      rec.ce_loss /= static_cast<double>(batches);
      rec.md_loss /= static_cast<double>(batches);
    }
    rec.mask_fraction = seen == 0 ? 0.0 : static_cast<double>(masked) / static_cast<double>(seen);
    rec.pseudo_accuracy = agreement(adapter_labels(feats, text_values, params, cfg.logit_scale), pseudo);
    result.report.epochs.push_back(rec);
  }
  return result;
}

PredictionBatch tfupt_classify(const EmbeddingMatrix& test, const AdapterParams& params,
                               const EmbeddingMatrix& text, const CacheModel& cache,
                               const RunConfig& cfg, AdapterMode mode) {
  require_same_dim(test, text, "tfupt_classify");
  const LogitScale scale(cfg.logit_scale);
  const Matrix img = adapter_forward(test.values(), params.image, params.alpha);
  const Matrix txt = adapter_forward(text.values(), params.text, params.beta);
  Matrix logits = similarity_logits(img, txt, scale);
  switch (mode) {
    case AdapterMode::kAdapter:
      return make_prediction(std::move(logits));
    case AdapterMode::kAdapterCache: {
      if (cache.size() == 0) throw DataError("tfupt_classify: cache is empty");
      require_same_dim(test, cache.proto_features, "tfupt_classify");
      require_cache_scale(cache, cfg);
      const Matrix protos =
          adapter_forward(cache.proto_features.values(), params.image, params.alpha);
      return make_prediction(cache_logits(img, softmax_rows(logits), protos,
                                          cache.proto_probs, cache.proto_labels, cfg.gamma,
                                          cfg.measure));
    }
  }
  throw ConfigError("unknown tfup-t mode");
}

std::vector<unsigned char> encode_adapter(const AdapterCheckpoint& ckpt) {
  const auto& p = ckpt.params;
  io::ByteWriter w;
  w.magic(kAdapterMagic);
  w.u32(static_cast<std::uint32_t>(p.image.dim()));
  w.u32(static_cast<std::uint32_t>(p.image.hidden()));
  w.f32(static_cast<float>(p.alpha));
  w.f32(static_cast<float>(p.beta));
  w.u64(ckpt.seed);
  w.u32(ckpt.epoch);
  write_mlp(w, p.image);
  write_mlp(w, p.text);
  return w.take();
}

AdapterCheckpoint decode_adapter(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kAdapterMagic, "TFA1 adapter checkpoint");
  AdapterCheckpoint ckpt;
  const std::size_t d = r.u32();
  const std::size_t h = r.u32();
  ckpt.params.alpha = r.f32();
  ckpt.params.beta = r.f32();
  ckpt.seed = r.u64();
  ckpt.epoch = r.u32();
  const std::size_t expected = 2 * (2 * d * h + h + d) * 4;
  if (r.remaining() != expected) {
    throw FormatError(r.remaining() < expected ? "truncated payload" : "trailing bytes after weights",
                      r.offset() + std::min(r.remaining(), expected));
  }
  ckpt.params.image = Mlp::zeros(d, h);
  ckpt.params.text = Mlp::zeros(d, h);
  read_mlp(r, ckpt.params.image);
  read_mlp(r, ckpt.params.text);
  return ckpt;
}

void save_adapter(const AdapterCheckpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, encode_adapter(ckpt));
}

AdapterCheckpoint load_adapter(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_adapter(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

std::string train_report_lines(const TrainReport& report, const RunConfig& cfg) {
  nlohmann::ordered_json head;
  head["format"] = "tfup-train-report";
  head["version"] = 1;
  head["config"] = to_json(cfg);
  head["initial_pseudo_accuracy"] = report.initial_pseudo_accuracy;
  std::string out = head.dump() + "\n";
  for (const auto& e : report.epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["ce_loss"] = e.ce_loss;
    j["md_loss"] = e.md_loss;
    j["mask_fraction"] = e.mask_fraction;
    j["pseudo_accuracy"] = e.pseudo_accuracy;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace tfup
