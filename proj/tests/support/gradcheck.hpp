// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

// Finite-difference check of the adapter gradients against the naive
// objective in oracles.hpp.

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "support/oracles.hpp"
#include "tfup/adapter_trainer.hpp"

namespace oracle {

inline NaiveMlp to_naive(const tfup::Mlp& m) {
  return {from_matrix(m.w1), m.b1, from_matrix(m.w2), m.b2};
}

struct GradInstance {
  tfup::Matrix batch;
  tfup::Matrix text;
  std::vector<int> pseudo;
  tfup::AdapterParams params;
  tfup::RunConfig cfg;
};

inline bool near_kink(const Mat& rows, const tfup::Mlp& m) {
  for (const auto& x : rows) {
    for (std::size_t j = 0; j < m.b1.size(); ++j) {
      double s = m.b1[j];
      for (std::size_t k = 0; k < x.size(); ++k) s += x[k] * m.w1(k, j);
      if (std::abs(s) < 1e-3) return true;
    }
  }
  return false;
}

// Tiny random instance with every weight nonzero and the confidence
// threshold placed in the widest gap between row maxima, so no mask bit
// can flip under a finite-difference step.
inline GradInstance make_grad_instance(std::uint64_t seed, std::size_t d = 6, std::size_t h = 3,
                                       std::size_t B = 4, std::size_t C = 3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  std::uniform_real_distribution<double> ratio(0.2, 0.8);
  for (;;) {
    GradInstance g;
    g.batch = random_embeddings(B, d, rng, "x").values();
    g.text = random_embeddings(C, d, rng, "t").values();
    for (std::size_t i = 0; i < B; ++i) g.pseudo.push_back(static_cast<int>(rng() % C));
    auto fill = [&](tfup::Mlp& m) {
      m = tfup::Mlp::zeros(d, h);
      for (auto t : m.tensors()) {
        for (double& v : t) v = u(rng);
      }
    };
    fill(g.params.image);
    fill(g.params.text);
    g.params.alpha = ratio(rng);
    g.params.beta = ratio(rng);
    if (near_kink(from_matrix(g.batch), g.params.image) ||
        near_kink(from_matrix(g.text), g.params.text)) {
      continue;
    }
    g.cfg.logit_scale = 8.0;
    g.cfg.train.lambda_md = 1.0;

    Mat ai, at;
    for (const auto& x : from_matrix(g.batch)) ai.push_back(naive_adapt(x, to_naive(g.params.image), g.params.alpha));
    for (const auto& t : from_matrix(g.text)) at.push_back(naive_adapt(t, to_naive(g.params.text), g.params.beta));
    std::vector<double> maxima;
    for (const auto& row : probs_of(ai, at, g.cfg.logit_scale)) {
      maxima.push_back(*std::max_element(row.begin(), row.end()));
    }
    std::sort(maxima.begin(), maxima.end());
    double best_gap = 0.0;
    for (std::size_t i = 1; i < maxima.size(); ++i) {
      if (maxima[i] - maxima[i - 1] > best_gap) {
        best_gap = maxima[i] - maxima[i - 1];
        g.cfg.train.theta = 0.5 * (maxima[i] + maxima[i - 1]);
      }
    }
    if (best_gap < 1e-3) continue;
    return g;
  }
}

inline double naive_total(const GradInstance& g, const tfup::AdapterParams& p) {
  return naive_objective(from_matrix(g.batch), from_matrix(g.text), g.pseudo, to_naive(p.image),
                         to_naive(p.text), p.alpha, p.beta, g.cfg.logit_scale, g.cfg.train.theta,
                         g.cfg.train.lambda_md)
      .total;
}

struct GradCheckResult {
  double max_rel = 0.0;
  std::size_t entries = 0;
  std::size_t failures = 0;
};

// Central differences with step 1e-5. Relative error |a-n| / max(|a|,|n|);
// entries below 1e-7 in magnitude are compared absolutely against 1e-9.
inline GradCheckResult check_gradients(const GradInstance& g, double tol = 1e-4) {
  const auto analytic = tfup::adapter_backward(g.batch, g.text, g.pseudo, g.params, g.cfg).grads;
  GradCheckResult r;
  constexpr double step = 1e-5;
  auto sweep = [&](bool image) {
    const auto& grad_mlp = image ? analytic.image : analytic.text;
    const auto grads = grad_mlp.tensors();
    for (std::size_t t = 0; t < 4; ++t) {
      for (std::size_t k = 0; k < grads[t].size(); ++k) {
        tfup::AdapterParams plus = g.params;
        tfup::AdapterParams minus = g.params;
        (image ? plus.image : plus.text).tensors()[t][k] += step;
        (image ? minus.image : minus.text).tensors()[t][k] -= step;
        const double numeric = (naive_total(g, plus) - naive_total(g, minus)) / (2.0 * step);
        const double a = grads[t][k];
        const double scale = std::max(std::abs(a), std::abs(numeric));
        ++r.entries;
        if (scale < 1e-7) {
          if (std::abs(a - numeric) >= 1e-9) ++r.failures;
          continue;
        }
        const double rel = std::abs(a - numeric) / scale;
        r.max_rel = std::max(r.max_rel, rel);
        if (rel >= tol) ++r.failures;
      }
    }
  };
  sweep(true);
  sweep(false);
  return r;
}

}  // namespace oracle
