// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tfup/adapter_trainer.hpp"
#include "tfup/eval_harness.hpp"
#include "tfup/msm_inference.hpp"

using namespace tfup;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.dim = 16;
  spec.train_per_class = 40;
  spec.test_per_class = 20;
  spec.seed = 3;
  return spec;
}

RunConfig small_run() {
  RunConfig cfg;
  cfg.K = 8;
  cfg.N = 4;
  cfg.train.epochs = 3;
  cfg.train.batch_size = 16;
  cfg.seed = 5;
  return cfg;
}

double accuracy(const PredictionBatch& pb, const Fixture& fx) {
  return evaluate(pb, fx.test.ids(), fx.manifest).accuracy;
}

}  // namespace

TEST_CASE("adapter_forward") {
  std::mt19937_64 rng(1);
  auto x = oracle::random_embeddings(5, 8, rng).values();
  l2_normalize_rows(x);

  SUBCASE("ratio zero is the identity") {
    auto mlp = Mlp::zeros(8, 2);
    for (auto t : mlp.tensors()) {
      for (double& v : t) v = 0.3;
    }
    CHECK(adapter_forward(x, mlp, 0.0) == x);
  }
  SUBCASE("pass-through MLP with ratio one returns the input") {
    // relu(x) - relu(-x) == x
    auto mlp = Mlp::zeros(8, 16);
    for (std::size_t k = 0; k < 8; ++k) {
      mlp.w1(k, k) = 1.0;
      mlp.w1(k, 8 + k) = -1.0;
      mlp.w2(k, k) = 1.0;
      mlp.w2(8 + k, k) = -1.0;
    }
    const auto out = adapter_forward(x, mlp, 1.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(out(i, k) - x(i, k)) < 1e-12);
    }
  }
  SUBCASE("random weights match the straight-line forward") {
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    auto mlp = Mlp::zeros(8, 2);
    for (auto t : mlp.tensors()) {
      for (double& v : t) v = u(rng);
    }
    const auto out = adapter_forward(x, mlp, 0.2);
    const auto naive = oracle::to_naive(mlp);
    const auto rows = oracle::from_matrix(x);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto want = oracle::naive_adapt(rows[i], naive, 0.2);
      for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(out(i, k) - want[k]) < 1e-8);
    }
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(adapter_forward(x, Mlp::zeros(4, 2), 0.5), ShapeError);
  }
}

TEST_CASE("init_adapter starts at the zero-shot solution") {
  RunConfig cfg;
  const auto p = init_adapter(64, cfg);
  CHECK(p.image.hidden() == 16);
  CHECK(p.alpha == 0.2);
  CHECK(p.beta == 0.5);
  CHECK(p.image.w2 == Matrix(16, 64));
  std::mt19937_64 rng(2);
  auto x = oracle::random_embeddings(4, 64, rng).values();
  l2_normalize_rows(x);
  const auto out = adapter_forward(x, p.image, p.alpha);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t k = 0; k < 64; ++k) CHECK(std::abs(out(i, k) - x(i, k)) < 1e-12);
  }
}

TEST_CASE("ce_masked_loss") {
  const Matrix row(1, 2, std::vector<double>{0.96, 0.04});
  const std::vector<int> pseudo{0};
  const auto kept = ce_masked_loss(row, pseudo, 0.95);
  CHECK(kept.loss == doctest::Approx(0.040822).epsilon(1e-5));
  CHECK(kept.mask == std::vector<std::uint8_t>{1});
  const auto dropped = ce_masked_loss(row, pseudo, 0.97);
  CHECK(dropped.loss == 0.0);
  CHECK(dropped.mask == std::vector<std::uint8_t>{0});

  SUBCASE("rows below the threshold do not matter") {
    const Matrix a(2, 3, std::vector<double>{0.97, 0.02, 0.01, 0.5, 0.3, 0.2});
    const Matrix b(2, 3, std::vector<double>{0.97, 0.02, 0.01, 0.2, 0.1, 0.7});
    const std::vector<int> pl{0, 1};
    CHECK(ce_masked_loss(a, pl, 0.95).loss == ce_masked_loss(b, pl, 0.95).loss);
  }
  SUBCASE("random batches match the loop oracle") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      Matrix probs(6, 4);
      std::vector<int> pl;
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < 6; ++i) {
        auto r = oracle::random_stochastic(4, rng);
        for (std::size_t c = 0; c < 4; ++c) probs(i, c) = r[c];
        pl.push_back(static_cast<int>(rng() % 4));
        if (*std::max_element(r.begin(), r.end()) >= 0.4) {
          sum += -std::log(r[static_cast<std::size_t>(pl.back())]);
          ++n;
        }
      }
      const double want = n ? sum / static_cast<double>(n) : 0.0;
      CHECK(std::abs(ce_masked_loss(probs, pl, 0.4).loss - want) < 1e-9);
    }
  }
}

TEST_CASE("marginal_entropy_loss") {
  Matrix eye(3, 3);
  for (std::size_t c = 0; c < 3; ++c) eye(c, c) = 1.0;
  CHECK(std::abs(marginal_entropy_loss(eye)) < 1e-9);
  Matrix collapsed(4, 3);
  for (std::size_t i = 0; i < 4; ++i) collapsed(i, 0) = 1.0;
  CHECK(marginal_entropy_loss(collapsed) == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t C = 2 + static_cast<std::size_t>(trial % 6);
    Matrix probs(5, C);
    oracle::Vec h(C, 0.0);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto r = oracle::random_stochastic(C, rng);
      for (std::size_t c = 0; c < C; ++c) {
        probs(i, c) = r[c];
        h[c] += r[c] / 5.0;
      }
    }
    double ent = 0.0;
    for (double v : h) ent -= v * std::log(v);
    const double loss = marginal_entropy_loss(probs);
    CHECK(std::abs(loss - (std::log(static_cast<double>(C)) - ent)) < 1e-9);
    CHECK(loss >= 0.0);
    CHECK(loss <= std::log(static_cast<double>(C)) + 1e-12);
  }
}

TEST_CASE("adapter_loss matches the naive objective") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto g = oracle::make_grad_instance(seed);
    const auto got = adapter_loss(g.batch, g.text, g.pseudo, g.params, g.cfg);
    const auto want = oracle::naive_objective(
        oracle::from_matrix(g.batch), oracle::from_matrix(g.text), g.pseudo,
        oracle::to_naive(g.params.image), oracle::to_naive(g.params.text), g.params.alpha,
        g.params.beta, g.cfg.logit_scale, g.cfg.train.theta, g.cfg.train.lambda_md);
    CHECK(std::abs(got.ce - want.ce) < 1e-9);
    CHECK(std::abs(got.md - want.md) < 1e-9);
    CHECK(std::abs(got.total - want.total) < 1e-9);
    CHECK(std::vector<int>(got.mask.begin(), got.mask.end()) == want.mask);
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    CAPTURE(seed);
    const auto r = oracle::check_gradients(oracle::make_grad_instance(seed));
    CHECK(r.failures == 0);
    CHECK(r.max_rel < 1e-4);
    CHECK(r.entries == 2 * (6 * 3 + 3 + 3 * 6 + 6));
  }
  SUBCASE("marginal term alone") {
    auto g = oracle::make_grad_instance(7);
    g.cfg.train.theta = 1.0;
    const auto r = oracle::check_gradients(g);
    CHECK(r.failures == 0);
  }
}

TEST_CASE("no active loss term gives exactly zero gradients") {
  auto g = oracle::make_grad_instance(11);
  g.cfg.train.lambda_md = 0.0;
  g.cfg.train.theta = 1.0;
  const auto lg = adapter_backward(g.batch, g.text, g.pseudo, g.params, g.cfg);
  for (const auto* m : {&lg.grads.image, &lg.grads.text}) {
    for (auto t : m->tensors()) {
      for (double v : t) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("training") {
  const auto fx = generate_synthetic(small_spec());
  RunConfig cfg = small_run();
  const auto cache = build_cache(fx.train, fx.text, cfg);

  SUBCASE("zero learning rate leaves the parameters untouched") {
    cfg.train.learning_rate = 0.0;
    const auto r = train(fx.train, fx.text, cache, cfg);
    CHECK(r.params == init_adapter(fx.train.dim(), cfg));
  }
  SUBCASE("same seed gives identical parameters and report") {
    const auto a = train(fx.train, fx.text, cache, cfg);
    const auto b = train(fx.train, fx.text, cache, cfg);
    CHECK(a.params == b.params);
    CHECK(a.report == b.report);
    CHECK(train_report_lines(a.report, cfg) == train_report_lines(b.report, cfg));
  }
  SUBCASE("adam with a cosine schedule is deterministic too") {
    cfg.train.optimizer = OptimizerKind::kAdam;
    cfg.train.schedule = Schedule::kCosine;
    cfg.train.learning_rate = 0.001;
    CHECK(train(fx.train, fx.text, cache, cfg).params == train(fx.train, fx.text, cache, cfg).params);
  }
  SUBCASE("batch size one with the marginal loss is rejected") {
    cfg.train.batch_size = 1;
    CHECK_THROWS_AS(train(fx.train, fx.text, cache, cfg), ConfigError);
  }
}

TEST_CASE("one epoch on the default fixture improves agreement and accuracy") {
  const auto fx = generate_synthetic(SyntheticSpec{});
  RunConfig cfg;
  cfg.train.epochs = 1;
  const auto cache = build_cache(fx.train, fx.text, cfg);
  const auto r = train(fx.train, fx.text, cache, cfg);
  REQUIRE(r.report.epochs.size() == 1);
  CHECK(r.report.epochs.back().pseudo_accuracy >= r.report.initial_pseudo_accuracy);
  CHECK(r.report.epochs.back().mask_fraction >= 0.0);
  CHECK(r.report.epochs.back().mask_fraction <= 1.0);
  const auto init = init_adapter(fx.train.dim(), cfg);
  const double before = accuracy(tfupt_classify(fx.test, init, fx.text, cache, cfg, AdapterMode::kAdapter), fx);
  const double after = accuracy(tfupt_classify(fx.test, r.params, fx.text, cache, cfg, AdapterMode::kAdapter), fx);
  CHECK(after >= before);
}

TEST_CASE("tfupt_classify collapses to simpler paths") {
  const auto fx = generate_synthetic(small_spec());
  RunConfig cfg = small_run();
  const auto cache = build_cache(fx.train, fx.text, cfg);

  SUBCASE("zero residual ratios reproduce zero-shot") {
    cfg.train.alpha = 0.0;
    cfg.train.beta = 0.0;
    auto params = init_adapter(fx.train.dim(), cfg);
    for (auto* m : {&params.image, &params.text}) {
      for (auto t : m->tensors()) {
        for (double& v : t) v += 0.25;
      }
    }
    const auto got = tfupt_classify(fx.test, params, fx.text, cache, cfg, AdapterMode::kAdapter);
    const auto zs = zeroshot_classify(fx.test, fx.text, LogitScale(cfg.logit_scale));
    CHECK(got.labels == zs.labels);
  }
  SUBCASE("adapter+cache with gamma zero equals adapter") {
    const auto trained = train(fx.train, fx.text, cache, cfg).params;
    cfg.gamma = 0.0;
    const auto a = tfupt_classify(fx.test, trained, fx.text, cache, cfg, AdapterMode::kAdapter);
    const auto b = tfupt_classify(fx.test, trained, fx.text, cache, cfg, AdapterMode::kAdapterCache);
    CHECK(a.labels == b.labels);
  }
}

TEST_CASE("adapter checkpoints round-trip") {
  const auto fx = generate_synthetic(small_spec());
  RunConfig cfg = small_run();
  const auto cache = build_cache(fx.train, fx.text, cfg);
  AdapterCheckpoint ckpt{train(fx.train, fx.text, cache, cfg).params, cfg.seed,
                         static_cast<std::uint32_t>(cfg.train.epochs)};
  const auto path = std::filesystem::temp_directory_path() / "tfup_test_adapter.tfa";
  save_adapter(ckpt, path);
  const auto back = load_adapter(path);
  CHECK(back.seed == ckpt.seed);
  CHECK(back.epoch == ckpt.epoch);
  CHECK(back.params.alpha == doctest::Approx(ckpt.params.alpha));
  CHECK(encode_adapter(back) == encode_adapter(ckpt));
  const auto a = ckpt.params.image.tensors();
  const auto b = back.params.image.tensors();
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t k = 0; k < a[t].size(); ++k) {
      CHECK(b[t][k] == static_cast<double>(static_cast<float>(a[t][k])));
    }
  }
  auto bytes = encode_adapter(ckpt);
  bytes[0] = 'Z';
  CHECK_THROWS_AS(decode_adapter(bytes), FormatError);
}
