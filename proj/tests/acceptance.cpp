// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tfup/adapter_trainer.hpp"
#include "tfup/cache_builder.hpp"
#include "tfup/eval_harness.hpp"
#include "tfup/msm_inference.hpp"
#include "tfup/zeroshot.hpp"

namespace fs = std::filesystem;
using namespace tfup;

namespace {

constexpr double kOracleTol = 1e-6;
constexpr double kOracleBudget = 5.0;
constexpr double kGradTol = 1e-4;
constexpr double kGradBudget = 30.0;
constexpr double kLossTol = 1e-9;
constexpr double kStackingBudget = 60.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(const std::string& name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0 && s >= budget_s) {
    o.pass = false;
    o.detail += " (over " + std::to_string(budget_s) + " s budget)";
  }
  if (!o.pass) ++failures;
  std::printf("[%s] %-28s %7.2f s  %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), s, o.detail.c_str());
  std::fflush(stdout);
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(20260101);
  double worst = 0.0;
  std::size_t max_p = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t C = 2 + rng() % 3;
    const std::size_t d = 2 + rng() % 7;
    const std::size_t B = 1 + rng() % 5;
    const std::size_t N = 1 + rng() % (6 / C);
    const std::size_t K = N + rng() % 3;
    const auto text = oracle::random_embeddings(C, d, rng, "t");
    const auto train = oracle::random_embeddings(4 + rng() % 12, d, rng, "x");
    const auto test = oracle::random_embeddings(B, d, rng, "q");
    RunConfig cfg;
    cfg.logit_scale = std::uniform_real_distribution<double>(1.0, 30.0)(rng);
    cfg.K = K;
    cfg.N = N;
    cfg.gamma = std::uniform_real_distribution<double>(0.0, 2.0)(rng);
    const auto cache = build_cache(train, text, cfg);
    if (cache.size() == 0) continue;
    max_p = std::max(max_p, cache.size());
    const auto got = tfup_classify(test, cache, text, cfg);
    const auto want = oracle::naive_tfup_logits(
        oracle::from_embeddings(train), oracle::from_embeddings(test),
        oracle::from_embeddings(text), cfg.logit_scale, K, N, cfg.gamma);
    for (std::size_t i = 0; i < B; ++i) {
      for (std::size_t c = 0; c < C; ++c) worst = std::max(worst, std::abs(got.raw(i, c) - want[i][c]));
    }
  }
  std::ostringstream os;
  os << "100 instances, max |diff| " << worst << ", largest P " << max_p;
  return {worst < kOracleTol && max_p <= 6, os.str()};
}

Outcome gradient_check() {
  double worst = 0.0;
  std::size_t bad = 0;
  std::size_t entries = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = oracle::check_gradients(oracle::make_grad_instance(seed), kGradTol);
    worst = std::max(worst, r.max_rel);
    bad += r.failures;
    entries += r.entries;
  }
  std::ostringstream os;
  os << "20 seeds, " << entries << " entries, max rel err " << worst;
  return {bad == 0 && worst < kGradTol, os.str()};
}

Outcome loss_invariants() {
  std::mt19937_64 rng(42);
  double uniform_worst = 0.0;
  double collapsed_worst = 0.0;
  for (std::size_t C = 2; C <= 10; ++C) {
    Matrix perm(2 * C, C);
    for (std::size_t i = 0; i < 2 * C; ++i) perm(i, i % C) = 1.0;
    uniform_worst = std::max(uniform_worst, std::abs(marginal_entropy_loss(perm)));
    Matrix collapsed(5, C);
    for (std::size_t i = 0; i < 5; ++i) collapsed(i, C - 1) = 1.0;
    collapsed_worst = std::max(collapsed_worst,
                               std::abs(marginal_entropy_loss(collapsed) - std::log(static_cast<double>(C))));
  }
  std::size_t negative = 0;
  std::size_t self_nonzero = 0;
  std::size_t distinct_zero = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t C = 2 + static_cast<std::size_t>(i % 9);
    const auto p = oracle::random_stochastic(C, rng);
    const auto q = oracle::random_stochastic(C, rng);
    const double d = kl_divergence(p, q);
    if (d < 0.0) ++negative;
    if (p != q && d < kLossTol) ++distinct_zero;
    if (std::abs(kl_divergence(p, p)) >= kLossTol) ++self_nonzero;
  }
  const bool ok = uniform_worst < kLossTol && collapsed_worst < kLossTol && negative == 0 &&
                  self_nonzero == 0 && distinct_zero == 0;
  std::ostringstream os;
  os << "md uniform err " << uniform_worst << ", collapsed err " << collapsed_worst
     << "; KL negative " << negative << ", self nonzero " << self_nonzero << ", distinct zero "
     << distinct_zero << " of 10000";
  return {ok, os.str()};
}

Outcome identity_collapses() {
  std::size_t rows = 0;
  std::size_t mismatches = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SyntheticSpec spec;
    spec.num_classes = 3 + seed % 4;
    spec.dim = 16;
    spec.train_per_class = 30;
    spec.test_per_class = 20;
    spec.seed = seed;
    const auto fx = generate_synthetic(spec);
    RunConfig cfg;
    cfg.K = 8;
    cfg.N = 4;
    const auto zs = zeroshot_classify(fx.test, fx.text, LogitScale(cfg.logit_scale));
    const auto cache = build_cache(fx.train, fx.text, cfg);

    cfg.train.alpha = 0.0;
    cfg.train.beta = 0.0;
    cfg.seed = seed;
    auto params = init_adapter(fx.test.dim(), cfg);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto* m : {&params.image, &params.text}) {
      for (auto t : m->tensors()) {
        for (double& v : t) v = u(rng);
      }
    }
    const auto adapted = tfupt_classify(fx.test, params, fx.text, cache, cfg, AdapterMode::kAdapter);
    cfg.gamma = 0.0;
    const auto no_cache = tfup_classify(fx.test, cache, fx.text, cfg);
    for (std::size_t i = 0; i < fx.test.rows(); ++i) {
      ++rows;
      if (adapted.labels[i] != zs.labels[i]) ++mismatches;
      if (no_cache.labels[i] != zs.labels[i]) ++mismatches;
    }
  }
  return {mismatches == 0, std::to_string(mismatches) + " label mismatches over " +
                               std::to_string(rows) + " rows x 2 collapses"};
}

Outcome stacking_monotonicity() {
  const auto fx = generate_synthetic(SyntheticSpec{});
  RunConfig cfg;
  const auto truth = ground_truth_labels(fx.manifest, fx.test.ids());
  auto acc = [&](const PredictionBatch& pb) {
    return evaluate(pb.labels, truth, fx.text.rows()).accuracy;
  };
  const double zs = acc(zeroshot_classify(fx.test, fx.text, LogitScale(cfg.logit_scale)));
  const auto cache = build_cache(fx.train, fx.text, cfg);
  cfg.measure = MeasureMode::kFeature;
  const double fsm = acc(tfup_classify(fx.test, cache, fx.text, cfg));
  cfg.measure = MeasureMode::kMultiLevel;
  const double msm = acc(tfup_classify(fx.test, cache, fx.text, cfg));
  std::ostringstream os;
  os << "zeroshot " << zs << " <= fcm+fsm " << fsm << " <= fcm+msm " << msm;
  return {zs <= fsm && fsm <= msm, os.str()};
}

Outcome filter_subset_balance() {
  std::mt19937_64 rng(77);
  std::size_t violations = 0;
  std::size_t prototypes = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 2 + rng() % 7;
    const std::size_t d = 4 + rng() % 29;
    const auto text = oracle::random_embeddings(C, d, rng, "t");
    const auto train = oracle::random_embeddings(20 + rng() % 200, d, rng, "x");
    RunConfig cfg;
    cfg.logit_scale = std::uniform_real_distribution<double>(5.0, 100.0)(rng);
    cfg.N = 1 + rng() % 8;
    cfg.K = cfg.N + rng() % 16;
    cfg.eq4_global = trial % 2 == 1;
    cfg.filter = FilterMode::kConfidence;
    const auto conf = build_cache(train, text, cfg);
    cfg.filter = FilterMode::kDouble;
    const auto dbl = build_cache(train, text, cfg);
    const std::set<std::string> conf_ids(conf.proto_features.ids().begin(), conf.proto_features.ids().end());
    std::vector<std::size_t> per_class(C, 0);
    for (std::size_t p = 0; p < dbl.size(); ++p) {
      ++prototypes;
      if (!conf_ids.count(dbl.proto_features.id(p))) ++violations;
      if (!train.find(dbl.proto_features.id(p))) ++violations;
      for (std::size_t c = 0; c < C; ++c) {
        if (dbl.proto_labels(p, c) == 1.0) ++per_class[c];
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      if (per_class[c] > cfg.N || per_class[c] != dbl.meta.per_class_counts[c]) ++violations;
    }
  }
  return {violations == 0, std::to_string(violations) + " violations over 50 fixtures, " +
                               std::to_string(prototypes) + " prototypes"};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TFUP_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "tfup_acceptance_cli";
  fs::remove_all(root);
  auto pipeline = [&](const fs::path& dir) {
    fs::create_directories(dir);
    const std::string fx = (dir / "fx").string();
    const std::string d = dir.string();
    const std::string cfg = " --k 8 --n 4 --epochs 2 --batch-size 32 --seed 11";
    const std::string in = " --text " + fx + "/text.tfb";
    const std::string gt = " --manifest " + fx + "/manifest.csv --classes " + fx + "/classes.txt";
    const std::vector<std::string> cmds = {
        "gen-synthetic --num-classes 5 --dim 24 --train-per-class 60 --test-per-class 30 --seed 9 --output-dir " + fx,
        "build-cache --train " + fx + "/train.tfb" + in + cfg + " --output " + d + "/cache.tfc",
        "infer --test " + fx + "/test.tfb" + in + " --cache " + d + "/cache.tfc" + cfg + " --output " + d + "/pred.jsonl",
        "infer --test " + fx + "/test.tfb" + in + " --no-cache" + cfg + " --output " + d + "/zs.jsonl",
        "train --train " + fx + "/train.tfb" + in + " --cache " + d + "/cache.tfc" + cfg + " --output " + d + "/adapter.tfa",
        "eval --test " + fx + "/test.tfb" + in + gt + " --cache " + d + "/cache.tfc --checkpoint " + d +
            "/adapter.tfa --mode adapter+cache" + cfg + " --output " + d + "/eval.jsonl",
        "eval --test " + fx + "/test.tfb --train " + fx + "/train.tfb" + in + gt + " --ablation" + cfg +
            " --output " + d + "/ablation.jsonl",
        "sweep --train " + fx + "/train.tfb --test " + fx + "/test.tfb" + in + gt +
            " --alphas 0,0.2 --betas 0.5 --gammas 0,1" + cfg + " --output " + d + "/sweep.jsonl",
    };
    for (const auto& c : cmds) {
      if (const int rc = run_cli(c); rc != 0) {
        throw std::runtime_error("exit " + std::to_string(rc) + ": tfup " + c.substr(0, c.find(' ')));
      }
    }
  };
  pipeline(root / "a");
  pipeline(root / "b");
  std::size_t files = 0;
  std::size_t differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(e.path(), root / "a");
    if (slurp(e.path()) != slurp(root / "b" / rel)) ++differ;
  }
  return {files >= 12 && differ == 0,
          std::to_string(files) + " artifacts from 8 commands, " + std::to_string(differ) + " differ"};
}

}  // namespace

int main() {
  criterion("oracle-equivalence", kOracleBudget, oracle_equivalence);
  criterion("gradient-verification", kGradBudget, gradient_check);
  criterion("loss-invariants", 0, loss_invariants);
  criterion("identity-collapses", 0, identity_collapses);
  criterion("component-stacking", kStackingBudget, stacking_monotonicity);
  criterion("filter-subset-balance", 0, filter_subset_balance);
  criterion("cli-determinism", 0, cli_determinism);
  std::printf("%d failed\n", failures);
  return failures;
}
