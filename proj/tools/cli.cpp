// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tfup/adapter_trainer.hpp"
#include "tfup/cache_builder.hpp"
#include "tfup/config.hpp"
#include "tfup/embedding_store.hpp"
#include "tfup/errors.hpp"
#include "tfup/eval_harness.hpp"
#include "tfup/msm_inference.hpp"
#include "tfup/zeroshot.hpp"

namespace tfup::cli {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

// RunConfig overrides collected from the command line.
struct ConfigFlags {
  std::string config_path;
  std::optional<double> logit_scale, gamma, theta, alpha, beta, lambda_md, learning_rate, momentum;
  std::optional<std::size_t> k, n, reduction, epochs, batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> filter, measure, tfupt_mode, optimizer, schedule;
  bool eq4_global = false;
  CLI::Option* eq4_option = nullptr;

  // Set once resolve() has run: whether the logit scale came from a flag or the file.
  bool scale_given = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file; flags override its keys")
        ->check(CLI::ExistingFile);
    cmd->add_option("--logit-scale", logit_scale, "Multiplier on cosine similarities (100)");
    cmd->add_option("--k", k, "Confident samples kept per class (16)");
    cmd->add_option("--n", n, "Prototypes kept per class (8)");
    cmd->add_option("--gamma", gamma, "Weight of the cache term (1.0)");
    cmd->add_option("--theta", theta, "Pseudo-label confidence threshold (0.95)");
    cmd->add_option("--alpha", alpha, "Image adapter residual ratio (0.2)");
    cmd->add_option("--beta", beta, "Text adapter residual ratio (0.5)");
    cmd->add_option("--lambda-md", lambda_md, "Weight of the marginal entropy loss (1.0)");
    cmd->add_option("--hidden-reduction", reduction, "Adapter hidden width = d / r (4)");
    cmd->add_option("--optimizer", optimizer, "sgd | adam");
    cmd->add_option("--learning-rate", learning_rate, "Optimizer step size (0.01)");
    cmd->add_option("--momentum", momentum, "SGD momentum (0.9)");
    cmd->add_option("--schedule", schedule, "constant | cosine");
    cmd->add_option("--epochs", epochs, "Training epochs (10)");
    cmd->add_option("--batch-size", batch_size, "Training batch size (32)");
    cmd->add_option("--seed", seed, "Random seed (0)");
    cmd->add_option("--filter", filter, "Cache filter: none | confidence | prototype | double");
    cmd->add_option("--measure", measure, "Similarity: feature | semantic | multi-level");
    cmd->add_option("--tfupt-mode", tfupt_mode, "Adapter inference: adapter | adapter+cache");
    eq4_option = cmd->add_flag("--eq4-global", eq4_global,
                               "Score prototypes against all classes' confident samples");
  }

  RunConfig resolve() {
    RunConfig cfg;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot open file: " + config_path);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(config_path + ": " + e.what());
      }
      apply_json(cfg, j);
      scale_given = j.contains("logit-scale");
    }
    auto set = [](auto& dst, const auto& src) {
      if (src) dst = *src;
    };
    set(cfg.logit_scale, logit_scale);
    set(cfg.K, k);
    set(cfg.N, n);
    set(cfg.gamma, gamma);
    set(cfg.train.theta, theta);
    set(cfg.train.alpha, alpha);
    set(cfg.train.beta, beta);
    set(cfg.train.lambda_md, lambda_md);
    set(cfg.train.reduction, reduction);
    set(cfg.train.learning_rate, learning_rate);
    set(cfg.train.momentum, momentum);
    set(cfg.train.epochs, epochs);
    set(cfg.train.batch_size, batch_size);
    set(cfg.seed, seed);
    if (filter) cfg.filter = parse_filter_mode(*filter);
    if (measure) cfg.measure = parse_measure_mode(*measure);
    if (tfupt_mode) cfg.tfupt_mode = parse_adapter_mode(*tfupt_mode);
    if (optimizer) cfg.train.optimizer = parse_optimizer(*optimizer);
    if (schedule) cfg.train.schedule = parse_schedule(*schedule);
    if (eq4_option && eq4_option->count() > 0) cfg.eq4_global = eq4_global;
    scale_given = scale_given || logit_scale.has_value();
    cfg.validate();
    return cfg;
  }
};

// Adopts the cache's logit scale unless one was given explicitly.
void align_scale(RunConfig& cfg, const ConfigFlags& flags, const CacheModel& cache) {
  if (!flags.scale_given) cfg.logit_scale = cache.meta.logit_scale;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write file: " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

void warn(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

std::string prediction_lines(const PredictionBatch& pred, const EmbeddingMatrix& feats,
                             const std::string& mode, const RunConfig& cfg) {
  ordered_json head;
  head["format"] = "tfup-predictions";
  head["version"] = 1;
  head["mode"] = mode;
  head["config"] = to_json(cfg);
  std::string out = head.dump() + "\n";
  for (std::size_t i = 0; i < feats.rows(); ++i) {
    ordered_json j;
    j["id"] = feats.id(i);
    j["label"] = pred.labels[i];
    j["confidence"] = pred.confidence[i];
    out += j.dump() + "\n";
  }
  return out;
}

void require_dims(const EmbeddingMatrix& a, const EmbeddingMatrix& b, const char* what) {
  require_same_dim(a, b, what);
}

void require_class_count(const EmbeddingMatrix& text, const std::vector<std::string>& names) {
  if (text.rows() != names.size()) {
    throw ShapeError("text embeddings have " + std::to_string(text.rows()) + " rows but " +
                     std::to_string(names.size()) + " class names were given");
  }
}

void require_valid(const DatasetManifest& man, const EmbeddingMatrix& m, Split split) {
  const auto report = validate_manifest(man, m, split);
  if (report.ok()) return;
  for (const auto& issue : report.issues) std::cerr << "manifest: " << issue.message << "\n";
  throw DataError("manifest does not match " + std::string(to_string(split)) + " embeddings (" +
                  std::to_string(report.issues.size()) + " issues)");
}

// ---- subcommands ---------------------------------------------------------

struct BuildCacheArgs {
  ConfigFlags flags;
  std::string train, text, classes, output;
};

void cmd_build_cache(BuildCacheArgs& a) {
  RunConfig cfg = a.flags.resolve();
  const auto train = load_canonical(a.train);
  const auto text = load_canonical(a.text);
  if (!a.classes.empty()) require_class_count(text, load_class_names(a.classes));
  require_dims(train, text, "build-cache");
  const CacheModel cache = build_cache(train, text, cfg);
  save_cache(cache, a.output);
  std::cout << "cache: " << cache.size() << " prototypes, " << cache.meta.num_classes
            << " classes, d=" << cache.meta.dim << ", K=" << cache.meta.K
            << ", N=" << cache.meta.N << ", filter=" << to_string(cfg.filter) << "\n";
  for (std::size_t c = 0; c < cache.meta.per_class_counts.size(); ++c) {
    std::cout << "  class " << c << ": " << cache.meta.per_class_counts[c] << "\n";
  }
  warn(cache_warnings(cache));
}

struct InferArgs {
  ConfigFlags flags;
  std::string test, text, cache, output;
  bool no_cache = false;
};

void cmd_infer(InferArgs& a) {
  RunConfig cfg = a.flags.resolve();
  const auto test = load_canonical(a.test);
  const auto text = load_canonical(a.text);
  require_dims(test, text, "infer");
  if (a.no_cache) {
    const auto pred = zeroshot_classify(test, text, LogitScale(cfg.logit_scale));
    write_text(a.output, prediction_lines(pred, test, "zeroshot", cfg));
    return;
  }
  if (a.cache.empty()) throw ConfigError("infer needs --cache or --no-cache");
  const CacheModel cache = load_cache(a.cache);
  require_dims(test, cache.proto_features, "infer");
  align_scale(cfg, a.flags, cache);
  warn(cache_warnings(cache));
  const auto pred = tfup_classify(test, cache, text, cfg);
  write_text(a.output, prediction_lines(pred, test, "tfup", cfg));
}

struct TrainArgs {
  ConfigFlags flags;
  std::string train, text, cache, output, report;
};

void cmd_train(TrainArgs& a) {
  RunConfig cfg = a.flags.resolve();
  const auto train_feats = load_canonical(a.train);
  const auto text = load_canonical(a.text);
  require_dims(train_feats, text, "train");
  const CacheModel cache = load_cache(a.cache);
  require_dims(train_feats, cache.proto_features, "train");
  align_scale(cfg, a.flags, cache);
  const auto result = train(train_feats, text, cache, cfg);
  save_adapter({result.params, cfg.seed, static_cast<std::uint32_t>(cfg.train.epochs)}, a.output);
  const std::string report_path = a.report.empty() ? a.output + ".report.jsonl" : a.report;
  write_text(report_path, train_report_lines(result.report, cfg));
  const double final_acc = result.report.epochs.empty()
                               ? result.report.initial_pseudo_accuracy
                               : result.report.epochs.back().pseudo_accuracy;
  std::cout << "trained " << cfg.train.epochs << " epochs; pseudo-label agreement "
            << result.report.initial_pseudo_accuracy << " -> " << final_acc << "\n";
}

struct EvalArgs {
  ConfigFlags flags;
  std::string train, test, text, manifest, classes, cache, checkpoint, mode, output;
  bool ablation = false;
};

void cmd_eval(EvalArgs& a) {
  RunConfig cfg = a.flags.resolve();
  const auto test = load_canonical(a.test);
  const auto text = load_canonical(a.text);
  require_dims(test, text, "eval");
  const auto manifest = load_manifest(a.manifest, a.classes);
  require_class_count(text, manifest.class_names);
  require_valid(manifest, test, Split::kTest);

  if (a.ablation) {
    if (a.train.empty()) throw ConfigError("--ablation needs --train");
    auto train_feats = load_canonical(a.train);
    require_dims(train_feats, text, "eval");
    const Fixture fx{std::move(train_feats), test, text, manifest};
    const auto reports = ablation_suite(fx, cfg);
    emit_report(reports, a.output);
    for (const auto& r : reports) std::cout << r.mode << ": " << r.accuracy << "\n";
    return;
  }

  std::string mode = a.mode;
  if (mode.empty()) {
    mode = !a.checkpoint.empty() ? to_string(cfg.tfupt_mode) : !a.cache.empty() ? "tfup" : "zeroshot";
  }
  std::optional<CacheModel> cache;
  if (!a.cache.empty()) {
    cache = load_cache(a.cache);
    require_dims(test, cache->proto_features, "eval");
    align_scale(cfg, a.flags, *cache);
  }
  PredictionBatch pred;
  if (mode == "zeroshot") {
    pred = zeroshot_classify(test, text, LogitScale(cfg.logit_scale));
  } else if (mode == "tfup") {
    if (!cache) throw ConfigError("mode tfup needs --cache");
    pred = tfup_classify(test, *cache, text, cfg);
  } else if (mode == "adapter" || mode == "adapter+cache") {
    if (a.checkpoint.empty()) throw ConfigError("mode " + mode + " needs --checkpoint");
    const auto ckpt = load_adapter(a.checkpoint);
    if (ckpt.params.image.dim() != test.dim()) {
      throw ShapeError("checkpoint dimension " + std::to_string(ckpt.params.image.dim()) +
                       " does not match embeddings " + std::to_string(test.dim()));
    }
    cfg.train.alpha = ckpt.params.alpha;
    cfg.train.beta = ckpt.params.beta;
    const AdapterMode am = parse_adapter_mode(mode);
    if (am == AdapterMode::kAdapterCache && !cache) throw ConfigError("mode adapter+cache needs --cache");
    pred = tfupt_classify(test, ckpt.params, text, cache ? *cache : CacheModel{}, cfg, am);
  } else {
    throw ConfigError("unknown eval mode: '" + mode + "'");
  }
  EvalReport report = evaluate(pred, test.ids(), manifest, mode);
  report.config = to_json(cfg);
  emit_report({report}, a.output);
  std::cout << mode << ": accuracy " << report.accuracy << " over " << report.samples << " samples\n";
}

struct SweepArgs {
  ConfigFlags flags;
  std::string train, test, text, manifest, classes, output;
  std::vector<double> alphas, betas, gammas;
  std::vector<std::size_t> ks, ns;
};

void cmd_sweep(SweepArgs& a) {
  const RunConfig base = a.flags.resolve();
  const auto train_feats = load_canonical(a.train);
  const auto test = load_canonical(a.test);
  const auto text = load_canonical(a.text);
  require_dims(train_feats, text, "sweep");
  require_dims(test, text, "sweep");
  const auto manifest = load_manifest(a.manifest, a.classes);
  require_class_count(text, manifest.class_names);
  require_valid(manifest, test, Split::kTest);

  auto or_default = []<typename T>(std::vector<T> v, T fallback) {
    if (v.empty()) v.push_back(fallback);
    return v;
  };
  const auto alphas = or_default(a.alphas, base.train.alpha);
  const auto betas = or_default(a.betas, base.train.beta);
  const auto gammas = or_default(a.gammas, base.gamma);
  const auto ks = or_default(a.ks, base.K);
  const auto ns = or_default(a.ns, base.N);

  std::vector<EvalReport> reports;
  auto record = [&](const std::string& mode, const PredictionBatch& pred, const RunConfig& cfg) {
    EvalReport r = evaluate(pred, test.ids(), manifest, mode);
    r.config = to_json(cfg);
    std::cout << mode << " alpha=" << cfg.train.alpha << " beta=" << cfg.train.beta
              << " k=" << cfg.K << " n=" << cfg.N << " gamma=" << cfg.gamma << ": " << r.accuracy
              << "\n";
    reports.push_back(std::move(r));
  };

  for (auto k : ks) {
    for (auto n : ns) {
      RunConfig cache_cfg = base;
      cache_cfg.K = k;
      cache_cfg.N = n;
      cache_cfg.validate();
      const CacheModel cache = build_cache(train_feats, text, cache_cfg);
      for (double gamma : gammas) {
        RunConfig gcfg = cache_cfg;
        gcfg.gamma = gamma;
        gcfg.validate();
        record("tfup", tfup_classify(test, cache, text, gcfg), gcfg);
        const auto pseudo = tfup_classify(train_feats, cache, text, gcfg).labels;
        for (double alpha : alphas) {
          for (double beta : betas) {
            RunConfig cfg = gcfg;
            cfg.train.alpha = alpha;
            cfg.train.beta = beta;
            cfg.validate();
            const AdapterParams init = init_adapter(test.dim(), cfg);
            record("adapter@init", tfupt_classify(test, init, text, cache, cfg, cfg.tfupt_mode), cfg);
            const auto trained = train_with_labels(train_feats, text, pseudo, cfg);
            record("adapter", tfupt_classify(test, trained.params, text, cache, cfg, cfg.tfupt_mode),
                   cfg);
          }
        }
      }
    }
  }
  emit_report(reports, a.output);
}

struct GenArgs {
  SyntheticSpec spec;
  std::string output_dir;
};

void cmd_gen_synthetic(GenArgs& a) {
  const auto fx = generate_synthetic(a.spec);
  const fs::path dir(a.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create directory " + dir.string() + ": " + ec.message());
  save_embeddings(fx.train, dir / "train.tfb");
  save_embeddings(fx.test, dir / "test.tfb");
  save_embeddings(fx.text, dir / "text.tfb");
  save_manifest(fx.manifest, dir / "manifest.csv", dir / "classes.txt");
  std::cout << "wrote " << fx.train.rows() << " train, " << fx.test.rows() << " test, "
            << fx.text.rows() << " text rows (d=" << fx.text.dim() << ") to " << dir.string()
            << "\n";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return kExitUsage;
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  return kExitData;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Training-free cache-model adaptation of vision-language classifiers over "
               "precomputed embeddings"};
  app.require_subcommand(1);

  BuildCacheArgs build;
  auto* build_cmd = app.add_subcommand("build-cache", "Build a prototype cache from training embeddings");
  build.flags.attach(build_cmd);
  build_cmd->add_option("--train", build.train, "Training embeddings (TFB)")->required();
  build_cmd->add_option("--text", build.text, "Class text embeddings (TFB)")->required();
  build_cmd->add_option("--classes", build.classes, "Class names file");
  build_cmd->add_option("--output", build.output, "Cache file to write")->required();

  InferArgs infer;
  auto* infer_cmd = app.add_subcommand("infer", "Predict labels for test embeddings");
  infer.flags.attach(infer_cmd);
  infer_cmd->add_option("--test", infer.test, "Test embeddings (TFB)")->required();
  infer_cmd->add_option("--text", infer.text, "Class text embeddings (TFB)")->required();
  infer_cmd->add_option("--cache", infer.cache, "Cache file (TFC1)");
  infer_cmd->add_flag("--no-cache", infer.no_cache, "Zero-shot prediction only");
  infer_cmd->add_option("--output", infer.output, "Predictions file to write")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Fine-tune residual adapters on pseudo-labels");
  tr.flags.attach(train_cmd);
  train_cmd->add_option("--train", tr.train, "Training embeddings (TFB)")->required();
  train_cmd->add_option("--text", tr.text, "Class text embeddings (TFB)")->required();
  train_cmd->add_option("--cache", tr.cache, "Cache file (TFC1)")->required();
  train_cmd->add_option("--output", tr.output, "Adapter checkpoint to write (TFA1)")->required();
  train_cmd->add_option("--report", tr.report, "Training report (default <output>.report.jsonl)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth");
  ev.flags.attach(eval_cmd);
  eval_cmd->add_option("--test", ev.test, "Test embeddings (TFB)")->required();
  eval_cmd->add_option("--text", ev.text, "Class text embeddings (TFB)")->required();
  eval_cmd->add_option("--manifest", ev.manifest, "Dataset manifest (CSV)")->required();
  eval_cmd->add_option("--classes", ev.classes, "Class names file")->required();
  eval_cmd->add_option("--cache", ev.cache, "Cache file (TFC1)");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Adapter checkpoint (TFA1)");
  eval_cmd->add_option("--mode", ev.mode, "zeroshot | tfup | adapter | adapter+cache");
  eval_cmd->add_option("--train", ev.train, "Training embeddings, for --ablation");
  eval_cmd->add_flag("--ablation", ev.ablation, "Run the full ablation table");
  eval_cmd->add_option("--output", ev.output, "Report file to write")->required();

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "Grid over residual ratios and cache sizes");
  sw.flags.attach(sweep_cmd);
  sweep_cmd->add_option("--train", sw.train, "Training embeddings (TFB)")->required();
  sweep_cmd->add_option("--test", sw.test, "Test embeddings (TFB)")->required();
  sweep_cmd->add_option("--text", sw.text, "Class text embeddings (TFB)")->required();
  sweep_cmd->add_option("--manifest", sw.manifest, "Dataset manifest (CSV)")->required();
  sweep_cmd->add_option("--classes", sw.classes, "Class names file")->required();
  sweep_cmd->add_option("--alphas", sw.alphas, "Comma-separated alpha grid")->delimiter(',');
  sweep_cmd->add_option("--betas", sw.betas, "Comma-separated beta grid")->delimiter(',');
  sweep_cmd->add_option("--gammas", sw.gammas, "Comma-separated gamma grid")->delimiter(',');
  sweep_cmd->add_option("--ks", sw.ks, "Comma-separated K grid")->delimiter(',');
  sweep_cmd->add_option("--ns", sw.ns, "Comma-separated N grid")->delimiter(',');
  sweep_cmd->add_option("--output", sw.output, "Report file to write")->required();

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write a planted-cluster fixture");
  gen_cmd->add_option("--num-classes", gen.spec.num_classes, "Classes (8)");
  gen_cmd->add_option("--dim", gen.spec.dim, "Embedding dimension (64)");
  gen_cmd->add_option("--train-per-class", gen.spec.train_per_class, "Training rows per class (200)");
  gen_cmd->add_option("--test-per-class", gen.spec.test_per_class, "Test rows per class (100)");
  gen_cmd->add_option("--sigma", gen.spec.sigma, "Image spread around class centers (0.6)");
  gen_cmd->add_option("--text-noise", gen.spec.text_noise, "Text offset from class centers (3.0)");
  gen_cmd->add_option("--seed", gen.spec.seed, "Random seed (7)");
  gen_cmd->add_option("--output-dir", gen.output_dir, "Directory to write into")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*build_cmd) cmd_build_cache(build);
    else if (*infer_cmd) cmd_infer(infer);
    else if (*train_cmd) cmd_train(tr);
    else if (*eval_cmd) cmd_eval(ev);
    else if (*sweep_cmd) cmd_sweep(sw);
    else if (*gen_cmd) cmd_gen_synthetic(gen);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}

}  // namespace tfup::cli
