// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "tfup/eval_harness.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_map>

#include "tfup/adapter_trainer.hpp"
#include "tfup/cache_builder.hpp"
#include "tfup/msm_inference.hpp"

namespace tfup {

namespace {

constexpr const char* kReportFormat = "tfup-eval-report";
constexpr int kReportVersion = 1;

std::vector<double> gaussian_row(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  for (double& x : v) x = n(rng);
  return v;
}

// normalize(center + spread * g / sqrt(d))
void planted_row(std::span<const double> center, double spread, std::mt19937_64& rng,
                 std::span<double> out) {
  const auto g = gaussian_row(center.size(), rng);
  const double k = spread / std::sqrt(static_cast<double>(center.size()));
  for (std::size_t j = 0; j < center.size(); ++j) out[j] = center[j] + k * g[j];
}

}  // namespace

EvalReport evaluate(std::span<const int> predicted, std::span<const int> truth,
                    std::size_t num_classes, std::string mode) {
  if (predicted.size() != truth.size()) {
    throw ShapeError("evaluate: " + std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(truth.size()) + " labels");
  }
  EvalReport r;
  r.mode = std::move(mode);
  r.samples = truth.size();
  r.confusion.assign(num_classes, std::vector<std::uint64_t>(num_classes, 0));
  std::uint64_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = static_cast<std::size_t>(truth[i]);
    const auto p = static_cast<std::size_t>(predicted[i]);
    if (t >= num_classes || p >= num_classes) throw DataError("evaluate: class index out of range");
    ++r.confusion[t][p];
    correct += t == p ? 1 : 0;
  }
  r.accuracy = r.samples == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(r.samples);
  r.per_class_accuracy.assign(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::uint64_t total = 0;
    for (auto v : r.confusion[c]) total += v;
    if (total > 0) {
      r.per_class_accuracy[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(total);
    }
  }
  return r;
}

std::vector<int> ground_truth_labels(const DatasetManifest& manifest,
                                     const std::vector<std::string>& ids) {
  std::unordered_map<std::string_view, const ManifestEntry*> by_id;
  by_id.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) by_id.emplace(e.sample_id, &e);
  std::vector<int> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end() || !it->second->class_index) {
      throw DataError("no ground truth for sample " + id);
    }
    out.push_back(*it->second->class_index);
  }
  return out;
}

EvalReport evaluate(const PredictionBatch& predictions, const std::vector<std::string>& ids,
                    const DatasetManifest& manifest, std::string mode) {
  return evaluate(predictions.labels, ground_truth_labels(manifest, ids), manifest.num_classes(),
                  std::move(mode));
}

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic fixture needs at least 2 classes");
  if (dim < 2) throw ConfigError("synthetic fixture needs dimension >= 2");
  if (!(sigma >= 0.0) || !(text_noise >= 0.0)) throw ConfigError("noise levels must be >= 0");
}

Fixture generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t C = spec.num_classes;
  const std::size_t d = spec.dim;
  std::mt19937_64 rng(spec.seed);

  Matrix centers(C, d);
  for (std::size_t c = 0; c < C; ++c) {
    const auto g = gaussian_row(d, rng);
    std::ranges::copy(g, centers.row(c).begin());
  }
  l2_normalize_rows(centers);

  Fixture fx;
  for (std::size_t c = 0; c < C; ++c) fx.manifest.class_names.push_back("class_" + std::to_string(c));

  auto make_split = [&](std::size_t per_class, Split split) {
    Matrix m(C * per_class, d);
    std::vector<std::string> ids;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t k = 0; k < per_class; ++k) {
        const std::size_t row = c * per_class + k;
        planted_row(centers.row(c), spec.sigma, rng, m.row(row));
        ids.push_back(std::string(to_string(split)) + "_" + std::to_string(c) + "_" +
                      std::to_string(k));
        fx.manifest.entries.push_back({ids.back(), split, static_cast<int>(c)});
      }
    }
    l2_normalize_rows(m);
    return EmbeddingMatrix::from_matrix(m, std::move(ids));
  };

  Matrix text(C, d);
  for (std::size_t c = 0; c < C; ++c) planted_row(centers.row(c), spec.text_noise, rng, text.row(c));
  l2_normalize_rows(text);
  std::vector<std::string> text_ids;
  for (std::size_t c = 0; c < C; ++c) text_ids.push_back("text_" + std::to_string(c));
  fx.text = EmbeddingMatrix::from_matrix(text, std::move(text_ids));

  fx.train = make_split(spec.train_per_class, Split::kTrain);
  fx.test = make_split(spec.test_per_class, Split::kTest);
  return fx;
}

std::vector<EvalReport> ablation_suite(const Fixture& fixture, const RunConfig& cfg) {
  cfg.validate();
  const auto truth = ground_truth_labels(fixture.manifest, fixture.test.ids());
  const std::size_t C = fixture.text.rows();
  std::vector<EvalReport> out;

  auto record = [&](const std::string& name, const PredictionBatch& pred, const RunConfig& used) {
    EvalReport r = evaluate(pred.labels, truth, C, name);
    r.config = to_json(used);
    out.push_back(std::move(r));
  };

  auto with = [&](auto mutate) {
    RunConfig c = cfg;
    mutate(c);
    return c;
  };

  record("zeroshot",
         zeroshot_classify(fixture.test, fixture.text, LogitScale(cfg.logit_scale)), cfg);

  const RunConfig fsm = with([](RunConfig& c) {
    c.filter = FilterMode::kDouble;
    c.measure = MeasureMode::kFeature;
  });
  const CacheModel cache = build_cache(fixture.train, fixture.text, fsm);
  record("fcm+fsm", tfup_classify(fixture.test, cache, fixture.text, fsm), fsm);

  const RunConfig msm = with([](RunConfig& c) {
    c.filter = FilterMode::kDouble;
    c.measure = MeasureMode::kMultiLevel;
  });
  record("fcm+msm", tfup_classify(fixture.test, cache, fixture.text, msm), msm);

  const auto pseudo = tfup_classify(fixture.train, cache, fixture.text, msm).labels;
  const RunConfig no_md = with([&](RunConfig& c) {
    c = msm;
    c.train.lambda_md = 0.0;
  });
  const auto trained_no_md = train_with_labels(fixture.train, fixture.text, pseudo, no_md);
  record("tfup-t(-md)",
         tfupt_classify(fixture.test, trained_no_md.params, fixture.text, cache, no_md,
                        no_md.tfupt_mode),
         no_md);
  const auto trained = train_with_labels(fixture.train, fixture.text, pseudo, msm);
  record("tfup-t",
         tfupt_classify(fixture.test, trained.params, fixture.text, cache, msm, msm.tfupt_mode),
         msm);

  for (auto mode : {FilterMode::kNone, FilterMode::kConfidence, FilterMode::kPrototype,
                    FilterMode::kDouble}) {
    const RunConfig c = with([&](RunConfig& x) {
      x.filter = mode;
      x.measure = MeasureMode::kMultiLevel;
    });
    const CacheModel cm = build_cache(fixture.train, fixture.text, c);
    record("filter:" + to_string(mode), tfup_classify(fixture.test, cm, fixture.text, c), c);
  }

  for (auto measure : {MeasureMode::kFeature, MeasureMode::kSemantic, MeasureMode::kMultiLevel}) {
    const RunConfig c = with([&](RunConfig& x) {
      x.filter = FilterMode::kDouble;
      x.measure = measure;
    });
    record("measure:" + to_string(measure), tfup_classify(fixture.test, cache, fixture.text, c), c);
  }
  return out;
}

std::string report_lines(const std::vector<EvalReport>& reports) {
  nlohmann::ordered_json head;
  head["format"] = kReportFormat;
  head["version"] = kReportVersion;
  head["count"] = reports.size();
  std::string out = head.dump() + "\n";
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["mode"] = r.mode;
    j["accuracy"] = r.accuracy;
    j["samples"] = r.samples;
    j["per_class_accuracy"] = r.per_class_accuracy;
    j["confusion"] = r.confusion;
    j["config"] = r.config.is_null() ? nlohmann::ordered_json::object() : r.config;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<EvalReport> parse_report_lines(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("report: missing header line");
  nlohmann::ordered_json head;
  std::vector<EvalReport> out;
  try {
    head = nlohmann::ordered_json::parse(line);
    if (head.at("format") != kReportFormat) throw DataError("report: unknown format");
    if (head.at("version") != kReportVersion) throw DataError("report: unsupported version");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::ordered_json::parse(line);
      EvalReport r;
      r.mode = j.at("mode").get<std::string>();
      r.accuracy = j.at("accuracy").get<double>();
      r.samples = j.at("samples").get<std::uint64_t>();
      r.per_class_accuracy = j.at("per_class_accuracy").get<std::vector<double>>();
      r.confusion = j.at("confusion").get<std::vector<std::vector<std::uint64_t>>>();
      r.config = j.at("config");
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  if (out.size() != head.at("count").get<std::size_t>()) {
    throw DataError("report: record count does not match header");
  }
  return out;
}

void emit_report(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write file: " + path.string());
  out << report_lines(reports);
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<EvalReport> read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_report_lines(ss.str());
}

}  // namespace tfup
