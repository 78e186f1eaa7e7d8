#include "serforge/train.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "serforge/gradcheck.hpp"
#include "serforge/rng.hpp"

using namespace serforge;
using Catch::Approx;

namespace {

// Synthetic reduced-scale dataset; owns features and ids.
struct SynthData {
  std::vector<featurize::FeatureSet> features;
  std::vector<std::string> ids;
  std::vector<train::Example> examples;
};

Tensor<float> random_feature(Rng& rng, std::size_t h, std::size_t w, double scale) {
  Tensor<float> t({h, w});
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<float>(rng.uniform(-scale, scale));
  }
  return t;
}

// `separable` stamps a strong class-dependent block into each input so a
// small model can learn the mapping; otherwise inputs are pure noise.
SynthData make_synth(const models::ModelConfig& cfg, std::size_t n,
                     std::uint64_t seed, bool separable) {
  SynthData data;
  data.features.resize(n);
  data.ids.resize(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 4);
    featurize::FeatureSet& fs = data.features[i];
    if (cfg.needs_spec()) fs.spectrogram = random_feature(rng, cfg.spec_h, cfg.spec_w, 1.0);
    if (cfg.needs_ds2()) {
      fs.spectrogram_ds2 = random_feature(rng, cfg.ds2_h(), cfg.ds2_w(), 1.0);
    }
    if (cfg.needs_mfcc()) fs.mfcc = random_feature(rng, cfg.mfcc_h, cfg.mfcc_w, 1.0);
    if (cfg.needs_text()) fs.text = random_feature(rng, cfg.text_words, cfg.text_dim, 0.3);
    if (separable) {
      const std::size_t band = static_cast<std::size_t>(label);
      if (cfg.needs_mfcc()) {
        for (std::size_t r = band * 4; r < band * 4 + 4 && r < cfg.mfcc_h; ++r) {
          for (std::size_t c = 0; c < cfg.mfcc_w; ++c) fs.mfcc(r, c) += 4.0f;
        }
      }
      if (cfg.needs_spec()) {
        for (std::size_t r = band * 8; r < band * 8 + 8 && r < cfg.spec_h; ++r) {
          for (std::size_t c = 0; c < cfg.spec_w; ++c) fs.spectrogram(r, c) += 4.0f;
        }
      }
    }
    data.ids[i] = "utt" + std::to_string(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    data.examples.push_back(
        {&data.features[i], static_cast<int>(i % 4), &data.ids[i]});
  }
  return data;
}

}  // namespace

TEST_CASE("evaluate_predictions computes the percentage confusion matrix",
          "[train][metrics]") {
  SECTION("perfect predictor: identity confusion, both accuracies 1") {
    std::vector<int> truth = {0, 1, 2, 3, 0, 1, 2, 3};
    const train::FoldReport r = train::evaluate_predictions(truth, truth);
    REQUIRE(r.overall_accuracy == 1.0);
    REQUIRE(r.class_accuracy == 1.0);
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t p = 0; p < 4; ++p) {
        REQUIRE(r.confusion[c][p] == (c == p ? 100.0 : 0.0));
      }
    }
  }

  SECTION("always-neutral on the 48.8/12.3/26.9/12.0 mix") {
    std::vector<int> truth;
    for (int i = 0; i < 488; ++i) truth.push_back(0);
    for (int i = 0; i < 123; ++i) truth.push_back(1);
    for (int i = 0; i < 269; ++i) truth.push_back(2);
    for (int i = 0; i < 120; ++i) truth.push_back(3);
    const std::vector<int> preds(truth.size(), 0);
    const train::FoldReport r = train::evaluate_predictions(truth, preds);
    REQUIRE(r.overall_accuracy == Approx(0.488).margin(1e-12));
    REQUIRE(r.class_accuracy == Approx(0.25).margin(1e-12));
    for (std::size_t c = 0; c < 4; ++c) {
      double row = 0.0;
      for (std::size_t p = 0; p < 4; ++p) row += r.confusion[c][p];
      REQUIRE(row == Approx(100.0).margin(0.01));
    }
  }

  SECTION("hand-tallied ten-prediction fixture") {
    //  true:  0 0 0 1 1 2 2 2 3 3
    //  pred:  0 1 0 1 2 2 2 0 3 0
    const std::vector<int> truth = {0, 0, 0, 1, 1, 2, 2, 2, 3, 3};
    const std::vector<int> preds = {0, 1, 0, 1, 2, 2, 2, 0, 3, 0};
    const train::FoldReport r = train::evaluate_predictions(truth, preds);
    REQUIRE(r.overall_accuracy == Approx(6.0 / 10.0));
    REQUIRE(r.confusion[0][0] == Approx(100.0 * 2 / 3));
    REQUIRE(r.confusion[0][1] == Approx(100.0 * 1 / 3));
    REQUIRE(r.confusion[1][1] == Approx(50.0));
    REQUIRE(r.confusion[1][2] == Approx(50.0));
    REQUIRE(r.confusion[2][2] == Approx(100.0 * 2 / 3));
    REQUIRE(r.confusion[2][0] == Approx(100.0 * 1 / 3));
    REQUIRE(r.confusion[3][3] == Approx(50.0));
    REQUIRE(r.confusion[3][0] == Approx(50.0));
    const double class_acc = (2.0 / 3.0 + 0.5 + 2.0 / 3.0 + 0.5) / 4.0;
    REQUIRE(r.class_accuracy == Approx(class_acc).margin(1e-12));
  }

  SECTION("overall equals the recall-weighted class mix") {
    Rng rng(5);
    std::vector<int> truth, preds;
    for (int i = 0; i < 200; ++i) {
      truth.push_back(static_cast<int>(rng.index(4)));
      preds.push_back(static_cast<int>(rng.index(4)));
    }
    const train::FoldReport r = train::evaluate_predictions(truth, preds);
    std::array<double, 4> class_counts{};
    for (int t : truth) class_counts[static_cast<std::size_t>(t)] += 1.0;
    double weighted = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      weighted += class_counts[c] / 200.0 * r.confusion[c][c] / 100.0;
    }
    REQUIRE(r.overall_accuracy == Approx(weighted).margin(1e-12));
  }

  SECTION("absent class: zero row, excluded from the mean, warned") {
    const std::vector<int> truth = {0, 0, 1, 1};
    const std::vector<int> preds = {0, 0, 1, 0};
    std::ostringstream warnings;
    const train::FoldReport r = train::evaluate_predictions(truth, preds, &warnings);
    for (std::size_t p = 0; p < 4; ++p) {
      REQUIRE(r.confusion[2][p] == 0.0);
      REQUIRE(r.confusion[3][p] == 0.0);
    }
    REQUIRE(r.class_accuracy == Approx((1.0 + 0.5) / 2.0));
    REQUIRE(warnings.str().find("sadness") != std::string::npos);
    REQUIRE(warnings.str().find("anger") != std::string::npos);
  }
}

TEST_CASE("train_model contract", "[train][loop]") {
  const models::ModelConfig cfg = gradcheck::reduced_config(models::ModelVariant::kM3Mfcc);

  SECTION("zero epochs rejected") {
    train::TrainConfig tc;
    tc.epochs = 0;
    REQUIRE_THROWS_AS(tc.validate(), std::invalid_argument);
  }

  SECTION("equal seeds give bit-identical loss histories") {
    SynthData data = make_synth(cfg, 12, 3, true);
    train::TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 4;
    tc.seed = 11;
    tc.early_stop_patience.reset();

    std::vector<train::EpochStats> histories[2];
    for (int run = 0; run < 2; ++run) {
      models::ModelGraph<float> graph(cfg, Rng(tc.seed));
      histories[run] = train::train_model(graph, data.examples, tc).history;
    }
    REQUIRE(histories[0].size() == histories[1].size());
    for (std::size_t e = 0; e < histories[0].size(); ++e) {
      REQUIRE(histories[0][e].loss == histories[1][e].loss);
      REQUIRE(histories[0][e].train_accuracy == histories[1][e].train_accuracy);
    }
  }

  SECTION("a trailing batch of one is absorbed, not fed to batch norm alone") {
    SynthData data = make_synth(cfg, 9, 4, false);  // 9 = 2 * 4 + 1
    train::TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    models::ModelGraph<float> graph(cfg, Rng(0));
    REQUIRE_NOTHROW(train::train_model(graph, data.examples, tc));
  }

  SECTION("non-finite loss aborts with coordinates") {
    SynthData data = make_synth(cfg, 8, 5, false);
    train::TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    models::ModelGraph<float> graph(cfg, Rng(0));
    for (auto& [name, p] : graph.parameters()) {
      if (name == "head.out.weight") {
        p->value[0] = std::numeric_limits<float>::infinity();
      }
    }
    REQUIRE_THROWS_WITH(train::train_model(graph, data.examples, tc),
                        Catch::Matchers::ContainsSubstring("NaN loss at epoch 1"));
  }

  SECTION("non-finite gradients abort with coordinates") {
    SynthData data = make_synth(cfg, 8, 5, false);
    train::TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    models::ModelGraph<float> graph(cfg, Rng(0));
    graph.parameters()[0].second->value[0] = std::numeric_limits<float>::infinity();
    REQUIRE_THROWS_WITH(train::train_model(graph, data.examples, tc),
                        Catch::Matchers::ContainsSubstring("epoch 1"));
  }

  SECTION("reduced m3 memorizes 16 random examples within 300 epochs") {
    SynthData data = make_synth(cfg, 16, 6, false);
    train::TrainConfig tc;
    tc.epochs = 300;
    tc.batch_size = 16;
    tc.seed = 1;
    tc.early_stop_patience.reset();
    models::ModelGraph<float> graph(cfg, Rng(1));
    const train::TrainResult result = train::train_model(graph, data.examples, tc);
    double best = 0.0;
    for (const auto& stats : result.history) best = std::max(best, stats.train_accuracy);
    REQUIRE(best == 1.0);
  }
}

TEST_CASE("cross_validate aggregates raw counts across folds", "[train][xval]") {
  const models::ModelConfig cfg = gradcheck::reduced_config(models::ModelVariant::kM3Mfcc);
  SynthData data = make_synth(cfg, 100, 7, false);

  data::FoldPlan plan;
  plan.k = 5;
  // deterministic assignment independent of the kfold module
  for (std::size_t i = 0; i < 100; ++i) plan.assignments[data.ids[i]] = (i / 4) % 5;

  SECTION("every record is tested exactly once") {
    const train::Trainer constant = [](const std::vector<train::Example>&,
                                       std::uint64_t) -> train::Predictor {
      return [](const std::vector<train::Example>& test) {
        return std::vector<int>(test.size(), 0);
      };
    };
    const train::EvalReport report =
        train::cross_validate(data.examples, plan, constant, 0);
    REQUIRE(report.per_fold.size() == 5);
    std::size_t total = 0;
    for (const auto& fold : report.per_fold) total += fold.n_examples;
    REQUIRE(total == 100);
    REQUIRE(report.n_examples == 100);
    REQUIRE(report.overall_accuracy == Approx(0.25));  // 25 of each class
  }

  SECTION("a data-independent predictor aggregates to the single-pass result") {
    const train::Trainer constant = [](const std::vector<train::Example>&,
                                       std::uint64_t) -> train::Predictor {
      return [](const std::vector<train::Example>& test) {
        std::vector<int> preds;
        for (const train::Example& e : test) {
          preds.push_back(e.id->size() % 4);  // fixed function of the example
        }
        return preds;
      };
    };
    const train::EvalReport aggregated =
        train::cross_validate(data.examples, plan, constant, 0);

    std::vector<int> truth, preds;
    for (const train::Example& e : data.examples) {
      truth.push_back(e.label);
      preds.push_back(e.id->size() % 4);
    }
    const train::FoldReport single = train::evaluate_predictions(truth, preds);
    REQUIRE(aggregated.overall_accuracy == Approx(single.overall_accuracy).margin(1e-12));
    REQUIRE(aggregated.class_accuracy == Approx(single.class_accuracy).margin(1e-12));
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t p = 0; p < 4; ++p) {
        REQUIRE(aggregated.confusion[c][p] == Approx(single.confusion[c][p]).margin(1e-12));
      }
    }
  }

  SECTION("model-backed cross-validation is deterministic") {
    SynthData small = make_synth(cfg, 24, 8, true);
    data::FoldPlan small_plan;
    small_plan.k = 3;
    for (std::size_t i = 0; i < 24; ++i) small_plan.assignments[small.ids[i]] = i % 3;

    train::TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    std::string dumps[2];
    for (int run = 0; run < 2; ++run) {
      const train::EvalReport report = train::cross_validate(
          small.examples, small_plan, train::model_trainer(cfg, tc), 5);
      dumps[run] = train::to_json(report).dump();
    }
    REQUIRE(dumps[0] == dumps[1]);
  }
}

TEST_CASE("majority predictors score higher overall than class accuracy",
          "[train][metrics]") {
  // imbalanced truth, majority class 0
  std::vector<int> truth;
  for (int i = 0; i < 70; ++i) truth.push_back(0);
  for (int i = 0; i < 10; ++i) truth.push_back(1);
  for (int i = 0; i < 10; ++i) truth.push_back(2);
  for (int i = 0; i < 10; ++i) truth.push_back(3);
  const std::vector<int> preds(truth.size(), 0);
  const train::FoldReport r = train::evaluate_predictions(truth, preds);
  REQUIRE(r.overall_accuracy == Approx(0.7));
  REQUIRE(r.class_accuracy == Approx(0.25));
  REQUIRE(r.overall_accuracy > r.class_accuracy);
}

TEST_CASE("report serialization carries every field", "[train][report]") {
  train::EvalReport report;
  report.overall_accuracy = 0.75;
  report.class_accuracy = 0.5;
  report.confusion[0][0] = 100.0;
  report.n_examples = 8;
  train::FoldReport fold;
  fold.overall_accuracy = 0.75;
  fold.n_examples = 8;
  report.per_fold.push_back(fold);

  const nlohmann::ordered_json j = train::to_json(report);
  REQUIRE(j.at("overall_accuracy") == 0.75);
  REQUIRE(j.at("class_accuracy") == 0.5);
  REQUIRE(j.at("confusion").size() == 4);
  REQUIRE(j.at("per_fold").size() == 1);
  REQUIRE(j.at("n_examples") == 8);

  const std::string table = train::render_tables(report, "Model m4c");
  REQUIRE(table.find("Model m4c") != std::string::npos);
  REQUIRE(table.find("Overall Accuracy") != std::string::npos);
  REQUIRE(table.find("neutral") != std::string::npos);
}
