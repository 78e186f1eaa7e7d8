#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "serforge/data.hpp"
#include "serforge/errors.hpp"
#include "serforge/featurize.hpp"
#include "serforge/models.hpp"
#include "serforge/nn.hpp"
#include "serforge/rng.hpp"

namespace serforge::train {

inline constexpr std::size_t kClasses = data::kNumClasses;

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double dropout_rate = 0.5;
  std::optional<std::size_t> early_stop_patience = 10;
  bool deterministic = true;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (batch_size < 2) {
      throw std::invalid_argument("train config: batch_size must be >= 2 (batch norm)");
    }
  }
};

// One training/evaluation example: borrowed features plus the class id.
struct Example {
  const featurize::FeatureSet* features = nullptr;
  int label = 0;
  const std::string* id = nullptr;
};

struct EpochStats {
  double loss = 0.0;
  double train_accuracy = 0.0;
};

struct FoldReport {
  double overall_accuracy = 0.0;
  double class_accuracy = 0.0;
  std::array<std::array<double, kClasses>, kClasses> confusion{};  // row %
  std::size_t n_examples = 0;
};

struct EvalReport {
  double overall_accuracy = 0.0;
  double class_accuracy = 0.0;
  std::array<std::array<double, kClasses>, kClasses> confusion{};  // row %
  std::vector<FoldReport> per_fold;
  std::size_t n_examples = 0;
};

// --- batching ---------------------------------------------------------------

inline models::Batch<float> make_batch(const std::vector<Example>& examples,
                                       const std::vector<std::size_t>& indices,
                                       const models::ModelConfig& cfg) {
  const std::size_t batch = indices.size();
  models::Batch<float> out;
  out.labels.resize(batch);

  auto fill = [&](Tensor<float>& dst, std::size_t h, std::size_t w,
                  const Tensor<float> featurize::FeatureSet::* member, const char* what) {
    dst = Tensor<float>({batch, 1, h, w});
    for (std::size_t b = 0; b < batch; ++b) {
      const Tensor<float>& src = examples[indices[b]].features->*member;
      if (src.rank() != 2 || src.dim(0) != h || src.dim(1) != w) {
        throw DataError(std::string("example '") +
                        (examples[indices[b]].id ? *examples[indices[b]].id : "?") +
                        "' " + what + " feature has shape " +
                        dims_to_string(src.dims()) + ", expected " +
                        std::to_string(h) + "x" + std::to_string(w));
      }
      std::copy(src.data(), src.data() + src.size(),
                dst.data() + b * src.size());
    }
  };

  if (cfg.needs_spec()) {
    fill(out.spec, cfg.spec_h, cfg.spec_w, &featurize::FeatureSet::spectrogram,
         "spectrogram");
  }
  if (cfg.needs_ds2()) {
    fill(out.ds2, cfg.ds2_h(), cfg.ds2_w(), &featurize::FeatureSet::spectrogram_ds2,
         "downsampled spectrogram");
  }
  if (cfg.needs_mfcc()) {
    fill(out.mfcc, cfg.mfcc_h, cfg.mfcc_w, &featurize::FeatureSet::mfcc, "mfcc");
  }
  if (cfg.needs_text()) {
    fill(out.text, cfg.text_words, cfg.text_dim, &featurize::FeatureSet::text, "text");
  }
  for (std::size_t b = 0; b < batch; ++b) out.labels[b] = examples[indices[b]].label;
  return out;
}

// --- training ---------------------------------------------------------------

struct TrainResult {
  std::vector<EpochStats> history;
};

// Seeded-shuffle minibatch loop: forward in Train mode, softmax
// cross-entropy, backward, Adadelta. A trailing batch of one example is
// absorbed into the previous batch to honor batch norm's B >= 2. Optional
// early stop after `patience` epochs without a training-loss improvement.
inline TrainResult train_model(models::ModelGraph<float>& graph,
                               const std::vector<Example>& train_set,
                               const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train_model: empty training set");
  if (train_set.size() < 2) {
    throw std::invalid_argument("train_model: need >= 2 examples (batch norm)");
  }

  std::vector<nn::Parameter<float>*> params = graph.parameter_ptrs();
  Rng shuffle_rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  double best_loss = 1e300;
  std::size_t stale = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);

    std::vector<std::pair<std::size_t, std::size_t>> batches;  // [begin, end)
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      batches.emplace_back(begin, std::min(begin + config.batch_size, order.size()));
    }
    if (batches.size() > 1 && batches.back().second - batches.back().first == 1) {
      batches[batches.size() - 2].second = order.size();
      batches.pop_back();
    }

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto [begin, end] = batches[bi];
      std::vector<std::size_t> indices(order.begin() + begin, order.begin() + end);
      models::Batch<float> batch = make_batch(train_set, indices, graph.config());

      Tensor<float> logits = graph.forward(batch, nn::LayerMode::kTrain);
      nn::SoftmaxLoss<float> loss = nn::softmax_cross_entropy(logits, batch.labels);
      if (!std::isfinite(loss.loss)) {
        throw NumericalError("NaN loss at epoch " + std::to_string(epoch + 1) +
                             ", batch " + std::to_string(bi + 1));
      }
      loss_sum += static_cast<double>(loss.loss) * static_cast<double>(indices.size());
      for (std::size_t b = 0; b < indices.size(); ++b) {
        int arg = 0;
        for (std::size_t c = 1; c < kClasses; ++c) {
          if (logits(b, c) > logits(b, static_cast<std::size_t>(arg))) {
            arg = static_cast<int>(c);
          }
        }
        if (arg == batch.labels[b]) ++correct;
      }

      graph.backward(loss.grad_logits);
      try {
        nn::adadelta_step(params);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at epoch " +
                             std::to_string(epoch + 1) + ", batch " +
                             std::to_string(bi + 1));
      }
    }

    EpochStats stats;
    stats.loss = loss_sum / static_cast<double>(train_set.size());
    stats.train_accuracy =
        static_cast<double>(correct) / static_cast<double>(train_set.size());
    result.history.push_back(stats);

    if (config.early_stop_patience) {
      if (stats.loss < best_loss) {
        best_loss = stats.loss;
        stale = 0;
      } else if (++stale >= *config.early_stop_patience) {
        break;
      }
    }
  }
  return result;
}

// --- metrics ----------------------------------------------------------------

// Row-normalized percentage confusion matrix plus overall accuracy
// (count-based) and class accuracy (mean of per-class recalls). Classes
// absent from the truth are reported as all-zero rows and excluded from
// the class-accuracy mean.
inline FoldReport evaluate_predictions(const std::vector<int>& truth,
                                       const std::vector<int>& predicted,
                                       std::ostream* warnings = nullptr) {
  if (truth.empty() || truth.size() != predicted.size()) {
    throw std::invalid_argument("evaluate_predictions: need equal non-empty label lists");
  }
  std::array<std::array<std::size_t, kClasses>, kClasses> counts{};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= static_cast<int>(kClasses) || predicted[i] < 0 ||
        predicted[i] >= static_cast<int>(kClasses)) {
      throw std::invalid_argument("evaluate_predictions: label out of range");
    }
    ++counts[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
    if (truth[i] == predicted[i]) ++correct;
  }

  FoldReport report;
  report.n_examples = truth.size();
  report.overall_accuracy =
      static_cast<double>(correct) / static_cast<double>(truth.size());

  double recall_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < kClasses; ++c) {
    std::size_t row_total = 0;
    for (std::size_t p = 0; p < kClasses; ++p) row_total += counts[c][p];
    if (row_total == 0) {
      if (warnings) {
        *warnings << "warning: class " << data::kLabelNames[c]
                  << " absent from the test set; excluded from class accuracy\n";
      }
      continue;
    }
    ++present;
    for (std::size_t p = 0; p < kClasses; ++p) {
      report.confusion[c][p] = 100.0 * static_cast<double>(counts[c][p]) /
                               static_cast<double>(row_total);
    }
    recall_sum += report.confusion[c][c] / 100.0;
  }
  report.class_accuracy = present > 0 ? recall_sum / static_cast<double>(present) : 0.0;
  return report;
}

// Eval-mode predictions; argmax ties break toward the lowest class index.
inline std::vector<int> predict(models::ModelGraph<float>& graph,
                                const std::vector<Example>& examples,
                                std::size_t batch_size = 32) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, examples.size());
    std::vector<std::size_t> indices;
    for (std::size_t i = begin; i < end; ++i) indices.push_back(i);
    models::Batch<float> batch = make_batch(examples, indices, graph.config());
    Tensor<float> logits = graph.forward(batch, nn::LayerMode::kEval);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      int arg = 0;
      for (std::size_t c = 1; c < kClasses; ++c) {
        if (logits(b, c) > logits(b, static_cast<std::size_t>(arg))) {
          arg = static_cast<int>(c);
        }
      }
      out.push_back(arg);
    }
  }
  return out;
}

inline EvalReport single_report(const FoldReport& fold) {
  EvalReport report;
  report.overall_accuracy = fold.overall_accuracy;
  report.class_accuracy = fold.class_accuracy;
  report.confusion = fold.confusion;
  report.n_examples = fold.n_examples;
  return report;
}

inline EvalReport evaluate(models::ModelGraph<float>& graph,
                           const std::vector<Example>& test_set,
                           std::ostream* warnings = nullptr) {
  if (test_set.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::vector<int> truth;
  truth.reserve(test_set.size());
  for (const Example& e : test_set) truth.push_back(e.label);
  return single_report(evaluate_predictions(truth, predict(graph, test_set), warnings));
}

// --- cross-validation --------------------------------------------------------

// A trainer returns an Eval-mode predictor for one fold; injected so the
// machinery is testable with data-independent predictors.
using Predictor = std::function<std::vector<int>(const std::vector<Example>&)>;
using Trainer = std::function<Predictor(const std::vector<Example>& train_fold,
                                        std::uint64_t fold_seed)>;

// Per fold: train on the other k-1 folds, evaluate on the held-out fold.
// The aggregate confusion sums raw counts before row-normalizing; overall
// accuracy aggregates over total counts. fold_seed = seed + fold index.
inline EvalReport cross_validate(const std::vector<Example>& examples,
                                 const data::FoldPlan& plan, const Trainer& trainer,
                                 std::uint64_t seed,
                                 std::ostream* warnings = nullptr) {
  EvalReport report;
  std::vector<int> all_truth, all_pred;

  for (std::size_t fold = 0; fold < plan.k; ++fold) {
    std::vector<Example> train_set, test_set;
    for (const Example& e : examples) {
      auto it = plan.assignments.find(*e.id);
      if (it == plan.assignments.end()) {
        throw DataError("cross_validate: id '" + *e.id + "' missing from fold plan");
      }
      (it->second == fold ? test_set : train_set).push_back(e);
    }
    if (test_set.empty() || train_set.empty()) {
      throw DataError("cross_validate: fold " + std::to_string(fold) +
                      " has an empty split");
    }

    Predictor predictor = trainer(train_set, seed + fold);
    std::vector<int> preds = predictor(test_set);
    std::vector<int> truth;
    truth.reserve(test_set.size());
    for (const Example& e : test_set) truth.push_back(e.label);

    report.per_fold.push_back(evaluate_predictions(truth, preds, warnings));
    all_truth.insert(all_truth.end(), truth.begin(), truth.end());
    all_pred.insert(all_pred.end(), preds.begin(), preds.end());
  }

  const FoldReport aggregate = evaluate_predictions(all_truth, all_pred, warnings);
  report.overall_accuracy = aggregate.overall_accuracy;
  report.class_accuracy = aggregate.class_accuracy;
  report.confusion = aggregate.confusion;
  report.n_examples = aggregate.n_examples;
  return report;
}

// Concrete trainer: a fresh graph per fold, seeded by fold_seed.
inline Trainer model_trainer(const models::ModelConfig& model_cfg,
                             const TrainConfig& train_cfg,
                             std::vector<EpochStats>* last_history = nullptr) {
  return [model_cfg, train_cfg, last_history](const std::vector<Example>& train_set,
                                              std::uint64_t fold_seed) -> Predictor {
    auto graph = std::make_shared<models::ModelGraph<float>>(model_cfg, Rng(fold_seed));
    TrainConfig cfg = train_cfg;
    cfg.seed = fold_seed;
    TrainResult result = train_model(*graph, train_set, cfg);
    if (last_history) *last_history = result.history;
    return [graph](const std::vector<Example>& test_set) {
      return predict(*graph, test_set);
    };
  };
}

// --- report serialization ----------------------------------------------------

inline nlohmann::ordered_json fold_to_json(const FoldReport& fold) {
  nlohmann::ordered_json j;
  j["overall_accuracy"] = fold.overall_accuracy;
  j["class_accuracy"] = fold.class_accuracy;
  j["confusion"] = fold.confusion;
  j["n_examples"] = fold.n_examples;
  return j;
}

inline nlohmann::ordered_json to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["overall_accuracy"] = report.overall_accuracy;
  j["class_accuracy"] = report.class_accuracy;
  j["confusion"] = report.confusion;
  j["per_fold"] = nlohmann::ordered_json::array();
  for (const FoldReport& fold : report.per_fold) {
    j["per_fold"].push_back(fold_to_json(fold));
  }
  j["n_examples"] = report.n_examples;
  return j;
}

// Human-readable summary plus the row-percentage confusion matrix.
inline std::string render_tables(const EvalReport& report, const std::string& name) {
  char buf[256];
  std::string out;
  out += "Accuracy summary\n";
  out += "Method            Overall Accuracy  Class Accuracy\n";
  std::snprintf(buf, sizeof buf, "%-18s%-18.1f%.1f\n", name.c_str(),
                100.0 * report.overall_accuracy, 100.0 * report.class_accuracy);
  out += buf;
  out += "\nConfusion matrix in percentage (rows: true class)\n";
  std::snprintf(buf, sizeof buf, "%-12s", "");
  out += buf;
  for (std::size_t p = 0; p < kClasses; ++p) {
    std::snprintf(buf, sizeof buf, "%-12s", data::kLabelNames[p]);
    out += buf;
  }
  out += "\n";
  for (std::size_t c = 0; c < kClasses; ++c) {
    std::snprintf(buf, sizeof buf, "%-12s", data::kLabelNames[c]);
    out += buf;
    for (std::size_t p = 0; p < kClasses; ++p) {
      std::snprintf(buf, sizeof buf, "%-12.2f", report.confusion[c][p]);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace serforge::train
