#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "serforge/data.hpp"
#include "serforge/errors.hpp"
#include "serforge/featurize.hpp"
#include "serforge/gradcheck.hpp"
#include "serforge/models.hpp"
#include "serforge/threading.hpp"
#include "serforge/train.hpp"

namespace serforge::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

// Merged settings: built-in defaults, overridden by `key = value` config
// files, overridden by command-line flags. Unknown keys are rejected and
// every run logs the fully resolved set.
struct RunConfig {
  // paths
  std::string manifest;
  std::string embeddings;
  std::string cache_dir = "cache";
  std::string checkpoint_dir = "checkpoints";
  std::string report_path;
  std::string checkpoint_path;
  std::string loss_log_path;

  // dsp
  double sample_rate = dsp::kDefaultSampleRate;
  std::size_t n_fft = dsp::kDefaultNfft;
  std::size_t hop = dsp::kDefaultHop;
  std::size_t n_mels = dsp::kDefaultNmels;
  std::size_t n_mfcc = dsp::kDefaultNmfcc;
  double fmin = 0.0;
  double fmax = 0.0;

  // model
  std::string variant = "m4c";
  std::size_t classes = 4;
  std::string spec_kernels = "12x16,18x24,24x32,30x40";
  std::string mfcc_kernels = "4x6,6x8,8x10,10x12";
  std::size_t kernels_per_path = 200;
  std::string text_kernel_heights = "12,8,6,3";
  std::size_t text_filters_per_size = 100;
  std::size_t text_fc_size = 200;
  std::size_t fc1_size = 400;
  std::size_t fc2_size = 200;
  double dropout_rate = 0.5;
  bool finetune_embeddings = false;

  // train
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t k = 5;
  long early_stop_patience = 10;  // < 0 disables
  bool deterministic = false;

  // featurize
  std::string kinds;  // comma list; empty selects spec,mfcc,ds2 (+text with embeddings)
  bool force = false;
  bool strict = false;
};

namespace detail {

inline bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw UsageError("config key '" + key + "' expects a boolean, got '" + value + "'");
}

template <typename T>
T parse_number(const std::string& value, const std::string& key) {
  std::istringstream ss(value);
  T out{};
  ss >> out;
  if (ss.fail() || !ss.eof()) {
    throw UsageError("config key '" + key + "' expects a number, got '" + value + "'");
  }
  return out;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  return parts;
}

inline std::vector<models::KernelSize> parse_kernel_list(const std::string& s,
                                                         const std::string& key) {
  std::vector<models::KernelSize> out;
  for (const std::string& part : split(s, ',')) {
    const auto hw = split(part, 'x');
    if (hw.size() != 2) {
      throw UsageError("config key '" + key + "' expects HxW pairs, got '" + part + "'");
    }
    out.push_back({parse_number<std::size_t>(hw[0], key),
                   parse_number<std::size_t>(hw[1], key)});
  }
  if (out.empty()) throw UsageError("config key '" + key + "' is empty");
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace detail

inline void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  if (key == "manifest") cfg.manifest = value;
  else if (key == "embeddings") cfg.embeddings = value;
  else if (key == "cache_dir") cfg.cache_dir = value;
  else if (key == "checkpoint_dir") cfg.checkpoint_dir = value;
  else if (key == "report_path") cfg.report_path = value;
  else if (key == "checkpoint_path") cfg.checkpoint_path = value;
  else if (key == "loss_log_path") cfg.loss_log_path = value;
  else if (key == "sample_rate") cfg.sample_rate = parse_number<double>(value, key);
  else if (key == "n_fft") cfg.n_fft = parse_number<std::size_t>(value, key);
  else if (key == "hop") cfg.hop = parse_number<std::size_t>(value, key);
  else if (key == "n_mels") cfg.n_mels = parse_number<std::size_t>(value, key);
  else if (key == "n_mfcc") cfg.n_mfcc = parse_number<std::size_t>(value, key);
  else if (key == "fmin") cfg.fmin = parse_number<double>(value, key);
  else if (key == "fmax") cfg.fmax = parse_number<double>(value, key);
  else if (key == "variant") cfg.variant = value;
  else if (key == "classes") cfg.classes = parse_number<std::size_t>(value, key);
  else if (key == "spec_kernels") cfg.spec_kernels = value;
  else if (key == "mfcc_kernels") cfg.mfcc_kernels = value;
  else if (key == "kernels_per_path") cfg.kernels_per_path = parse_number<std::size_t>(value, key);
  else if (key == "text_kernel_heights") cfg.text_kernel_heights = value;
  else if (key == "text_filters_per_size") cfg.text_filters_per_size = parse_number<std::size_t>(value, key);
  else if (key == "text_fc_size") cfg.text_fc_size = parse_number<std::size_t>(value, key);
  else if (key == "fc1_size") cfg.fc1_size = parse_number<std::size_t>(value, key);
  else if (key == "fc2_size") cfg.fc2_size = parse_number<std::size_t>(value, key);
  else if (key == "dropout_rate") cfg.dropout_rate = parse_number<double>(value, key);
  else if (key == "finetune_embeddings") cfg.finetune_embeddings = parse_bool(value, key);
  else if (key == "epochs") cfg.epochs = parse_number<std::size_t>(value, key);
  else if (key == "batch_size") cfg.batch_size = parse_number<std::size_t>(value, key);
  else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(value, key);
  else if (key == "k") cfg.k = parse_number<std::size_t>(value, key);
  else if (key == "early_stop_patience") cfg.early_stop_patience = parse_number<long>(value, key);
  else if (key == "deterministic") cfg.deterministic = parse_bool(value, key);
  else if (key == "kinds") cfg.kinds = value;
  else if (key == "force") cfg.force = parse_bool(value, key);
  else if (key == "strict") cfg.strict = parse_bool(value, key);
  else throw UsageError("unknown config key: " + key);
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file: " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config file " + path + " line " + std::to_string(line_no) +
                       ": expected key = value");
    }
    apply_key(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline void log_resolved(const RunConfig& cfg, const std::string& command,
                         std::ostream& os) {
  os << "# resolved config (" << command << ")\n";
  std::map<std::string, std::string> kv;
  kv["manifest"] = cfg.manifest;
  kv["embeddings"] = cfg.embeddings;
  kv["cache_dir"] = cfg.cache_dir;
  kv["checkpoint_dir"] = cfg.checkpoint_dir;
  kv["report_path"] = cfg.report_path;
  kv["checkpoint_path"] = cfg.checkpoint_path;
  kv["loss_log_path"] = cfg.loss_log_path;
  kv["sample_rate"] = std::to_string(cfg.sample_rate);
  kv["n_fft"] = std::to_string(cfg.n_fft);
  kv["hop"] = std::to_string(cfg.hop);
  kv["n_mels"] = std::to_string(cfg.n_mels);
  kv["n_mfcc"] = std::to_string(cfg.n_mfcc);
  kv["fmin"] = std::to_string(cfg.fmin);
  kv["fmax"] = std::to_string(cfg.fmax);
  kv["variant"] = cfg.variant;
  kv["classes"] = std::to_string(cfg.classes);
  kv["spec_kernels"] = cfg.spec_kernels;
  kv["mfcc_kernels"] = cfg.mfcc_kernels;
  kv["kernels_per_path"] = std::to_string(cfg.kernels_per_path);
  kv["text_kernel_heights"] = cfg.text_kernel_heights;
  kv["text_filters_per_size"] = std::to_string(cfg.text_filters_per_size);
  kv["text_fc_size"] = std::to_string(cfg.text_fc_size);
  kv["fc1_size"] = std::to_string(cfg.fc1_size);
  kv["fc2_size"] = std::to_string(cfg.fc2_size);
  kv["dropout_rate"] = std::to_string(cfg.dropout_rate);
  kv["finetune_embeddings"] = cfg.finetune_embeddings ? "true" : "false";
  kv["epochs"] = std::to_string(cfg.epochs);
  kv["batch_size"] = std::to_string(cfg.batch_size);
  kv["seed"] = std::to_string(cfg.seed);
  kv["k"] = std::to_string(cfg.k);
  kv["early_stop_patience"] = std::to_string(cfg.early_stop_patience);
  kv["deterministic"] = cfg.deterministic ? "true" : "false";
  kv["kinds"] = cfg.kinds;
  kv["force"] = cfg.force ? "true" : "false";
  kv["strict"] = cfg.strict ? "true" : "false";
  for (const auto& [key, value] : kv) os << "# " << key << " = " << value << "\n";
}

inline dsp::DspConfig to_dsp_config(const RunConfig& cfg) {
  dsp::DspConfig out;
  out.sample_rate = cfg.sample_rate;
  out.n_fft = cfg.n_fft;
  out.hop = cfg.hop;
  out.n_mels = cfg.n_mels;
  out.n_mfcc = cfg.n_mfcc;
  out.fmin = cfg.fmin;
  out.fmax = cfg.fmax;
  out.validate();
  return out;
}

inline models::ModelConfig to_model_config(const RunConfig& cfg) {
  if (cfg.finetune_embeddings) {
    throw UsageError(
        "finetune_embeddings is not supported: text features are materialized "
        "at featurize time, so embeddings are necessarily frozen");
  }
  models::ModelConfig out;
  out.variant = models::parse_variant(cfg.variant);
  out.classes = cfg.classes;
  out.spec_kernels = detail::parse_kernel_list(cfg.spec_kernels, "spec_kernels");
  out.mfcc_kernels = detail::parse_kernel_list(cfg.mfcc_kernels, "mfcc_kernels");
  out.kernels_per_path = cfg.kernels_per_path;
  out.text_kernel_heights.clear();
  for (const std::string& h : detail::split(cfg.text_kernel_heights, ',')) {
    out.text_kernel_heights.push_back(
        detail::parse_number<std::size_t>(h, "text_kernel_heights"));
  }
  out.text_filters_per_size = cfg.text_filters_per_size;
  out.text_fc_size = cfg.text_fc_size;
  out.fc1_size = cfg.fc1_size;
  out.fc2_size = cfg.fc2_size;
  out.dropout_rate = cfg.dropout_rate;
  out.spec_h = cfg.n_mels;
  out.spec_w = featurize::kFrames;
  out.mfcc_h = cfg.n_mfcc;
  out.mfcc_w = featurize::kFrames;
  out.text_words = featurize::kMaxWords;
  out.text_dim = featurize::kEmbeddingDim;
  out.validate();
  return out;
}

inline train::TrainConfig to_train_config(const RunConfig& cfg) {
  train::TrainConfig out;
  out.epochs = cfg.epochs;
  out.batch_size = cfg.batch_size;
  out.seed = cfg.seed;
  out.dropout_rate = cfg.dropout_rate;
  if (cfg.early_stop_patience < 0) {
    out.early_stop_patience.reset();
  } else {
    out.early_stop_patience = static_cast<std::size_t>(cfg.early_stop_patience);
  }
  out.deterministic = cfg.deterministic;
  out.validate();
  return out;
}

// --- feature kinds and cache paths ------------------------------------------

enum class FeatureKind { kSpec, kMfcc, kDs2, kText };

inline const char* kind_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::kSpec: return "spec";
    case FeatureKind::kMfcc: return "mfcc";
    case FeatureKind::kDs2: return "ds2";
    case FeatureKind::kText: return "text";
  }
  return "?";
}

inline FeatureKind parse_kind(const std::string& name) {
  for (FeatureKind k : {FeatureKind::kSpec, FeatureKind::kMfcc, FeatureKind::kDs2,
                        FeatureKind::kText}) {
    if (name == kind_name(k)) return k;
  }
  throw UsageError("unknown feature kind: " + name +
                   " (expected spec, mfcc, ds2 or text)");
}

inline std::vector<FeatureKind> kinds_for_featurize(const RunConfig& cfg) {
  if (!cfg.kinds.empty()) {
    std::vector<FeatureKind> out;
    for (const std::string& part : detail::split(cfg.kinds, ',')) {
      out.push_back(parse_kind(detail::trim(part)));
    }
    return out;
  }
  std::vector<FeatureKind> out = {FeatureKind::kSpec, FeatureKind::kMfcc,
                                  FeatureKind::kDs2};
  if (!cfg.embeddings.empty()) out.push_back(FeatureKind::kText);
  return out;
}

inline std::vector<FeatureKind> kinds_for_variant(const models::ModelConfig& cfg) {
  std::vector<FeatureKind> out;
  if (cfg.needs_spec()) out.push_back(FeatureKind::kSpec);
  if (cfg.needs_ds2()) out.push_back(FeatureKind::kDs2);
  if (cfg.needs_mfcc()) out.push_back(FeatureKind::kMfcc);
  if (cfg.needs_text()) out.push_back(FeatureKind::kText);
  return out;
}

inline void check_id_safe(const std::string& id) {
  if (id.empty()) throw DataError("empty utterance id");
  for (char c : id) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '_' &&
        c != '-') {
      throw DataError("utterance id '" + id +
                      "' contains characters unsafe for cache file names");
    }
  }
}

inline std::string cache_path(const std::string& cache_dir, const std::string& id,
                              FeatureKind kind) {
  return (fs::path(cache_dir) / (id + "." + kind_name(kind) + ".sert")).string();
}

// --- dataset loading ---------------------------------------------------------

// Owns records and features; examples borrow from both.
struct Dataset {
  std::vector<data::UtteranceRecord> records;
  std::vector<featurize::FeatureSet> features;
  std::vector<train::Example> examples;
};

inline Dataset load_dataset(const RunConfig& cfg, const models::ModelConfig& model_cfg) {
  Dataset ds;
  ds.records = data::filter_records(data::load_manifest(cfg.manifest));
  if (ds.records.empty()) {
    throw DataError("manifest " + cfg.manifest + " has no usable records after filtering");
  }
  const std::vector<FeatureKind> kinds = kinds_for_variant(model_cfg);

  std::vector<std::string> missing;
  ds.features.resize(ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const data::UtteranceRecord& rec = ds.records[i];
    check_id_safe(rec.id);
    for (FeatureKind kind : kinds) {
      const std::string path = cache_path(cfg.cache_dir, rec.id, kind);
      if (!fs::exists(path)) {
        missing.push_back(rec.id + " (" + kind_name(kind) + ")");
        continue;
      }
      Tensor<float> t = featurize::load_feature(path);
      switch (kind) {
        case FeatureKind::kSpec: ds.features[i].spectrogram = std::move(t); break;
        case FeatureKind::kMfcc: ds.features[i].mfcc = std::move(t); break;
        case FeatureKind::kDs2: ds.features[i].spectrogram_ds2 = std::move(t); break;
        case FeatureKind::kText: ds.features[i].text = std::move(t); break;
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing feature caches (run the featurize command first):";
    for (const std::string& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }

  ds.examples.reserve(ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    train::Example e;
    e.features = &ds.features[i];
    e.label = static_cast<int>(*ds.records[i].label);
    e.id = &ds.records[i].id;
    ds.examples.push_back(e);
  }
  return ds;
}

// --- commands ----------------------------------------------------------------

inline int cmd_featurize(const RunConfig& cfg) {
  if (cfg.manifest.empty()) throw UsageError("featurize requires --manifest");
  const dsp::DspConfig dsp_cfg = to_dsp_config(cfg);
  const std::vector<FeatureKind> kinds = kinds_for_featurize(cfg);

  const bool wants_text =
      std::count(kinds.begin(), kinds.end(), FeatureKind::kText) > 0;
  featurize::EmbeddingTable table;
  if (wants_text) {
    if (cfg.embeddings.empty()) {
      throw UsageError("featurize with the text kind requires --embeddings");
    }
    table = data::load_embeddings(cfg.embeddings, featurize::kEmbeddingDim, &std::cerr);
  }

  std::vector<data::UtteranceRecord> records =
      data::filter_records(data::load_manifest(cfg.manifest));
  for (const auto& rec : records) check_id_safe(rec.id);
  fs::create_directories(cfg.cache_dir);

  const auto manifest_time = fs::last_write_time(cfg.manifest);
  const auto text_dep_time = wants_text
                                 ? std::max(manifest_time, fs::last_write_time(cfg.embeddings))
                                 : manifest_time;

  struct Outcome {
    std::size_t written = 0;
    std::size_t up_to_date = 0;
    std::string error;
  };
  std::vector<Outcome> outcomes(records.size());

  parallel_for(records.size(), records.size() * kParallelGrain, [&](std::size_t i) {
    const data::UtteranceRecord& rec = records[i];
    Outcome& result = outcomes[i];
    try {
      auto up_to_date = [&](const std::string& path, bool text_kind) {
        if (cfg.force || !fs::exists(path)) return false;
        const auto dep = text_kind ? text_dep_time
                                   : std::max(manifest_time,
                                              fs::last_write_time(rec.wav_path));
        return fs::last_write_time(path) >= dep;
      };

      std::vector<FeatureKind> stale;
      for (FeatureKind kind : kinds) {
        const std::string path = cache_path(cfg.cache_dir, rec.id, kind);
        if (up_to_date(path, kind == FeatureKind::kText)) {
          ++result.up_to_date;
        } else {
          stale.push_back(kind);
        }
      }
      if (stale.empty()) return;

      const bool needs_audio =
          std::count_if(stale.begin(), stale.end(), [](FeatureKind k) {
            return k != FeatureKind::kText;
          }) > 0;

      Tensor<float> spec;
      dsp::Signal signal;
      if (needs_audio) signal = data::decode_wav(rec.wav_path, dsp_cfg.sample_rate);

      for (FeatureKind kind : stale) {
        const std::string path = cache_path(cfg.cache_dir, rec.id, kind);
        switch (kind) {
          case FeatureKind::kSpec:
            if (spec.empty()) spec = featurize::spectrogram_feature(signal, dsp_cfg);
            featurize::save_feature(path, spec);
            break;
          case FeatureKind::kDs2:
            if (spec.empty()) spec = featurize::spectrogram_feature(signal, dsp_cfg);
            featurize::save_feature(path, featurize::downsample2(spec));
            break;
          case FeatureKind::kMfcc:
            featurize::save_feature(path, featurize::mfcc_feature(signal, dsp_cfg));
            break;
          case FeatureKind::kText: {
            auto [text, len] = featurize::encode_text(
                featurize::tokenize(rec.transcript), table);
            featurize::save_feature(path, text);
            break;
          }
        }
        ++result.written;
      }
    } catch (const std::exception& e) {
      result.error = e.what();
    }
  });

  std::size_t written = 0, up_to_date = 0, failed = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    written += outcomes[i].written;
    up_to_date += outcomes[i].up_to_date;
    if (!outcomes[i].error.empty()) {
      ++failed;
      std::cerr << "featurize: skipped utterance '" << records[i].id
                << "': " << outcomes[i].error << "\n";
    }
  }
  std::cout << "featurize: " << written << " written, " << up_to_date
            << " up-to-date, " << failed << " failed (" << records.size()
            << " utterances)\n";
  if (failed > 0 && cfg.strict) return kExitData;
  return kExitOk;
}

inline int cmd_train(const RunConfig& cfg) {
  if (cfg.manifest.empty()) throw UsageError("train requires --manifest");
  const models::ModelConfig model_cfg = to_model_config(cfg);
  const train::TrainConfig train_cfg = to_train_config(cfg);
  Dataset ds = load_dataset(cfg, model_cfg);

  models::ModelGraph<float> graph(model_cfg, Rng(train_cfg.seed));
  const train::TrainResult result = train_model(graph, ds.examples, train_cfg);

  fs::create_directories(cfg.checkpoint_dir);
  const std::string ckpt_path =
      cfg.checkpoint_path.empty()
          ? (fs::path(cfg.checkpoint_dir) / (cfg.variant + ".serm")).string()
          : cfg.checkpoint_path;
  models::save_checkpoint(graph, ckpt_path);

  const std::string loss_path =
      cfg.loss_log_path.empty()
          ? (fs::path(cfg.checkpoint_dir) / (cfg.variant + "_loss.csv")).string()
          : cfg.loss_log_path;
  std::ofstream loss_file(loss_path);
  if (!loss_file) throw DataError("cannot write loss log: " + loss_path);
  loss_file << "epoch,loss,train_accuracy\n";
  char buf[96];
  for (std::size_t i = 0; i < result.history.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i + 1,
                  result.history[i].loss, result.history[i].train_accuracy);
    loss_file << buf;
  }

  std::cout << "train: variant " << cfg.variant << ", " << ds.examples.size()
            << " examples, " << result.history.size() << " epochs, final loss "
            << result.history.back().loss << ", final train accuracy "
            << result.history.back().train_accuracy << "\n";
  std::cout << "train: checkpoint " << ckpt_path << ", loss log " << loss_path << "\n";
  return kExitOk;
}

inline int cmd_xval(const RunConfig& cfg) {
  if (cfg.manifest.empty()) throw UsageError("xval requires --manifest");
  const models::ModelConfig model_cfg = to_model_config(cfg);
  const train::TrainConfig train_cfg = to_train_config(cfg);
  Dataset ds = load_dataset(cfg, model_cfg);

  const data::FoldPlan plan = data::stratified_kfold(ds.records, cfg.k, cfg.seed);
  const train::EvalReport report = train::cross_validate(
      ds.examples, plan, train::model_trainer(model_cfg, train_cfg), cfg.seed,
      &std::cerr);

  const std::string report_path =
      cfg.report_path.empty() ? ("xval_" + cfg.variant + ".json") : cfg.report_path;
  std::ofstream report_file(report_path, std::ios::binary);
  if (!report_file) throw DataError("cannot write report: " + report_path);
  report_file << train::to_json(report).dump(2) << "\n";

  std::cout << train::render_tables(report, "Model " + cfg.variant);
  std::cout << "\nPer-fold overall accuracy:";
  for (std::size_t i = 0; i < report.per_fold.size(); ++i) {
    char buf[48];
    std::snprintf(buf, sizeof buf, " fold%zu=%.3f", i,
                  report.per_fold[i].overall_accuracy);
    std::cout << buf;
  }
  std::cout << "\nreport written to " << report_path << "\n";
  return kExitOk;
}

inline int cmd_predict(const RunConfig& cfg, const std::string& wav_path,
                       const std::optional<std::string>& transcript) {
  if (cfg.checkpoint_path.empty()) throw UsageError("predict requires --checkpoint");
  if (wav_path.empty()) throw UsageError("predict requires --wav");

  const models::ModelVariant variant =
      models::peek_checkpoint_variant(cfg.checkpoint_path);
  RunConfig adjusted = cfg;
  adjusted.variant = models::variant_name(variant);
  const models::ModelConfig model_cfg = to_model_config(adjusted);
  const dsp::DspConfig dsp_cfg = to_dsp_config(cfg);

  models::ModelGraph<float> graph(model_cfg, Rng(cfg.seed));
  models::load_checkpoint(graph, cfg.checkpoint_path);

  featurize::FeatureSet features;
  if (model_cfg.needs_spec() || model_cfg.needs_mfcc() || model_cfg.needs_ds2()) {
    const dsp::Signal signal = data::decode_wav(wav_path, dsp_cfg.sample_rate);
    if (model_cfg.needs_spec() || model_cfg.needs_ds2()) {
      features.spectrogram = featurize::spectrogram_feature(signal, dsp_cfg);
      if (model_cfg.needs_ds2()) {
        features.spectrogram_ds2 = featurize::downsample2(features.spectrogram);
      }
    }
    if (model_cfg.needs_mfcc()) {
      features.mfcc = featurize::mfcc_feature(signal, dsp_cfg);
    }
  }
  if (model_cfg.needs_text()) {
    if (!transcript) {
      throw UsageError("variant " + adjusted.variant +
                       " consumes text; pass --transcript (may be empty)");
    }
    if (cfg.embeddings.empty()) {
      throw UsageError("variant " + adjusted.variant + " requires --embeddings");
    }
    const featurize::EmbeddingTable table =
        data::load_embeddings(cfg.embeddings, featurize::kEmbeddingDim, &std::cerr);
    auto [text, len] = featurize::encode_text(featurize::tokenize(*transcript), table);
    features.text = std::move(text);
    features.text_len = len;
  }

  const std::string id = "input";
  train::Example example{&features, 0, &id};
  const std::vector<train::Example> batch_examples = {example};
  models::Batch<float> batch = train::make_batch(batch_examples, {0}, model_cfg);
  Tensor<float> logits = graph.forward(batch, nn::LayerMode::kEval);

  // stable softmax over the single row
  std::vector<int> dummy_label = {0};
  const nn::SoftmaxLoss<float> sm = nn::softmax_cross_entropy(logits, dummy_label);
  int arg = 0;
  for (std::size_t c = 1; c < model_cfg.classes; ++c) {
    if (sm.probs(0, c) > sm.probs(0, static_cast<std::size_t>(arg))) {
      arg = static_cast<int>(c);
    }
  }

  std::cout << "prediction: " << data::kLabelNames[static_cast<std::size_t>(arg)]
            << "\n";
  std::cout << "probabilities:";
  for (std::size_t c = 0; c < model_cfg.classes; ++c) {
    char buf[64];
    std::snprintf(buf, sizeof buf, " %s=%.6f", data::kLabelNames[c],
                  static_cast<double>(sm.probs(0, c)));
    std::cout << buf;
  }
  std::cout << "\n";
  return kExitOk;
}

inline int cmd_gradcheck(const RunConfig& cfg, const std::string& only_variant) {
  bool failed = false;
  char buf[160];

  std::cout << "layer gradient checks (tolerance " << gradcheck::kLayerTolerance
            << ", " << 10 << " shapes each)\n";
  for (const gradcheck::CheckResult& r : gradcheck::check_layers(cfg.seed)) {
    const bool ok = r.max_rel_err <= gradcheck::kModelTolerance;
    failed = failed || !ok;
    std::snprintf(buf, sizeof buf, "  %-24s max rel err %.3e  %s\n", r.name.c_str(),
                  r.max_rel_err, ok ? "ok" : "FAIL");
    std::cout << buf;
  }

  std::vector<models::ModelVariant> variants;
  if (only_variant.empty()) {
    variants = {models::ModelVariant::kM1Text,      models::ModelVariant::kM2ASpec,
                models::ModelVariant::kM2BSpecDeep, models::ModelVariant::kM3Mfcc,
                models::ModelVariant::kM4ASpecMfcc, models::ModelVariant::kM4BTextSpec,
                models::ModelVariant::kM4CTextMfcc};
  } else {
    variants = {models::parse_variant(only_variant)};
  }

  std::cout << "end-to-end gradient checks (tolerance " << gradcheck::kModelTolerance
            << ", reduced scale)\n";
  for (models::ModelVariant v : variants) {
    gradcheck::CheckResult r = gradcheck::check_variant(v, cfg.seed);
    const bool ok = r.max_rel_err <= gradcheck::kModelTolerance && r.checked > 0;
    failed = failed || !ok;
    std::snprintf(buf, sizeof buf,
                  "  %-24s max rel err %.3e  (%zu checked, %zu skipped)  %s\n",
                  r.name.c_str(), r.max_rel_err, r.checked, r.skipped,
                  ok ? "ok" : "FAIL");
    std::cout << buf;
  }

  if (failed) throw NumericalError("gradient check failed");
  return kExitOk;
}

// --- entry point ---------------------------------------------------------------

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"speech emotion recognition pipeline"};
  app.require_subcommand(1);

  std::vector<std::string> config_files;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::string wav_path;
  std::optional<std::string> transcript;
  std::string gradcheck_variant;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option_function<std::string>(
        "--config", [&](const std::string& v) { config_files.push_back(v); },
        "plain-text config file (key = value, # comments)");
    auto opt = [&](const char* flag, const char* key, const char* desc) {
      cmd->add_option_function<std::string>(
          flag,
          [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); },
          desc);
    };
    auto flg = [&](const char* flag, const char* key, const char* desc) {
      cmd->add_flag_function(
          flag,
          [&overrides, key](std::int64_t) { overrides.emplace_back(key, "true"); },
          desc);
    };
    opt("--manifest", "manifest", "line-delimited JSON manifest");
    opt("--cache-dir", "cache_dir", "feature cache directory");
    opt("--variant", "variant", "model variant: m1 m2a m2b m3 m4a m4b m4c");
    opt("--k", "k", "number of cross-validation folds");
    opt("--seed", "seed", "64-bit seed");
    opt("--epochs", "epochs", "training epochs");
    opt("--batch-size", "batch_size", "minibatch size (>= 2)");
    opt("--dropout", "dropout_rate", "dropout rate in [0, 1)");
    opt("--embeddings", "embeddings", "word-embedding text file");
    opt("--checkpoint", "checkpoint_path", "checkpoint file path");
    opt("--checkpoint-dir", "checkpoint_dir", "checkpoint directory");
    opt("--report", "report_path", "evaluation report JSON path");
    opt("--loss-log", "loss_log_path", "per-epoch loss CSV path");
    opt("--kinds", "kinds", "feature kinds: comma list of spec,mfcc,ds2,text");
    opt("--patience", "early_stop_patience", "early-stop patience (-1 disables)");
    flg("--force", "force", "recompute caches even when up-to-date");
    flg("--strict", "strict", "nonzero exit if any utterance fails");
    flg("--deterministic", "deterministic", "pin deterministic execution");
    return cmd;
  };

  CLI::App* featurize_cmd =
      add_common(app.add_subcommand("featurize", "write feature caches"));
  CLI::App* train_cmd =
      add_common(app.add_subcommand("train", "train one variant on a manifest"));
  CLI::App* xval_cmd =
      add_common(app.add_subcommand("xval", "stratified k-fold cross-validation"));
  CLI::App* predict_cmd =
      add_common(app.add_subcommand("predict", "classify one utterance"));
  predict_cmd->add_option("--wav", wav_path, "input wav file");
  predict_cmd->add_option_function<std::string>(
      "--transcript", [&](const std::string& v) { transcript = v; },
      "utterance transcript (text variants)");
  CLI::App* gradcheck_cmd = add_common(
      app.add_subcommand("gradcheck", "finite-difference gradient verification"));
  gradcheck_cmd->add_option("--gradcheck-variant", gradcheck_variant,
                            "limit the sweep to one variant")
      ->option_text("VARIANT");

  try {
    std::vector<std::string> argv = args;
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help() << "\n";
      return kExitOk;
    }
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    RunConfig cfg;
    for (const std::string& file : config_files) apply_config_file(cfg, file);
    for (const auto& [key, value] : overrides) apply_key(cfg, key, value);

    if (featurize_cmd->parsed()) {
      log_resolved(cfg, "featurize", std::cerr);
      return cmd_featurize(cfg);
    }
    if (train_cmd->parsed()) {
      log_resolved(cfg, "train", std::cerr);
      return cmd_train(cfg);
    }
    if (xval_cmd->parsed()) {
      log_resolved(cfg, "xval", std::cerr);
      return cmd_xval(cfg);
    }
    if (predict_cmd->parsed()) {
      log_resolved(cfg, "predict", std::cerr);
      return cmd_predict(cfg, wav_path, transcript);
    }
    if (gradcheck_cmd->parsed()) {
      log_resolved(cfg, "gradcheck", std::cerr);
      return cmd_gradcheck(cfg, gradcheck_variant);
    }
    throw UsageError("no command given");
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace serforge::cli
