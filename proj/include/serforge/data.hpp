#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "serforge/errors.hpp"
#include "serforge/featurize.hpp"
#include "serforge/rng.hpp"
#include "serforge/wav.hpp"

namespace serforge::data {

// The four target classes; "excited" annotations merge into happiness.
enum class EmotionLabel : int {
  kNeutral = 0,
  kHappiness = 1,
  kSadness = 2,
  kAnger = 3,
};

inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<const char*, kNumClasses> kLabelNames = {
    "neutral", "happiness", "sadness", "anger"};

inline std::optional<EmotionLabel> parse_label(std::string_view raw) {
  std::string s(raw);
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (s == "neu" || s == "neutral") return EmotionLabel::kNeutral;
  if (s == "hap" || s == "happy" || s == "happiness") return EmotionLabel::kHappiness;
  if (s == "exc" || s == "excited" || s == "excitement") return EmotionLabel::kHappiness;
  if (s == "sad" || s == "sadness") return EmotionLabel::kSadness;
  if (s == "ang" || s == "anger" || s == "angry") return EmotionLabel::kAnger;
  return std::nullopt;
}

// One labeled utterance. `label` is authoritative only after
// filter_records resolves the annotator majority.
struct UtteranceRecord {
  std::string id;
  std::string wav_path;
  std::string transcript;
  std::string raw_label;
  std::optional<EmotionLabel> label;
  bool scripted = false;
  std::vector<std::string> annotator_labels;
  std::string session;
};

// Line-delimited JSON, one utterance per line. Required fields: id,
// wav_path, transcript, label, scripted. annotator_labels defaults to the
// stated label counted as pre-agreed consensus; session defaults to "".
inline std::vector<UtteranceRecord> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);

  std::vector<UtteranceRecord> records;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest parse error at line " + std::to_string(line_no) +
                      ": " + e.what());
    }

    auto require_field = [&](const char* field) -> const nlohmann::json& {
      if (!obj.contains(field)) {
        throw DataError(std::string(field) + " missing at line " +
                        std::to_string(line_no));
      }
      return obj.at(field);
    };

    UtteranceRecord rec;
    try {
      rec.id = require_field("id").get<std::string>();
      rec.wav_path = require_field("wav_path").get<std::string>();
      rec.transcript = require_field("transcript").get<std::string>();
      rec.raw_label = require_field("label").get<std::string>();
      rec.scripted = require_field("scripted").get<bool>();
      if (obj.contains("annotator_labels")) {
        rec.annotator_labels = obj.at("annotator_labels").get<std::vector<std::string>>();
      } else {
        rec.annotator_labels = {rec.raw_label, rec.raw_label};
      }
      if (obj.contains("session")) rec.session = obj.at("session").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest type error at line " + std::to_string(line_no) +
                      ": " + e.what());
    }
    if (rec.wav_path.empty()) {
      throw DataError("empty wav_path at line " + std::to_string(line_no));
    }
    if (!seen_ids.insert(rec.id).second) {
      throw DataError("duplicate utterance id '" + rec.id + "' at line " +
                      std::to_string(line_no));
    }
    rec.label = parse_label(rec.raw_label);
    records.push_back(std::move(rec));
  }
  return records;
}

// Keeps improvised records where at least two annotators agree on one
// target class (after the excited -> happiness merge) and assigns that
// majority class. Tied majorities and out-of-target majorities drop.
inline std::vector<UtteranceRecord> filter_records(std::vector<UtteranceRecord> records) {
  std::vector<UtteranceRecord> kept;
  for (UtteranceRecord& rec : records) {
    if (rec.scripted) continue;
    std::array<int, kNumClasses> votes{};
    for (const std::string& raw : rec.annotator_labels) {
      if (std::optional<EmotionLabel> l = parse_label(raw)) {
        ++votes[static_cast<std::size_t>(*l)];
      }
    }
    int best = 0;
    std::size_t best_class = 0;
    bool tie = false;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      if (votes[c] > best) {
        best = votes[c];
        best_class = c;
        tie = false;
      } else if (votes[c] == best && best > 0) {
        tie = true;
      }
    }
    if (best < 2 || tie) continue;
    rec.label = static_cast<EmotionLabel>(best_class);
    kept.push_back(std::move(rec));
  }
  return kept;
}

inline dsp::Signal decode_wav(const std::string& path,
                              double target_rate = dsp::kDefaultSampleRate) {
  return wav::decode(path, target_rate);
}

// Text embeddings: optional "vocab_count dim" header line, then one line
// per token followed by `dim` reals. Later duplicates win.
inline featurize::EmbeddingTable load_embeddings(const std::string& path,
                                                 std::size_t expected_dim =
                                                     featurize::kEmbeddingDim,
                                                 std::ostream* warnings = nullptr) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open embeddings file: " + path);

  featurize::EmbeddingTable table;
  table.dim = expected_dim;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string token;
    ss >> token;
    if (token.empty()) continue;

    std::vector<float> values;
    values.reserve(expected_dim);
    double v = 0.0;
    while (ss >> v) values.push_back(static_cast<float>(v));

    if (first) {
      first = false;
      // header line: two integers, the second matching the vector size
      if (values.size() == 1) {
        char* end = nullptr;
        const long count = std::strtol(token.c_str(), &end, 10);
        if (end != token.c_str() && *end == '\0' && count >= 0 &&
            static_cast<std::size_t>(values[0]) == expected_dim) {
          continue;
        }
      }
    }
    if (values.size() != expected_dim) {
      throw DataError("embeddings line " + std::to_string(line_no) + " has " +
                      std::to_string(values.size()) + " values, expected " +
                      std::to_string(expected_dim));
    }
    for (float x : values) {
      if (!std::isfinite(x)) {
        throw DataError("non-finite embedding value at line " + std::to_string(line_no));
      }
    }
    if (table.vectors.count(token) && warnings) {
      *warnings << "warning: duplicate embedding token '" << token
                << "' at line " << line_no << ", last wins\n";
    }
    table.vectors[token] = std::move(values);
  }
  return table;
}

// Label-stratified k-fold plan: within each class, shuffle by seed and
// deal round-robin, so per-fold class counts are floor(n_c/k) or one more.
struct FoldPlan {
  std::size_t k = 5;
  std::unordered_map<std::string, std::size_t> assignments;  // id -> fold
};

inline FoldPlan stratified_kfold(const std::vector<UtteranceRecord>& records,
                                 std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("stratified_kfold: k must be >= 2");
  std::array<std::vector<const UtteranceRecord*>, kNumClasses> by_class;
  for (const UtteranceRecord& rec : records) {
    if (!rec.label) {
      throw DataError("stratified_kfold: record '" + rec.id + "' has no resolved label");
    }
    by_class[static_cast<std::size_t>(*rec.label)].push_back(&rec);
  }
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (by_class[c].size() < k) {
      throw DataError(std::string("stratified_kfold: class ") + kLabelNames[c] +
                      " has " + std::to_string(by_class[c].size()) +
                      " records, needs at least k = " + std::to_string(k));
    }
  }

  FoldPlan plan;
  plan.k = k;
  Rng rng(seed);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    rng.shuffle(by_class[c]);
    for (std::size_t i = 0; i < by_class[c].size(); ++i) {
      plan.assignments[by_class[c][i]->id] = i % k;
    }
  }
  return plan;
}

}  // namespace serforge::data
