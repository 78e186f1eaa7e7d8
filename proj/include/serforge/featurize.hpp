#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "serforge/binary_io.hpp"
#include "serforge/dsp.hpp"
#include "serforge/errors.hpp"
#include "serforge/tensor.hpp"

namespace serforge::featurize {

// Fixed model-input geometry: 6 s of 22050 Hz audio -> 128x256 dB
// spectrogram and 40x256 MFCC; transcripts -> 128 words x 300-d embeddings.
inline constexpr double kTargetSeconds = 6.0;
inline constexpr std::size_t kSpecRows = 128;
inline constexpr std::size_t kMfccRows = 40;
inline constexpr std::size_t kFrames = 256;
inline constexpr std::size_t kMaxWords = 128;
inline constexpr std::size_t kEmbeddingDim = 300;

struct EmbeddingTable {
  std::unordered_map<std::string, std::vector<float>> vectors;
  std::size_t dim = kEmbeddingDim;

  const std::vector<float>* lookup(const std::string& token) const {
    auto it = vectors.find(token);
    return it == vectors.end() ? nullptr : &it->second;
  }
};

// Per-utterance model inputs. spectrogram_ds2 is only populated when the
// downsampled kind was requested (Model 2B).
struct FeatureSet {
  Tensor<float> spectrogram;      // 128 x 256, dB in [-100, 0]
  Tensor<float> mfcc;             // 40 x 256
  Tensor<float> spectrogram_ds2;  // 64 x 128 or empty
  Tensor<float> text;             // 128 x 300
  std::size_t text_len = 0;       // real (non-pad) tokens, diagnostics only
};

// Truncates long clips and zero-pads short ones to exactly
// target_seconds * sample_rate samples.
inline dsp::Signal fix_audio_length(const dsp::Signal& signal,
                                    double target_seconds = kTargetSeconds) {
  const std::size_t target = static_cast<std::size_t>(
      std::llround(target_seconds * signal.sample_rate));
  dsp::Signal out;
  out.sample_rate = signal.sample_rate;
  out.samples = signal.samples;
  out.samples.resize(target, 0.0);
  return out;
}

namespace detail {

// Crop the time axis to kFrames columns; pad with the dB floor if the
// source is ever shorter (unreachable after fix_audio_length).
inline Tensor<float> crop_frames(const Tensor<double>& src, double pad_value) {
  Tensor<float> out({src.dim(0), kFrames});
  for (std::size_t r = 0; r < src.dim(0); ++r) {
    for (std::size_t t = 0; t < kFrames; ++t) {
      out(r, t) = t < src.dim(1) ? static_cast<float>(src(r, t))
                                 : static_cast<float>(pad_value);
    }
  }
  return out;
}

}  // namespace detail

inline Tensor<float> spectrogram_feature(const dsp::Signal& signal,
                                         const dsp::DspConfig& cfg) {
  const dsp::Signal fixed = fix_audio_length(signal);
  return detail::crop_frames(dsp::mel_spectrogram(fixed, cfg), -dsp::kDbRange);
}

inline Tensor<float> mfcc_feature(const dsp::Signal& signal,
                                  const dsp::DspConfig& cfg) {
  const dsp::Signal fixed = fix_audio_length(signal);
  return detail::crop_frames(dsp::mfcc(fixed, cfg), 0.0);
}

// 2x2 block mean over frequency and time.
inline Tensor<float> downsample2(const Tensor<float>& spec) {
  if (spec.rank() != 2 || spec.dim(0) % 2 != 0 || spec.dim(1) % 2 != 0) {
    throw std::invalid_argument("downsample2: need even 2-d input, got " +
                                dims_to_string(spec.dims()));
  }
  Tensor<float> out({spec.dim(0) / 2, spec.dim(1) / 2});
  for (std::size_t r = 0; r < out.dim(0); ++r) {
    for (std::size_t c = 0; c < out.dim(1); ++c) {
      const double sum = static_cast<double>(spec(2 * r, 2 * c)) +
                         static_cast<double>(spec(2 * r, 2 * c + 1)) +
                         static_cast<double>(spec(2 * r + 1, 2 * c)) +
                         static_cast<double>(spec(2 * r + 1, 2 * c + 1));
      out(r, c) = static_cast<float>(sum / 4.0);
    }
  }
  return out;
}

// Lowercase, split on whitespace, strip leading/trailing punctuation from
// each token (interior characters, e.g. apostrophes, are kept).
inline std::vector<std::string> tokenize(std::string_view transcript) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    std::size_t first = current.size(), last = 0;
    for (std::size_t i = 0; i < current.size(); ++i) {
      if (std::isalnum(static_cast<unsigned char>(current[i]))) {
        first = std::min(first, i);
        last = i;
      }
    }
    if (first < current.size()) {
      tokens.push_back(current.substr(first, last - first + 1));
    }
    current.clear();
  };
  for (char ch : transcript) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      current.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return tokens;
}

// 128x300 embedding matrix: row i is token i's vector for the first 128
// tokens; out-of-vocabulary tokens and padding rows are all-zero.
inline std::pair<Tensor<float>, std::size_t> encode_text(
    const std::vector<std::string>& tokens, const EmbeddingTable& table) {
  Tensor<float> out({kMaxWords, table.dim});
  const std::size_t n = std::min(tokens.size(), kMaxWords);
  for (std::size_t i = 0; i < n; ++i) {
    if (const std::vector<float>* vec = table.lookup(tokens[i])) {
      for (std::size_t j = 0; j < table.dim; ++j) out(i, j) = (*vec)[j];
    }
  }
  return {std::move(out), n};
}

// --- SERT feature cache -----------------------------------------------
// magic "SERT", version 0x01, dtype 0x01 (f32), rank byte, rank x u32
// dims, row-major f32 payload; everything little-endian.

inline constexpr char kSertMagic[4] = {'S', 'E', 'R', 'T'};
inline constexpr std::uint8_t kSertVersion = 0x01;
inline constexpr std::uint8_t kSertDtypeF32 = 0x01;

inline void save_feature(const std::string& path, const Tensor<float>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write feature cache: " + path);
  f.write(kSertMagic, 4);
  io::write_u8(f, kSertVersion);
  io::write_u8(f, kSertDtypeF32);
  io::write_u8(f, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) io::write_u32(f, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) io::write_f32(f, t[i]);
  if (!f) throw DataError("failed writing feature cache: " + path);
}

inline std::vector<std::size_t> peek_feature_dims(std::istream& f,
                                                  const std::string& path) {
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::string(magic, 4) != std::string(kSertMagic, 4)) {
    throw DataError("not a SERT feature cache: " + path);
  }
  if (io::read_u8(f, "version") != kSertVersion) {
    throw DataError("unsupported feature cache version: " + path);
  }
  if (io::read_u8(f, "dtype") != kSertDtypeF32) {
    throw DataError("unsupported feature cache dtype: " + path);
  }
  const std::uint8_t rank = io::read_u8(f, "rank");
  std::vector<std::size_t> dims(rank);
  for (std::size_t i = 0; i < rank; ++i) dims[i] = io::read_u32(f, "dims");
  return dims;
}

inline Tensor<float> load_feature(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open feature cache: " + path);
  Tensor<float> t(peek_feature_dims(f, path));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = io::read_f32(f, path);
  return t;
}

}  // namespace serforge::featurize
