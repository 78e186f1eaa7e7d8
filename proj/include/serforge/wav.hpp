#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "serforge/binary_io.hpp"
#include "serforge/dsp.hpp"
#include "serforge/errors.hpp"

namespace serforge::wav {

inline constexpr std::uint16_t kFormatPcm = 1;
inline constexpr std::uint16_t kFormatIeeeFloat = 3;

// Linear-interpolation resampler. Lossy above dst_rate/2 content; the
// pipeline only ever downs/ups to 22050 Hz.
inline std::vector<double> resample_linear(const std::vector<double>& in,
                                           double src_rate, double dst_rate) {
  if (src_rate <= 0.0 || dst_rate <= 0.0) {
    throw std::invalid_argument("resample_linear: rates must be > 0");
  }
  if (in.empty() || src_rate == dst_rate) return in;
  const std::size_t out_len = static_cast<std::size_t>(
      std::llround(static_cast<double>(in.size()) * dst_rate / src_rate));
  std::vector<double> out(out_len);
  const double step = src_rate / dst_rate;
  for (std::size_t i = 0; i < out_len; ++i) {
    const double pos = static_cast<double>(i) * step;
    const std::size_t i0 = std::min(static_cast<std::size_t>(pos), in.size() - 1);
    const std::size_t i1 = std::min(i0 + 1, in.size() - 1);
    const double frac = pos - static_cast<double>(i0);
    out[i] = in[i0] * (1.0 - frac) + in[i1] * frac;
  }
  return out;
}

// Decodes a RIFF/WAVE file (PCM 16-bit or IEEE float 32-bit, any channel
// count averaged to mono) and resamples to target_rate when needed.
inline dsp::Signal decode(const std::string& path,
                          double target_rate = dsp::kDefaultSampleRate) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open wav file: " + path);

  auto read_tag = [&](const char* what) {
    char tag[4];
    f.read(tag, 4);
    if (f.gcount() != 4) throw DataError(std::string("truncated wav (") + what + "): " + path);
    return std::string(tag, 4);
  };

  if (read_tag("riff header") != "RIFF") throw DataError("not a RIFF file: " + path);
  io::read_u32(f, "riff size");
  if (read_tag("wave header") != "WAVE") throw DataError("not a WAVE file: " + path);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::vector<char> payload;

  while (true) {
    char tag[4];
    f.read(tag, 4);
    if (f.gcount() == 0) break;  // clean end of chunks
    if (f.gcount() != 4) throw DataError("truncated wav chunk header: " + path);
    const std::string chunk(tag, 4);
    const std::uint32_t size = io::read_u32(f, "chunk size");
    if (chunk == "fmt ") {
      if (size < 16) throw DataError("wav fmt chunk too small: " + path);
      format = io::read_u16(f, "format tag");
      channels = io::read_u16(f, "channel count");
      rate = io::read_u32(f, "sample rate");
      io::read_u32(f, "byte rate");
      io::read_u16(f, "block align");
      bits = io::read_u16(f, "bits per sample");
      if (size > 16) f.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (chunk == "data") {
      payload.resize(size);
      f.read(payload.data(), size);
      if (static_cast<std::uint32_t>(f.gcount()) != size) {
        throw DataError("truncated wav data chunk: " + path);
      }
      break;
    } else {
      f.seekg(size + (size & 1), std::ios::cur);
      if (!f) throw DataError("truncated wav chunk: " + path);
    }
  }

  if (!have_fmt) throw DataError("wav missing fmt chunk: " + path);
  if (payload.empty()) throw DataError("wav missing data chunk: " + path);
  if (channels == 0) throw DataError("wav has zero channels: " + path);
  if (format == kFormatPcm && bits != 16) {
    throw DataError("unsupported wav: PCM with " + std::to_string(bits) +
                    " bits (only 16-bit PCM): " + path);
  }
  if (format == kFormatIeeeFloat && bits != 32) {
    throw DataError("unsupported wav: float with " + std::to_string(bits) +
                    " bits (only 32-bit float): " + path);
  }
  if (format != kFormatPcm && format != kFormatIeeeFloat) {
    throw DataError("unsupported wav format tag " + std::to_string(format) +
                    " (supported: 1=PCM16, 3=float32): " + path);
  }

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frame_bytes = bytes_per_sample * channels;
  const std::size_t n_frames = payload.size() / frame_bytes;

  std::vector<double> mono(n_frames);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(payload.data());
  for (std::size_t i = 0; i < n_frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* s = p + i * frame_bytes + c * bytes_per_sample;
      if (format == kFormatPcm) {
        const std::int16_t v = static_cast<std::int16_t>(
            static_cast<std::uint16_t>(s[0]) |
            (static_cast<std::uint16_t>(s[1]) << 8));
        acc += static_cast<double>(v) / 32768.0;
      } else {
        const std::uint32_t u = static_cast<std::uint32_t>(s[0]) |
                                (static_cast<std::uint32_t>(s[1]) << 8) |
                                (static_cast<std::uint32_t>(s[2]) << 16) |
                                (static_cast<std::uint32_t>(s[3]) << 24);
        acc += static_cast<double>(std::bit_cast<float>(u));
      }
    }
    mono[i] = acc / static_cast<double>(channels);
  }

  dsp::Signal sig;
  sig.sample_rate = target_rate;
  sig.samples = resample_linear(mono, static_cast<double>(rate), target_rate);
  return sig;
}

// 16-bit PCM mono writer, used for fixtures and round-trip checks.
inline void write_pcm16(const std::string& path, const std::vector<double>& samples,
                        std::uint32_t sample_rate) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write wav file: " + path);
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);

  f.write("RIFF", 4);
  io::write_u32(f, 36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  io::write_u32(f, 16);
  io::write_u16(f, kFormatPcm);
  io::write_u16(f, 1);               // mono
  io::write_u32(f, sample_rate);
  io::write_u32(f, sample_rate * 2);  // byte rate
  io::write_u16(f, 2);               // block align
  io::write_u16(f, 16);              // bits per sample
  f.write("data", 4);
  io::write_u32(f, data_bytes);
  for (double s : samples) {
    const long v = std::lround(s * 32768.0);
    const std::int16_t q = static_cast<std::int16_t>(std::clamp(v, -32768l, 32767l));
    f.put(static_cast<char>(q & 0xff));
    f.put(static_cast<char>((q >> 8) & 0xff));
  }
  if (!f) throw DataError("failed writing wav file: " + path);
}

}  // namespace serforge::wav
