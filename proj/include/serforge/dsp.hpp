#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "serforge/errors.hpp"
#include "serforge/tensor.hpp"

namespace serforge::dsp {

// Extraction parameters: 22050 Hz audio, 2048-point Hann-windowed FFT
// frames hopped by 512, 128 mel bands, 40 cepstral coefficients.
inline constexpr double kDefaultSampleRate = 22050.0;
inline constexpr std::size_t kDefaultNfft = 2048;
inline constexpr std::size_t kDefaultHop = 512;
inline constexpr std::size_t kDefaultNmels = 128;
inline constexpr std::size_t kDefaultNmfcc = 40;

// Power floor before dB conversion and the clamped dynamic range after
// referencing the maximum to 0 dB. Keeps every feature in [-100, 0].
inline constexpr double kPowerFloor = 1e-10;
inline constexpr double kDbRange = 100.0;

// One mono clip. Amplitudes nominally in [-1, 1]; all DSP runs in double.
struct Signal {
  std::vector<double> samples;
  double sample_rate = kDefaultSampleRate;
};

// One-sided spectrum of one analysis frame, n_fft/2 + 1 bins.
using ComplexFrame = std::vector<std::complex<double>>;

struct DspConfig {
  double sample_rate = kDefaultSampleRate;
  std::size_t n_fft = kDefaultNfft;
  std::size_t hop = kDefaultHop;
  std::size_t n_mels = kDefaultNmels;
  std::size_t n_mfcc = kDefaultNmfcc;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means sample_rate / 2

  double resolved_fmax() const { return fmax > 0.0 ? fmax : sample_rate / 2.0; }

  std::size_t n_bins() const { return n_fft / 2 + 1; }

  void validate() const {
    if (sample_rate <= 0.0) throw std::invalid_argument("sample_rate must be > 0");
    if (n_fft == 0 || (n_fft & (n_fft - 1)) != 0) {
      throw std::invalid_argument("n_fft must be a power of two");
    }
    if (hop == 0 || hop > n_fft) throw std::invalid_argument("hop must be in [1, n_fft]");
    if (n_mels == 0) throw std::invalid_argument("n_mels must be >= 1");
    if (n_mfcc == 0 || n_mfcc > n_mels) {
      throw std::invalid_argument("n_mfcc must be in [1, n_mels]");
    }
    if (fmin < 0.0 || fmin >= resolved_fmax() || resolved_fmax() > sample_rate / 2.0) {
      throw std::invalid_argument("need 0 <= fmin < fmax <= sample_rate/2");
    }
  }
};

// Periodic Hann window: w[n] = 0.5 * (1 - cos(2*pi*n / length)).
inline std::vector<double> hann_window(std::size_t length) {
  if (length == 0) throw std::invalid_argument("hann_window: length must be >= 1");
  std::vector<double> w(length);
  for (std::size_t n = 0; n < length; ++n) {
    w[n] = 0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(n) /
                                 static_cast<double>(length)));
  }
  return w;
}

// Iterative radix-2 FFT. The twiddle table is indexed (never recurred), so
// per-bin error stays near machine precision.
class Fft {
 public:
  explicit Fft(std::size_t n) : n_(n) {
    if (n == 0 || (n & (n - 1)) != 0) {
      throw std::invalid_argument("fft size must be a power of two");
    }
    bitrev_.resize(n);
    std::size_t log2n = 0;
    while ((1u << log2n) < n) ++log2n;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < log2n; ++b) {
        if (i & (1u << b)) r |= 1u << (log2n - 1 - b);
      }
      bitrev_[i] = r;
    }
    roots_.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k) {
      double ang = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
      roots_[k] = {std::cos(ang), std::sin(ang)};
    }
  }

  std::size_t size() const { return n_; }

  void transform(std::vector<std::complex<double>>& a) const {
    if (a.size() != n_) throw std::invalid_argument("fft: buffer size mismatch");
    for (std::size_t i = 0; i < n_; ++i) {
      if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
    }
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      const std::size_t stride = n_ / len;
      for (std::size_t start = 0; start < n_; start += len) {
        for (std::size_t k = 0; k < len / 2; ++k) {
          const std::complex<double> w = roots_[k * stride];
          const std::complex<double> u = a[start + k];
          const std::complex<double> v = a[start + k + len / 2] * w;
          a[start + k] = u + v;
          a[start + k + len / 2] = u - v;
        }
      }
    }
  }

 private:
  std::size_t n_;
  std::vector<std::size_t> bitrev_;
  std::vector<std::complex<double>> roots_;
};

// Reflected index into [0, len): ... 2 1 | 0 1 2 ... len-1 | len-2 len-3 ...
inline std::size_t reflect_index(long long pos, std::size_t len) {
  if (len == 1) return 0;
  const long long period = 2 * (static_cast<long long>(len) - 1);
  long long p = pos % period;
  if (p < 0) p += period;
  if (p >= static_cast<long long>(len)) p = period - p;
  return static_cast<std::size_t>(p);
}

// Short-time Fourier transform with reflect center padding of n_fft/2
// samples each side; frame t covers padded samples [t*hop, t*hop + n_fft),
// multiplied by the periodic Hann window. Yields 1 + floor(len/hop) frames
// of n_fft/2 + 1 one-sided bins.
inline std::vector<ComplexFrame> stft(const Signal& signal, const DspConfig& cfg) {
  cfg.validate();
  if (signal.samples.empty()) throw std::invalid_argument("stft: empty signal");
  for (double s : signal.samples) {
    if (!std::isfinite(s)) throw std::invalid_argument("stft: non-finite sample");
  }

  const std::size_t len = signal.samples.size();
  const std::size_t pad = cfg.n_fft / 2;
  const std::size_t n_frames = 1 + len / cfg.hop;
  const std::vector<double> window = hann_window(cfg.n_fft);
  const Fft fft(cfg.n_fft);

  std::vector<ComplexFrame> frames(n_frames);
  std::vector<std::complex<double>> buf(cfg.n_fft);
  for (std::size_t t = 0; t < n_frames; ++t) {
    for (std::size_t i = 0; i < cfg.n_fft; ++i) {
      const long long pos = static_cast<long long>(t * cfg.hop + i) -
                            static_cast<long long>(pad);
      buf[i] = {signal.samples[reflect_index(pos, len)] * window[i], 0.0};
    }
    fft.transform(buf);
    frames[t].assign(buf.begin(), buf.begin() + static_cast<long>(cfg.n_bins()));
  }
  return frames;
}

// (bins x T) matrix of re^2 + im^2.
inline Tensor<double> power_spectrogram(const std::vector<ComplexFrame>& frames) {
  if (frames.empty()) throw std::invalid_argument("power_spectrogram: no frames");
  const std::size_t bins = frames[0].size();
  Tensor<double> out({bins, frames.size()});
  for (std::size_t t = 0; t < frames.size(); ++t) {
    if (frames[t].size() != bins) {
      throw std::invalid_argument("power_spectrogram: ragged frames");
    }
    for (std::size_t k = 0; k < bins; ++k) {
      const auto& c = frames[t][k];
      out(k, t) = c.real() * c.real() + c.imag() * c.imag();
    }
  }
  return out;
}

// Slaney mel scale: linear below 1000 Hz (1000 Hz = 15 mel), logarithmic
// above with step ln(6.4)/27.
inline double hz_to_mel(double f) {
  if (f < 0.0) throw std::invalid_argument("hz_to_mel: negative frequency");
  constexpr double kLinearStep = 200.0 / 3.0;
  constexpr double kBreakHz = 1000.0;
  constexpr double kBreakMel = 15.0;
  if (f < kBreakHz) return f / kLinearStep;
  const double log_step = std::log(6.4) / 27.0;
  return kBreakMel + std::log(f / kBreakHz) / log_step;
}

inline double mel_to_hz(double mel) {
  if (mel < 0.0) throw std::invalid_argument("mel_to_hz: negative mel");
  constexpr double kLinearStep = 200.0 / 3.0;
  constexpr double kBreakMel = 15.0;
  if (mel < kBreakMel) return mel * kLinearStep;
  const double log_step = std::log(6.4) / 27.0;
  return 1000.0 * std::exp(log_step * (mel - kBreakMel));
}

// n_mels triangular filters with centers equally spaced on the mel axis
// between fmin and fmax, evaluated at FFT-bin frequencies and scaled by
// 2 / (f_upper - f_lower). Filters too narrow for the bin grid stay
// all-zero; their indices are reported through empty_rows when given.
inline Tensor<double> mel_filterbank(const DspConfig& cfg,
                                     std::vector<std::size_t>* empty_rows = nullptr) {
  cfg.validate();
  const std::size_t bins = cfg.n_bins();
  const double mel_lo = hz_to_mel(cfg.fmin);
  const double mel_hi = hz_to_mel(cfg.resolved_fmax());

  std::vector<double> hz_pts(cfg.n_mels + 2);
  for (std::size_t i = 0; i < cfg.n_mels + 2; ++i) {
    const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                    static_cast<double>(cfg.n_mels + 1);
    hz_pts[i] = mel_to_hz(mel);
  }

  Tensor<double> fb({cfg.n_mels, bins});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double f_lo = hz_pts[m];
    const double f_c = hz_pts[m + 1];
    const double f_hi = hz_pts[m + 2];
    const double norm = 2.0 / (f_hi - f_lo);
    bool any = false;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate /
                       static_cast<double>(cfg.n_fft);
      const double rising = (f - f_lo) / (f_c - f_lo);
      const double falling = (f_hi - f) / (f_hi - f_c);
      const double w = std::max(0.0, std::min(rising, falling));
      fb(m, k) = w * norm;
      any = any || w > 0.0;
    }
    if (!any && empty_rows != nullptr) empty_rows->push_back(m);
  }
  return fb;
}

// Log-compressed mel spectrogram: filterbank applied to the power
// spectrogram, floored at 1e-10, converted to dB and referenced so the
// maximum entry is exactly 0; entries clamped to [-100, 0].
inline Tensor<double> mel_spectrogram(const Signal& signal, const DspConfig& cfg) {
  cfg.validate();
  if (signal.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("mel_spectrogram: signal/config sample-rate mismatch");
  }
  const Tensor<double> power = power_spectrogram(stft(signal, cfg));
  const Tensor<double> fb = mel_filterbank(cfg);
  const std::size_t bins = power.dim(0);
  const std::size_t n_frames = power.dim(1);

  Tensor<double> mel({cfg.n_mels, n_frames});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    for (std::size_t k = 0; k < bins; ++k) {
      const double w = fb(m, k);
      if (w == 0.0) continue;
      for (std::size_t t = 0; t < n_frames; ++t) {
        mel(m, t) += w * power(k, t);
      }
    }
  }

  double peak = -1e300;
  for (std::size_t i = 0; i < mel.size(); ++i) {
    mel[i] = 10.0 * std::log10(std::max(mel[i], kPowerFloor));
    peak = std::max(peak, mel[i]);
  }
  for (std::size_t i = 0; i < mel.size(); ++i) {
    mel[i] = std::max(mel[i] - peak, -kDbRange);
  }
  return mel;
}

// Orthonormal DCT-II basis, n_out x n rows:
//   y[k] = s(k) * sum_n x[n] * cos(pi * k * (2n + 1) / (2N))
// with s(0) = sqrt(1/N) and s(k>0) = sqrt(2/N).
inline Tensor<double> dct_matrix(std::size_t n_out, std::size_t n) {
  if (n == 0 || n_out == 0 || n_out > n) {
    throw std::invalid_argument("dct_matrix: need 1 <= n_out <= n");
  }
  Tensor<double> m({n_out, n});
  const double s0 = std::sqrt(1.0 / static_cast<double>(n));
  const double sk = std::sqrt(2.0 / static_cast<double>(n));
  for (std::size_t k = 0; k < n_out; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      m(k, i) = (k == 0 ? s0 : sk) *
                std::cos(M_PI * static_cast<double>(k) *
                         (2.0 * static_cast<double>(i) + 1.0) /
                         (2.0 * static_cast<double>(n)));
    }
  }
  return m;
}

inline std::vector<double> dct_ii(const std::vector<double>& x, std::size_t n_out) {
  if (x.empty()) throw std::invalid_argument("dct_ii: empty input");
  if (n_out == 0 || n_out > x.size()) {
    throw std::invalid_argument("dct_ii: need 1 <= n_out <= N");
  }
  const Tensor<double> m = dct_matrix(n_out, x.size());
  std::vector<double> y(n_out, 0.0);
  for (std::size_t k = 0; k < n_out; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += m(k, i) * x[i];
    y[k] = acc;
  }
  return y;
}

// First n_mfcc DCT-II coefficients of each log-mel column.
inline Tensor<double> mfcc(const Signal& signal, const DspConfig& cfg) {
  const Tensor<double> mel = mel_spectrogram(signal, cfg);
  const Tensor<double> basis = dct_matrix(cfg.n_mfcc, cfg.n_mels);
  const std::size_t n_frames = mel.dim(1);
  Tensor<double> out({cfg.n_mfcc, n_frames});
  for (std::size_t k = 0; k < cfg.n_mfcc; ++k) {
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      const double w = basis(k, m);
      for (std::size_t t = 0; t < n_frames; ++t) {
        out(k, t) += w * mel(m, t);
      }
    }
  }
  return out;
}

}  // namespace serforge::dsp
