/*
 * features.hpp
 *
 * MFCC front end and context stacking. Pipeline per frame: pre-emphasis,
 * Hann window, magnitude spectrum, triangular mel filterbank, log, DCT-II
 * (orthonormal), first `cepstral_coeffs` coefficients including C0.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/FFT>

#include "common.hpp"
#include "dataparams.hpp"

namespace dpkws {

struct FrameSpec {
  int sample_rate = 16000;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  int mel_filters = 40;
  int cepstral_coeffs = 13;
  int context_left = 9;
  int context_right = 9;
  double preemphasis = 0.97;
  double log_floor = 1e-10;

  std::size_t window_samples() const {
    return static_cast<std::size_t>(std::lround(window_ms * 1e-3 * sample_rate));
  }
  std::size_t hop_samples() const { return static_cast<std::size_t>(std::lround(hop_ms * 1e-3 * sample_rate)); }
  std::size_t fft_size() const {
    std::size_t n = 1;
    while (n < window_samples()) n <<= 1;
    return n;
  }
  int context_frames() const { return context_left + 1 + context_right; }
  int stacked_dim() const { return cepstral_coeffs * context_frames(); }
};

inline void validate(const FrameSpec& s) {
  if (s.sample_rate <= 0 || s.window_samples() == 0 || s.hop_samples() == 0)
    throw ConfigError("frame spec: sample rate, window and hop must be positive");
  if (s.window_samples() < s.hop_samples()) throw ConfigError("frame spec: window must be at least one hop");
  if (s.cepstral_coeffs <= 0 || s.cepstral_coeffs > s.mel_filters)
    throw ConfigError("frame spec: need 0 < cepstral_coeffs <= mel_filters");
  if (s.context_left < 0 || s.context_right < 0) throw ConfigError("frame spec: negative context");
  if (!(s.log_floor > 0.0)) throw ConfigError("frame spec: log floor must be positive");
}

inline std::size_t frame_count(std::size_t samples, const FrameSpec& spec) {
  const std::size_t w = spec.window_samples();
  if (samples < w) return 0;
  return (samples - w) / spec.hop_samples() + 1;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Centre frequency (Hz) of each mel filter.
inline std::vector<double> mel_centers(const FrameSpec& spec) {
  const double top = hz_to_mel(spec.sample_rate / 2.0);
  std::vector<double> c(static_cast<std::size_t>(spec.mel_filters));
  for (int m = 0; m < spec.mel_filters; ++m) c[static_cast<std::size_t>(m)] = mel_to_hz(top * (m + 1) / (spec.mel_filters + 1));
  return c;
}

/// (fft_size/2 + 1) x mel_filters triangular weights, equally spaced on the mel scale from 0 Hz to Nyquist.
inline Matrix mel_filterbank(const FrameSpec& spec) {
  const std::size_t bins = spec.fft_size() / 2 + 1;
  const double top = hz_to_mel(spec.sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(spec.mel_filters + 2));
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(top * static_cast<double>(i) / (spec.mel_filters + 1));
  Matrix fb = Matrix::Zero(static_cast<Eigen::Index>(bins), spec.mel_filters);
  const double bin_hz = static_cast<double>(spec.sample_rate) / static_cast<double>(spec.fft_size());
  for (int m = 0; m < spec.mel_filters; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)], c = edges[static_cast<std::size_t>(m) + 1],
                 hi = edges[static_cast<std::size_t>(m) + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double w = 0.0;
      if (f > lo && f <= c) w = (f - lo) / (c - lo);
      else if (f > c && f < hi) w = (hi - f) / (hi - c);
      fb(static_cast<Eigen::Index>(k), m) = w;
    }
  }
  return fb;
}

/// Orthonormal DCT-II basis, n_in x n_out (column k is basis function k).
inline Matrix dct_basis(int n_in, int n_out) {
  Matrix d(n_in, n_out);
  const double pi = 3.14159265358979323846;
  for (int k = 0; k < n_out; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / n_in) : std::sqrt(2.0 / n_in);
    for (int n = 0; n < n_in; ++n) d(n, k) = s * std::cos(pi * k * (n + 0.5) / n_in);
  }
  return d;
}

/// T x mel_filters log filterbank energies (magnitude spectrum, floored).
inline Matrix log_mel_energies(std::span<const double> waveform, const FrameSpec& spec) {
  validate(spec);
  const std::size_t w = spec.window_samples(), hop = spec.hop_samples(), nfft = spec.fft_size();
  const std::size_t frames = frame_count(waveform.size(), spec);
  if (frames == 0) fail("mfcc: waveform of ", waveform.size(), " samples is shorter than one window (", w, ")");

  std::vector<double> emph(waveform.size());
  emph[0] = waveform[0];
  for (std::size_t i = 1; i < waveform.size(); ++i) emph[i] = waveform[i] - spec.preemphasis * waveform[i - 1];

  std::vector<double> window(w);
  const double pi = 3.14159265358979323846;
  for (std::size_t n = 0; n < w; ++n) window[n] = 0.5 - 0.5 * std::cos(2.0 * pi * static_cast<double>(n) / (w - 1.0));

  const std::size_t bins = nfft / 2 + 1;
  Matrix mag(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(bins));
  Eigen::FFT<double> fft;
  std::vector<double> buf(nfft, 0.0);
  std::vector<std::complex<double>> spec_out;
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t n = 0; n < w; ++n) buf[n] = emph[t * hop + n] * window[n];
    fft.fwd(spec_out, buf);
    for (std::size_t k = 0; k < bins; ++k)
      mag(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = std::abs(spec_out[k]);
  }
  Matrix energies = mag * mel_filterbank(spec);
  return energies.array().max(spec.log_floor).log().matrix();
}

/// T x cepstral_coeffs MFCC frames.
inline Matrix mfcc(std::span<const double> waveform, const FrameSpec& spec) {
  return log_mel_energies(waveform, spec) * dct_basis(spec.mel_filters, spec.cepstral_coeffs);
}

/// Concatenates frames [t - left, t + right] (replicating the edge frames) into one row per frame.
inline Matrix stack_context(const Matrix& frames, const FrameSpec& spec) {
  const Eigen::Index t_count = frames.rows(), d = frames.cols();
  Matrix out(t_count, d * spec.context_frames());
  for (Eigen::Index t = 0; t < t_count; ++t)
    for (int c = -spec.context_left; c <= spec.context_right; ++c) {
      const Eigen::Index src = std::clamp<Eigen::Index>(t + c, 0, t_count - 1);
      out.block(t, (c + spec.context_left) * d, 1, d) = frames.row(src);
    }
  return out;
}

/// mfcc followed by stack_context.
inline Matrix extract_features(std::span<const double> waveform, const FrameSpec& spec) {
  return stack_context(mfcc(waveform, spec), spec);
}

}  // namespace dpkws
