/*
 * corpus.hpp
 *
 * Synthetic keyword corpus and multicondition augmentation.
 *
 * Every target class has its own spectral texture (a set of formant-like
 * partials), so frame labels are known by construction. Positive utterances
 * contain the 6-phone / 18-state keyword between silence and "other speech"
 * filler; negatives contain filler only, sometimes with a fragment of the
 * keyword. Noisy copies are made by reverberating a noise signal with a
 * synthetic impulse response and adding it at an SNR drawn from [-10, 10) dB.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "common.hpp"
#include "features.hpp"
#include "json.hpp"
#include "wav.hpp"

namespace dpkws {

// ---------------------------------------------------------------------------
// Target inventory

inline constexpr int kKeywordPhones = 6;
inline constexpr int kStatesPerPhone = 3;
inline constexpr int kKeywordStates = kKeywordPhones * kStatesPerPhone;  // 18
inline constexpr int kSilenceClass = kKeywordStates;                      // 18
inline constexpr int kOtherSpeechClass = kKeywordStates + 1;              // 19
inline constexpr int kNumClasses = kKeywordStates + 2;                    // 20

/// Keyword states in HMM path order.
inline std::vector<int> keyword_state_order() {
  std::vector<int> s(kKeywordStates);
  for (int i = 0; i < kKeywordStates; ++i) s[static_cast<std::size_t>(i)] = i;
  return s;
}

inline std::string class_name(int c) {
  if (c == kSilenceClass) return "sil";
  if (c == kOtherSpeechClass) return "other";
  return detail::concat("kw", c / kStatesPerPhone, ".", c % kStatesPerPhone);
}

// ---------------------------------------------------------------------------
// Utterances

using Waveform = std::vector<double>;

enum class Split { train, cv, eval };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::cv: return "cv";
    case Split::eval: return "eval";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "cv") return Split::cv;
  if (s == "eval") return Split::eval;
  fail("unknown split '", s, "'");
}

struct Provenance {
  bool noisy = false;
  double snr_db = 0.0;
  std::string noise_kind;
  /// Clean utterance a noisy copy was made from; -1 for clean utterances.
  std::int64_t source_id = -1;
};

struct Utterance {
  std::int64_t id = 0;
  Waveform samples;
  std::vector<int> frame_labels;
  bool is_positive = false;
  Provenance provenance;
  Split split = Split::train;

  double duration_seconds(int sample_rate) const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct KeywordSpec {
  int state_frames_min = 2;
  int state_frames_max = 4;
  int silence_frames_min = 5;
  int silence_frames_max = 10;
  /// Filler on each side of the keyword in positives.
  int filler_frames_min = 0;
  int filler_frames_max = 15;
  /// Total filler length of a negative.
  int negative_frames_min = 50;
  int negative_frames_max = 90;
  int filler_phone_frames_min = 3;
  int filler_phone_frames_max = 7;
  /// Probability that a negative carries 2-4 consecutive keyword phones.
  double near_miss_probability = 0.3;
};

struct CorpusCounts {
  int positives = 0;
  int negatives = 0;
};

// ---------------------------------------------------------------------------
// Synthesis

namespace detail {

struct Texture {
  std::array<double, 3> freq;
  std::array<double, 3> amp;
};

inline constexpr int kFillerPhones = 10;
inline constexpr double kTwoPi = 6.283185307179586;

inline Texture keyword_texture(int state) {
  static constexpr std::array<double, kKeywordPhones> f1{350, 520, 680, 300, 760, 450};
  static constexpr std::array<double, kKeywordPhones> f2{2200, 1100, 1700, 880, 1350, 2550};
  const int p = state / kStatesPerPhone, s = state % kStatesPerPhone;
  const double glide = (s - 1) * 0.14;
  return {{f1[static_cast<std::size_t>(p)] * (1.0 + glide), f2[static_cast<std::size_t>(p)] * (1.0 - 0.7 * glide),
           2900.0 + 140.0 * p + 120.0 * s},
          {1.0, 0.6, 0.3}};
}

inline const std::array<Texture, kFillerPhones>& filler_textures() {
  static const std::array<Texture, kFillerPhones> table = [] {
    std::array<Texture, kFillerPhones> t{};
    Rng rng = substream(0x5eed, "filler-phone-table");
    for (auto& x : t) {
      x.freq = {uniform(rng, 280, 800), uniform(rng, 850, 2600), uniform(rng, 2500, 3700)};
      x.amp = {1.0, uniform(rng, 0.4, 0.8), uniform(rng, 0.15, 0.4)};
    }
    return t;
  }();
  return table;
}

struct Segment {
  int label;
  int frames;
  /// Index into filler_textures() for other-speech segments, -1 otherwise.
  int filler_phone = -1;
};

struct Speaker {
  double formant_scale;
  double f0;
  double level;
};

/// Renders segments so that frame t (window centre) falls inside the segment that owns frame t.
inline Waveform render(const std::vector<Segment>& segs, const Speaker& spk, const FrameSpec& spec, Rng& rng) {
  const std::size_t hop = spec.hop_samples(), win = spec.window_samples();
  std::size_t frames = 0;
  for (const auto& s : segs) frames += static_cast<std::size_t>(s.frames);
  const std::size_t total = frames * hop + (win - hop);
  const std::size_t offset = (win - hop) / 2;
  Waveform out(total, 0.0);
  const double sr = spec.sample_rate;
  const std::size_t ramp = static_cast<std::size_t>(0.005 * sr);

  std::size_t frame_pos = 0;
  for (std::size_t si = 0; si < segs.size(); ++si) {
    const Segment& seg = segs[si];
    std::size_t a = frame_pos * hop + offset;
    frame_pos += static_cast<std::size_t>(seg.frames);
    std::size_t b = frame_pos * hop + offset;
    if (si == 0) a = 0;
    if (si + 1 == segs.size()) b = total;
    if (seg.label == kSilenceClass) {
      for (std::size_t n = a; n < b; ++n) out[n] += 0.002 * normal(rng);
      continue;
    }
    const Texture tex = seg.label == kOtherSpeechClass ? filler_textures()[static_cast<std::size_t>(seg.filler_phone)]
                                                       : keyword_texture(seg.label);
    std::array<double, 3> f{}, amp{}, phase{};
    for (int i = 0; i < 3; ++i) {
      f[static_cast<std::size_t>(i)] = tex.freq[static_cast<std::size_t>(i)] * spk.formant_scale * (1.0 + 0.015 * normal(rng));
      amp[static_cast<std::size_t>(i)] = tex.amp[static_cast<std::size_t>(i)] * uniform(rng, 0.8, 1.2);
      phase[static_cast<std::size_t>(i)] = uniform(rng, 0.0, kTwoPi);
    }
    double voice_phase = uniform(rng, 0.0, kTwoPi);
    const std::size_t len = b - a;
    for (std::size_t n = 0; n < len; ++n) {
      double env = 1.0;
      if (n < ramp) env = 0.5 - 0.5 * std::cos(kTwoPi * 0.5 * static_cast<double>(n) / ramp);
      if (len - n <= ramp) env = std::min(env, 0.5 - 0.5 * std::cos(kTwoPi * 0.5 * static_cast<double>(len - n) / ramp));
      double v = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        v += amp[i] * std::sin(phase[i]);
        phase[i] += kTwoPi * f[i] / sr;
      }
      voice_phase += kTwoPi * spk.f0 / sr;
      const double voicing = 0.65 + 0.35 * std::sin(voice_phase);
      out[a + n] += spk.level * env * (voicing * v + 0.05 * normal(rng));
    }
  }
  for (double& s : out) s = static_cast<double>(static_cast<float>(s));
  return out;
}

inline std::vector<int> labels_of(const std::vector<Segment>& segs) {
  std::vector<int> l;
  for (const auto& s : segs) l.insert(l.end(), static_cast<std::size_t>(s.frames), s.label);
  return l;
}

inline void add_filler(std::vector<Segment>& segs, int frames, const KeywordSpec& ks, Rng& rng) {
  while (frames > 0) {
    int d = static_cast<int>(uniform_int(rng, ks.filler_phone_frames_min, ks.filler_phone_frames_max));
    d = std::min(d, frames);
    segs.push_back({kOtherSpeechClass, d, static_cast<int>(uniform_int(rng, 0, kFillerPhones - 1))});
    frames -= d;
  }
}

inline void add_keyword_phones(std::vector<Segment>& segs, int first_phone, int last_phone, const KeywordSpec& ks,
                               Rng& rng) {
  for (int p = first_phone; p <= last_phone; ++p)
    for (int s = 0; s < kStatesPerPhone; ++s)
      segs.push_back({p * kStatesPerPhone + s,
                      static_cast<int>(uniform_int(rng, ks.state_frames_min, ks.state_frames_max))});
}

inline Speaker draw_speaker(Rng& rng) {
  return {uniform(rng, 0.93, 1.07), uniform(rng, 90.0, 230.0), uniform(rng, 0.08, 0.3)};
}

inline std::vector<Segment> positive_layout(const KeywordSpec& ks, Rng& rng) {
  std::vector<Segment> segs;
  segs.push_back({kSilenceClass, static_cast<int>(uniform_int(rng, ks.silence_frames_min, ks.silence_frames_max))});
  add_filler(segs, static_cast<int>(uniform_int(rng, ks.filler_frames_min, ks.filler_frames_max)), ks, rng);
  add_keyword_phones(segs, 0, kKeywordPhones - 1, ks, rng);
  add_filler(segs, static_cast<int>(uniform_int(rng, ks.filler_frames_min, ks.filler_frames_max)), ks, rng);
  segs.push_back({kSilenceClass, static_cast<int>(uniform_int(rng, ks.silence_frames_min, ks.silence_frames_max))});
  return segs;
}

inline std::vector<Segment> negative_layout(const KeywordSpec& ks, Rng& rng, int total_min, int total_max) {
  std::vector<Segment> segs;
  segs.push_back({kSilenceClass, static_cast<int>(uniform_int(rng, ks.silence_frames_min, ks.silence_frames_max))});
  const int total = static_cast<int>(uniform_int(rng, total_min, total_max));
  if (uniform(rng, 0.0, 1.0) < ks.near_miss_probability) {
    const int count = static_cast<int>(uniform_int(rng, 2, 4));
    const int first = static_cast<int>(uniform_int(rng, 0, kKeywordPhones - count));
    const int before = static_cast<int>(uniform_int(rng, 0, total / 2));
    add_filler(segs, before, ks, rng);
    add_keyword_phones(segs, first, first + count - 1, ks, rng);
    add_filler(segs, std::max(0, total - before - count * kStatesPerPhone * 3), ks, rng);
  } else {
    add_filler(segs, total, ks, rng);
  }
  segs.push_back({kSilenceClass, static_cast<int>(uniform_int(rng, ks.silence_frames_min, ks.silence_frames_max))});
  return segs;
}

inline Utterance synthesize(std::int64_t id, bool positive, const std::vector<Segment>& segs, const FrameSpec& spec,
                            Rng& rng) {
  Utterance u;
  u.id = id;
  u.is_positive = positive;
  const Speaker spk = draw_speaker(rng);
  u.samples = render(segs, spk, spec, rng);
  u.frame_labels = labels_of(segs);
  return u;
}

}  // namespace detail

/// Clean corpus: ids 0..positives-1 are positives, the rest negatives; all in the train split.
inline std::vector<Utterance> generate_corpus(std::uint64_t seed, const CorpusCounts& counts, const KeywordSpec& ks,
                                              const FrameSpec& spec = {}) {
  if (counts.positives < 0 || counts.negatives < 0 || counts.positives + counts.negatives == 0)
    throw ConfigError("corpus counts must be non-negative with at least one utterance");
  std::vector<Utterance> out;
  out.reserve(static_cast<std::size_t>(counts.positives + counts.negatives));
  for (int i = 0; i < counts.positives + counts.negatives; ++i) {
    Rng rng = substream(seed, "utterance", static_cast<std::uint64_t>(i));
    const bool pos = i < counts.positives;
    auto segs = pos ? detail::positive_layout(ks, rng)
                    : detail::negative_layout(ks, rng, ks.negative_frames_min, ks.negative_frames_max);
    out.push_back(detail::synthesize(i, pos, segs, spec, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise, impulse responses, mixing

struct Noise {
  std::string kind;
  Waveform samples;  // unit mean power
};

inline const std::vector<std::string>& noise_kinds() {
  static const std::vector<std::string> k{"white", "brown", "hum", "babble", "impulsive"};
  return k;
}

inline void normalize_power(Waveform& w) {
  double p = 0.0;
  for (double s : w) p += s * s;
  p /= static_cast<double>(w.size());
  if (!(p > 0.0)) fail("cannot normalise a zero-power signal");
  const double g = 1.0 / std::sqrt(p);
  for (double& s : w) s *= g;
}

inline Noise generate_noise(const std::string& kind, double seconds, int sample_rate, Rng& rng) {
  const auto n = static_cast<std::size_t>(seconds * sample_rate);
  Waveform w(n, 0.0);
  const double sr = sample_rate;
  if (kind == "white") {
    for (double& s : w) s = normal(rng);
  } else if (kind == "brown") {
    double acc = 0.0;
    for (double& s : w) s = acc = 0.98 * acc + normal(rng);
  } else if (kind == "hum") {
    const double base = uniform(rng, 50.0, 120.0);
    for (std::size_t i = 0; i < n; ++i) {
      double v = 0.0;
      for (int h = 1; h <= 6; ++h) v += std::sin(detail::kTwoPi * base * h * static_cast<double>(i) / sr) / h;
      w[i] = v + 0.1 * normal(rng);
    }
  } else if (kind == "babble") {
    // overlapping streams of filler speech
    FrameSpec fs;
    fs.sample_rate = sample_rate;
    KeywordSpec ks;
    const auto frames = static_cast<int>(seconds * 100.0) + 2;
    for (int talker = 0; talker < 4; ++talker) {
      std::vector<detail::Segment> segs;
      detail::add_filler(segs, frames, ks, rng);
      Waveform t = detail::render(segs, detail::draw_speaker(rng), fs, rng);
      for (std::size_t i = 0; i < n && i < t.size(); ++i) w[i] += t[i];
    }
  } else if (kind == "impulsive") {
    for (double& s : w) s = 0.05 * normal(rng);
    std::size_t pos = 0;
    while (true) {
      pos += static_cast<std::size_t>(uniform(rng, 0.1, 0.5) * sr);
      if (pos >= n) break;
      const double amp = uniform(rng, 0.5, 1.0);
      const double decay = uniform(rng, 0.005, 0.03) * sr;
      for (std::size_t i = pos; i < n && i < pos + static_cast<std::size_t>(6 * decay); ++i)
        w[i] += amp * normal(rng) * std::exp(-static_cast<double>(i - pos) / decay);
    }
  } else {
    throw ConfigError(detail::concat("unknown noise kind '", kind, "'"));
  }
  normalize_power(w);
  return {kind, std::move(w)};
}

inline std::vector<Noise> make_noise_bank(std::uint64_t seed, int sample_rate, double seconds = 3.0) {
  std::vector<Noise> bank;
  for (std::size_t i = 0; i < noise_kinds().size(); ++i) {
    Rng rng = substream(seed, "noise-bank", i);
    bank.push_back(generate_noise(noise_kinds()[i], seconds, sample_rate, rng));
  }
  return bank;
}

/// Exponentially decaying random FIR; `decay_seconds` is the time to -60 dB.
inline Waveform make_impulse_response(Rng& rng, int sample_rate, double decay_seconds) {
  const auto taps = std::max<std::size_t>(1, static_cast<std::size_t>(decay_seconds * sample_rate));
  Waveform h(taps);
  h[0] = 1.0;
  const double rate = 6.907755278982137 / (decay_seconds * sample_rate);  // ln(1000)
  for (std::size_t n = 1; n < taps; ++n) h[n] = 0.3 * normal(rng) * std::exp(-rate * static_cast<double>(n));
  return h;
}

/// First `out_len` samples of the linear convolution of x and h (FFT based).
inline Waveform convolve(std::span<const double> x, std::span<const double> h, std::size_t out_len) {
  if (h.size() == 1) {
    Waveform y(out_len, 0.0);
    for (std::size_t i = 0; i < out_len && i < x.size(); ++i) y[i] = x[i] * h[0];
    return y;
  }
  std::size_t n = 1;
  while (n < x.size() + h.size() - 1) n <<= 1;
  std::vector<double> a(n, 0.0), b(n, 0.0);
  std::copy(x.begin(), x.end(), a.begin());
  std::copy(h.begin(), h.end(), b.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> fa, fb;
  fft.fwd(fa, a);
  fft.fwd(fb, b);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  std::vector<double> y;
  fft.inv(y, fa);
  y.resize(out_len, 0.0);
  return y;
}

inline double mean_power(std::span<const double> w) {
  double p = 0.0;
  for (double s : w) p += s * s;
  return w.empty() ? 0.0 : p / static_cast<double>(w.size());
}

struct MixResult {
  Waveform mixed;
  /// Scaled components; mixed == clean_component + noise_component sample-wise.
  Waveform clean_component;
  Waveform noise_component;
  double noise_gain = 0.0;
  /// Applied to the whole mix when its peak would exceed 1; otherwise 1.
  double output_gain = 1.0;
};

inline double measured_snr_db(const MixResult& m) {
  return 10.0 * std::log10(mean_power(m.clean_component) / mean_power(m.noise_component));
}

/// Loops `noise` from `noise_offset`, reverberates it with `rir`, scales it to
/// `target_snr_db` relative to `clean` (powers over the full utterance) and adds it.
inline MixResult mix_at_snr(std::span<const double> clean, std::span<const double> noise, std::span<const double> rir,
                            double target_snr_db, std::size_t noise_offset = 0) {
  if (!std::isfinite(target_snr_db)) fail("mix_at_snr: non-finite target SNR");
  if (clean.empty() || noise.empty() || rir.empty()) fail("mix_at_snr: empty input");
  const double p_clean = mean_power(clean);
  if (!(p_clean > 0.0)) fail("mix_at_snr: clean signal has zero power");
  Waveform looped(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) looped[i] = noise[(noise_offset + i) % noise.size()];
  Waveform reverbed = convolve(looped, rir, clean.size());
  const double p_noise = mean_power(reverbed);
  if (!(p_noise > 0.0)) fail("mix_at_snr: noise signal has zero power");

  MixResult r;
  r.noise_gain = std::sqrt(p_clean / (p_noise * std::pow(10.0, target_snr_db / 10.0)));
  r.clean_component.assign(clean.begin(), clean.end());
  r.noise_component = std::move(reverbed);
  for (double& s : r.noise_component) s *= r.noise_gain;
  r.mixed.resize(clean.size());
  double peak = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    r.mixed[i] = r.clean_component[i] + r.noise_component[i];
    peak = std::max(peak, std::abs(r.mixed[i]));
  }
  if (peak > 1.0) {
    r.output_gain = 1.0 / peak;
    for (auto* w : {&r.mixed, &r.clean_component, &r.noise_component})
      for (double& s : *w) s *= r.output_gain;
  }
  return r;
}

struct AugmentConfig {
  double snr_min_db = -10.0;
  double snr_max_db = 10.0;  // exclusive
  double rir_decay_min_s = 0.2;
  double rir_decay_max_s = 0.6;
  double cv_fraction = 0.02;
};

/// Noisy copy of one utterance; draws SNR, noise kind, impulse response and offset from `rng`.
inline Utterance make_noisy_copy(const Utterance& clean, std::int64_t new_id, const std::vector<Noise>& bank,
                                 const AugmentConfig& cfg, int sample_rate, Rng& rng) {
  if (bank.empty()) fail("noise bank is empty");
  const double snr = uniform(rng, cfg.snr_min_db, cfg.snr_max_db);
  const auto& noise = bank[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(bank.size()) - 1))];
  const Waveform rir = make_impulse_response(rng, sample_rate, uniform(rng, cfg.rir_decay_min_s, cfg.rir_decay_max_s));
  const auto offset = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(noise.samples.size()) - 1));
  MixResult m = mix_at_snr(clean.samples, noise.samples, rir, snr, offset);
  Utterance u = clean;
  u.id = new_id;
  u.samples = std::move(m.mixed);
  for (double& s : u.samples) s = static_cast<double>(static_cast<float>(s));
  u.provenance = {true, snr, noise.kind, clean.id};
  return u;
}

/// Every clean utterance plus one noisy copy each (ids continue after the
/// largest clean id). round(cv_fraction * n) clean sources are moved to the
/// cv split together with their noisy copies.
inline std::vector<Utterance> build_multicondition(const std::vector<Utterance>& clean, const std::vector<Noise>& bank,
                                                   std::uint64_t seed, const AugmentConfig& cfg = {},
                                                   int sample_rate = 16000) {
  if (clean.empty()) fail("build_multicondition: empty clean corpus");
  std::int64_t next_id = 0;
  for (const auto& u : clean) next_id = std::max(next_id, u.id + 1);

  std::vector<Utterance> out = clean;
  for (auto& u : out) u.split = Split::train;
  const std::size_t n = clean.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng cv_rng = substream(seed, "cv-split");
  shuffle(order, cv_rng);
  const auto n_cv = static_cast<std::size_t>(std::llround(cfg.cv_fraction * static_cast<double>(n)));
  std::vector<bool> in_cv(n, false);
  for (std::size_t i = 0; i < n_cv && i < n; ++i) in_cv[order[i]] = true;

  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = substream(seed, "augment", static_cast<std::uint64_t>(clean[i].id));
    out.push_back(make_noisy_copy(clean[i], next_id + static_cast<std::int64_t>(i), bank, cfg, sample_rate, rng));
    if (in_cv[i]) {
      out[i].split = Split::cv;
      out.back().split = Split::cv;
    }
  }
  return out;
}

/// Clean-only corpus with the same cv assignment rule as build_multicondition.
inline std::vector<Utterance> assign_cv(std::vector<Utterance> clean, std::uint64_t seed, double cv_fraction) {
  std::vector<std::size_t> order(clean.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng cv_rng = substream(seed, "cv-split");
  shuffle(order, cv_rng);
  const auto n_cv = static_cast<std::size_t>(std::llround(cv_fraction * static_cast<double>(clean.size())));
  for (auto& u : clean) u.split = Split::train;
  for (std::size_t i = 0; i < n_cv && i < order.size(); ++i) clean[order[i]].split = Split::cv;
  return clean;
}

struct EvalSetConfig {
  int positives = 200;
  int negatives = 200;
  /// Negatives are longer than training utterances to accumulate false-alarm hours.
  int negative_frames_min = 300;
  int negative_frames_max = 500;
  double noisy_fraction = 0.5;
};

/// Evaluation utterances (split eval), ids starting at `first_id`. A fraction
/// is corrupted with the same augmentation protocol as training.
inline std::vector<Utterance> generate_eval_set(std::uint64_t seed, std::int64_t first_id, const EvalSetConfig& ec,
                                                const KeywordSpec& ks, const std::vector<Noise>& bank,
                                                const AugmentConfig& ac = {}, const FrameSpec& spec = {}) {
  std::vector<Utterance> out;
  for (int i = 0; i < ec.positives + ec.negatives; ++i) {
    const std::int64_t id = first_id + i;
    Rng rng = substream(seed, "eval-utterance", static_cast<std::uint64_t>(i));
    const bool pos = i < ec.positives;
    auto segs = pos ? detail::positive_layout(ks, rng)
                    : detail::negative_layout(ks, rng, ec.negative_frames_min, ec.negative_frames_max);
    Utterance u = detail::synthesize(id, pos, segs, spec, rng);
    if (!bank.empty() && uniform(rng, 0.0, 1.0) < ec.noisy_fraction) {
      Utterance noisy = make_noisy_copy(u, id, bank, ac, spec.sample_rate, rng);
      noisy.provenance.source_id = -1;
      u = std::move(noisy);
    }
    u.split = Split::eval;
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest (line-delimited JSON) and on-disk layout:
//   <dir>/manifest.jsonl, <dir>/wav/<id>.wav, <dir>/labels/<id>.txt

struct ManifestEntry {
  std::int64_t id = 0;
  std::string path;
  Split split = Split::train;
  bool is_positive = false;
  Provenance provenance;
  std::string frame_label_path;
  double duration_seconds = 0.0;
};

inline nlohmann::json to_json(const ManifestEntry& e) {
  nlohmann::json prov;
  if (e.provenance.noisy)
    prov = {{"kind", "noisy"},
            {"snr_db", e.provenance.snr_db},
            {"noise_kind", e.provenance.noise_kind},
            {"source_id", e.provenance.source_id}};
  else
    prov = {{"kind", "clean"}};
  nlohmann::json j;
  j["id"] = e.id;
  j["path"] = e.path;
  j["split"] = to_string(e.split);
  j["is_positive"] = e.is_positive;
  j["provenance"] = prov;
  j["frame_label_path"] = e.frame_label_path;
  j["duration_seconds"] = e.duration_seconds;
  return j;
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  try {
    e.id = j.at("id").get<std::int64_t>();
    e.path = j.at("path").get<std::string>();
    e.split = split_from_string(j.at("split").get<std::string>());
    e.is_positive = j.at("is_positive").get<bool>();
    e.frame_label_path = j.at("frame_label_path").get<std::string>();
    e.duration_seconds = j.value("duration_seconds", 0.0);
    const auto& p = j.at("provenance");
    const auto kind = p.at("kind").get<std::string>();
    if (kind == "noisy") {
      e.provenance.noisy = true;
      e.provenance.snr_db = p.at("snr_db").get<double>();
      e.provenance.noise_kind = p.at("noise_kind").get<std::string>();
      e.provenance.source_id = p.value("source_id", std::int64_t{-1});
    } else if (kind != "clean") {
      fail("unknown provenance kind '", kind, "'");
    }
  } catch (const nlohmann::json::exception& ex) {
    fail("malformed manifest entry: ", ex.what());
  }
  return e;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open manifest ", path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      fail(path.string(), ":", lineno, ": ", ex.what());
    }
    out.push_back(manifest_entry_from_json(j));
  }
  return out;
}

/// Writes waveforms, label files and the manifest.
inline std::vector<ManifestEntry> write_corpus(const std::filesystem::path& dir, const std::vector<Utterance>& corpus,
                                               int sample_rate) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "wav");
  fs::create_directories(dir / "labels");
  std::vector<ManifestEntry> entries;
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) fail("cannot write manifest in ", dir.string());
  for (const auto& u : corpus) {
    ManifestEntry e;
    e.id = u.id;
    e.path = detail::concat("wav/", u.id, ".wav");
    e.frame_label_path = detail::concat("labels/", u.id, ".txt");
    e.split = u.split;
    e.is_positive = u.is_positive;
    e.provenance = u.provenance;
    e.duration_seconds = u.duration_seconds(sample_rate);
    write_wav(dir / e.path, u.samples, sample_rate);
    std::ofstream lab(dir / e.frame_label_path);
    for (std::size_t i = 0; i < u.frame_labels.size(); ++i) lab << (i ? " " : "") << u.frame_labels[i];
    lab << '\n';
    manifest << to_json(e).dump() << '\n';
    entries.push_back(std::move(e));
  }
  return entries;
}

inline std::vector<int> read_labels(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open label file ", path.string());
  std::vector<int> l;
  int v;
  while (is >> v) l.push_back(v);
  return l;
}

/// Loads every manifest entry (optionally only some splits) back into utterances.
inline std::vector<Utterance> read_corpus(const std::filesystem::path& dir, std::optional<Split> only = std::nullopt) {
  std::vector<Utterance> out;
  for (const auto& e : read_manifest(dir / "manifest.jsonl")) {
    if (only && e.split != *only) continue;
    Utterance u;
    u.id = e.id;
    u.samples = read_wav(dir / e.path).samples;
    u.frame_labels = read_labels(dir / e.frame_label_path);
    u.is_positive = e.is_positive;
    u.provenance = e.provenance;
    u.split = e.split;
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace dpkws
