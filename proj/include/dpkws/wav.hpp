/*
 * wav.hpp
 *
 * Mono 32-bit IEEE-float RIFF/WAVE reading and writing.
 */
#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace dpkws {

namespace detail {

inline void wav_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void wav_u16(std::ostream& os, std::uint16_t v) {
  os.put(static_cast<char>(v & 0xff));
  os.put(static_cast<char>(v >> 8));
}
inline std::uint32_t wav_read_le(const std::vector<unsigned char>& b, std::size_t pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > b.size()) fail("wav: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint32_t>(b[pos + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

}  // namespace detail

/// Samples are converted to float32 on write.
inline void write_wav(const std::filesystem::path& path, std::span<const double> samples, int sample_rate) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot open ", path.string(), " for writing");
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 4);
  os.write("RIFF", 4);
  detail::wav_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  detail::wav_u32(os, 16);
  detail::wav_u16(os, 3);  // WAVE_FORMAT_IEEE_FLOAT
  detail::wav_u16(os, 1);
  detail::wav_u32(os, static_cast<std::uint32_t>(sample_rate));
  detail::wav_u32(os, static_cast<std::uint32_t>(sample_rate) * 4);
  detail::wav_u16(os, 4);
  detail::wav_u16(os, 32);
  os.write("data", 4);
  detail::wav_u32(os, data_bytes);
  for (double s : samples) detail::wav_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(s)));
  if (!os) fail("write to ", path.string(), " failed");
}

struct WavData {
  int sample_rate = 0;
  std::vector<double> samples;
};

inline WavData read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open ", path.string());
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (b.size() < 12 || std::string(b.begin(), b.begin() + 4) != "RIFF" || std::string(b.begin() + 8, b.begin() + 12) != "WAVE")
    fail(path.string(), ": not a RIFF/WAVE file");
  WavData out;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::string id(b.begin() + static_cast<std::ptrdiff_t>(pos), b.begin() + static_cast<std::ptrdiff_t>(pos + 4));
    const std::uint32_t size = detail::wav_read_le(b, pos + 4, 4);
    const std::size_t body = pos + 8;
    if (body + size > b.size()) fail(path.string(), ": chunk '", id, "' overruns file");
    if (id == "fmt ") {
      const auto format = detail::wav_read_le(b, body, 2);
      const auto channels = detail::wav_read_le(b, body + 2, 2);
      out.sample_rate = static_cast<int>(detail::wav_read_le(b, body + 4, 4));
      const auto bits = detail::wav_read_le(b, body + 14, 2);
      if (format != 3 || channels != 1 || bits != 32) fail(path.string(), ": expected mono float32 PCM");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) fail(path.string(), ": data chunk before fmt chunk");
      out.samples.resize(size / 4);
      for (std::size_t i = 0; i < out.samples.size(); ++i)
        out.samples[i] = std::bit_cast<float>(detail::wav_read_le(b, body + 4 * i, 4));
      return out;
    }
    pos = body + size + (size & 1);
  }
  fail(path.string(), ": no data chunk");
}

}  // namespace dpkws
