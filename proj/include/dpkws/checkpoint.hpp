/*
 * checkpoint.hpp
 *
 * Versioned binary container shared by model checkpoints and feature dumps.
 * All integers and floats are little-endian:
 *
 *   offset  size  field
 *   0       4     magic "DPKW"
 *   4       4     uint32 format version (1)
 *   8       4     uint32 payload kind (1 = acoustic model, 2 = feature matrix)
 *   12      4     uint32 descriptor count D
 *   16      8*D   uint64 descriptors
 *   16+8D   8     uint64 value count V
 *   24+8D   8*V   float64 values
 *
 * Acoustic model: descriptors (input_dim, hidden_width, hidden_layers,
 * num_classes); values bn_epsilon, bn_momentum, then per hidden block the
 * weight (row-major, fan_in x fan_out), bias, gain, shift, running mean,
 * running variance, then the output weight (row-major) and output bias.
 *
 * Feature matrix: descriptors (rows, cols, utterance_id); values row-major.
 */
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "common.hpp"
#include "netcore.hpp"

namespace dpkws {

inline constexpr std::array<char, 4> kContainerMagic{'D', 'P', 'K', 'W'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class PayloadKind : std::uint32_t { acoustic_model = 1, feature_matrix = 2 };

struct Container {
  PayloadKind kind = PayloadKind::acoustic_model;
  std::vector<std::uint64_t> descriptors;
  std::vector<double> values;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) fail("container: unexpected end of file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline void write_container(std::ostream& os, const Container& c) {
  os.write(kContainerMagic.data(), 4);
  detail::put_u32(os, kContainerVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(c.kind));
  detail::put_u32(os, static_cast<std::uint32_t>(c.descriptors.size()));
  for (auto d : c.descriptors) detail::put_u64(os, d);
  detail::put_u64(os, c.values.size());
  for (double v : c.values) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) fail("container: write failed");
}

inline Container read_container(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kContainerMagic) fail("container: bad magic bytes");
  const auto version = static_cast<std::uint32_t>(detail::get_le(is, 4));
  if (version != kContainerVersion) fail("container: unsupported format version ", version);
  Container c;
  c.kind = static_cast<PayloadKind>(detail::get_le(is, 4));
  const auto nd = detail::get_le(is, 4);
  c.descriptors.resize(nd);
  for (auto& d : c.descriptors) d = detail::get_le(is, 8);
  const auto nv = detail::get_le(is, 8);
  if (nv > (std::uint64_t{1} << 34)) fail("container: implausible value count ", nv);
  c.values.resize(nv);
  for (auto& v : c.values) v = std::bit_cast<double>(detail::get_le(is, 8));
  return c;
}

inline Container model_to_container(const AcousticModel& m) {
  Container c;
  c.kind = PayloadKind::acoustic_model;
  c.descriptors = {static_cast<std::uint64_t>(m.shape.input_dim), static_cast<std::uint64_t>(m.shape.hidden_width),
                   static_cast<std::uint64_t>(m.shape.hidden_layers), static_cast<std::uint64_t>(m.shape.num_classes)};
  auto& v = c.values;
  v.push_back(m.batch_norm.epsilon);
  v.push_back(m.batch_norm.momentum);
  auto put_matrix = [&](const Matrix& w) {
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index col = 0; col < w.cols(); ++col) v.push_back(w(r, col));
  };
  auto put_vector = [&](const Vector& x) { v.insert(v.end(), x.data(), x.data() + x.size()); };
  for (std::size_t b = 0; b + 1 < m.params.layers.size(); ++b) {
    const Layer& l = m.params.layers[b];
    put_matrix(l.weight);
    put_vector(l.bias);
    put_vector(l.gain);
    put_vector(l.shift);
    put_vector(m.running_mean[b]);
    put_vector(m.running_var[b]);
  }
  put_matrix(m.params.layers.back().weight);
  put_vector(m.params.layers.back().bias);
  return c;
}

inline AcousticModel model_from_container(const Container& c) {
  if (c.kind != PayloadKind::acoustic_model) fail("container does not hold an acoustic model");
  if (c.descriptors.size() != 4) fail("model container: expected 4 descriptors, got ", c.descriptors.size());
  ModelShape shape{static_cast<int>(c.descriptors[0]), static_cast<int>(c.descriptors[1]),
                   static_cast<int>(c.descriptors[2]), static_cast<int>(c.descriptors[3])};
  AcousticModel m = zero_model(shape);
  std::size_t pos = 0;
  auto take = [&]() {
    if (pos >= c.values.size()) fail("model container: too few values");
    return c.values[pos++];
  };
  m.batch_norm.epsilon = take();
  m.batch_norm.momentum = take();
  auto get_matrix = [&](Matrix& w) {
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index col = 0; col < w.cols(); ++col) w(r, col) = take();
  };
  auto get_vector = [&](Vector& x) {
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = take();
  };
  for (std::size_t b = 0; b + 1 < m.params.layers.size(); ++b) {
    Layer& l = m.params.layers[b];
    get_matrix(l.weight);
    get_vector(l.bias);
    get_vector(l.gain);
    get_vector(l.shift);
    get_vector(m.running_mean[b]);
    get_vector(m.running_var[b]);
  }
  get_matrix(m.params.layers.back().weight);
  get_vector(m.params.layers.back().bias);
  if (pos != c.values.size()) fail("model container: ", c.values.size() - pos, " trailing values");
  return m;
}

inline void save_model(const std::filesystem::path& path, const AcousticModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot open ", path.string(), " for writing");
  write_container(os, model_to_container(m));
}

inline AcousticModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open checkpoint ", path.string());
  return model_from_container(read_container(is));
}

inline void save_feature_matrix(const std::filesystem::path& path, const Matrix& features, std::int64_t utterance_id) {
  Container c;
  c.kind = PayloadKind::feature_matrix;
  c.descriptors = {static_cast<std::uint64_t>(features.rows()), static_cast<std::uint64_t>(features.cols()),
                   static_cast<std::uint64_t>(utterance_id)};
  c.values.reserve(static_cast<std::size_t>(features.size()));
  for (Eigen::Index r = 0; r < features.rows(); ++r)
    for (Eigen::Index col = 0; col < features.cols(); ++col) c.values.push_back(features(r, col));
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot open ", path.string(), " for writing");
  write_container(os, c);
}

inline Matrix load_feature_matrix(const std::filesystem::path& path, std::int64_t* utterance_id = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open feature dump ", path.string());
  const Container c = read_container(is);
  if (c.kind != PayloadKind::feature_matrix || c.descriptors.size() != 3) fail("not a feature matrix container");
  const auto rows = static_cast<Eigen::Index>(c.descriptors[0]);
  const auto cols = static_cast<Eigen::Index>(c.descriptors[1]);
  if (static_cast<std::size_t>(rows * cols) != c.values.size()) fail("feature matrix: value count mismatch");
  Matrix m(rows, cols);
  std::size_t pos = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index col = 0; col < cols; ++col) m(r, col) = c.values[pos++];
  if (utterance_id) *utterance_id = static_cast<std::int64_t>(c.descriptors[2]);
  return m;
}

}  // namespace dpkws
