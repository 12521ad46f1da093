#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dpkws/dpkws.hpp"
#include "oracles.hpp"

using namespace dpkws;

namespace {

Matrix random_frames(Rng& rng, Eigen::Index n, Eigen::Index d, double scale = 1.0) {
  Matrix x(n, d);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < d; ++c) x(r, c) = scale * normal(rng);
  return x;
}

void randomize_affine(AcousticModel& m, Rng& rng) {
  for (auto& l : m.params.layers) {
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = 0.3 * normal(rng);
    for (Eigen::Index i = 0; i < l.gain.size(); ++i) l.gain[i] = uniform(rng, 0.5, 1.5);
    for (Eigen::Index i = 0; i < l.shift.size(); ++i) l.shift[i] = 0.3 * normal(rng);
  }
  for (std::size_t b = 0; b < m.running_mean.size(); ++b)
    for (Eigen::Index i = 0; i < m.running_mean[b].size(); ++i) {
      m.running_mean[b][i] = 0.2 * normal(rng);
      m.running_var[b][i] = uniform(rng, 0.3, 2.0);
    }
}

// Straightforward long double forward pass, row by row.
std::vector<std::vector<long double>> reference_forward(const AcousticModel& m, const Matrix& x, Mode mode) {
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<std::vector<long double>> a(n);
  for (std::size_t r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) a[r].push_back(x(static_cast<Eigen::Index>(r), c));
  const long double eps = m.batch_norm.epsilon;
  for (std::size_t b = 0; b + 1 < m.params.layers.size(); ++b) {
    const Layer& l = m.params.layers[b];
    const auto w = static_cast<std::size_t>(l.weight.cols());
    std::vector<std::vector<long double>> h(n, std::vector<long double>(w, 0.0L));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < w; ++j) {
        long double s = l.bias[static_cast<Eigen::Index>(j)];
        for (std::size_t i = 0; i < a[r].size(); ++i)
          s += a[r][i] * l.weight(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        h[r][j] = s;
      }
    for (std::size_t j = 0; j < w; ++j) {
      long double mu, var;
      if (mode == Mode::training) {
        mu = 0.0L;
        for (std::size_t r = 0; r < n; ++r) mu += h[r][j];
        mu /= static_cast<long double>(n);
        var = 0.0L;
        for (std::size_t r = 0; r < n; ++r) var += (h[r][j] - mu) * (h[r][j] - mu);
        var /= static_cast<long double>(n);
      } else {
        mu = m.running_mean[b][static_cast<Eigen::Index>(j)];
        var = m.running_var[b][static_cast<Eigen::Index>(j)];
      }
      for (std::size_t r = 0; r < n; ++r) {
        const long double y = l.gain[static_cast<Eigen::Index>(j)] * (h[r][j] - mu) / std::sqrt(var + eps) +
                              l.shift[static_cast<Eigen::Index>(j)];
        h[r][j] = 1.0L / (1.0L + std::exp(-y));
      }
    }
    a = std::move(h);
  }
  const Layer& out = m.params.layers.back();
  std::vector<std::vector<long double>> z(n, std::vector<long double>(static_cast<std::size_t>(out.weight.cols())));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < z[r].size(); ++j) {
      long double s = out.bias[static_cast<Eigen::Index>(j)];
      for (std::size_t i = 0; i < a[r].size(); ++i)
        s += a[r][i] * out.weight(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      z[r][j] = s;
    }
  return z;
}

double dp_loss(const AcousticModel& m, const Matrix& x, const std::vector<int>& y, const std::vector<double>& s) {
  return dp_cross_entropy(forward(m, x, Mode::training).logits, y, s).loss;
}

}  // namespace

TEST(Netcore, ZeroModelGivesZeroLogits) {
  const ModelShape shape{6, 4, 3, 5};
  const auto m = zero_model(shape);
  Rng rng = substream(1, "t");
  const Matrix x = random_frames(rng, 9, 6);
  for (Mode mode : {Mode::training, Mode::inference}) {
    const auto r = forward(m, x, mode);
    ASSERT_EQ(r.logits.rows(), 9);
    ASSERT_EQ(r.logits.cols(), 5);
    EXPECT_EQ(r.logits.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Netcore, InferenceIsDeterministicAndRowIndependent) {
  Rng rng = substream(2, "t");
  auto m = make_model({10, 8, 3, 4}, rng);
  randomize_affine(m, rng);
  const Matrix x = random_frames(rng, 12, 10);
  const auto a = forward(m, x, Mode::inference).logits;
  const auto b = forward(m, x, Mode::inference).logits;
  EXPECT_EQ((a - b).cwiseAbs().maxCoeff(), 0.0);
  const auto single = forward(m, x.middleRows(5, 1), Mode::inference).logits;
  EXPECT_NEAR((single - a.middleRows(5, 1)).cwiseAbs().maxCoeff(), 0.0, 1e-14);
}

TEST(Netcore, ForwardMatchesLongDoubleReference) {
  Rng rng = substream(3, "t");
  auto m = make_model({7, 6, 2, 3}, rng);
  randomize_affine(m, rng);
  const Matrix x = random_frames(rng, 11, 7);
  for (Mode mode : {Mode::training, Mode::inference}) {
    const auto got = forward(m, x, mode).logits;
    const auto ref = reference_forward(m, x, mode);
    for (Eigen::Index r = 0; r < got.rows(); ++r)
      for (Eigen::Index c = 0; c < got.cols(); ++c)
        EXPECT_NEAR(got(r, c), static_cast<double>(ref[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]),
                    1e-10);
  }
}

TEST(Netcore, ZeroLogitGradientGivesZeroParameterGradient) {
  Rng rng = substream(4, "t");
  auto m = make_model({5, 4, 2, 3}, rng);
  const Matrix x = random_frames(rng, 6, 5);
  const auto fr = forward(m, x, Mode::training);
  const auto g = backward(m, fr.cache, Matrix::Zero(6, 3));
  for (auto s : parameter_spans(g.params))
    for (double v : s) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.input.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Netcore, LinearModelGradientsByHand) {
  // No hidden layers: logits = x W + b.
  auto m = zero_model({2, 1, 0, 2});
  m.params.layers[0].weight << 1.0, -2.0, 0.5, 3.0;
  m.params.layers[0].bias << 0.25, -0.75;
  Matrix x(2, 2);
  x << 1.0, 2.0, -1.0, 0.5;
  const auto fr = forward(m, x, Mode::training);
  EXPECT_DOUBLE_EQ(fr.logits(0, 0), 1.0 + 1.0 + 0.25);
  EXPECT_DOUBLE_EQ(fr.logits(1, 1), 2.0 + 1.5 - 0.75);
  Matrix d(2, 2);
  d << 1.0, 0.0, 0.0, 2.0;
  const auto g = backward(m, fr.cache, d);
  Matrix expected_w(2, 2);
  expected_w << 1.0, -2.0, 2.0, 1.0;
  EXPECT_EQ((g.params.layers[0].weight - expected_w).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_DOUBLE_EQ(g.params.layers[0].bias[0], 1.0);
  EXPECT_DOUBLE_EQ(g.params.layers[0].bias[1], 2.0);
  EXPECT_DOUBLE_EQ(g.input(1, 0), 2.0 * -2.0);
}

TEST(Netcore, TwoFrameBatchNormGradientClosedForm) {
  auto m = zero_model({1, 1, 1, 2});
  const double w = 1.7, eps = m.batch_norm.epsilon;
  m.params.layers[0].weight(0, 0) = w;
  m.params.layers[0].bias[0] = 0.1;
  m.params.layers[1].weight << 1.0, 0.0;
  Matrix x(2, 1);
  x << 0.004, -0.001;
  const auto fr = forward(m, x, Mode::training);
  const double d = w * (x(0, 0) - x(1, 0)) / 2.0;
  const double xhat1 = d / std::sqrt(d * d + eps);
  EXPECT_NEAR(fr.cache.blocks[0].normalized(0, 0), xhat1, 1e-13);
  EXPECT_NEAR(fr.cache.blocks[0].normalized(1, 0), -xhat1, 1e-13);
  Matrix lg = Matrix::Zero(2, 2);
  lg(0, 0) = 1.0;
  const auto g = backward(m, fr.cache, lg);
  const double s = 1.0 / (1.0 + std::exp(-xhat1));
  const double dxhat_dh = 0.5 * eps / std::pow(d * d + eps, 1.5);
  EXPECT_NEAR(g.input(0, 0), s * (1 - s) * dxhat_dh * w, 1e-12 * std::abs(dxhat_dh * w));
  EXPECT_NEAR(g.input(1, 0), -s * (1 - s) * dxhat_dh * w, 1e-12 * std::abs(dxhat_dh * w));
}

TEST(Netcore, WholeModelFiniteDifference) {
  Rng rng = substream(5, "t");
  auto m = make_model({6, 8, 2, 5}, rng);
  randomize_affine(m, rng);
  const Matrix x = random_frames(rng, 10, 6);
  std::vector<int> y;
  std::vector<double> s;
  for (int i = 0; i < 10; ++i) {
    y.push_back(static_cast<int>(uniform_int(rng, 0, 4)));
    s.push_back(oracle::log_uniform(rng, 0.2, 5.0));
  }
  const auto fr = forward(m, x, Mode::training);
  const auto r = dp_cross_entropy(fr.logits, y, s);
  const auto g = backward(m, fr.cache, r.logit_grads);
  auto params = parameter_spans(m.params);
  const auto grads = parameter_spans(g.params);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t)
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double keep = params[t][i];
      params[t][i] = keep + h;
      const double up = dp_loss(m, x, y, s);
      params[t][i] = keep - h;
      const double down = dp_loss(m, x, y, s);
      params[t][i] = keep;
      worst = std::max(worst, oracle::rel_err(grads[t][i], (up - down) / (2 * h), 1e-6));
    }
  EXPECT_LT(worst, 1e-4);

  // Input gradient too.
  Matrix xp = x;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    xp(3, c) = x(3, c) + h;
    const double up = dp_loss(m, xp, y, s);
    xp(3, c) = x(3, c) - h;
    const double down = dp_loss(m, xp, y, s);
    xp(3, c) = x(3, c);
    EXPECT_LT(oracle::rel_err(g.input(3, c), (up - down) / (2 * h), 1e-6), 1e-4);
  }
}

TEST(Netcore, BatchNormOutputMomentsFollowAffineTerms) {
  Rng rng = substream(6, "t");
  auto m = make_model({4, 5, 1, 2}, rng);
  randomize_affine(m, rng);
  const Matrix x = random_frames(rng, 400, 4, 3.0);
  const auto fr = forward(m, x, Mode::training);
  const auto& c = fr.cache.blocks[0];
  const Layer& l = m.params.layers[0];
  for (Eigen::Index j = 0; j < 5; ++j) {
    const Eigen::ArrayXd a = c.activation.col(j).array();
    const Eigen::ArrayXd pre = (a / (1.0 - a)).log();
    const double mean = pre.mean();
    const double var = (pre - mean).square().mean();
    EXPECT_NEAR(mean, l.shift[j], 1e-8);
    const double v = c.batch_var[j];
    EXPECT_NEAR(var, l.gain[j] * l.gain[j] * v / (v + m.batch_norm.epsilon), 1e-8);
  }
}

TEST(Netcore, RunningStatisticsUseUnbiasedVariance) {
  Rng rng = substream(7, "t");
  auto m = make_model({3, 2, 1, 2}, rng);
  const Matrix x = random_frames(rng, 5, 3);
  const auto fr = forward(m, x, Mode::training);
  update_running_stats(m, fr.cache);
  const auto& c = fr.cache.blocks[0];
  for (Eigen::Index j = 0; j < 2; ++j) {
    EXPECT_NEAR(m.running_mean[0][j], 0.1 * c.batch_mean[j], 1e-15);
    EXPECT_NEAR(m.running_var[0][j], 0.9 + 0.1 * c.batch_var[j] * 5.0 / 4.0, 1e-15);
  }
  const auto before = m.running_var[0];
  update_running_stats(m, forward(m, x, Mode::inference).cache);
  EXPECT_EQ(before, m.running_var[0]);
}

TEST(Netcore, AdamFirstStepIsLearningRateTimesSign) {
  Rng rng = substream(8, "t");
  auto m = make_model({4, 3, 1, 3}, rng);
  const auto before = m;
  auto g = zeros_like(m.params);
  auto gs = parameter_spans(g);
  for (auto s : gs)
    for (auto& v : s) v = normal(rng);
  auto st = make_adam_state(m);
  adam_step(m, g, st, 0.01);
  const auto p0 = parameter_spans(before.params);
  const auto p1 = parameter_spans(m.params);
  for (std::size_t t = 0; t < p0.size(); ++t)
    for (std::size_t i = 0; i < p0[t].size(); ++i) {
      const double sign = gs[t][i] > 0 ? 1.0 : -1.0;
      EXPECT_NEAR(p0[t][i] - p1[t][i], 0.01 * sign, 1e-8);
    }
  EXPECT_EQ(m.version, before.version + 1);
}

TEST(Netcore, AdamWithZeroGradientLeavesParametersUnchanged) {
  Rng rng = substream(9, "t");
  auto m = make_model({4, 3, 1, 3}, rng);
  const auto before = m;
  auto st = make_adam_state(m);
  const auto g = zeros_like(m.params);
  for (int i = 0; i < 5; ++i) adam_step(m, g, st, 0.01);
  EXPECT_EQ(oracle::max_param_diff(m, before), 0.0);
}

TEST(Netcore, AdamDescendsAQuadratic) {
  Rng rng = substream(10, "t");
  auto m = make_model({4, 3, 1, 3}, rng);
  randomize_affine(m, rng);
  auto st = make_adam_state(m);
  auto loss = [&] {
    double s = 0.0;
    for (auto sp : parameter_spans(m.params))
      for (double v : sp) s += 0.5 * v * v;
    return s;
  };
  double prev = loss();
  int decreasing = 0;
  for (int i = 0; i < 100; ++i) {
    ParameterSet g = m.params;
    adam_step(m, g, st, 0.01);
    const double now = loss();
    if (now < prev) ++decreasing;
    prev = now;
  }
  EXPECT_GE(decreasing, 95);
}

TEST(Netcore, CheckpointRoundTripIsBitIdentical) {
  Rng rng = substream(11, "t");
  auto m = make_model({6, 5, 2, 4}, rng);
  randomize_affine(m, rng);
  m.batch_norm.epsilon = 3e-4;
  const auto path = std::filesystem::temp_directory_path() / "dpkws_netcore_ckpt.bin";
  save_model(path, m);
  const auto back = load_model(path);
  EXPECT_EQ(back.shape, m.shape);
  EXPECT_EQ(back.batch_norm.epsilon, m.batch_norm.epsilon);
  const auto a = parameter_spans(m.params);
  const auto b = parameter_spans(back.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t i = 0; i < a[t].size(); ++i)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(a[t][i]), std::bit_cast<std::uint64_t>(b[t][i]));
  for (std::size_t l = 0; l < m.running_var.size(); ++l) {
    EXPECT_EQ(m.running_mean[l], back.running_mean[l]);
    EXPECT_EQ(m.running_var[l], back.running_var[l]);
  }
  const Matrix x = random_frames(rng, 4, 6);
  EXPECT_EQ(forward(m, x, Mode::inference).logits, forward(back, x, Mode::inference).logits);

  std::ofstream(path, std::ios::binary) << "NOPE";
  EXPECT_THROW(load_model(path), Error);
  std::filesystem::remove(path);
}

TEST(Netcore, StaleCacheIsRejected) {
  Rng rng = substream(12, "t");
  auto m = make_model({3, 2, 1, 2}, rng);
  const Matrix x = random_frames(rng, 4, 3);
  const auto fr = forward(m, x, Mode::training);
  auto st = make_adam_state(m);
  adam_step(m, zeros_like(m.params), st, 0.01);
  EXPECT_THROW(backward(m, fr.cache, Matrix::Zero(4, 2)), Error);
  const auto inf = forward(m, x, Mode::inference);
  EXPECT_THROW(backward(m, inf.cache, Matrix::Zero(4, 2)), Error);
}

TEST(Netcore, ShapeFaults) {
  Rng rng = substream(13, "t");
  auto m = make_model({3, 2, 1, 2}, rng);
  EXPECT_THROW(forward(m, Matrix::Zero(4, 5), Mode::training), Error);
  EXPECT_THROW(forward(m, Matrix::Zero(0, 3), Mode::training), Error);
  const auto fr = forward(m, Matrix::Ones(4, 3), Mode::training);
  EXPECT_THROW(backward(m, fr.cache, Matrix::Zero(4, 3)), Error);
  EXPECT_THROW(zero_model({3, 2, 1, 1}), ConfigError);
  try {
    forward(m, Matrix::Zero(2, 7), Mode::inference);
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("expects width 3, got 7"), std::string::npos);
  }
}
