#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>

#include "cldta/dsp.hpp"

using namespace cldta;

namespace {

constexpr double kPi = std::numbers::pi;

MatD sine(double freq, double fs, Index n, double amp = 1.0, double phase = 0.0) {
  MatD x(1, n);
  for (Index i = 0; i < n; ++i) x(0, i) = amp * std::sin(2 * kPi * freq * static_cast<double>(i) / fs + phase);
  return x;
}

// Magnitude of the plain DFT of row 0 at `freq`, skipping `edge` samples at each end.
double dft_mag(const MatD& x, double freq, double fs, Index edge) {
  std::complex<double> acc = 0;
  for (Index i = edge; i < x.cols() - edge; ++i)
    acc += x(0, i) * std::polar(1.0, -2 * kPi * freq * static_cast<double>(i) / fs);
  return std::abs(acc);
}

double gain_db(const MatD& in, const MatD& out, double freq, double fs) {
  const Index edge = static_cast<Index>(fs);
  return 20 * std::log10(dft_mag(out, freq, fs, edge) / dft_mag(in, freq, fs, edge));
}

ChannelMontage montage62() { return load_montage(std::filesystem::path(CLDTA_DATA_DIR) / "montage_62.csv"); }

std::vector<double> gaussian(std::size_t n, double sd, Rng& rng) {
  std::normal_distribution<double> g(0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Posterior mean of x under x0 ~ N(y0, r), x_t - x_{t-1} ~ N(0, q), y_t ~ N(x_t, r),
// solved directly from the dense precision matrix.
std::vector<double> dense_smoother(const std::vector<double>& y, double q_over_r) {
  const Index n = static_cast<Index>(y.size());
  double mean = 0, r = 0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(n);
  for (double v : y) r += (v - mean) * (v - mean);
  r /= static_cast<double>(n);
  const double q = q_over_r * r;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  A(0, 0) += 1 / r;
  b(0) += y[0] / r;
  for (Index t = 0; t < n; ++t) {
    A(t, t) += 1 / r;
    b(t) += y[static_cast<std::size_t>(t)] / r;
  }
  for (Index t = 1; t < n; ++t) {
    A(t, t) += 1 / q;
    A(t - 1, t - 1) += 1 / q;
    A(t, t - 1) -= 1 / q;
    A(t - 1, t) -= 1 / q;
  }
  const Eigen::VectorXd x = A.ldlt().solve(b);
  return {x.data(), x.data() + n};
}

}  // namespace

// --- filters ---------------------------------------------------------------

TEST(Bandpass, PassbandSinePreserved) {
  const MatD x = sine(10, 200, 4000);
  const MatD y = bandpass(x, 8, 13, 200);
  EXPECT_NEAR(std::pow(10.0, gain_db(x, y, 10, 200) / 20), 1.0, 0.05);
}

TEST(Bandpass, StopbandSineAttenuated) {
  const MatD x = sine(60, 200, 4000);
  EXPECT_LE(gain_db(x, bandpass(x, 0.1, 4, 200), 60, 200), -20.0);
}

TEST(Bandpass, ZerosAndErrors) {
  EXPECT_TRUE(bandpass(MatD::Zero(3, 500), 8, 13, 200).isZero(0));
  EXPECT_THROW(bandpass(MatD::Zero(1, 500), 8, 120, 200), InvalidArgument);
  EXPECT_THROW(bandpass(MatD::Zero(1, 500), 13, 8, 200), InvalidArgument);
  MatD bad = MatD::Zero(1, 500);
  bad(0, 7) = std::nan("");
  EXPECT_THROW(bandpass(bad, 8, 13, 200), NumericError);
}

TEST(Bandpass, ZeroPhase) {
  const MatD x = sine(10, 200, 4000, 1.0, 0.3);
  const MatD y = bandpass(x, 8, 13, 200);
  // cross-correlation over the interior peaks at lag 0
  const Index edge = 400;
  auto xc = [&](Index lag) {
    double s = 0;
    for (Index i = edge; i < x.cols() - edge; ++i) s += x(0, i) * y(0, i + lag);
    return s;
  };
  const double c0 = xc(0);
  for (Index lag = 1; lag <= 5; ++lag) {
    EXPECT_GT(c0, xc(lag));
    EXPECT_GT(c0, xc(-lag));
  }
}

TEST(Notch, LineFrequencyRemoved) {
  const MatD x = sine(50, 200, 4000);
  EXPECT_LE(gain_db(x, notch(x, 50, 200), 50, 200), -30.0);
}

TEST(Notch, PassbandPreservedAndErrors) {
  const MatD x = sine(10, 200, 4000);
  EXPECT_NEAR(std::pow(10.0, gain_db(x, notch(x, 50, 200), 10, 200) / 20), 1.0, 0.02);
  EXPECT_TRUE(notch(MatD::Zero(2, 300), 50, 200).isZero(0));
  EXPECT_THROW(notch(x, 100, 200), InvalidArgument);
  EXPECT_THROW(notch(x, 0, 200), InvalidArgument);
}

// --- differential entropy --------------------------------------------------

TEST(DifferentialEntropy, UnitVarianceNoise) {
  Rng rng(1);
  double acc = 0;
  for (int w = 0; w < 1000; ++w) acc += differential_entropy(gaussian(200, 1.0, rng));
  EXPECT_NEAR(acc / 1000, 1.4189385, 0.01);
}

TEST(DifferentialEntropy, ClosedForms) {
  // +-a alternating has variance a^2 exactly
  auto alt = [](double a) {
    std::vector<double> v(100);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i % 2 ? a : -a;
    return v;
  };
  EXPECT_NEAR(differential_entropy(alt(std::sqrt(std::numbers::e / (2 * kPi)))), 1.0, 1e-12);
  EXPECT_NEAR(differential_entropy(alt(1.0)), 0.5 * std::log(2 * kPi * std::numbers::e), 1e-12);
  const double floor = 0.5 * std::log(2 * kPi * std::numbers::e * 1e-12);
  EXPECT_DOUBLE_EQ(differential_entropy(std::vector<double>(50, 3.0)), floor);
  EXPECT_THROW(differential_entropy(std::vector<double>{1.0}), InvalidArgument);
}

TEST(DifferentialEntropy, ShiftAndScaleLaws) {
  Rng rng(2);
  const auto x = gaussian(200, 1.5, rng);
  std::vector<double> shifted = x, scaled = x;
  for (auto& v : shifted) v += 1000.0;
  for (auto& v : scaled) v *= -7.0;
  EXPECT_NEAR(differential_entropy(shifted), differential_entropy(x), 1e-9);
  EXPECT_NEAR(differential_entropy(scaled) - differential_entropy(x), std::log(7.0), 1e-9);
}

// --- extract_de ------------------------------------------------------------

TEST(ExtractDe, ThirtySecondTrial) {
  Rng rng(3);
  RawTrial t;
  t.data = MatD::NullaryExpr(62, 6000, [&] { return std::normal_distribution<double>(0, 1)(rng); });
  t.label = 2;
  t.trial_id = 4;
  const auto out = extract_de(t, BandSpec::standard());
  ASSERT_EQ(out.size(), 30u);
  for (std::size_t k = 0; k < out.size(); ++k) {
    EXPECT_EQ(out[k].de.rows(), 62);
    EXPECT_EQ(out[k].de.cols(), 5);
    EXPECT_EQ(out[k].window_index, static_cast<int>(k));
    EXPECT_EQ(out[k].label, 2);
    EXPECT_EQ(out[k].trial_id, 4);
    EXPECT_TRUE(out[k].de.allFinite());
  }
}

TEST(ExtractDe, CountsAndErrors) {
  RawTrial t;
  t.data = MatD::Random(2, 100);  // 0.5 s
  EXPECT_THROW(extract_de(t, BandSpec::standard()), InvalidArgument);
  t.data = MatD::Random(2, 2150);  // 10.75 s
  EXPECT_EQ(extract_de(t, BandSpec::standard()).size(), 10u);
  EXPECT_EQ(extract_de(t, BandSpec::standard(), 1.0, 4.5).size(), 4u);
  EXPECT_EQ(extract_de(t, BandSpec::standard(), 2.0).size(), 5u);
}

TEST(ExtractDe, ScalingByTenAddsLnTen) {
  Rng rng(4);
  RawTrial t;
  t.data = MatD::NullaryExpr(3, 2000, [&] { return std::normal_distribution<double>(0, 1)(rng); });
  RawTrial u = t;
  u.data *= 10.0;
  const auto a = extract_de(t, BandSpec::standard());
  const auto b = extract_de(u, BandSpec::standard());
  for (std::size_t k = 0; k < a.size(); ++k)
    for (Index i = 0; i < a[k].de.size(); ++i) {
      EXPECT_GT(b[k].de.data()[i], a[k].de.data()[i]);
      EXPECT_NEAR(b[k].de.data()[i] - a[k].de.data()[i], std::log(10.0), 1e-4);
    }
}

// --- LDS -------------------------------------------------------------------

TEST(Lds, ConstantSequenceUnchanged) {
  std::vector<MatD> seq(8, MatD::Constant(2, 3, 1.25));
  const auto out = lds_smooth(seq);
  for (const auto& m : out) EXPECT_EQ(m, seq[0]);
  EXPECT_THROW(lds_smooth(std::vector<MatD>{}), InvalidArgument);
  seq.push_back(MatD::Zero(3, 2));
  EXPECT_THROW(lds_smooth(seq), ShapeMismatch);
}

TEST(Lds, ImpulseMatchesDenseOracle) {
  std::vector<MatD> seq(11, MatD::Zero(1, 1));
  seq[5](0, 0) = 1.0;
  const auto out = lds_smooth(seq, 0.01);
  std::vector<double> y(11, 0.0);
  y[5] = 1.0;
  const auto ref = dense_smoother(y, 0.01);
  for (std::size_t t = 0; t < 11; ++t) EXPECT_NEAR(out[t](0, 0), ref[t], 1e-10) << t;
  EXPECT_LT(out[5](0, 0), 1.0);
  EXPECT_GT(out[4](0, 0), 0.0);
  EXPECT_GT(out[6](0, 0), 0.0);
}

TEST(Lds, RandomSequenceMatchesDenseOracle) {
  Rng rng(5);
  const auto y = gaussian(40, 2.0, rng);
  std::vector<MatD> seq;
  for (double v : y) seq.push_back(MatD::Constant(1, 1, v));
  for (double qr : {0.01, 0.5}) {
    const auto out = lds_smooth(seq, qr);
    const auto ref = dense_smoother(y, qr);
    for (std::size_t t = 0; t < y.size(); ++t) EXPECT_NEAR(out[t](0, 0), ref[t], 1e-9);
  }
}

// --- preprocessing heuristics ---------------------------------------------

TEST(BadChannels, FlatlineChannel) {
  const auto m = montage62();
  Rng rng(6);
  RawTrial t;
  const MatD common = MatD::NullaryExpr(1, 2000, [&] { return std::normal_distribution<double>(0, 1)(rng); });
  t.data = common.replicate(62, 1) + 0.1 * MatD::NullaryExpr(62, 2000, [&] {
             return std::normal_distribution<double>(0, 1)(rng);
           });
  t.data.row(17).setZero();
  const auto rep = bad_channel_report(t, m);
  EXPECT_EQ(rep.flatline, std::set<std::size_t>{17});
  EXPECT_TRUE(rep.high_deviation.empty());
}

TEST(BadChannels, HighDeviationChannel) {
  const auto m = montage62();
  Rng rng(7);
  RawTrial t;
  const MatD common = MatD::NullaryExpr(1, 2000, [&] { return std::normal_distribution<double>(0, 1)(rng); });
  t.data = common.replicate(62, 1) + 0.1 * MatD::NullaryExpr(62, 2000, [&] {
             return std::normal_distribution<double>(0, 1)(rng);
           });
  t.data.row(3) *= 10.0;
  EXPECT_EQ(detect_bad_channels(t, m), std::set<std::size_t>{3});
}

TEST(BadChannels, IndependentChannelsAllLowCorrelation) {
  const auto m = montage62();
  Rng rng(8);
  RawTrial t;
  t.data = MatD::NullaryExpr(62, 2000, [&] { return std::normal_distribution<double>(0, 1)(rng); });
  EXPECT_EQ(bad_channel_report(t, m).low_correlation.size(), 62u);
  RawTrial wrong;
  wrong.data = MatD::Random(3, 100);
  EXPECT_THROW(detect_bad_channels(wrong, m), ShapeMismatch);
}

TEST(Segments, BurstWindowRejected) {
  Rng rng(9);
  RawTrial t;
  t.data = MatD::NullaryExpr(4, 2000, [&] { return std::normal_distribution<double>(0, 1)(rng); });
  auto keep = reject_bad_segments(t, 1.0);
  EXPECT_EQ(std::count(keep.begin(), keep.end(), true), 10);
  t.data.block(2, 600, 1, 200) *= 100.0;
  keep = reject_bad_segments(t, 1.0);
  for (std::size_t k = 0; k < keep.size(); ++k) EXPECT_EQ(keep[k], k != 3) << k;
  RawTrial one;
  one.data = MatD::Random(2, 200);
  EXPECT_EQ(reject_bad_segments(one, 1.0), std::vector<bool>{true});
  EXPECT_THROW(reject_bad_segments(one, 2.0), InvalidArgument);
}

TEST(Interpolation, ConvexCopyAndWeights) {
  const auto m = montage62();
  RawTrial t;
  const MatD s = sine(7, 200, 400);
  t.data = s.replicate(62, 1);
  t.data.row(20).setConstant(55.0);
  const auto out = interpolate_channels(t, {20}, m);
  EXPECT_LT((out.data.row(20) - s).cwiseAbs().maxCoeff(), 1e-12);
  for (std::size_t c = 0; c < 62; ++c) {
    const auto w = interpolation_weights(m, c, {c});
    double total = 0;
    for (double v : w.weights) total += v;
    EXPECT_NEAR(total, 1.0, 1e-9);
    EXPECT_EQ(w.sources.size(), 4u);
  }
  std::set<std::size_t> all;
  for (std::size_t c = 0; c < 62; ++c) all.insert(c);
  EXPECT_THROW(interpolate_channels(t, all, m), InvalidArgument);
}

TEST(Rereference, ZeroMeanIdempotentSingle) {
  Rng rng(10);
  RawTrial t;
  t.data = MatD::NullaryExpr(5, 300, [&] { return std::normal_distribution<double>(3, 2)(rng); });
  const auto once = rereference_mean(t);
  EXPECT_LT(once.data.colwise().mean().cwiseAbs().maxCoeff(), 1e-9);
  const auto twice = rereference_mean(once);
  EXPECT_LT((twice.data - once.data).cwiseAbs().maxCoeff(), 1e-12);
  RawTrial single;
  single.data = MatD::Random(1, 10);
  EXPECT_TRUE(rereference_mean(single).data.isZero(0));
}

TEST(Preprocess, KeepsTailAndShapes) {
  const auto m = montage62();
  Rng rng(11);
  RawTrial t;
  const MatD common = MatD::NullaryExpr(1, 8000, [&] { return std::normal_distribution<double>(0, 1)(rng); });
  t.data = common.replicate(62, 1) + 0.3 * MatD::NullaryExpr(62, 8000, [&] {
             return std::normal_distribution<double>(0, 1)(rng);
           });
  const auto out = preprocess_and_extract(t, m, BandSpec::standard());
  EXPECT_GE(out.size(), 25u);
  EXPECT_LE(out.size(), 30u);
  for (const auto& s : out) EXPECT_TRUE(s.de.allFinite());
}
