#pragma once

// Signal conditioning and differential-entropy feature extraction.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cldta/error.hpp"
#include "cldta/gradcore.hpp"
#include "cldta/montage.hpp"

namespace cldta {

// One recorded trial, channels x samples in microvolts.
struct RawTrial {
  int subject_id = 0;
  int session_id = 0;
  int trial_id = 0;
  int label = 0;
  double fs = 200.0;
  MatD data;

  void validate() const {
    if (!(fs > 0)) throw InvalidArgument("raw trial: sampling rate must be positive");
    if (data.rows() < 1 || data.cols() < 1) throw InvalidArgument("raw trial: empty data");
  }
  Index channels() const { return data.rows(); }
  Index samples() const { return data.cols(); }
  double duration() const { return static_cast<double>(data.cols()) / fs; }
};

struct Band {
  std::string name;
  double low;
  double high;
};

struct BandSpec {
  std::vector<Band> bands;

  static BandSpec standard() {
    return BandSpec{{{"delta", 0.1, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 13.0}, {"beta", 13.0, 31.0},
                     {"gamma", 31.0, 50.0}}};
  }
  std::size_t size() const { return bands.size(); }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& b : bands) out.push_back(b.name);
    return out;
  }
  void validate(double fs) const {
    if (bands.empty()) throw InvalidArgument("band spec: no bands");
    for (const auto& b : bands)
      if (!(b.low > 0 && b.low < b.high && b.high < fs / 2))
        throw InvalidArgument("band '" + b.name + "' outside (0, fs/2) or inverted");
  }
};

// One window of DE features: channels x bands, in nats.
struct FeatureSample {
  int subject_id = 0;
  int session_id = 0;
  int trial_id = 0;
  int window_index = 0;
  int label = 0;
  MatF de;
};

// ---------------------------------------------------------------------------
// IIR filters as cascaded second-order sections (direct form II transposed)
// ---------------------------------------------------------------------------

struct Biquad {
  double b0, b1, b2, a1, a2;  // a0 == 1
};
using Sos = std::vector<Biquad>;

inline std::complex<double> frequency_response(const Sos& sos, double freq, double fs) {
  const std::complex<double> zinv = std::polar(1.0, -2.0 * std::numbers::pi * freq / fs);
  std::complex<double> h = 1.0;
  for (const auto& s : sos)
    h *= (s.b0 + s.b1 * zinv + s.b2 * zinv * zinv) / (1.0 + s.a1 * zinv + s.a2 * zinv * zinv);
  return h;
}

// Digital Butterworth band-pass from an analog prototype of the given order
// (the result has 2*order poles) via prewarped bilinear transform.
inline Sos design_butterworth_bandpass(int order, double low, double high, double fs) {
  if (order < 1) throw InvalidArgument("butterworth: order must be positive");
  if (!(fs > 0) || !(low > 0 && low < high && high < fs / 2))
    throw InvalidArgument("butterworth: band must satisfy 0 < low < high < fs/2");
  using C = std::complex<double>;
  const double k2 = 2.0 * fs;
  const double wl = k2 * std::tan(std::numbers::pi * low / fs);
  const double wh = k2 * std::tan(std::numbers::pi * high / fs);
  const double bw = wh - wl, w0sq = wl * wh;
  auto to_z = [k2](C s) { return (k2 + s) / (k2 - s); };

  Sos sos;
  auto push_pair = [&sos](C z1, C z2) {
    // Real polynomial (1 - z1 q)(1 - z2 q); zeros at +1 and -1.
    sos.push_back(Biquad{1.0, 0.0, -1.0, -(z1 + z2).real(), (z1 * z2).real()});
  };
  for (int k = 0; k < order; ++k) {
    const C p = std::polar(1.0, std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order));
    if (p.imag() < -1e-12) continue;  // handled with its conjugate
    const C disc = std::sqrt(p * bw * p * bw - 4.0 * w0sq);
    const C s1 = (p * bw + disc) / 2.0, s2 = (p * bw - disc) / 2.0;
    if (std::abs(p.imag()) <= 1e-12) {
      push_pair(to_z(s1), to_z(s2));  // real prototype pole: s1, s2 conjugate or both real
    } else {
      push_pair(to_z(s1), std::conj(to_z(s1)));
      push_pair(to_z(s2), std::conj(to_z(s2)));
    }
  }
  const double center = std::atan(std::sqrt(w0sq) / k2) * fs / std::numbers::pi;
  const double gain = std::abs(frequency_response(sos, center, fs));
  sos.front().b0 /= gain;
  sos.front().b1 /= gain;
  sos.front().b2 /= gain;
  return sos;
}

// Second-order IIR notch at f0 with quality factor q.
inline Sos design_notch(double f0, double q, double fs) {
  if (!(fs > 0) || !(f0 > 0 && f0 < fs / 2)) throw InvalidArgument("notch: f0 must satisfy 0 < f0 < fs/2");
  if (!(q > 0)) throw InvalidArgument("notch: quality factor must be positive");
  const double w0 = 2.0 * std::numbers::pi * f0 / fs;
  const double beta = std::tan(w0 / q / 2.0);
  const double g = 1.0 / (1.0 + beta);
  const double c = std::cos(w0);
  return Sos{Biquad{g, -2.0 * g * c, g, -2.0 * g * c, 2.0 * g - 1.0}};
}

namespace detail {

// Steady-state section states for a unit step, so filtering starts without
// an edge transient.
inline std::vector<std::array<double, 2>> sos_step_state(const Sos& sos) {
  std::vector<std::array<double, 2>> zi;
  double scale = 1.0;
  for (const auto& s : sos) {
    const double dc = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
    const double z2 = s.b2 - s.a2 * dc;
    const double z1 = s.b1 - s.a1 * dc + z2;
    zi.push_back({z1 * scale, z2 * scale});
    scale *= dc;
  }
  return zi;
}

inline void sos_run(const Sos& sos, std::vector<double>& x, double x0) {
  auto zi = sos_step_state(sos);
  for (std::size_t k = 0; k < sos.size(); ++k) {
    const auto& s = sos[k];
    double z1 = zi[k][0] * x0, z2 = zi[k][1] * x0;
    for (double& v : x) {
      const double in = v;
      const double y = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * y + z2;
      z2 = s.b2 * in - s.a2 * y;
      v = y;
    }
  }
}

inline void require_finite(std::span<const double> x, const char* what) {
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite input");
}

}  // namespace detail

// Forward-backward filtering with odd-extension padding (zero phase).
inline std::vector<double> sosfiltfilt(const Sos& sos, std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  std::size_t pad = 3 * (2 * sos.size() + 1);
  pad = std::min(pad, n - 1);
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);
  detail::sos_run(sos, ext, ext.front());
  std::reverse(ext.begin(), ext.end());
  detail::sos_run(sos, ext, ext.front());
  std::reverse(ext.begin(), ext.end());
  return std::vector<double>(ext.begin() + static_cast<std::ptrdiff_t>(pad),
                             ext.begin() + static_cast<std::ptrdiff_t>(pad + n));
}

inline MatD filter_rows(const Sos& sos, const MatD& data) {
  MatD out(data.rows(), data.cols());
  for (Index c = 0; c < data.rows(); ++c) {
    const std::vector<double> row(data.row(c).data(), data.row(c).data() + data.cols());
    const auto y = sosfiltfilt(sos, row);
    for (Index i = 0; i < data.cols(); ++i) out(c, i) = y[static_cast<std::size_t>(i)];
  }
  return out;
}

// Zero-phase 4th-order Butterworth band-pass, applied per channel (row).
inline MatD bandpass(const MatD& data, double low, double high, double fs) {
  const Sos sos = design_butterworth_bandpass(4, low, high, fs);
  detail::require_finite(std::span<const double>(data.data(), static_cast<std::size_t>(data.size())), "bandpass");
  return filter_rows(sos, data);
}

// Zero-phase notch at f0 (Q = 30), per channel.
inline MatD notch(const MatD& data, double f0, double fs, double q = 30.0) {
  const Sos sos = design_notch(f0, q, fs);
  detail::require_finite(std::span<const double>(data.data(), static_cast<std::size_t>(data.size())), "notch");
  return filter_rows(sos, data);
}

// ---------------------------------------------------------------------------
// Differential entropy
// ---------------------------------------------------------------------------

inline constexpr double kVarianceFloor = 1e-12;

// 0.5 * ln(2 pi e var) of a Gaussian with the window's variance (denominator
// N), floored at 1e-12.
inline double differential_entropy(std::span<const double> window) {
  if (window.size() < 2) throw InvalidArgument("differential_entropy: window needs at least 2 samples");
  double mean = 0;
  for (double v : window) mean += v;
  mean /= static_cast<double>(window.size());
  double ss = 0;
  for (double v : window) ss += (v - mean) * (v - mean);
  const double var = std::max(ss / static_cast<double>(window.size()), kVarianceFloor);
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
}

struct WindowLayout {
  Index length = 0;  // samples per window
  Index count = 0;
  Index start = 0;   // first sample of the first window
};

// Non-overlapping windows aligned to the end of the trial. `tail_s` limits
// how much of the trial tail is used.
inline WindowLayout tail_windows(const RawTrial& trial, double window_s, std::optional<double> tail_s = std::nullopt) {
  trial.validate();
  if (!(window_s > 0)) throw InvalidArgument("window length must be positive");
  WindowLayout w;
  w.length = static_cast<Index>(std::llround(window_s * trial.fs));
  if (w.length < 2) throw InvalidArgument("window shorter than 2 samples");
  Index usable = trial.samples();
  if (tail_s) usable = std::min(usable, static_cast<Index>(std::llround(*tail_s * trial.fs)));
  w.count = usable / w.length;
  if (w.count < 1) throw InvalidArgument("trial shorter than one window");
  w.start = trial.samples() - w.count * w.length;
  return w;
}

// One FeatureSample per window; de(c, b) is the DE of channel c band-passed
// to band b over that window. Filtering runs over the whole trial first.
inline std::vector<FeatureSample> extract_de(const RawTrial& trial, const BandSpec& bands, double window_s = 1.0,
                                             std::optional<double> tail_s = std::nullopt) {
  const WindowLayout w = tail_windows(trial, window_s, tail_s);
  bands.validate(trial.fs);
  std::vector<FeatureSample> out(static_cast<std::size_t>(w.count));
  for (Index k = 0; k < w.count; ++k) {
    auto& s = out[static_cast<std::size_t>(k)];
    s.subject_id = trial.subject_id;
    s.session_id = trial.session_id;
    s.trial_id = trial.trial_id;
    s.window_index = static_cast<int>(k);
    s.label = trial.label;
    s.de.resize(trial.channels(), static_cast<Index>(bands.size()));
  }
  for (std::size_t b = 0; b < bands.size(); ++b) {
    const MatD filtered = bandpass(trial.data, bands.bands[b].low, bands.bands[b].high, trial.fs);
    for (Index c = 0; c < trial.channels(); ++c) {
      for (Index k = 0; k < w.count; ++k) {
        const double* p = filtered.row(c).data() + w.start + k * w.length;
        const double de = differential_entropy(std::span<const double>(p, static_cast<std::size_t>(w.length)));
        out[static_cast<std::size_t>(k)].de(c, static_cast<Index>(b)) = static_cast<float>(de);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// LDS smoothing
// ---------------------------------------------------------------------------

// Random-walk Kalman filter + RTS smoother on every scalar dimension of a
// sequence of equally-shaped matrices. Observation variance r is the
// dimension's variance over the sequence; process variance q = q_over_r * r.
// The filter starts at the first observation with variance r.
template <class T>
std::vector<Mat<T>> lds_smooth(const std::vector<Mat<T>>& seq, double q_over_r = 0.01) {
  if (seq.empty()) throw InvalidArgument("lds_smooth: empty sequence");
  if (!(q_over_r > 0)) throw InvalidArgument("lds_smooth: q/r must be positive");
  const Index rows = seq[0].rows(), cols = seq[0].cols();
  for (const auto& m : seq)
    if (m.rows() != rows || m.cols() != cols) throw ShapeMismatch("lds_smooth: inconsistent shapes");
  const std::size_t n = seq.size();
  std::vector<Mat<T>> out = seq;
  if (n < 2) return out;
  std::vector<double> y(n), xf(n), pf(n), xp(n), pp(n);
  for (Index e = 0; e < rows * cols; ++e) {
    double mean = 0;
    for (std::size_t t = 0; t < n; ++t) {
      y[t] = static_cast<double>(seq[t].data()[e]);
      mean += y[t];
    }
    mean /= static_cast<double>(n);
    double r = 0;
    for (double v : y) r += (v - mean) * (v - mean);
    r /= static_cast<double>(n);
    if (!(r > 0)) continue;  // constant dimension
    const double q = q_over_r * r;
    xp[0] = y[0];
    pp[0] = r;
    for (std::size_t t = 0; t < n; ++t) {
      if (t > 0) {
        xp[t] = xf[t - 1];
        pp[t] = pf[t - 1] + q;
      }
      const double gain = pp[t] / (pp[t] + r);
      xf[t] = xp[t] + gain * (y[t] - xp[t]);
      pf[t] = (1.0 - gain) * pp[t];
    }
    double xs = xf[n - 1];
    out[n - 1].data()[e] = static_cast<T>(xs);
    for (std::size_t t = n - 1; t-- > 0;) {
      const double c = pf[t] / pp[t + 1];
      xs = xf[t] + c * (xs - xp[t + 1]);
      out[t].data()[e] = static_cast<T>(xs);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing heuristics
// ---------------------------------------------------------------------------

struct BadChannelCriteria {
  double flatline_s = 5.0;         // identical-value run longer than this
  double std_factor = 4.0;         // std above factor * mean channel std
  double min_neighbor_corr = 0.6;  // Pearson r with nearest neighbor below this
};

struct BadChannelReport {
  std::set<std::size_t> flatline;
  std::set<std::size_t> high_deviation;
  std::set<std::size_t> low_correlation;

  std::set<std::size_t> all() const {
    std::set<std::size_t> u = flatline;
    u.insert(high_deviation.begin(), high_deviation.end());
    u.insert(low_correlation.begin(), low_correlation.end());
    return u;
  }
};

namespace detail {

inline double row_std(const MatD& data, Index c) {
  const double mu = data.row(c).mean();
  return std::sqrt((data.row(c).array() - mu).square().mean());
}

inline double pearson(const MatD& data, Index a, Index b) {
  const auto xa = data.row(a).array() - data.row(a).mean();
  const auto xb = data.row(b).array() - data.row(b).mean();
  const double den = std::sqrt(xa.square().sum() * xb.square().sum());
  if (!(den > 0)) return 0.0;
  return (xa * xb).sum() / den;
}

}  // namespace detail

inline BadChannelReport bad_channel_report(const RawTrial& trial, const ChannelMontage& montage,
                                           const BadChannelCriteria& crit = {}) {
  trial.validate();
  if (static_cast<std::size_t>(trial.channels()) != montage.size())
    throw ShapeMismatch("detect_bad_channels: trial channels do not match montage");
  BadChannelReport rep;
  const Index nc = trial.channels(), ns = trial.samples();
  std::vector<double> stds(static_cast<std::size_t>(nc));
  for (Index c = 0; c < nc; ++c) {
    Index run = 1, longest = 1;
    for (Index i = 1; i < ns; ++i) {
      run = trial.data(c, i) == trial.data(c, i - 1) ? run + 1 : 1;
      longest = std::max(longest, run);
    }
    if (static_cast<double>(longest) / trial.fs > crit.flatline_s) rep.flatline.insert(static_cast<std::size_t>(c));
    stds[static_cast<std::size_t>(c)] = detail::row_std(trial.data, c);
  }
  double mean_std = 0;
  for (double s : stds) mean_std += s;
  mean_std /= static_cast<double>(nc);
  for (Index c = 0; c < nc; ++c)
    if (stds[static_cast<std::size_t>(c)] > crit.std_factor * mean_std) rep.high_deviation.insert(static_cast<std::size_t>(c));
  if (nc >= 2) {
    for (Index c = 0; c < nc; ++c) {
      const auto nb = static_cast<Index>(nearest_neighbor(montage, static_cast<std::size_t>(c)));
      if (detail::pearson(trial.data, c, nb) < crit.min_neighbor_corr) rep.low_correlation.insert(static_cast<std::size_t>(c));
    }
  }
  return rep;
}

inline std::set<std::size_t> detect_bad_channels(const RawTrial& trial, const ChannelMontage& montage,
                                                 const BadChannelCriteria& crit = {}) {
  return bad_channel_report(trial, montage, crit).all();
}

// Keep-mask over the tail-aligned windows: a window is rejected when any
// channel's in-window variance exceeds `factor` times its whole-trial variance.
inline std::vector<bool> reject_bad_segments(const RawTrial& trial, double window_s, double factor = 7.0) {
  trial.validate();
  const Index wlen = static_cast<Index>(std::llround(window_s * trial.fs));
  if (!(window_s > 0) || wlen > trial.samples()) throw InvalidArgument("reject_bad_segments: window longer than trial");
  const WindowLayout w = tail_windows(trial, window_s);
  std::vector<bool> keep(static_cast<std::size_t>(w.count), true);
  for (Index c = 0; c < trial.channels(); ++c) {
    const double mu = trial.data.row(c).mean();
    const double total = (trial.data.row(c).array() - mu).square().mean();
    for (Index k = 0; k < w.count; ++k) {
      auto seg = trial.data.row(c).segment(w.start + k * w.length, w.length).array();
      const double v = (seg - seg.mean()).square().mean();
      if (v > factor * total) keep[static_cast<std::size_t>(k)] = false;
    }
  }
  return keep;
}

struct InterpolationWeights {
  std::vector<std::size_t> sources;
  std::vector<double> weights;  // sums to 1
};

// Inverse-distance weights over the k nearest good channels.
inline InterpolationWeights interpolation_weights(const ChannelMontage& montage, std::size_t channel,
                                                  const std::set<std::size_t>& bad, std::size_t k = 4) {
  InterpolationWeights w;
  w.sources = nearest_neighbors(montage, channel, k, bad);
  if (w.sources.empty()) throw InvalidArgument("interpolate_channels: no good channels to interpolate from");
  for (std::size_t s : w.sources) {
    const double d = montage.distance(channel, s);
    if (d == 0.0) {  // coincident electrode: copy it
      w.sources = {s};
      w.weights = {1.0};
      return w;
    }
    w.weights.push_back(1.0 / d);
  }
  double total = 0;
  for (double v : w.weights) total += v;
  for (double& v : w.weights) v /= total;
  return w;
}

inline RawTrial interpolate_channels(const RawTrial& trial, const std::set<std::size_t>& bad,
                                     const ChannelMontage& montage, std::size_t k = 4) {
  trial.validate();
  if (static_cast<std::size_t>(trial.channels()) != montage.size())
    throw ShapeMismatch("interpolate_channels: trial channels do not match montage");
  for (std::size_t c : bad)
    if (c >= montage.size()) throw InvalidArgument("interpolate_channels: bad channel index out of range");
  if (bad.size() >= montage.size()) throw InvalidArgument("interpolate_channels: all channels are bad");
  RawTrial out = trial;
  for (std::size_t c : bad) {
    const auto w = interpolation_weights(montage, c, bad, k);
    out.data.row(static_cast<Index>(c)).setZero();
    for (std::size_t i = 0; i < w.sources.size(); ++i)
      out.data.row(static_cast<Index>(c)) += w.weights[i] * trial.data.row(static_cast<Index>(w.sources[i]));
  }
  return out;
}

// Subtracts the across-channel mean at every time point.
inline RawTrial rereference_mean(const RawTrial& trial) {
  if (trial.data.rows() < 1 || trial.data.cols() < 1) throw InvalidArgument("rereference_mean: empty trial");
  RawTrial out = trial;
  const Eigen::RowVectorXd mean = trial.data.colwise().mean();
  out.data.rowwise() -= mean;
  return out;
}

struct PreprocessOptions {
  double highpass = 0.01;
  double lowpass = 48.0;
  double line_freq = 50.0;
  BadChannelCriteria criteria;
  double segment_factor = 7.0;
  double window_s = 1.0;
  std::optional<double> tail_s = 30.0;
  bool smooth = true;
  double lds_q_over_r = 0.01;
};

// Filter, repair bad channels, re-reference, then extract DE over the trial
// tail, dropping rejected windows and LDS-smoothing the rest.
inline std::vector<FeatureSample> preprocess_and_extract(const RawTrial& trial, const ChannelMontage& montage,
                                                         const BandSpec& bands, const PreprocessOptions& opt = {}) {
  trial.validate();
  RawTrial t = trial;
  if (opt.lowpass < t.fs / 2) t.data = bandpass(t.data, opt.highpass, opt.lowpass, t.fs);
  if (opt.line_freq > 0 && opt.line_freq < t.fs / 2) t.data = notch(t.data, opt.line_freq, t.fs);
  const auto bad = detect_bad_channels(t, montage, opt.criteria);
  if (!bad.empty() && bad.size() < montage.size()) t = interpolate_channels(t, bad, montage);
  t = rereference_mean(t);

  auto samples = extract_de(t, bands, opt.window_s, opt.tail_s);
  const auto layout = tail_windows(t, opt.window_s);
  const auto keep_all = reject_bad_segments(t, opt.window_s, opt.segment_factor);
  // extract_de windows are the last `samples.size()` of the full layout
  const std::size_t offset = static_cast<std::size_t>(layout.count) - samples.size();
  std::vector<FeatureSample> kept;
  for (std::size_t k = 0; k < samples.size(); ++k)
    if (keep_all[offset + k]) kept.push_back(std::move(samples[k]));
  if (opt.smooth && kept.size() > 1) {
    std::vector<MatF> seq;
    for (const auto& s : kept) seq.push_back(s.de);
    seq = lds_smooth(seq, opt.lds_q_over_r);
    for (std::size_t k = 0; k < kept.size(); ++k) kept[k].de = seq[k];
  }
  return kept;
}

}  // namespace cldta
