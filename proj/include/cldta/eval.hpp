#pragma once

// Evaluation protocols and analyses: LOSOCV, subject-dependent splits,
// inter/intra-class distances, robustness sweeps, connectivity and feature
// export.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "cldta/data_io.hpp"
#include "cldta/error.hpp"
#include "cldta/model.hpp"
#include "cldta/montage.hpp"
#include "cldta/train.hpp"

namespace cldta {

struct EvalReport {
  std::string protocol;
  std::uint64_t seed = 0;
  std::vector<int> subjects;
  std::vector<double> accuracies;
  double mean = 0;
  double std = 0;  // population
  // Calibration diagnostics, one entry per subject.
  std::vector<int> epochs_run;
  std::vector<int> best_epoch;

  void finalize() {
    if (accuracies.empty()) throw StateError("report: no accuracies");
    mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / static_cast<double>(accuracies.size());
    double ss = 0;
    for (double a : accuracies) ss += (a - mean) * (a - mean);
    std = std::sqrt(ss / static_cast<double>(accuracies.size()));
  }
};

enum class InitMode { pretrained, random };

// Everything a fold produced, handed to an optional observer.
struct FoldArtifacts {
  int subject = 0;
  const DtaModel<float>* pretrained = nullptr;  // before calibration
  const DtaModel<float>* calibrated = nullptr;
  const std::vector<FeatureSample>* calibration = nullptr;
  const std::vector<FeatureSample>* test = nullptr;
  const CalibrationResult<float>* result = nullptr;
};

struct LosocvOptions {
  InitMode init = InitMode::pretrained;
  int jobs = 1;
  std::ostream* progress = nullptr;
  std::function<void(const FoldArtifacts&)> observer;  // called under a lock
};

namespace detail {

// k samples per class drawn without replacement; returns (picked, rest).
inline std::pair<std::vector<FeatureSample>, std::vector<FeatureSample>> draw_per_class(
    const std::vector<FeatureSample>& pool, int n_classes, int k, Rng& rng, const std::string& who) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < pool.size(); ++i) by_class.at(static_cast<std::size_t>(pool[i].label)).push_back(i);
  std::vector<char> taken(pool.size(), 0);
  std::pair<std::vector<FeatureSample>, std::vector<FeatureSample>> out;
  for (int c = 0; c < n_classes; ++c) {
    auto& idx = by_class[static_cast<std::size_t>(c)];
    if (static_cast<int>(idx.size()) < k)
      throw InvalidArgument(who + ": class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                            " samples, need " + std::to_string(k));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int i = 0; i < k; ++i) taken[idx[static_cast<std::size_t>(i)]] = 1;
  }
  for (std::size_t i = 0; i < pool.size(); ++i) (taken[i] ? out.first : out.second).push_back(pool[i]);
  return out;
}

template <class Fn>
void run_parallel(std::size_t n, int jobs, Fn fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex em;
  std::vector<std::thread> pool;
  for (int j = 0; j < std::min<int>(jobs, static_cast<int>(n)); ++j)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lk(em);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

// Leave-one-subject-out: pretrain on the other subjects, calibrate on
// k_per_class labeled samples of the held-out subject, test on the rest. With
// k_per_class = 0 calibration draws 20 per class from the source subjects and
// the whole held-out subject is tested.
inline EvalReport losocv(const SampleBank& bank, const ModelConfig& mconf, const TrainConfig& tconf,
                         const AugmentConfig& aconf, const LosocvOptions& opt = {}) {
  const auto subjects = bank.subjects();
  if (subjects.size() < 2) throw InvalidArgument("losocv: need at least two subjects");
  if (mconf.n_channels != bank.n_channels() || mconf.n_bands != bank.n_bands())
    throw ShapeMismatch("losocv: model config does not match the bank");
  EvalReport rep;
  rep.protocol = std::string("losocv/") + (opt.init == InitMode::pretrained ? "pretrained" : "random") +
                 "/k=" + std::to_string(tconf.k_per_class);
  rep.seed = tconf.seed;
  rep.subjects = subjects;
  rep.accuracies.assign(subjects.size(), 0);
  rep.epochs_run.assign(subjects.size(), 0);
  rep.best_epoch.assign(subjects.size(), 0);
  std::mutex lock;

  detail::run_parallel(subjects.size(), opt.jobs, [&](std::size_t f) {
    const int s = subjects[f];
    std::vector<FeatureSample> source, target;
    for (const auto& x : bank.samples) (x.subject_id == s ? target : source).push_back(x);
    Rng rng = detail::stream(tconf.seed, 1000 + static_cast<std::uint64_t>(s));
    std::vector<FeatureSample> calib, test;
    if (tconf.k_per_class > 0) {
      std::tie(calib, test) = detail::draw_per_class(target, mconf.n_classes, tconf.k_per_class, rng,
                                                     "losocv subject " + std::to_string(s));
    } else {
      calib = detail::draw_per_class(source, mconf.n_classes, 20, rng, "losocv source").first;
      test = target;
    }
    DtaModel<float> model(mconf, tconf.seed);
    if (opt.init == InitMode::pretrained) pretrain(model, source, bank.montage, tconf, aconf, opt.progress);
    auto res = calibrate(model, calib, bank.montage, tconf);
    const double acc = accuracy(res.model, test, bank.montage);
    std::lock_guard lk(lock);
    rep.accuracies[f] = acc;
    rep.epochs_run[f] = res.epochs_run;
    rep.best_epoch[f] = res.best_epoch;
    if (opt.progress)
      *opt.progress << "losocv subject " << s << " accuracy " << acc << " epochs " << res.epochs_run << '\n';
    if (opt.observer) opt.observer(FoldArtifacts{s, &model, &res.model, &calib, &test, &res});
  });
  rep.finalize();
  return rep;
}

// Subject-dependent protocol: pretrain once on every subject's train split,
// then per subject calibrate on its train split and test on its test split.
inline EvalReport subject_dependent(const SampleBank& bank, const SplitProtocol& protocol, const ModelConfig& mconf,
                                    const TrainConfig& tconf, const AugmentConfig& aconf,
                                    const LosocvOptions& opt = {}) {
  auto [train, test] = apply_split(bank, protocol);
  EvalReport rep;
  rep.protocol = "subject-dependent/" + protocol.name;
  rep.seed = tconf.seed;
  rep.subjects = bank.subjects();
  DtaModel<float> model(mconf, tconf.seed);
  if (opt.init == InitMode::pretrained) pretrain(model, train.samples, bank.montage, tconf, aconf, opt.progress);
  rep.accuracies.assign(rep.subjects.size(), 0);
  rep.epochs_run.assign(rep.subjects.size(), 0);
  rep.best_epoch.assign(rep.subjects.size(), 0);
  std::mutex lock;
  detail::run_parallel(rep.subjects.size(), opt.jobs, [&](std::size_t f) {
    const int s = rep.subjects[f];
    std::vector<FeatureSample> tr, te;
    for (const auto& x : train.samples)
      if (x.subject_id == s) tr.push_back(x);
    for (const auto& x : test.samples)
      if (x.subject_id == s) te.push_back(x);
    if (tr.empty() || te.empty()) throw InvalidArgument("subject-dependent: subject " + std::to_string(s) + " has an empty side");
    auto res = calibrate(model, tr, bank.montage, tconf);
    const double acc = accuracy(res.model, te, bank.montage);
    std::lock_guard lk(lock);
    rep.accuracies[f] = acc;
    rep.epochs_run[f] = res.epochs_run;
    rep.best_epoch[f] = res.best_epoch;
  });
  rep.finalize();
  return rep;
}

// ---------------------------------------------------------------------------
// Inter/intra-class distances
// ---------------------------------------------------------------------------

struct ClassDistances {
  double inter_class = 0;  // mean over different-label pairs
  double intra_class = 0;  // mean over same-label pairs
};

inline ClassDistances icd_ics(const MatD& features, const std::vector<int>& labels, double alpha = 2.0) {
  const Index n = features.rows();
  if (n < 2) throw InvalidArgument("icd_ics: need at least two points");
  if (static_cast<Index>(labels.size()) != n) throw ShapeMismatch("icd_ics: labels length != rows");
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) throw InvalidArgument("icd_ics: need two classes");
  double inter = 0, intra = 0;
  std::size_t n_inter = 0, n_intra = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      const double d2 = (features.row(i) - features.row(j)).squaredNorm();
      const double v = alpha == 2.0 ? d2 : std::pow(std::sqrt(d2), alpha);
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
        intra += v;
        ++n_intra;
      } else {
        inter += v;
        ++n_inter;
      }
    }
  ClassDistances out;
  out.inter_class = inter / static_cast<double>(n_inter);
  out.intra_class = n_intra ? intra / static_cast<double>(n_intra) : 0.0;
  return out;
}

// Flattened DE inputs, one row per sample.
inline MatD raw_features(const std::vector<FeatureSample>& samples) {
  if (samples.empty()) throw InvalidArgument("raw_features: no samples");
  const Index w = samples[0].de.size();
  MatD out(static_cast<Index>(samples.size()), w);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].de.size() != w) throw ShapeMismatch("raw_features: ragged samples");
    for (Index c = 0; c < w; ++c) out(static_cast<Index>(i), c) = samples[i].de.data()[c];
  }
  return out;
}

// Projector outputs in test mode (mask off), one row per sample.
template <class T>
MatD projected_features(DtaModel<T>& model, const std::vector<FeatureSample>& samples,
                        const ChannelMontage& montage, std::size_t batch = 256) {
  const Mat<T> pos = montage.positions().cast<T>();
  Rng unused(0);
  MatD out(static_cast<Index>(samples.size()), model.config().proj_dims[2]);
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    std::vector<const MatF*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&samples[i].de);
    Tape<T> t;
    const Index B = static_cast<Index>(ptrs.size());
    Var<T> q = model.encode(t, stack_samples<T>(ptrs), pos, B, Mode::eval, model.config().mask_downstream, unused);
    out.middleRows(static_cast<Index>(start), B) = model.project(t, q, B, Mode::eval, unused).value().template cast<double>();
  }
  return out;
}

// Final-layer representation rows averaged over samples (test mode): n x d.
template <class T>
MatD mean_representation(DtaModel<T>& model, const std::vector<FeatureSample>& samples,
                         const ChannelMontage& montage, std::size_t batch = 256) {
  if (samples.empty()) throw InvalidArgument("connectivity: empty eval set");
  const Index n = model.config().n_channels, d = model.config().d_model;
  const Mat<T> pos = montage.positions().cast<T>();
  Rng unused(0);
  MatD acc = MatD::Zero(n, d);
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    std::vector<const MatF*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&samples[i].de);
    Tape<T> t;
    const Index B = static_cast<Index>(ptrs.size());
    const Mat<T> q =
        model.encode(t, stack_samples<T>(ptrs), pos, B, Mode::eval, model.config().mask_downstream, unused).value();
    for (Index b = 0; b < B; ++b) acc += q.middleRows(b * n, n).template cast<double>();
  }
  return acc / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Robustness
// ---------------------------------------------------------------------------

enum class FailureMode { zero, neighbor };

// Zeroes the failed rows, or copies each failed row from its nearest
// non-failed channel.
inline MatF apply_electrode_failure(const MatF& de, const std::set<std::size_t>& failed, FailureMode mode,
                                    const ChannelMontage& montage) {
  if (static_cast<std::size_t>(de.rows()) != montage.size()) throw ShapeMismatch("electrode failure: montage mismatch");
  if (failed.size() >= montage.size()) throw InvalidArgument("electrode failure: every channel failed");
  MatF out = de;
  for (std::size_t c : failed) {
    if (c >= montage.size()) throw InvalidArgument("electrode failure: channel out of range");
    if (mode == FailureMode::zero) {
      out.row(static_cast<Index>(c)).setZero();
    } else {
      const std::size_t src = nearest_neighbors(montage, c, 1, failed).front();
      out.row(static_cast<Index>(c)) = de.row(static_cast<Index>(src));
    }
  }
  return out;
}

// Accuracy per failure count m. Failed channels are drawn afresh for every
// sample from a stream keyed on (seed, m), so each point is a pure function of
// (model, samples, seed, m).
template <class T>
std::vector<double> electrode_failure_sweep(DtaModel<T>& model, const std::vector<FeatureSample>& samples,
                                            const ChannelMontage& montage, const std::vector<int>& m_list,
                                            FailureMode mode, std::uint64_t seed) {
  const int n = static_cast<int>(montage.size());
  for (int m : m_list)
    if (m < 0 || m >= n) throw InvalidArgument("electrode failure: m must be in [0, n_channels)");
  std::vector<double> out;
  for (int m : m_list) {
    if (m == 0) {
      out.push_back(accuracy(model, samples, montage));
      continue;
    }
    Rng rng = detail::stream(seed, 5000 + static_cast<std::uint64_t>(m));
    std::vector<std::size_t> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    std::vector<FeatureSample> broken = samples;
    for (auto& s : broken) {
      std::vector<std::size_t> pick;
      std::sample(all.begin(), all.end(), std::back_inserter(pick), m, rng);
      s.de = apply_electrode_failure(s.de, std::set<std::size_t>(pick.begin(), pick.end()), mode, montage);
    }
    out.push_back(accuracy(model, broken, montage));
  }
  return out;
}

// Adds N(0, k * var_f) to every feature f, var_f being the unbiased sample
// variance of f over `samples`.
inline std::vector<FeatureSample> add_feature_noise(const std::vector<FeatureSample>& samples, double k, Rng& rng) {
  if (!(k > 0)) throw InvalidArgument("noise: multiplier must be positive");
  if (samples.size() < 2) throw InvalidArgument("noise: need at least two samples for a variance");
  const MatD x = raw_features(samples);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Eigen::RowVectorXd var = (x.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(x.rows() - 1);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<FeatureSample> out = samples;
  for (auto& s : out)
    for (Index f = 0; f < s.de.size(); ++f)
      s.de.data()[f] = static_cast<float>(s.de.data()[f] + std::sqrt(k * var[f]) * unit(rng));
  return out;
}

template <class T>
std::vector<double> noise_sweep(DtaModel<T>& model, const std::vector<FeatureSample>& samples,
                                const ChannelMontage& montage, const std::vector<double>& k_list, std::uint64_t seed) {
  for (double k : k_list)
    if (!(k > 0)) throw InvalidArgument("noise: multipliers must be positive");
  std::vector<double> out;
  for (std::size_t i = 0; i < k_list.size(); ++i) {
    Rng rng = detail::stream(seed, 7000 + i);
    out.push_back(accuracy(model, add_feature_noise(samples, k_list[i], rng), montage));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Connectivity
// ---------------------------------------------------------------------------

struct ConnectivityResult {
  MatD adjacency;  // cosine, diagonal set to 1
  std::vector<std::vector<bool>> retained;
  std::vector<double> degree_centrality;
  double threshold = 0;
};

// A_ij = cos(r_i, r_j); edges kept where A_ij > mean + 1.8 std of the
// off-diagonal entries (population std).
inline ConnectivityResult connectivity_from_representations(const MatD& reps, double k_std = 1.8) {
  const Index n = reps.rows();
  if (n < 2) throw InvalidArgument("connectivity: need at least two channels");
  Eigen::VectorXd norms = reps.rowwise().norm();
  for (Index i = 0; i < n; ++i)
    if (!(norms[i] > 0)) throw NumericError("connectivity: zero-norm representation for channel " + std::to_string(i));
  ConnectivityResult r;
  r.adjacency = MatD::Identity(n, n);
  double sum = 0, sq = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      const double c = std::clamp(reps.row(i).dot(reps.row(j)) / (norms[i] * norms[j]), -1.0, 1.0);
      r.adjacency(i, j) = r.adjacency(j, i) = c;
      sum += 2 * c;
      sq += 2 * c * c;
    }
  const double m = static_cast<double>(n * (n - 1));
  const double mean = sum / m;
  double var = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (i != j) var += (r.adjacency(i, j) - mean) * (r.adjacency(i, j) - mean);
  r.threshold = mean + k_std * std::sqrt(var / m);
  r.retained.assign(static_cast<std::size_t>(n), std::vector<bool>(static_cast<std::size_t>(n), false));
  r.degree_centrality.assign(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i) {
    int deg = 0;
    for (Index j = 0; j < n; ++j)
      if (i != j && r.adjacency(i, j) > r.threshold) {
        r.retained[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = true;
        ++deg;
      }
    r.degree_centrality[static_cast<std::size_t>(i)] = deg / static_cast<double>(n - 1);
  }
  return r;
}

enum class ConnectivitySource { representation, learned_embedding };

template <class T>
ConnectivityResult connectivity(DtaModel<T>& model, const std::vector<FeatureSample>& samples,
                                const ChannelMontage& montage,
                                ConnectivitySource source = ConnectivitySource::representation) {
  if (source == ConnectivitySource::learned_embedding)
    return connectivity_from_representations(model.params().at("enc.pos.learned").value.template cast<double>());
  return connectivity_from_representations(mean_representation(model, samples, montage));
}

// ---------------------------------------------------------------------------
// Feature export
// ---------------------------------------------------------------------------

enum class Stage { raw, encoded, calibrated };

inline const char* stage_name(Stage s) {
  return s == Stage::raw ? "raw" : s == Stage::encoded ? "encoded" : "calibrated";
}

// CSV subject,session,trial,window,label,stage,f0.. with one row per sample.
// The raw stage is the flattened DE input; the other stages are projector
// outputs of `model` (pretrained or calibrated encoder).
template <class T>
void export_features(const std::vector<FeatureSample>& samples, const ChannelMontage& montage, Stage stage,
                     DtaModel<T>* model, const std::filesystem::path& path) {
  if (stage != Stage::raw && !model) throw InvalidArgument("export: encoded stages need a model");
  const MatD f = stage == Stage::raw ? raw_features(samples) : projected_features(*model, samples, montage);
  std::ofstream out(path);
  if (!out) throw IoError("export: cannot write " + path.string());
  out << std::setprecision(9) << "subject,session,trial,window,label,stage";
  for (Index c = 0; c < f.cols(); ++c) out << ",f" << c;
  out << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    out << s.subject_id << ',' << s.session_id << ',' << s.trial_id << ',' << s.window_index << ',' << s.label << ','
        << stage_name(stage);
    for (Index c = 0; c < f.cols(); ++c) out << ',' << f(static_cast<Index>(i), c);
    out << '\n';
  }
  if (!out) throw IoError("export: write failed");
}

}  // namespace cldta
