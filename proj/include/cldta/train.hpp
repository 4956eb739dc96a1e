#pragma once

// Adam with decoupled weight decay, contrastive pretraining, calibration
// (few-shot fine-tuning with early stopping) and prediction.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "cldta/augment.hpp"
#include "cldta/error.hpp"
#include "cldta/gradcore.hpp"
#include "cldta/loss.hpp"
#include "cldta/model.hpp"

namespace cldta {

template <class T>
struct OptimizerState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  long step = 0;
  std::map<std::string, Mat<T>> m;
  std::map<std::string, Mat<T>> v;

  void validate() const {
    if (!(lr > 0)) throw InvalidArgument("adam: lr must be positive");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw InvalidArgument("adam: betas must be in (0, 1)");
    if (!(eps > 0) || weight_decay < 0) throw InvalidArgument("adam: bad eps or weight decay");
  }
};

// One bias-corrected Adam step over the parameters selected by `include`.
// Decay is decoupled: theta <- theta * (1 - lr * wd), then the Adam delta.
template <class T, class Filter>
void adam_step(ParameterSet<T>& params, OptimizerState<T>& st, Filter include) {
  st.validate();
  for (auto& p : params) {
    if (!include(p.name)) continue;
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())
      throw ShapeMismatch("adam: gradient shape of " + p.name + " does not match");
    if (!p.grad.allFinite()) throw NumericError("adam: non-finite gradient in " + p.name);
    auto [mit, fresh] = st.m.try_emplace(p.name, Mat<T>::Zero(p.value.rows(), p.value.cols()));
    auto vit = st.v.try_emplace(p.name, Mat<T>::Zero(p.value.rows(), p.value.cols())).first;
    if (mit->second.rows() != p.value.rows() || mit->second.cols() != p.value.cols() ||
        vit->second.rows() != p.value.rows() || vit->second.cols() != p.value.cols())
      throw ShapeMismatch("adam: moment shape of " + p.name + " does not match");
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  const T decay = static_cast<T>(1.0 - st.lr * st.weight_decay);
  const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
  for (auto& p : params) {
    if (!include(p.name)) continue;
    auto& m = st.m.at(p.name);
    auto& v = st.v.at(p.name);
    m = b1 * m + (T(1) - b1) * p.grad;
    v = b2 * v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
    if (st.weight_decay != 0) p.value *= decay;
    const T step = static_cast<T>(st.lr / c1);
    const T root_c2 = static_cast<T>(std::sqrt(c2));
    p.value.array() -= step * m.array() / (v.array().sqrt() / root_c2 + static_cast<T>(st.eps));
  }
}

template <class T>
void adam_step(ParameterSet<T>& params, OptimizerState<T>& st) {
  adam_step(params, st, [](const std::string&) { return true; });
}

struct TrainConfig {
  std::uint64_t seed = 42;
  int pretrain_batch = 256;
  int pretrain_epochs = 30;
  double pretrain_lr = 1e-4;
  int calib_batch = 128;
  int calib_epochs = 100;
  double calib_lr = 1e-5;
  int patience = 20;
  double weight_decay = 0.005;
  double temperature = 0.5;
  bool matched_only = false;    // contrastive ablation: matched pairs only
  bool freeze_encoder = false;  // calibration ablation: classifier only
  double val_fraction = 0.2;
  int k_per_class = 20;

  void validate() const {
    if (pretrain_batch < 1 || pretrain_epochs < 1 || calib_batch < 1 || calib_epochs < 1 || patience < 1)
      throw InvalidArgument("train config: counts must be positive");
    if (patience > calib_epochs) throw InvalidArgument("train config: patience exceeds calib_epochs");
    if (!(pretrain_lr > 0) || !(calib_lr > 0) || weight_decay < 0 || !(temperature > 0))
      throw InvalidArgument("train config: rates must be positive");
    if (!(val_fraction > 0 && val_fraction < 1)) throw InvalidArgument("train config: val_fraction must be in (0, 1)");
    if (k_per_class < 0) throw InvalidArgument("train config: k_per_class must be non-negative");
  }

  bool operator==(const TrainConfig&) const = default;
};

namespace detail {

// Independent, reproducible streams derived from one seed.
inline Rng stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return Rng(seq);
}

inline std::vector<const MatF*> pointers(const std::vector<MatF>& xs) {
  std::vector<const MatF*> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(&x);
  return out;
}

template <class T>
Mat<T> positions_as(const ChannelMontage& montage) {
  return montage.positions().cast<T>();
}

}  // namespace detail

struct PretrainLog {
  std::vector<double> epoch_loss;
};

// Contrastive pretraining of encoder and projector in place. Classifier
// parameters are never touched.
template <class T>
PretrainLog pretrain(DtaModel<T>& model, const std::vector<FeatureSample>& samples, const ChannelMontage& montage,
                     const TrainConfig& tconf, const AugmentConfig& aconf, std::ostream* progress = nullptr) {
  tconf.validate();
  aconf.validate();
  if (samples.empty()) throw InvalidArgument("pretrain: empty bank");
  std::set<int> labels;
  for (const auto& s : samples) labels.insert(s.label);
  if (labels.size() < 2) throw InvalidArgument("pretrain: need at least two labels for negative pairs");
  if (samples.size() < 2) throw InvalidArgument("pretrain: need at least two samples");
  const auto& mc = model.config();
  if (static_cast<int>(montage.size()) != mc.n_channels) throw ShapeMismatch("pretrain: montage size != n_channels");
  const Mat<T> pos = detail::positions_as<T>(montage);

  OptimizerState<T> opt;
  opt.lr = tconf.pretrain_lr;
  opt.weight_decay = tconf.weight_decay;
  Rng rng = detail::stream(tconf.seed, 1);
  const auto update = [](const std::string& n) { return is_encoder_param(n) || is_projector_param(n); };

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(tconf.pretrain_batch), samples.size());
  const std::size_t n_batches = samples.size() / bs;  // drop-last

  PretrainLog log;
  for (int epoch = 0; epoch < tconf.pretrain_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double acc = 0;
    for (std::size_t b = 0; b < n_batches; ++b) {
      std::vector<FeatureSample> batch;
      batch.reserve(bs);
      for (std::size_t i = 0; i < bs; ++i) batch.push_back(samples[order[b * bs + i]]);
      const Views views = make_views(batch, aconf, rng);
      model.params().zero_grad();
      Tape<T> t;
      const Index B = static_cast<Index>(bs);
      Var<T> qa = model.encode(t, stack_samples<T>(detail::pointers(views.view_a)), pos, B, Mode::train, true, rng);
      Var<T> za = model.project(t, qa, B, Mode::train, rng);
      Var<T> qb = model.encode(t, stack_samples<T>(detail::pointers(views.view_b)), pos, B, Mode::train, true, rng);
      Var<T> zb = model.project(t, qb, B, Mode::train, rng);
      Var<T> loss = contrastive_loss(za, zb, views.labels, views.labels, tconf.temperature, tconf.matched_only);
      t.backward(loss);
      adam_step(model.params(), opt, update);
      acc += static_cast<double>(loss.value()(0, 0));
    }
    log.epoch_loss.push_back(acc / static_cast<double>(n_batches));
    if (progress) *progress << "pretrain epoch " << epoch + 1 << " loss " << log.epoch_loss.back() << '\n';
  }
  return log;
}

struct Prediction {
  int label = 0;
  std::vector<double> probabilities;
};

// Test-mode encode, classify, softmax.
template <class T>
std::vector<Prediction> predict(DtaModel<T>& model, const std::vector<FeatureSample>& samples,
                                const ChannelMontage& montage, std::size_t batch = 256) {
  const auto& mc = model.config();
  if (static_cast<int>(montage.size()) != mc.n_channels) throw ShapeMismatch("predict: montage size != n_channels");
  for (const auto& s : samples)
    if (s.de.rows() != mc.n_channels || s.de.cols() != mc.n_bands)
      throw ShapeMismatch("predict: sample shape does not match the model");
  const Mat<T> pos = detail::positions_as<T>(montage);
  Rng unused(0);
  std::vector<Prediction> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    std::vector<const MatF*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&samples[i].de);
    Tape<T> t;
    const Index B = static_cast<Index>(ptrs.size());
    Var<T> q = model.encode(t, stack_samples<T>(ptrs), pos, B, Mode::eval, mc.mask_downstream, unused);
    const Mat<T> logits = model.classify(t, q, B).value();
    for (Index r = 0; r < logits.rows(); ++r) {
      Prediction p;
      const double mx = static_cast<double>(logits.row(r).maxCoeff());
      double z = 0;
      for (Index c = 0; c < logits.cols(); ++c) {
        p.probabilities.push_back(std::exp(static_cast<double>(logits(r, c)) - mx));
        z += p.probabilities.back();
      }
      for (auto& v : p.probabilities) v /= z;
      p.label = static_cast<int>(std::max_element(p.probabilities.begin(), p.probabilities.end()) -
                                 p.probabilities.begin());
      out.push_back(std::move(p));
    }
  }
  return out;
}

template <class T>
double accuracy(DtaModel<T>& model, const std::vector<FeatureSample>& samples, const ChannelMontage& montage) {
  if (samples.empty()) throw InvalidArgument("accuracy: no samples");
  const auto preds = predict(model, samples, montage);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) hit += preds[i].label == samples[i].label;
  return static_cast<double>(hit) / static_cast<double>(samples.size());
}

// Stratified fit/validation split; every class keeps at least one sample on
// each side.
inline std::pair<std::vector<FeatureSample>, std::vector<FeatureSample>> stratified_split(
    const std::vector<FeatureSample>& labeled, int n_classes, double val_fraction, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const int l = labeled[i].label;
    if (l < 0 || l >= n_classes) throw InvalidArgument("calibrate: label out of range");
    by_class[static_cast<std::size_t>(l)].push_back(i);
  }
  std::pair<std::vector<FeatureSample>, std::vector<FeatureSample>> out;
  for (int c = 0; c < n_classes; ++c) {
    auto& idx = by_class[static_cast<std::size_t>(c)];
    if (idx.empty()) throw InvalidArgument("calibrate: class " + std::to_string(c) + " has no labeled samples");
    if (idx.size() < 2) throw InvalidArgument("calibrate: class " + std::to_string(c) + " needs at least 2 samples");
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size()))), 1, idx.size() - 1);
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n_val ? out.second : out.first).push_back(labeled[idx[i]]);
  }
  return out;
}

template <class T>
struct CalibrationResult {
  DtaModel<T> model;  // best-validation parameters
  int epochs_run = 0;
  int best_epoch = 0;  // 1-based
  double best_val_accuracy = 0;
  std::vector<double> val_accuracy;
};

// Fresh classifier, cross-entropy fine-tuning of encoder and classifier,
// early stopping on validation accuracy. The projector is never touched.
template <class T>
CalibrationResult<T> calibrate(const DtaModel<T>& pretrained, const std::vector<FeatureSample>& labeled,
                               const ChannelMontage& montage, const TrainConfig& tconf,
                               std::ostream* progress = nullptr) {
  tconf.validate();
  CalibrationResult<T> res;
  res.model = pretrained;
  auto& model = res.model;
  const auto& mc = model.config();
  if (static_cast<int>(montage.size()) != mc.n_channels) throw ShapeMismatch("calibrate: montage size != n_channels");
  Rng rng = detail::stream(tconf.seed, 2);
  auto [fit, val] = stratified_split(labeled, mc.n_classes, tconf.val_fraction, rng);
  model.reset_classifier(rng());
  const Mat<T> pos = detail::positions_as<T>(montage);

  OptimizerState<T> opt;
  opt.lr = tconf.calib_lr;
  opt.weight_decay = tconf.weight_decay;
  const bool freeze = tconf.freeze_encoder;
  const auto update = [freeze](const std::string& n) {
    return is_classifier_param(n) || (!freeze && is_encoder_param(n));
  };

  std::vector<std::size_t> order(fit.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(tconf.calib_batch);
  DtaModel<T> best = model;
  res.best_val_accuracy = -1;
  int since_best = 0;
  for (int epoch = 1; epoch <= tconf.calib_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < fit.size(); start += bs) {
      const std::size_t end = std::min(fit.size(), start + bs);
      std::vector<const MatF*> ptrs;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        ptrs.push_back(&fit[order[i]].de);
        labels.push_back(fit[order[i]].label);
      }
      model.params().zero_grad();
      Tape<T> t;
      const Index B = static_cast<Index>(ptrs.size());
      Var<T> q = model.encode(t, stack_samples<T>(ptrs), pos, B, Mode::train, mc.mask_downstream, rng);
      Var<T> loss = cross_entropy_mean(model.classify(t, q, B), labels);
      t.backward(loss);
      adam_step(model.params(), opt, update);
    }
    const double acc = accuracy(model, val, montage);
    res.val_accuracy.push_back(acc);
    res.epochs_run = epoch;
    if (acc > res.best_val_accuracy) {
      res.best_val_accuracy = acc;
      res.best_epoch = epoch;
      best = model;
      since_best = 0;
    } else if (++since_best >= tconf.patience) {
      break;
    }
    if (progress) *progress << "calibrate epoch " << epoch << " val_acc " << acc << '\n';
  }
  res.model = std::move(best);
  return res;
}

}  // namespace cldta
