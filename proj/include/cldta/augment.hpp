#pragma once

// Training-time augmentations for DE feature matrices and construction of
// the two contrastive views.

#include <map>
#include <random>
#include <vector>

#include "cldta/dsp.hpp"
#include "cldta/error.hpp"
#include "cldta/gradcore.hpp"

namespace cldta {

enum class Transform { mixup, mask };

struct AugmentConfig {
  double mixup_alpha = 0.2;  // Beta(alpha, alpha)
  double mask_prob = 0.2;    // per-channel zeroing probability
  std::vector<Transform> view_a{Transform::mixup};
  std::vector<Transform> view_b{Transform::mask};

  void validate() const {
    if (!(mixup_alpha > 0)) throw InvalidArgument("augment: mixup_alpha must be positive");
    if (!(mask_prob >= 0 && mask_prob < 1)) throw InvalidArgument("augment: mask_prob must be in [0, 1)");
  }
};

// lambda * x_i + (1 - lambda) * x_j
template <class T>
Mat<T> mixup(const Mat<T>& x_i, const Mat<T>& x_j, double lambda) {
  if (x_i.rows() != x_j.rows() || x_i.cols() != x_j.cols()) throw ShapeMismatch("mixup: shape mismatch");
  if (!(lambda >= 0 && lambda <= 1)) throw InvalidArgument("mixup: lambda must be in [0, 1]");
  if (lambda == 1.0) return x_i;
  if (lambda == 0.0) return x_j;
  return T(lambda) * x_i + T(1.0 - lambda) * x_j;
}

// Row c of the result is mask[c] * row c of x.
template <class T>
Mat<T> mask_channels(const Mat<T>& x, const std::vector<std::uint8_t>& mask) {
  if (static_cast<Index>(mask.size()) != x.rows()) throw ShapeMismatch("mask_channels: mask length != channels");
  Mat<T> out = x;
  for (Index c = 0; c < x.rows(); ++c)
    if (!mask[static_cast<std::size_t>(c)]) out.row(c).setZero();
  return out;
}

inline double sample_beta(double a, double b, Rng& rng) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  for (;;) {
    const double x = ga(rng), y = gb(rng);
    if (x + y > 0) return x / (x + y);
  }
}

// Each channel is kept with probability 1 - drop_prob. All-zero masks are
// redrawn, so at least one channel always survives.
inline std::vector<std::uint8_t> sample_channel_mask(std::size_t channels, double drop_prob, Rng& rng) {
  if (channels == 0) throw InvalidArgument("sample_channel_mask: no channels");
  std::bernoulli_distribution drop(drop_prob);
  std::vector<std::uint8_t> mask(channels);
  for (;;) {
    bool any = false;
    for (auto& m : mask) {
      m = drop(rng) ? 0 : 1;
      any = any || m;
    }
    if (any) return mask;
  }
}

struct Views {
  std::vector<MatF> view_a;
  std::vector<MatF> view_b;
  std::vector<int> labels;
};

namespace detail {

inline std::vector<MatF> apply_transforms(const std::vector<FeatureSample>& batch,
                                          const std::vector<Transform>& transforms, const AugmentConfig& cfg,
                                          const std::map<int, std::vector<std::size_t>>& by_label, Rng& rng) {
  std::vector<MatF> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(s.de);
  for (Transform tr : transforms) {
    if (tr == Transform::mixup) {
      std::vector<MatF> mixed = out;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& peers = by_label.at(batch[i].label);
        if (peers.size() < 2) continue;  // no same-label partner: identity
        std::uniform_int_distribution<std::size_t> pick(0, peers.size() - 2);
        std::size_t j = peers[pick(rng)];
        if (j == i) j = peers.back();
        mixed[i] = mixup(out[i], out[j], sample_beta(cfg.mixup_alpha, cfg.mixup_alpha, rng));
      }
      out = std::move(mixed);
    } else {
      for (auto& m : out) m = mask_channels(m, sample_channel_mask(static_cast<std::size_t>(m.rows()), cfg.mask_prob, rng));
    }
  }
  return out;
}

}  // namespace detail

// Builds two index-aligned augmented views of a batch. MixUp only pairs a
// sample with a different sample of the same label, so labels carry over.
inline Views make_views(const std::vector<FeatureSample>& batch, const AugmentConfig& cfg, Rng& rng) {
  if (batch.empty()) throw InvalidArgument("make_views: empty batch");
  cfg.validate();
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < batch.size(); ++i) by_label[batch[i].label].push_back(i);
  Views v;
  v.view_a = detail::apply_transforms(batch, cfg.view_a, cfg, by_label, rng);
  v.view_b = detail::apply_transforms(batch, cfg.view_b, cfg, by_label, rng);
  for (const auto& s : batch) v.labels.push_back(s.label);
  return v;
}

}  // namespace cldta
