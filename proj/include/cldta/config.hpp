#pragma once

// JSON run configuration. Every section is optional; missing keys keep their
// defaults and unknown keys are rejected. The top-level seed drives both the
// training streams and the synthetic generator.
//
// {
//   "seed": 42,
//   "protocol": "seed",
//   "model":   { "n_layers": 4, "d_model": 32, ... },
//   "train":   { "pretrain_batch": 256, ... },
//   "augment": { "mixup_alpha": 0.2, "mask_prob": 0.2, "view_a": ["mixup"], "view_b": ["mask"] },
//   "synth":   { "n_subjects": 5, ..., "mode": "features" },
//   "eval":    { "failure_counts": [...], "noise_multipliers": [...], ... },
//   "paths":   { "bank": "", "out": "", "checkpoint": "", "montage": "" }
// }

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cldta/augment.hpp"
#include "cldta/data_io.hpp"
#include "cldta/error.hpp"
#include "cldta/model.hpp"
#include "cldta/train.hpp"

namespace cldta {

struct EvalConfig {
  std::vector<int> failure_counts{0, 1, 2, 5, 10, 20, 40};
  std::string failure_mode = "zero";  // zero | neighbor
  std::vector<double> noise_multipliers{0.1, 0.5, 1.0, 2.0, 3.0};
  double distance_exponent = 2.0;
  std::string connectivity_source = "representation";  // representation | learned_embedding

  bool operator==(const EvalConfig&) const = default;
};

struct PathConfig {
  std::string bank;
  std::string out;
  std::string checkpoint;
  std::string montage;

  bool operator==(const PathConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::string protocol = "seed";
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
  SynthSpec synth;
  EvalConfig eval;
  PathConfig paths;

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }
  SynthSpec synth_spec() const {
    SynthSpec s = synth;
    s.seed = seed;
    return s;
  }
};

namespace detail {

using nlohmann::json;

// Reads known keys from a JSON object and rejects anything else.
class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw InvalidArgument("config: '" + section_ + "' must be an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception&) {
      throw InvalidArgument("config: bad value for '" + path(key) + "'");
    }
  }

  template <class E>
  void get_enum(const char* key, E& out, const std::vector<std::pair<std::string, E>>& names) {
    std::string s;
    bool present = j_.contains(key);
    get(key, s);
    if (!present) return;
    for (const auto& [n, v] : names)
      if (n == s) {
        out = v;
        return;
      }
    throw InvalidArgument("config: unknown value '" + s + "' for '" + path(key) + "'");
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw InvalidArgument("config: unknown key '" + path(it.key()) + "'");
  }

 private:
  std::string path(const std::string& key) const { return section_.empty() ? key : section_ + "." + key; }
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

inline const std::vector<std::pair<std::string, DiagonalMask>>& mask_names() {
  static const std::vector<std::pair<std::string, DiagonalMask>> v{{"exclude", DiagonalMask::exclude},
                                                                     {"zero_logit", DiagonalMask::zero_logit}};
  return v;
}

inline std::string mask_name(DiagonalMask m) { return m == DiagonalMask::zero_logit ? "zero_logit" : "exclude"; }

inline std::vector<Transform> parse_transforms(const std::vector<std::string>& names) {
  std::vector<Transform> out;
  for (const auto& n : names) {
    if (n == "mixup") out.push_back(Transform::mixup);
    else if (n == "mask") out.push_back(Transform::mask);
    else throw InvalidArgument("config: unknown transform '" + n + "'");
  }
  return out;
}

inline std::vector<std::string> transform_names(const std::vector<Transform>& ts) {
  std::vector<std::string> out;
  for (auto t : ts) out.push_back(t == Transform::mixup ? "mixup" : "mask");
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},       {"d_model", c.d_model},
          {"n_heads", c.n_heads},         {"ffn_hidden", c.ffn_hidden},
          {"dropout", c.dropout},         {"n_channels", c.n_channels},
          {"n_bands", c.n_bands},         {"proj_dims", c.proj_dims},
          {"clf_hidden", c.clf_hidden},   {"n_classes", c.n_classes},
          {"train_mask", detail::mask_name(c.train_mask)}, {"mask_downstream", c.mask_downstream}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  detail::Reader r(j, "model");
  r.get("n_layers", c.n_layers);
  r.get("d_model", c.d_model);
  r.get("n_heads", c.n_heads);
  r.get("ffn_hidden", c.ffn_hidden);
  r.get("dropout", c.dropout);
  r.get("n_channels", c.n_channels);
  r.get("n_bands", c.n_bands);
  r.get("proj_dims", c.proj_dims);
  r.get("clf_hidden", c.clf_hidden);
  r.get("n_classes", c.n_classes);
  r.get_enum("train_mask", c.train_mask, detail::mask_names());
  r.get("mask_downstream", c.mask_downstream);
  r.finish();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"pretrain_batch", c.pretrain_batch}, {"pretrain_epochs", c.pretrain_epochs},
          {"pretrain_lr", c.pretrain_lr},       {"calib_batch", c.calib_batch},
          {"calib_epochs", c.calib_epochs},     {"calib_lr", c.calib_lr},
          {"patience", c.patience},             {"weight_decay", c.weight_decay},
          {"temperature", c.temperature},       {"matched_only", c.matched_only},
          {"freeze_encoder", c.freeze_encoder}, {"val_fraction", c.val_fraction},
          {"k_per_class", c.k_per_class}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  detail::Reader r(j, "train");
  r.get("pretrain_batch", c.pretrain_batch);
  r.get("pretrain_epochs", c.pretrain_epochs);
  r.get("pretrain_lr", c.pretrain_lr);
  r.get("calib_batch", c.calib_batch);
  r.get("calib_epochs", c.calib_epochs);
  r.get("calib_lr", c.calib_lr);
  r.get("patience", c.patience);
  r.get("weight_decay", c.weight_decay);
  r.get("temperature", c.temperature);
  r.get("matched_only", c.matched_only);
  r.get("freeze_encoder", c.freeze_encoder);
  r.get("val_fraction", c.val_fraction);
  r.get("k_per_class", c.k_per_class);
  r.finish();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const AugmentConfig& c) {
  return {{"mixup_alpha", c.mixup_alpha},
          {"mask_prob", c.mask_prob},
          {"view_a", detail::transform_names(c.view_a)},
          {"view_b", detail::transform_names(c.view_b)}};
}

inline AugmentConfig augment_config_from_json(const nlohmann::json& j, AugmentConfig c = {}) {
  detail::Reader r(j, "augment");
  r.get("mixup_alpha", c.mixup_alpha);
  r.get("mask_prob", c.mask_prob);
  std::vector<std::string> a = detail::transform_names(c.view_a), b = detail::transform_names(c.view_b);
  r.get("view_a", a);
  r.get("view_b", b);
  r.finish();
  c.view_a = detail::parse_transforms(a);
  c.view_b = detail::parse_transforms(b);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"n_subjects", s.n_subjects},
          {"n_classes", s.n_classes},
          {"n_channels", s.n_channels},
          {"n_bands", s.n_bands},
          {"trials_per_subject", s.trials_per_subject},
          {"n_sessions", s.n_sessions},
          {"samples_per_trial", s.samples_per_trial},
          {"class_mean_scale", s.class_mean_scale},
          {"subject_shift_std", s.subject_shift_std},
          {"sample_noise_std", s.sample_noise_std},
          {"mode", s.mode == SynthMode::features ? "features" : "timeseries"},
          {"fs", s.fs}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j, SynthSpec s = {}) {
  detail::Reader r(j, "synth");
  r.get("n_subjects", s.n_subjects);
  r.get("n_classes", s.n_classes);
  r.get("n_channels", s.n_channels);
  r.get("n_bands", s.n_bands);
  r.get("trials_per_subject", s.trials_per_subject);
  r.get("n_sessions", s.n_sessions);
  r.get("samples_per_trial", s.samples_per_trial);
  r.get("class_mean_scale", s.class_mean_scale);
  r.get("subject_shift_std", s.subject_shift_std);
  r.get("sample_noise_std", s.sample_noise_std);
  r.get_enum("mode", s.mode,
             std::vector<std::pair<std::string, SynthMode>>{{"features", SynthMode::features},
                                                            {"timeseries", SynthMode::timeseries}});
  r.get("fs", s.fs);
  r.finish();
  s.validate();
  return s;
}

inline nlohmann::json to_json(const EvalConfig& e) {
  return {{"failure_counts", e.failure_counts},
          {"failure_mode", e.failure_mode},
          {"noise_multipliers", e.noise_multipliers},
          {"distance_exponent", e.distance_exponent},
          {"connectivity_source", e.connectivity_source}};
}

inline EvalConfig eval_config_from_json(const nlohmann::json& j, EvalConfig e = {}) {
  detail::Reader r(j, "eval");
  r.get("failure_counts", e.failure_counts);
  r.get("failure_mode", e.failure_mode);
  r.get("noise_multipliers", e.noise_multipliers);
  r.get("distance_exponent", e.distance_exponent);
  r.get("connectivity_source", e.connectivity_source);
  r.finish();
  if (e.failure_mode != "zero" && e.failure_mode != "neighbor")
    throw InvalidArgument("config: eval.failure_mode must be zero or neighbor");
  if (e.connectivity_source != "representation" && e.connectivity_source != "learned_embedding")
    throw InvalidArgument("config: eval.connectivity_source must be representation or learned_embedding");
  if (!(e.distance_exponent > 0)) throw InvalidArgument("config: eval.distance_exponent must be positive");
  return e;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"protocol", c.protocol},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"augment", to_json(c.augment)},
          {"synth", to_json(c.synth)},
          {"eval", to_json(c.eval)},
          {"paths",
           {{"bank", c.paths.bank}, {"out", c.paths.out}, {"checkpoint", c.paths.checkpoint}, {"montage", c.paths.montage}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::Reader r(j, "");
  r.get("seed", c.seed);
  r.get("protocol", c.protocol);
  nlohmann::json section;
  auto sub = [&](const char* key) -> const nlohmann::json* {
    r.get(key, section);
    return j.contains(key) ? &j.at(key) : nullptr;
  };
  if (auto* s = sub("model")) c.model = model_config_from_json(*s);
  if (auto* s = sub("train")) c.train = train_config_from_json(*s);
  if (auto* s = sub("augment")) c.augment = augment_config_from_json(*s);
  if (auto* s = sub("synth")) c.synth = synth_spec_from_json(*s);
  if (auto* s = sub("eval")) c.eval = eval_config_from_json(*s);
  if (auto* s = sub("paths")) {
    detail::Reader p(*s, "paths");
    p.get("bank", c.paths.bank);
    p.get("out", c.paths.out);
    p.get("checkpoint", c.paths.checkpoint);
    p.get("montage", c.paths.montage);
    p.finish();
  }
  r.finish();
  SplitProtocol::by_name(c.protocol);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("config: invalid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

// FNV-1a 64 of the canonical (sorted-key, compact) JSON form without the
// paths section, in hex.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("paths");
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace cldta
