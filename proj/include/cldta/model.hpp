#pragma once

// The diagonal transformer autoencoder (DTA): position and source
// embeddings, an encoder whose keys/values are fixed at their layer-1 values,
// a projector head for contrastive pretraining and a classifier head for
// calibration.
//
// Parameter naming (insertion order is the checkpoint order):
//   enc.pos.f1.{w,b}, enc.pos.f2.{w,b}   position MLP   3 -> d -> d
//   enc.src.f3.{w,b}, enc.src.f4.{w,b}   source MLP     bands -> d -> d
//   enc.pos.learned                      n x d learnable position embedding
//   enc.kv.{wk,wv}                       shared key/value projections
//   enc.layer<i>.{wq, wo, bo, ln1.g, ln1.b, ffn.w1, ffn.b1, ffn.w2, ffn.b2, ln2.g, ln2.b}
//   proj.l1.w, proj.bn1.{g,b}, proj.l2.w, proj.bn2.{g,b}, proj.l3.{w,b}
//   clf.l1.{w,b}, clf.l2.{w,b}, clf.l3.{w,b}

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cldta/dsp.hpp"
#include "cldta/error.hpp"
#include "cldta/gradcore.hpp"

namespace cldta {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 32;
  int n_heads = 4;
  int ffn_hidden = 64;
  double dropout = 0.1;
  int n_channels = 62;
  int n_bands = 5;
  std::array<int, 3> proj_dims{128, 256, 128};
  std::array<int, 2> clf_hidden{32, 32};
  int n_classes = 3;
  // Diagonal treatment while pretraining; `zero_logit` is the literal
  // multiplicative reading kept for ablation.
  DiagonalMask train_mask = DiagonalMask::exclude;
  // Whether calibration and prediction keep the diagonal mask on.
  bool mask_downstream = false;

  void validate() const {
    auto pos = [](int v, const char* what) {
      if (v <= 0) throw InvalidArgument(std::string("model config: ") + what + " must be positive");
    };
    pos(n_layers, "n_layers");
    pos(d_model, "d_model");
    pos(n_heads, "n_heads");
    pos(ffn_hidden, "ffn_hidden");
    pos(n_channels, "n_channels");
    pos(n_bands, "n_bands");
    pos(n_classes, "n_classes");
    for (int v : proj_dims) pos(v, "proj_dims");
    for (int v : clf_hidden) pos(v, "clf_hidden");
    if (d_model % n_heads != 0) throw InvalidArgument("model config: d_model must be divisible by n_heads");
    if (!(dropout >= 0 && dropout < 1)) throw InvalidArgument("model config: dropout must be in [0, 1)");
    if (train_mask == DiagonalMask::none) throw InvalidArgument("model config: pretraining needs a diagonal mask");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Per-layer values captured by encode() when a trace is requested.
template <class T>
struct EncoderTrace {
  std::vector<AttentionRecord<T>> attention;  // one per layer
  std::vector<Mat<T>> keys;                   // projected keys seen by each layer
  std::vector<Mat<T>> values;                 // projected values seen by each layer
};

// Single-sample encoder result.
template <class T>
struct EncoderOutput {
  Mat<T> q_final;                               // n x d_model
  std::vector<std::vector<Mat<T>>> attention;  // [layer][head] n x n, when recorded
};

// Stacks per-sample channel x band matrices into a (B*n) x bands block.
template <class T>
Mat<T> stack_samples(const std::vector<const MatF*>& samples) {
  if (samples.empty()) throw InvalidArgument("stack_samples: empty batch");
  const Index n = samples[0]->rows(), b = samples[0]->cols();
  Mat<T> out(static_cast<Index>(samples.size()) * n, b);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->rows() != n || samples[i]->cols() != b) throw ShapeMismatch("stack_samples: ragged batch");
    out.middleRows(static_cast<Index>(i) * n, n) = samples[i]->template cast<T>();
  }
  return out;
}

template <class T>
class DtaModel {
 public:
  DtaModel() = default;

  DtaModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    build(rng);
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  BatchNormState<T>& bn(int i) { return i == 0 ? bn1_ : bn2_; }
  const BatchNormState<T>& bn(int i) const { return i == 0 ? bn1_ : bn2_; }

  // Re-draws the classifier head (a fresh head for calibration).
  void reset_classifier(std::uint64_t seed) {
    Rng rng(seed);
    const Index flat = static_cast<Index>(config_.n_channels) * config_.d_model;
    init_affine(params_.at("clf.l1.w").value, params_.at("clf.l1.b").value, flat, rng);
    init_affine(params_.at("clf.l2.w").value, params_.at("clf.l2.b").value, config_.clf_hidden[0], rng);
    init_affine(params_.at("clf.l3.w").value, params_.at("clf.l3.b").value, config_.clf_hidden[1], rng);
  }

  template <class U>
  DtaModel<U> cast() const {
    DtaModel<U> out;
    out.config_ = config_;
    out.params_ = params_.template cast<U>();
    out.bn1_ = cast_bn<U>(bn1_);
    out.bn2_ = cast_bn<U>(bn2_);
    return out;
  }

  // --- graph builders ------------------------------------------------------

  // f2(ELU(f1(pos))): n x 3 -> n x d.
  Var<T> embed_positions(Tape<T>& t, const Mat<T>& pos) {
    if (pos.cols() != 3) throw ShapeMismatch("embed_positions: positions must be n x 3");
    Var<T> h = affine(t.constant(pos), p(t, "enc.pos.f1.w"), p(t, "enc.pos.f1.b"));
    return affine(elu(h), p(t, "enc.pos.f2.w"), p(t, "enc.pos.f2.b"));
  }

  // f4(ELU(f3(de))): rows x bands -> rows x d.
  Var<T> embed_source(Tape<T>& t, const Mat<T>& de_stack) {
    if (de_stack.cols() != config_.n_bands) throw ShapeMismatch("embed_source: band count mismatch");
    Var<T> h = affine(t.constant(de_stack), p(t, "enc.src.f3.w"), p(t, "enc.src.f3.b"));
    return affine(elu(h), p(t, "enc.src.f4.w"), p(t, "enc.src.f4.b"));
  }

  // Q1 = P + L (tiled over the batch) and K = V = Q1 + S.
  std::pair<Var<T>, Var<T>> init_inputs(const Var<T>& p_emb, const Var<T>& l_emb, const Var<T>& s_emb, Index batch) {
    Var<T> q1 = add(p_emb, l_emb);
    Var<T> q = batch == 1 ? q1 : tile_rows(q1, batch);
    Var<T> kv = add(q, s_emb);
    return {q, kv};
  }

  // Attention block of layer `layer`: projected query against the frozen
  // projected keys/values, heads concatenated, then the output projection.
  Var<T> masked_attention(Tape<T>& t, int layer, const Var<T>& q, const Var<T>& keys, const Var<T>& values,
                          DiagonalMask diag, AttentionRecord<T>* record = nullptr) {
    const std::string pre = "enc.layer" + std::to_string(layer) + ".";
    Var<T> qp = matmul(q, p(t, pre + "wq"));
    Var<T> h = attention(qp, keys, values, config_.n_channels, config_.n_heads, diag, record);
    return affine(h, p(t, pre + "wo"), p(t, pre + "bo"));
  }

  // Q^{i+1} = g(norm(Q^i + H^i)), g(x) = norm(x + FFN(x)).
  Var<T> encoder_layer(Tape<T>& t, int layer, const Var<T>& q, const Var<T>& keys, const Var<T>& values,
                       DiagonalMask diag, Mode mode, Rng& rng, AttentionRecord<T>* record = nullptr) {
    const std::string pre = "enc.layer" + std::to_string(layer) + ".";
    Var<T> h = masked_attention(t, layer, q, keys, values, diag, record);
    Var<T> x = layer_norm(add(q, h), p(t, pre + "ln1.g"), p(t, pre + "ln1.b"));
    Var<T> f = elu(affine(x, p(t, pre + "ffn.w1"), p(t, pre + "ffn.b1")));
    f = dropout(f, config_.dropout, mode, rng);
    f = affine(f, p(t, pre + "ffn.w2"), p(t, pre + "ffn.b2"));
    return layer_norm(add(x, f), p(t, pre + "ln2.g"), p(t, pre + "ln2.b"));
  }

  // Full encoder on a (batch*n) x bands stack. Returns Q^{L+1}.
  Var<T> encode(Tape<T>& t, const Mat<T>& de_stack, const Mat<T>& positions, Index batch, Mode mode,
                bool diagonal_mask, Rng& rng, EncoderTrace<T>* trace = nullptr) {
    const Index n = config_.n_channels;
    if (positions.rows() != n) throw ShapeMismatch("encode: positions do not match n_channels");
    if (batch < 1 || de_stack.rows() != batch * n)
      throw ShapeMismatch("encode: DE stack rows must equal batch * n_channels");
    const DiagonalMask diag = diagonal_mask ? config_.train_mask : DiagonalMask::none;
    Var<T> p_emb = embed_positions(t, positions);
    Var<T> s_emb = embed_source(t, de_stack);
    auto [q, kv] = init_inputs(p_emb, p(t, "enc.pos.learned"), s_emb, batch);
    Var<T> keys = matmul(kv, p(t, "enc.kv.wk"));
    Var<T> values = matmul(kv, p(t, "enc.kv.wv"));
    if (trace) *trace = EncoderTrace<T>{};
    for (int l = 0; l < config_.n_layers; ++l) {
      AttentionRecord<T>* rec = nullptr;
      if (trace) {
        trace->attention.emplace_back();
        rec = &trace->attention.back();
        trace->keys.push_back(keys.value());
        trace->values.push_back(values.value());
      }
      q = encoder_layer(t, l, q, keys, values, diag, mode, rng, rec);
    }
    return q;
  }

  // Flatten, then affine->BN->ELU->dropout twice and a final affine.
  Var<T> project(Tape<T>& t, const Var<T>& q_final, Index batch, Mode mode, Rng& rng) {
    Var<T> x = reshape(q_final, batch, q_final.value().size() / batch);
    x = affine(x, p(t, "proj.l1.w"));
    x = dropout(elu(batch_norm(x, p(t, "proj.bn1.g"), p(t, "proj.bn1.b"), bn1_, mode)), config_.dropout, mode, rng);
    x = affine(x, p(t, "proj.l2.w"));
    x = dropout(elu(batch_norm(x, p(t, "proj.bn2.g"), p(t, "proj.bn2.b"), bn2_, mode)), config_.dropout, mode, rng);
    return affine(x, p(t, "proj.l3.w"), p(t, "proj.l3.b"));
  }

  // Flatten -> 32 -> ELU -> 32 -> ELU -> n_classes logits.
  Var<T> classify(Tape<T>& t, const Var<T>& q_final, Index batch) {
    Var<T> x = reshape(q_final, batch, q_final.value().size() / batch);
    x = elu(affine(x, p(t, "clf.l1.w"), p(t, "clf.l1.b")));
    x = elu(affine(x, p(t, "clf.l2.w"), p(t, "clf.l2.b")));
    return affine(x, p(t, "clf.l3.w"), p(t, "clf.l3.b"));
  }

  // --- non-differentiable conveniences --------------------------------------

  EncoderOutput<T> encode_sample(const Mat<T>& de, const Mat<T>& positions, Mode mode, bool diagonal_mask,
                                 Rng& rng, bool record_attention = false) {
    Tape<T> t;
    EncoderTrace<T> trace;
    Var<T> q = encode(t, de, positions, 1, mode, diagonal_mask, rng, record_attention ? &trace : nullptr);
    EncoderOutput<T> out;
    out.q_final = q.value();
    for (auto& rec : trace.attention) out.attention.push_back(rec.weights);
    return out;
  }

 private:
  template <class U>
  friend class DtaModel;

  template <class U>
  static BatchNormState<U> cast_bn(const BatchNormState<T>& s) {
    BatchNormState<U> o;
    o.running_mean = s.running_mean.template cast<U>();
    o.running_var = s.running_var.template cast<U>();
    o.momentum = s.momentum;
    return o;
  }

  Var<T> p(Tape<T>& t, const std::string& name) { return t.param(params_.at(name)); }

  static void init_affine(Mat<T>& w, Mat<T>& b, Index fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(u(rng));
    for (Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<T>(u(rng));
  }

  // Weight `w_name` (in x out) and, unless b_name is empty, bias `b_name`.
  void add_affine(const std::string& w_name, const std::string& b_name, Index in, Index out, Rng& rng) {
    Mat<T> w(in, out), b(1, b_name.empty() ? 0 : out);
    init_affine(w, b, in, rng);
    params_.add(w_name, std::move(w));
    if (!b_name.empty()) params_.add(b_name, std::move(b));
  }

  void add_norm(const std::string& prefix, Index width) {
    params_.add(prefix + ".g", Mat<T>::Ones(1, width));
    params_.add(prefix + ".b", Mat<T>::Zero(1, width));
  }

  void build(Rng& rng) {
    const Index d = config_.d_model, n = config_.n_channels;
    add_affine("enc.pos.f1.w", "enc.pos.f1.b", 3, d, rng);
    add_affine("enc.pos.f2.w", "enc.pos.f2.b", d, d, rng);
    add_affine("enc.src.f3.w", "enc.src.f3.b", config_.n_bands, d, rng);
    add_affine("enc.src.f4.w", "enc.src.f4.b", d, d, rng);
    {
      std::normal_distribution<double> nd(0.0, 0.02);
      Mat<T> l(n, d);
      for (Index i = 0; i < l.size(); ++i) l.data()[i] = static_cast<T>(nd(rng));
      params_.add("enc.pos.learned", std::move(l));
    }
    add_affine("enc.kv.wk", "", d, d, rng);
    add_affine("enc.kv.wv", "", d, d, rng);
    for (int l = 0; l < config_.n_layers; ++l) {
      const std::string pre = "enc.layer" + std::to_string(l) + ".";
      add_affine(pre + "wq", "", d, d, rng);
      add_affine(pre + "wo", pre + "bo", d, d, rng);
      add_norm(pre + "ln1", d);
      add_affine(pre + "ffn.w1", pre + "ffn.b1", d, config_.ffn_hidden, rng);
      add_affine(pre + "ffn.w2", pre + "ffn.b2", config_.ffn_hidden, d, rng);
      add_norm(pre + "ln2", d);
    }
    const Index flat = n * d;
    // no bias ahead of batch norm: it would be cancelled by the mean
    add_affine("proj.l1.w", "", flat, config_.proj_dims[0], rng);
    add_norm("proj.bn1", config_.proj_dims[0]);
    add_affine("proj.l2.w", "", config_.proj_dims[0], config_.proj_dims[1], rng);
    add_norm("proj.bn2", config_.proj_dims[1]);
    add_affine("proj.l3.w", "proj.l3.b", config_.proj_dims[1], config_.proj_dims[2], rng);
    add_affine("clf.l1.w", "clf.l1.b", flat, config_.clf_hidden[0], rng);
    add_affine("clf.l2.w", "clf.l2.b", config_.clf_hidden[0], config_.clf_hidden[1], rng);
    add_affine("clf.l3.w", "clf.l3.b", config_.clf_hidden[1], config_.n_classes, rng);
    bn1_ = BatchNormState<T>::init(config_.proj_dims[0]);
    bn2_ = BatchNormState<T>::init(config_.proj_dims[1]);
  }

  ModelConfig config_;
  ParameterSet<T> params_;
  BatchNormState<T> bn1_;
  BatchNormState<T> bn2_;
};

// Parameter groups.
inline bool is_encoder_param(const std::string& name) { return name.rfind("enc.", 0) == 0; }
inline bool is_projector_param(const std::string& name) { return name.rfind("proj.", 0) == 0; }
inline bool is_classifier_param(const std::string& name) { return name.rfind("clf.", 0) == 0; }

}  // namespace cldta
