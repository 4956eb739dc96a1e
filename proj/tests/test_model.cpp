#include <gtest/gtest.h>

#include <cmath>

#include "cldta/data_io.hpp"
#include "cldta/loss.hpp"
#include "cldta/model.hpp"

using namespace cldta;

namespace {

ModelConfig toy(int channels, int layers = 2, int d = 8, int heads = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = heads;
  c.ffn_hidden = 16;
  c.n_channels = channels;
  c.n_bands = 5;
  c.proj_dims = {16, 32, 16};
  c.clf_hidden = {8, 8};
  c.n_classes = 3;
  return c;
}

MatD rnd(Index r, Index c, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> g(0, sd);
  return MatD::NullaryExpr(r, c, [&] { return g(rng); });
}

MatD run_encoder(DtaModel<double>& m, const MatD& de, const MatD& pos, Mode mode, bool mask,
                 std::uint64_t seed = 5) {
  Rng rng(seed);
  return m.encode_sample(de, pos, mode, mask, rng).q_final;
}

}  // namespace

TEST(Model, SelfUnknownInTrainMode) {
  DtaModel<double> model(toy(10), 3);
  const MatD pos = synthetic_montage(10).positions();
  const MatD de = rnd(10, 5, 1);
  const MatD base = run_encoder(model, de, pos, Mode::train, true);
  Rng rng(9);
  std::uniform_real_distribution<double> delta(-10, 10);
  for (Index i = 0; i < 10; ++i) {
    MatD pert = de;
    for (Index b = 0; b < 5; ++b) pert(i, b) += delta(rng);
    const MatD out = run_encoder(model, pert, pos, Mode::train, true);
    EXPECT_LE((out.row(i) - base.row(i)).cwiseAbs().maxCoeff(), 1e-9) << "row " << i;
    double other = 0;
    for (Index j = 0; j < 10; ++j)
      if (j != i) other = std::max(other, (out.row(j) - base.row(j)).cwiseAbs().maxCoeff());
    EXPECT_GE(other, 1e-6) << "row " << i;
  }
}

TEST(Model, MaskOffSeesOwnRow) {
  DtaModel<double> model(toy(10), 3);
  const MatD pos = synthetic_montage(10).positions();
  const MatD de = rnd(10, 5, 1);
  MatD pert = de;
  pert.row(4).array() += 3.0;
  const MatD a = run_encoder(model, de, pos, Mode::eval, false);
  const MatD b = run_encoder(model, pert, pos, Mode::eval, false);
  EXPECT_GT((a.row(4) - b.row(4)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(a, run_encoder(model, de, pos, Mode::eval, false));
}

TEST(Model, AttentionRowsAndDiagonal) {
  DtaModel<double> model(toy(7, 3, 8, 4), 11);
  const MatD pos = synthetic_montage(7).positions();
  const MatD de = rnd(7, 5, 2);
  for (bool mask : {true, false}) {
    Rng rng(1);
    const auto out = model.encode_sample(de, pos, mask ? Mode::train : Mode::eval, mask, rng, true);
    ASSERT_EQ(out.attention.size(), 3u);
    double diag_max = 0;
    for (const auto& layer : out.attention) {
      ASSERT_EQ(layer.size(), 4u);
      for (const auto& a : layer) {
        for (Index r = 0; r < a.rows(); ++r) EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-6);
        if (mask)
          for (Index r = 0; r < a.rows(); ++r) EXPECT_EQ(a(r, r), 0.0);
        diag_max = std::max(diag_max, a.diagonal().maxCoeff());
      }
    }
    if (!mask) EXPECT_GT(diag_max, 0.0);
  }
}

TEST(Model, KeysAndValuesFrozenAcrossLayers) {
  DtaModel<double> model(toy(6, 4), 2);
  const MatD pos = synthetic_montage(6).positions();
  Tape<double> t;
  Rng rng(1);
  EncoderTrace<double> trace;
  model.encode(t, rnd(6, 5, 3), pos, 1, Mode::train, true, rng, &trace);
  ASSERT_EQ(trace.keys.size(), 4u);
  for (std::size_t l = 1; l < 4; ++l) {
    EXPECT_EQ(trace.keys[l], trace.keys[0]);
    EXPECT_EQ(trace.values[l], trace.values[0]);
  }
}

TEST(Attention, TwoChannelsSwapValues) {
  Tape<double> t;
  const MatD q = rnd(2, 4, 1), k = rnd(2, 4, 2), v = rnd(2, 4, 3);
  const MatD h = attention(t.constant(q), t.constant(k), t.constant(v), 2, 2, DiagonalMask::exclude).value();
  EXPECT_EQ(MatD(h.row(0)), MatD(v.row(1)));
  EXPECT_EQ(MatD(h.row(1)), MatD(v.row(0)));
}

TEST(Attention, EqualLogitsSplitEvenly) {
  Tape<double> t;
  AttentionRecord<double> rec;
  attention(t.constant(MatD::Zero(3, 2)), t.constant(MatD::Zero(3, 2)), t.constant(rnd(3, 2, 1)), 3, 1,
            DiagonalMask::exclude, &rec);
  ASSERT_EQ(rec.weights.size(), 1u);
  MatD expected(3, 3);
  expected << 0, 0.5, 0.5, 0.5, 0, 0.5, 0.5, 0.5, 0;
  EXPECT_EQ(rec.weights[0], expected);
}

TEST(Attention, SaturatedDiagonalCopiesOwnValue) {
  // q = k = c * I with c^2 / sqrt(3) = 40: diagonal logits 40, others 0
  Tape<double> t;
  MatD q3 = MatD::Zero(3, 3), k3 = MatD::Zero(3, 3);
  for (Index i = 0; i < 3; ++i) {
    q3(i, i) = std::sqrt(40.0 * std::sqrt(3.0));
    k3(i, i) = std::sqrt(40.0 * std::sqrt(3.0));
  }
  const MatD v = rnd(3, 3, 4);
  const MatD h = attention(t.constant(q3), t.constant(k3), t.constant(v), 3, 1, DiagonalMask::none).value();
  EXPECT_LT((h - v).cwiseAbs().maxCoeff(), 1e-9 * (1 + v.cwiseAbs().maxCoeff()));
}

TEST(Attention, NeedsTwoPositionsWhenMasked) {
  Tape<double> t;
  const auto x = t.constant(rnd(3, 2, 1));
  EXPECT_THROW(attention(x, x, x, 1, 1, DiagonalMask::exclude), InvalidArgument);
  EXPECT_NO_THROW(attention(x, x, x, 1, 1, DiagonalMask::none));
}

TEST(Model, ZeroEmbeddingWeightsGiveZeroEmbeddings) {
  DtaModel<double> model(toy(4), 1);
  for (auto& p : model.params())
    if (p.name.rfind("enc.pos.f", 0) == 0 || p.name.rfind("enc.src.f", 0) == 0) p.value.setZero();
  Tape<double> t;
  EXPECT_TRUE(model.embed_positions(t, synthetic_montage(4).positions()).value().isZero(0));
  EXPECT_TRUE(model.embed_source(t, rnd(4, 5, 1)).value().isZero(0));
}

TEST(Model, EmbeddingsAreRowWise) {
  DtaModel<double> model(toy(4), 1);
  Tape<double> t;
  MatD pos = synthetic_montage(4).positions();
  pos.row(3) = pos.row(1);
  const MatD pe = model.embed_positions(t, pos).value();
  EXPECT_EQ(MatD(pe.row(3)), MatD(pe.row(1)));
  MatD de = rnd(4, 5, 2);
  const MatD s1 = model.embed_source(t, de).value();
  de.row(0).array() += 1.0;
  const MatD s2 = model.embed_source(t, de).value();
  EXPECT_EQ(MatD(s1.bottomRows(3)), MatD(s2.bottomRows(3)));
  EXPECT_THROW(model.embed_positions(t, MatD::Zero(4, 2)), ShapeMismatch);
  EXPECT_THROW(model.embed_source(t, MatD::Zero(4, 3)), ShapeMismatch);
}

TEST(Model, ChannelPermutationEquivariance) {
  const int n = 6;
  DtaModel<double> model(toy(n), 4);
  const MatD pos = synthetic_montage(n).positions();
  const MatD de = rnd(n, 5, 3);
  const std::vector<Index> perm{3, 0, 5, 1, 4, 2};
  MatD pos_p(n, 3), de_p(n, 5);
  for (Index i = 0; i < n; ++i) {
    pos_p.row(i) = pos.row(perm[i]);
    de_p.row(i) = de.row(perm[i]);
  }
  DtaModel<double> permuted = model;
  auto& learned = permuted.params().at("enc.pos.learned").value;
  const MatD orig = learned;
  for (Index i = 0; i < n; ++i) learned.row(i) = orig.row(perm[i]);
  for (bool mask : {true, false}) {
    const MatD a = run_encoder(model, de, pos, Mode::eval, mask);
    const MatD b = run_encoder(permuted, de_p, pos_p, Mode::eval, mask);
    for (Index i = 0; i < n; ++i) EXPECT_LT((b.row(i) - a.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Model, HeadsShapes) {
  for (int n : {4, 9}) {
    DtaModel<double> model(toy(n), 1);
    Tape<double> t;
    Rng rng(1);
    const MatD pos = synthetic_montage(static_cast<std::size_t>(n)).positions();
    MatD stack(3 * n, 5);
    stack.setRandom();
    Var<double> q = model.encode(t, stack, pos, 3, Mode::train, true, rng);
    EXPECT_EQ(q.rows(), 3 * n);
    EXPECT_EQ(q.cols(), 8);
    EXPECT_EQ(model.project(t, q, 3, Mode::train, rng).cols(), 16);
    EXPECT_EQ(model.classify(t, q, 3).cols(), 3);
  }
  DtaModel<double> full(ModelConfig{}, 1);
  EXPECT_EQ(full.config().proj_dims[2], 128);
}

TEST(Model, ZeroClassifierGivesUniform) {
  DtaModel<double> model(toy(5), 1);
  for (auto& p : model.params())
    if (is_classifier_param(p.name)) p.value.setZero();
  Tape<double> t;
  Rng rng(1);
  Var<double> q = model.encode(t, rnd(5, 5, 1), synthetic_montage(5).positions(), 1, Mode::eval, false, rng);
  EXPECT_TRUE(model.classify(t, q, 1).value().isZero(0));
}

TEST(Model, ConfigValidation) {
  ModelConfig c = toy(6);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = toy(6);
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = toy(6);
  c.n_classes = 0;
  EXPECT_THROW(DtaModel<double>(c, 1), InvalidArgument);
}

TEST(Model, FullGradientCheck) {
  ModelConfig c = toy(6);
  c.dropout = 0;
  const auto montage = synthetic_montage(6);
  const MatD pos = montage.positions();
  const MatD stack = rnd(3 * 6, 5, 8);
  const std::vector<int> labels{0, 1, 2};
  for (int head = 0; head < 2; ++head) {
    DtaModel<double> model(c, 21);
    auto program = [&](Tape<double>& t) {
      Rng rng(0);
      Var<double> q = model.encode(t, stack, pos, 3, Mode::train, true, rng);
      if (head == 0) {
        Var<double> z = model.project(t, q, 3, Mode::eval, rng);
        return contrastive_loss(z, z, labels, labels, 0.5);
      }
      return cross_entropy_mean(model.classify(t, q, 3), labels);
    };
    const auto res = grad_check(model.params(), program);
    EXPECT_LT(res.max_rel_error, 1e-4) << (head ? "cross_entropy" : "contrastive") << " worst "
                                       << res.worst_parameter << "[" << res.worst_index << "]";
  }
}

// In batch mode the projector's batch norm removes per-feature shifts, so
// the last layer's norm bias has an exactly-zero gradient.
TEST(Model, BatchModeProjectorCancelsFinalShift) {
  ModelConfig c = toy(6);
  c.dropout = 0;
  DtaModel<double> model(c, 21);
  const MatD pos = synthetic_montage(6).positions();
  const MatD stack = rnd(3 * 6, 5, 8);
  Tape<double> t;
  Rng rng(0);
  Var<double> q = model.encode(t, stack, pos, 3, Mode::train, true, rng);
  Var<double> z = model.project(t, q, 3, Mode::train, rng);
  model.params().zero_grad();
  t.backward(contrastive_loss(z, z, {0, 1, 2}, {0, 1, 2}, 0.5));
  const auto& g = model.params().at("enc.layer1.ln2.b").grad;
  EXPECT_LT(g.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT(model.params().at("enc.layer1.ln2.g").grad.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Model, CastRoundTrip) {
  DtaModel<double> model(toy(5), 3);
  const auto f = model.cast<float>();
  const auto back = f.cast<double>();
  for (std::size_t i = 0; i < model.params().size(); ++i)
    EXPECT_EQ(back.params()[i].value, model.params()[i].value.cast<float>().cast<double>());
}
