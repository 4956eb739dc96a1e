#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cldta/checkpoint.hpp"
#include "cldta/data_io.hpp"

using namespace cldta;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) : path_(fs::temp_directory_path() / ("cldta_" + tag)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

SynthSpec small_spec() {
  SynthSpec s;
  s.n_subjects = 2;
  s.n_channels = 6;
  s.trials_per_subject = 5;
  s.samples_per_trial = 10;
  return s;
}

std::string code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "none";
}

void truncate_by(const fs::path& p, std::uintmax_t n) { fs::resize_file(p, fs::file_size(p) - n); }

ModelConfig toy(int channels) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.ffn_hidden = 16;
  c.n_channels = channels;
  c.proj_dims = {16, 32, 16};
  c.clf_hidden = {8, 8};
  return c;
}

}  // namespace

TEST(Bank, RoundTripIsBitwise) {
  TempDir dir("bank_rt");
  const auto bank = gen_synthetic(small_spec(), synthetic_montage(6));
  write_bank(bank, dir.path());
  const auto back = read_bank(dir.path());
  ASSERT_EQ(back.samples.size(), bank.samples.size());
  EXPECT_EQ(back.classes, bank.classes);
  EXPECT_EQ(back.bands, bank.bands);
  EXPECT_EQ(back.montage.names(), bank.montage.names());
  for (std::size_t i = 0; i < bank.samples.size(); ++i) {
    const auto &a = bank.samples[i], &b = back.samples[i];
    EXPECT_EQ(a.de, b.de);
    EXPECT_EQ(std::tie(a.subject_id, a.session_id, a.trial_id, a.window_index, a.label),
              std::tie(b.subject_id, b.session_id, b.trial_id, b.window_index, b.label));
  }
}

TEST(Bank, RawTrialsRoundTripAtFloatPrecision) {
  TempDir dir("bank_raw");
  SynthSpec s = small_spec();
  s.mode = SynthMode::timeseries;
  s.n_subjects = 1;
  s.n_channels = 3;
  s.trials_per_subject = 2;
  s.samples_per_trial = 3;
  const auto bank = gen_synthetic(s, synthetic_montage(3));
  ASSERT_EQ(bank.raw_trials.size(), 2u);
  write_bank(bank, dir.path());
  const auto back = read_bank(dir.path());
  ASSERT_EQ(back.raw_trials.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.raw_trials[i].fs, 200.0);
    EXPECT_EQ(back.raw_trials[i].data, bank.raw_trials[i].data.cast<float>().cast<double>());
    EXPECT_EQ(back.raw_trials[i].label, bank.raw_trials[i].label);
  }
  EXPECT_TRUE(read_bank(dir.path(), false).raw_trials.empty());
}

TEST(Bank, CorruptionCodes) {
  TempDir dir("bank_bad");
  SynthSpec s = small_spec();
  s.n_subjects = 1;
  s.trials_per_subject = 10;  // 100 samples
  const auto bank = gen_synthetic(s, synthetic_montage(6));
  ASSERT_EQ(bank.samples.size(), 100u);
  write_bank(bank, dir.path());
  const fs::path feat = dir.path() / "features.bin";
  const fs::path keep = dir.path() / "features.keep";
  fs::copy_file(feat, keep);

  truncate_by(feat, 1);
  EXPECT_EQ(code_of([&] { read_bank(dir.path()); }), "truncated");

  // one whole sample short: 99 stored against 100 declared
  fs::copy_file(keep, feat, fs::copy_options::overwrite_existing);
  truncate_by(feat, 6 * 5 * 4);
  EXPECT_EQ(code_of([&] { read_bank(dir.path()); }), "count_mismatch");

  fs::copy_file(keep, feat, fs::copy_options::overwrite_existing);
  {
    std::fstream f(feat, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  EXPECT_EQ(code_of([&] { read_bank(dir.path()); }), "bad_magic");

  fs::copy_file(keep, feat, fs::copy_options::overwrite_existing);
  std::ofstream(dir.path() / "manifest.json") << "{ not json";
  EXPECT_EQ(code_of([&] { read_bank(dir.path()); }), "corrupt");
  EXPECT_EQ(code_of([&] { read_bank(dir.path() / "missing"); }), "io_error");
}

TEST(Bank, ManifestTableLengthMismatch) {
  TempDir dir("bank_count");
  const auto bank = gen_synthetic(small_spec(), synthetic_montage(6));
  write_bank(bank, dir.path());
  nlohmann::json m;
  std::ifstream(dir.path() / "manifest.json") >> m;
  m["counts"]["samples"] = bank.samples.size() + 1;
  std::ofstream(dir.path() / "manifest.json") << m.dump();
  EXPECT_EQ(code_of([&] { read_bank(dir.path()); }), "count_mismatch");
}

TEST(Split, SeedProtocolTrialCounts) {
  SynthSpec s = small_spec();
  s.n_subjects = 1;
  s.trials_per_subject = 15;
  s.samples_per_trial = 30;
  const auto bank = gen_synthetic(s, synthetic_montage(6));
  const auto [train, test] = apply_split(bank, SplitProtocol::seed());
  EXPECT_EQ(train.samples.size(), 270u);
  EXPECT_EQ(test.samples.size(), 180u);
  for (const auto& x : train.samples) EXPECT_LT(x.trial_id, 9);
  for (const auto& x : test.samples) EXPECT_GE(x.trial_id, 9);
}

TEST(Split, RatioProtocol) {
  SynthSpec s = small_spec();
  s.n_subjects = 1;
  s.trials_per_subject = 40;
  s.samples_per_trial = 1;
  const auto bank = gen_synthetic(s, synthetic_montage(6));
  const auto [train, test] = apply_split(bank, SplitProtocol::deap());
  EXPECT_EQ(train.samples.size(), 32u);
  EXPECT_EQ(test.samples.size(), 8u);
}

TEST(Split, Errors) {
  const auto bank = gen_synthetic(small_spec(), synthetic_montage(6));
  SplitProtocol overlap{"x", {0, 1, 2}, {2, 3}, std::nullopt};
  EXPECT_THROW(apply_split(bank, overlap), InvalidArgument);
  SplitProtocol unknown{"x", {0, 1}, {2, 99}, std::nullopt};
  EXPECT_THROW(apply_split(bank, unknown), InvalidArgument);
  EXPECT_THROW(apply_split(bank, SplitProtocol{"x", {}, {}, std::nullopt}), InvalidArgument);
  EXPECT_THROW(SplitProtocol::by_name("nope"), InvalidArgument);
  EXPECT_EQ(SplitProtocol::by_name("seed-iv").train_trials.size(), 16u);
}

TEST(Synthetic, DefaultSizeAndDeterminism) {
  const auto montage = load_montage(default_montage_path());
  SynthSpec s;
  const auto a = gen_synthetic(s, montage);
  EXPECT_EQ(a.samples.size(), 1500u);
  EXPECT_EQ(a.subjects().size(), 5u);
  const auto b = gen_synthetic(s, montage);
  for (std::size_t i = 0; i < a.samples.size(); ++i) ASSERT_EQ(a.samples[i].de, b.samples[i].de);
  s.seed = 43;
  EXPECT_NE(gen_synthetic(s, montage).samples[0].de, a.samples[0].de);
  EXPECT_THROW(gen_synthetic(s, synthetic_montage(10)), InvalidArgument);
}

TEST(Synthetic, CellMeansRecoverGenerator) {
  SynthSpec s;
  s.n_channels = 8;
  SynthTruth truth;
  const auto bank = gen_synthetic(s, synthetic_montage(8), &truth);
  ASSERT_EQ(truth.class_means.size(), 3u);
  ASSERT_EQ(truth.subject_shifts.size(), 5u);
  std::map<std::pair<int, int>, std::pair<MatD, int>> cells;
  for (const auto& x : bank.samples) {
    auto& [sum, n] = cells.try_emplace({x.subject_id, x.label}, MatD::Zero(8, 5), 0).first->second;
    sum += x.de.cast<double>();
    ++n;
  }
  for (const auto& [key, cell] : cells) {
    const MatD expect = truth.class_means[key.second] + truth.subject_shifts[key.first];
    const double tol = 5 * s.sample_noise_std / std::sqrt(cell.second);
    EXPECT_LT((cell.first / cell.second - expect).cwiseAbs().maxCoeff(), tol);
  }
}

TEST(Synthetic, TimeseriesBandEntropies) {
  SynthSpec s;
  s.mode = SynthMode::timeseries;
  s.n_subjects = 1;
  s.n_channels = 4;
  s.trials_per_subject = 3;
  s.samples_per_trial = 20;
  s.class_mean_scale = 0;
  s.subject_shift_std = 0;
  s.sample_noise_std = 0;
  const auto bank = gen_synthetic(s, synthetic_montage(4));
  EXPECT_EQ(bank.samples.size(), 60u);
  MatD mean = MatD::Zero(4, 5);
  for (const auto& x : bank.samples) mean += x.de.cast<double>() / 60.0;
  const double base[5] = {2.5, 2.0, 1.8, 1.4, 0.8};
  for (Index c = 0; c < 4; ++c)
    for (Index b = 0; b < 5; ++b) EXPECT_NEAR(mean(c, b), base[b], 0.05) << c << "," << b;
}

TEST(Checkpoint, RoundTripPreservesForward) {
  TempDir dir("ckpt");
  DtaModel<float> m(toy(6), 9);
  const auto bank = gen_synthetic(small_spec(), synthetic_montage(6));
  // move the batch-norm running statistics away from their defaults
  TrainConfig t;
  t.pretrain_batch = 20;
  t.pretrain_epochs = 1;
  OptimizerState<float> st;
  st.lr = 3e-4;
  pretrain(m, bank.samples, bank.montage, t, AugmentConfig{});
  for (auto& p : m.params()) p.grad = Mat<float>::Constant(p.value.rows(), p.value.cols(), 0.1f);
  adam_step(m.params(), st);
  save_checkpoint(m, &st, dir.path() / "m.ckpt");

  auto ck = load_checkpoint<float>(dir.path() / "m.ckpt");
  ASSERT_TRUE(ck.optimizer);
  EXPECT_EQ(ck.optimizer->step, 1);
  EXPECT_EQ(ck.optimizer->m.at("enc.src.f3.w"), st.m.at("enc.src.f3.w"));
  for (std::size_t i = 0; i < m.params().size(); ++i) EXPECT_EQ(ck.model.params()[i].value, m.params()[i].value);
  const auto a = predict(m, bank.samples, bank.montage);
  const auto b = predict(ck.model, bank.samples, bank.montage);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].probabilities, b[i].probabilities);
}

TEST(Checkpoint, ConfigMismatchAndCorruption) {
  TempDir dir("ckpt_bad");
  DtaModel<float> m(toy(6), 1);
  save_checkpoint<float>(m, nullptr, dir.path() / "m.ckpt");
  const ModelConfig other = toy(8);
  EXPECT_EQ(code_of([&] { load_checkpoint<float>(dir.path() / "m.ckpt", &other); }), "config_mismatch");
  const ModelConfig same = toy(6);
  EXPECT_NO_THROW(load_checkpoint<float>(dir.path() / "m.ckpt", &same));
  EXPECT_FALSE(load_checkpoint<float>(dir.path() / "m.ckpt").optimizer);
  truncate_by(dir.path() / "m.ckpt", 3);
  EXPECT_EQ(code_of([&] { load_checkpoint<float>(dir.path() / "m.ckpt"); }), "truncated");
  std::ofstream(dir.path() / "junk.ckpt") << "NOTACKPT........";
  EXPECT_EQ(code_of([&] { load_checkpoint<float>(dir.path() / "junk.ckpt"); }), "bad_magic");
}

TEST(Checkpoint, DoubleToFloatRoundsToNearest) {
  TempDir dir("ckpt_cast");
  DtaModel<double> m(toy(6), 2);
  m.params().at("enc.src.f3.w").value(0, 0) = 0.1;  // not representable in either width
  save_checkpoint<double>(m, nullptr, dir.path() / "d.ckpt");
  const auto f = load_checkpoint<float>(dir.path() / "d.ckpt");
  for (std::size_t i = 0; i < m.params().size(); ++i)
    EXPECT_EQ(f.model.params()[i].value, m.params()[i].value.cast<float>());
  EXPECT_EQ(f.model.params().at("enc.src.f3.w").value(0, 0), 0.1f);
  const auto d = load_checkpoint<double>(dir.path() / "d.ckpt");
  EXPECT_EQ(d.model.params().at("enc.src.f3.w").value, m.params().at("enc.src.f3.w").value);
}
