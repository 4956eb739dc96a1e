// Command-line entry point.
//
// Exit codes: 0 success, 2 usage error, 1 runtime error. Runtime errors are
// reported on stderr as one line: `error code=<code> message=<text>`.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "cldta/cldta.hpp"

namespace fs = std::filesystem;
using namespace cldta;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string bank;
  std::string checkpoint;
  std::string calibrated;
  std::optional<int> k_per_class;
  std::string mode;
  int jobs = 1;
  std::optional<int> subject;
};

RunConfig resolve(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.k_per_class) {
    c.train.k_per_class = *o.k_per_class;
    c.train.validate();
  }
  if (!o.out.empty()) c.paths.out = o.out;
  if (!o.bank.empty()) c.paths.bank = o.bank;
  if (!o.checkpoint.empty()) c.paths.checkpoint = o.checkpoint;
  return c;
}

fs::path out_dir(const RunConfig& c) {
  if (c.paths.out.empty()) throw InvalidArgument("no output directory (--out or paths.out)");
  fs::create_directories(c.paths.out);
  return c.paths.out;
}

std::ofstream open_csv(const fs::path& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# config_hash=" << config_hash(c) << " seed=" << c.seed << '\n' << std::setprecision(10);
  return out;
}

SampleBank bank_of(const RunConfig& c) {
  if (c.paths.bank.empty()) throw InvalidArgument("no bank (--bank or paths.bank)");
  return read_bank(c.paths.bank, false);
}

Checkpoint<float> checkpoint_of(const RunConfig& c, const SampleBank& bank) {
  if (c.paths.checkpoint.empty()) throw InvalidArgument("no checkpoint (--checkpoint or paths.checkpoint)");
  auto ck = load_checkpoint<float>(c.paths.checkpoint);
  if (ck.model.config().n_channels != bank.n_channels() || ck.model.config().n_bands != bank.n_bands())
    throw FormatError("config_mismatch", "checkpoint model does not match the bank's channels x bands");
  return ck;
}

ModelConfig model_for(const RunConfig& c, const SampleBank& bank) {
  ModelConfig m = c.model;
  m.n_channels = static_cast<int>(bank.n_channels());
  m.n_bands = static_cast<int>(bank.n_bands());
  m.n_classes = static_cast<int>(bank.classes.size());
  m.validate();
  return m;
}

std::vector<FeatureSample> samples_of_subject(const SampleBank& bank, std::optional<int> subject) {
  if (!subject) return bank.samples;
  std::vector<FeatureSample> out;
  for (const auto& s : bank.samples)
    if (s.subject_id == *subject) out.push_back(s);
  if (out.empty()) throw InvalidArgument("no samples for subject " + std::to_string(*subject));
  return out;
}

// --- subcommands -------------------------------------------------------------

void cmd_gen_synth(const Options& o) {
  RunConfig c = resolve(o);
  SynthSpec spec = c.synth_spec();
  if (!o.mode.empty()) {
    if (o.mode == "features") spec.mode = SynthMode::features;
    else if (o.mode == "timeseries") spec.mode = SynthMode::timeseries;
    else throw InvalidArgument("gen-synth --mode must be features or timeseries");
  }
  ChannelMontage montage;
  if (!c.paths.montage.empty()) montage = load_montage(c.paths.montage);
  else if (spec.n_channels == 62) montage = load_montage(default_montage_path());
  else montage = synthetic_montage(static_cast<std::size_t>(spec.n_channels));
  const auto dir = out_dir(c);
  std::cerr << "generating " << spec.n_subjects << " subjects\n";
  write_bank(gen_synthetic(spec, montage), dir);
}

void cmd_extract(const Options& o) {
  RunConfig c = resolve(o);
  if (c.paths.bank.empty()) throw InvalidArgument("no bank (--bank or paths.bank)");
  const SampleBank in = read_bank(c.paths.bank, true);
  if (in.raw_trials.empty()) throw InvalidArgument("bank has no raw trials to extract from");
  const bool plain = o.mode == "plain";
  if (!o.mode.empty() && !plain && o.mode != "preprocess")
    throw InvalidArgument("extract-features --mode must be preprocess or plain");
  SampleBank out = in.header_copy();
  const BandSpec bands = BandSpec::standard();
  out.bands = bands.names();
  for (const auto& t : in.raw_trials) {
    auto xs = plain ? extract_de(t, bands, 1.0) : preprocess_and_extract(t, in.montage, bands);
    for (auto& s : xs) out.samples.push_back(std::move(s));
  }
  std::cerr << "extracted " << out.samples.size() << " samples from " << in.raw_trials.size() << " trials\n";
  write_bank(out, out_dir(c));
}

void cmd_pretrain(const Options& o) {
  RunConfig c = resolve(o);
  const SampleBank bank = bank_of(c);
  const auto dir = out_dir(c);
  const TrainConfig tc = c.train_config();
  DtaModel<float> model(model_for(c, bank), tc.seed);
  const auto log = pretrain(model, bank.samples, bank.montage, tc, c.augment, &std::cerr);
  save_checkpoint<float>(model, nullptr, dir / "pretrained.ckpt");
  auto csv = open_csv(dir / "pretrain_loss.csv", c);
  csv << "epoch,loss\n";
  for (std::size_t i = 0; i < log.epoch_loss.size(); ++i) csv << i + 1 << ',' << log.epoch_loss[i] << '\n';
}

void cmd_calibrate(const Options& o) {
  RunConfig c = resolve(o);
  const SampleBank bank = bank_of(c);
  auto ck = checkpoint_of(c, bank);
  const auto dir = out_dir(c);
  const TrainConfig tc = c.train_config();
  if (tc.k_per_class < 2) throw InvalidArgument("calibrate needs k_per_class >= 2");
  const auto pool = samples_of_subject(bank, o.subject);
  Rng rng = detail::stream(tc.seed, 3);
  const auto labeled = detail::draw_per_class(pool, ck.model.config().n_classes, tc.k_per_class, rng, "calibrate").first;
  auto res = calibrate(ck.model, labeled, bank.montage, tc, &std::cerr);
  save_checkpoint<float>(res.model, nullptr, dir / "calibrated.ckpt");
  auto csv = open_csv(dir / "calibration.csv", c);
  csv << "epoch,val_accuracy\n";
  for (std::size_t i = 0; i < res.val_accuracy.size(); ++i) csv << i + 1 << ',' << res.val_accuracy[i] << '\n';
  std::cerr << "epochs_run=" << res.epochs_run << " best_epoch=" << res.best_epoch
            << " best_val_accuracy=" << res.best_val_accuracy << '\n';
}

void cmd_predict(const Options& o) {
  RunConfig c = resolve(o);
  const SampleBank bank = bank_of(c);
  auto ck = checkpoint_of(c, bank);
  const auto samples = samples_of_subject(bank, o.subject);
  std::cout << std::setprecision(9);
  for (const auto& p : predict(ck.model, samples, bank.montage)) {
    std::cout << p.label;
    for (double v : p.probabilities) std::cout << ',' << v;
    std::cout << '\n';
  }
}

void write_report(const EvalReport& rep, const RunConfig& c, const fs::path& dir) {
  auto csv = open_csv(dir / "evaluate.csv", c);
  csv << "subject,accuracy\n";
  for (std::size_t i = 0; i < rep.subjects.size(); ++i) csv << rep.subjects[i] << ',' << rep.accuracies[i] << '\n';
  nlohmann::json j{{"config_hash", config_hash(c)}, {"seed", rep.seed},         {"protocol", rep.protocol},
                   {"subjects", rep.subjects},      {"accuracies", rep.accuracies}, {"mean", rep.mean},
                   {"std", rep.std},                {"epochs_run", rep.epochs_run}, {"best_epoch", rep.best_epoch}};
  std::ofstream(dir / "evaluate.json") << j.dump(2) << '\n';
}

void cmd_evaluate(const Options& o) {
  RunConfig c = resolve(o);
  const SampleBank bank = bank_of(c);
  const auto dir = out_dir(c);
  LosocvOptions opt;
  opt.jobs = o.jobs;
  opt.progress = &std::cerr;
  EvalReport rep;
  if (o.mode == "losocv") {
    rep = losocv(bank, model_for(c, bank), c.train_config(), c.augment, opt);
  } else if (o.mode == "subject-dependent") {
    rep = subject_dependent(bank, SplitProtocol::by_name(c.protocol), model_for(c, bank), c.train_config(), c.augment,
                            opt);
  } else {
    throw InvalidArgument("evaluate --mode must be losocv or subject-dependent");
  }
  std::cerr << rep.protocol << " mean=" << rep.mean << " std=" << rep.std << '\n';
  write_report(rep, c, dir);
}

void cmd_robustness(const Options& o) {
  RunConfig c = resolve(o);
  const SampleBank bank = bank_of(c);
  auto ck = checkpoint_of(c, bank);
  const auto dir = out_dir(c);
  const auto samples = samples_of_subject(bank, o.subject);
  std::vector<double> params, acc;
  if (o.mode == "failure") {
    const auto mode = c.eval.failure_mode == "neighbor" ? FailureMode::neighbor : FailureMode::zero;
    acc = electrode_failure_sweep(ck.model, samples, bank.montage, c.eval.failure_counts, mode, c.seed);
    params.assign(c.eval.failure_counts.begin(), c.eval.failure_counts.end());
  } else if (o.mode == "noise") {
    acc = noise_sweep(ck.model, samples, bank.montage, c.eval.noise_multipliers, c.seed);
    params = c.eval.noise_multipliers;
  } else {
    throw InvalidArgument("robustness --mode must be failure or noise");
  }
  auto csv = open_csv(dir / "robustness.csv", c);
  csv << "param,accuracy\n";
  for (std::size_t i = 0; i < acc.size(); ++i) csv << params[i] << ',' << acc[i] << '\n';
}

void cmd_connectivity(const Options& o) {
  RunConfig c = resolve(o);
  const SampleBank bank = bank_of(c);
  auto ck = checkpoint_of(c, bank);
  const auto dir = out_dir(c);
  const auto src = c.eval.connectivity_source == "learned_embedding" ? ConnectivitySource::learned_embedding
                                                                      : ConnectivitySource::representation;
  const auto r = connectivity(ck.model, samples_of_subject(bank, o.subject), bank.montage, src);
  const Index n = r.adjacency.rows();
  auto edges = open_csv(dir / "connectivity_edges.csv", c);
  edges << "i,j,cosine,retained\n";
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      edges << i << ',' << j << ',' << r.adjacency(i, j) << ','
            << (r.retained[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] ? 1 : 0) << '\n';
  auto nodes = open_csv(dir / "connectivity_nodes.csv", c);
  nodes << "node,degree_centrality\n";
  for (Index i = 0; i < n; ++i) nodes << i << ',' << r.degree_centrality[static_cast<std::size_t>(i)] << '\n';
}

void cmd_export(const Options& o) {
  RunConfig c = resolve(o);
  const SampleBank bank = bank_of(c);
  const auto dir = out_dir(c);
  const auto samples = samples_of_subject(bank, o.subject);
  export_features<float>(samples, bank.montage, Stage::raw, nullptr, dir / "features_raw.csv");
  if (!c.paths.checkpoint.empty()) {
    auto ck = checkpoint_of(c, bank);
    export_features(samples, bank.montage, Stage::encoded, &ck.model, dir / "features_encoded.csv");
  }
  if (!o.calibrated.empty()) {
    RunConfig cc = c;
    cc.paths.checkpoint = o.calibrated;
    auto ck = checkpoint_of(cc, bank);
    export_features(samples, bank.montage, Stage::calibrated, &ck.model, dir / "features_calibrated.csv");
  }
}

// Gradient check of the double-precision model (dropout off) on a small
// synthetic batch, once through the contrastive head and once through the
// classifier head.
void cmd_grad_check(const Options& o) {
  RunConfig c = resolve(o);
  ModelConfig mc = c.model;
  mc.dropout = 0;
  mc.validate();
  SynthSpec spec = c.synth_spec();
  spec.n_channels = mc.n_channels;
  spec.n_bands = mc.n_bands;
  spec.n_classes = mc.n_classes;
  spec.n_subjects = 1;
  spec.trials_per_subject = mc.n_classes;
  spec.samples_per_trial = 1;
  const auto montage = synthetic_montage(static_cast<std::size_t>(mc.n_channels));
  const auto bank = gen_synthetic(spec, montage);
  std::vector<const MatF*> ptrs;
  std::vector<int> labels;
  for (const auto& s : bank.samples) {
    ptrs.push_back(&s.de);
    labels.push_back(s.label);
  }
  const MatD stack = stack_samples<double>(ptrs);
  const MatD pos = montage.positions();
  const Index B = static_cast<Index>(ptrs.size());
  double worst = 0;
  for (int head = 0; head < 2; ++head) {
    DtaModel<double> model(mc, c.seed);
    auto program = [&](Tape<double>& t) {
      Rng rng(0);
      Var<double> q = model.encode(t, stack, pos, B, Mode::train, true, rng);
      if (head == 0) {
        // Projector batch norm on running statistics: in batch mode a
        // per-feature shift cancels, leaving exactly-zero gradients that
        // central differences only resolve to roundoff.
        Var<double> z = model.project(t, q, B, Mode::eval, rng);
        return contrastive_loss(z, z, labels, labels, c.train.temperature);
      }
      return cross_entropy_mean(model.classify(t, q, B), labels);
    };
    const auto res = grad_check(model.params(), program);
    std::cerr << (head == 0 ? "contrastive" : "cross_entropy") << " max_rel_error=" << res.max_rel_error
              << " worst=" << res.worst_parameter << "[" << res.worst_index << "] coordinates=" << res.coordinates
              << '\n';
    worst = std::max(worst, res.max_rel_error);
  }
  std::cerr << "max_rel_error=" << worst << '\n';
  if (!(worst < 1e-4)) throw NumericError("gradient check failed: max relative error " + std::to_string(worst));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cldta: DE features, diagonal-masked transformer pretraining and calibration"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  Options o;

  auto add = [&](const char* name, const char* help, bool need_bank, bool need_ckpt) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "Master seed");
    s->add_option("--out", o.out, "Output directory");
    auto* b = s->add_option("--bank", o.bank, "Sample bank directory");
    if (need_bank) b->required();
    auto* k = s->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
    if (need_ckpt) k->required();
    s->add_option("--k-per-class", o.k_per_class, "Labeled calibration samples per class");
    s->add_option("--mode", o.mode, "Subcommand mode");
    s->add_option("--jobs", o.jobs, "Worker threads (1 = deterministic reference)")->check(CLI::PositiveNumber);
    s->add_option("--subject", o.subject, "Restrict to one subject");
    return s;
  };
  auto* gen = add("gen-synth", "Generate a synthetic sample bank (--mode features|timeseries)", false, false);
  auto* ext = add("extract-features", "Extract DE features from a bank's raw trials (--mode preprocess|plain)", true, false);
  auto* pre = add("pretrain", "Contrastive pretraining", true, false);
  auto* cal = add("calibrate", "Few-shot calibration of a pretrained checkpoint", true, true);
  auto* prd = add("predict", "Print label,probabilities per sample", true, true);
  auto* evl = add("evaluate", "Evaluation protocol (--mode losocv|subject-dependent)", true, false);
  auto* rob = add("robustness", "Robustness sweep (--mode failure|noise)", true, true);
  auto* con = add("connectivity", "Channel connectivity from learned representations", true, true);
  auto* exf = add("export-features", "Export raw/encoded/calibrated features as CSV", true, false);
  exf->add_option("--calibrated", o.calibrated, "Calibrated checkpoint for the calibrated stage");
  auto* grd = add("grad-check", "Finite-difference gradient check", false, false);
  evl->get_option("--mode")->required();
  rob->get_option("--mode")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    return 2;
  }

  try {
    if (*gen) cmd_gen_synth(o);
    else if (*ext) cmd_extract(o);
    else if (*pre) cmd_pretrain(o);
    else if (*cal) cmd_calibrate(o);
    else if (*prd) cmd_predict(o);
    else if (*evl) cmd_evaluate(o);
    else if (*rob) cmd_robustness(o);
    else if (*con) cmd_connectivity(o);
    else if (*exf) cmd_export(o);
    else if (*grd) cmd_grad_check(o);
  } catch (const Error& e) {
    std::cerr << "error code=" << e.code() << " message=" << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error code=internal message=" << e.what() << '\n';
    return 1;
  }
  return 0;
}
