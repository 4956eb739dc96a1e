#pragma once

// Sample banks: persisted DE feature samples plus manifest, optional raw
// trials, split protocols and the synthetic bank generator.
//
// Directory layout
//   manifest.json   format_version=1, dataset, classes, bands, montage_file,
//                   counts, sample_columns, samples (index table), raw_trials
//   features.bin    "CLDTAFB1" then N x channels x bands float32 LE,
//                   row-major in manifest order
//   montage.csv     the bank's montage
//   raw/t<id>.bin   "CLDTARW1", fs float64 LE, channels x samples float32 LE

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cldta/dsp.hpp"
#include "cldta/error.hpp"
#include "cldta/gradcore.hpp"
#include "cldta/montage.hpp"

namespace cldta {

#ifdef CLDTA_DATA_DIR
inline std::filesystem::path default_montage_path() { return std::filesystem::path(CLDTA_DATA_DIR) / "montage_62.csv"; }
#endif

// Quasi-uniform points on the upper hemisphere, named E0..E{n-1}. Used for
// synthetic banks whose channel count has no standard layout.
inline ChannelMontage synthetic_montage(std::size_t n) {
  if (n == 0) throw InvalidArgument("synthetic_montage: need at least one channel");
  std::vector<Channel> ch;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double r = std::sqrt(1.0 - z * z);
    const double phi = golden * static_cast<double>(i);
    Eigen::Vector3d p(r * std::cos(phi), r * std::sin(phi), z);
    ch.push_back(Channel{"E" + std::to_string(i), p.normalized()});
  }
  return ChannelMontage(std::move(ch));
}

struct SampleBank {
  std::string dataset = "synthetic";
  std::vector<std::string> classes;
  std::vector<std::string> bands;
  std::string montage_file = "montage.csv";
  ChannelMontage montage;
  std::vector<FeatureSample> samples;
  std::vector<RawTrial> raw_trials;

  std::size_t size() const { return samples.size(); }
  Index n_channels() const { return static_cast<Index>(montage.size()); }
  Index n_bands() const { return static_cast<Index>(bands.size()); }

  void validate() const {
    if (montage.size() == 0) throw InvalidArgument("bank: no montage");
    if (classes.empty()) throw InvalidArgument("bank: no classes");
    for (const auto& s : samples) {
      if (s.label < 0 || s.label >= static_cast<int>(classes.size()))
        throw InvalidArgument("bank: sample label out of range");
      if (s.de.rows() != n_channels() || s.de.cols() != n_bands())
        throw ShapeMismatch("bank: sample shape does not match montage x bands");
    }
    for (const auto& t : raw_trials)
      if (t.channels() != n_channels()) throw ShapeMismatch("bank: raw trial channel count mismatch");
  }

  std::vector<int> subjects() const {
    std::set<int> s;
    for (const auto& x : samples) s.insert(x.subject_id);
    return {s.begin(), s.end()};
  }

  std::set<int> labels() const {
    std::set<int> s;
    for (const auto& x : samples) s.insert(x.label);
    return s;
  }

  // Same metadata, samples (and raw trials) restricted by subject predicate.
  template <class Pred>
  SampleBank filter(Pred keep) const {
    SampleBank out = header_copy();
    for (const auto& s : samples)
      if (keep(s)) out.samples.push_back(s);
    return out;
  }

  SampleBank header_copy() const {
    SampleBank out;
    out.dataset = dataset;
    out.classes = classes;
    out.bands = bands;
    out.montage_file = montage_file;
    out.montage = montage;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Binary helpers
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void write_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(buf, sizeof(T));
}

template <class T>
T read_le(const char* p) {
  char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void check_magic(const std::vector<char>& buf, const char* magic, const std::string& what) {
  if (buf.size() < 8 || std::memcmp(buf.data(), magic, 8) != 0)
    throw FormatError("bad_magic", what + ": bad magic bytes");
}

}  // namespace detail

inline void write_raw_trial(const RawTrial& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("CLDTARW1", 8);
  detail::write_le<double>(out, t.fs);
  for (Index i = 0; i < t.data.size(); ++i) detail::write_le<float>(out, static_cast<float>(t.data.data()[i]));
  if (!out) throw IoError("write failed: " + path.string());
}

inline MatD read_raw_payload(const std::filesystem::path& path, Index channels, Index samples, double& fs) {
  const auto buf = detail::read_file(path);
  detail::check_magic(buf, "CLDTARW1", path.string());
  const std::size_t expect = 16 + static_cast<std::size_t>(channels * samples) * 4;
  if (buf.size() < expect) throw FormatError("truncated", path.string() + ": truncated raw payload");
  if (buf.size() > expect) throw FormatError("count_mismatch", path.string() + ": raw payload longer than manifest");
  fs = detail::read_le<double>(buf.data() + 8);
  MatD d(channels, samples);
  for (Index i = 0; i < d.size(); ++i) d.data()[i] = detail::read_le<float>(buf.data() + 16 + 4 * i);
  return d;
}

inline void write_bank(const SampleBank& bank, const std::filesystem::path& dir) {
  bank.validate();
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  using nlohmann::json;
  json m;
  m["format_version"] = 1;
  m["dataset"] = bank.dataset;
  m["classes"] = bank.classes;
  m["bands"] = bank.bands;
  m["montage_file"] = bank.montage_file;
  m["counts"] = {{"samples", bank.samples.size()},
                 {"channels", bank.n_channels()},
                 {"bands", bank.n_bands()},
                 {"subjects", bank.subjects().size()},
                 {"raw_trials", bank.raw_trials.size()}};
  m["sample_columns"] = {"subject", "session", "trial", "window", "label"};
  json table = json::array();
  for (const auto& s : bank.samples)
    table.push_back({s.subject_id, s.session_id, s.trial_id, s.window_index, s.label});
  m["samples"] = std::move(table);
  json raws = json::array();
  for (std::size_t i = 0; i < bank.raw_trials.size(); ++i) {
    const auto& t = bank.raw_trials[i];
    raws.push_back({{"file", "raw/t" + std::to_string(i) + ".bin"},
                    {"subject", t.subject_id},
                    {"session", t.session_id},
                    {"trial", t.trial_id},
                    {"label", t.label},
                    {"channels", t.channels()},
                    {"samples", t.samples()}});
  }
  m["raw_trials"] = std::move(raws);
  {
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << m.dump(1) << '\n';
  }
  {
    std::ofstream out(dir / "features.bin", std::ios::binary);
    if (!out) throw IoError("cannot write features.bin");
    out.write("CLDTAFB1", 8);
    for (const auto& s : bank.samples)
      for (Index i = 0; i < s.de.size(); ++i) detail::write_le<float>(out, s.de.data()[i]);
    if (!out) throw IoError("write failed: features.bin");
  }
  save_montage(bank.montage, dir / bank.montage_file);
  if (!bank.raw_trials.empty()) {
    fs::create_directories(dir / "raw");
    for (std::size_t i = 0; i < bank.raw_trials.size(); ++i)
      write_raw_trial(bank.raw_trials[i], dir / "raw" / ("t" + std::to_string(i) + ".bin"));
  }
}

inline SampleBank read_bank(const std::filesystem::path& dir, bool load_raw = true) {
  using nlohmann::json;
  json m;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
    try {
      in >> m;
    } catch (const json::exception& e) {
      throw FormatError("corrupt", std::string("manifest.json: ") + e.what());
    }
  }
  SampleBank bank;
  std::size_t n = 0;
  Index channels = 0, nbands = 0;
  try {
    if (m.at("format_version").get<int>() != 1) throw FormatError("corrupt", "manifest: unsupported format_version");
    bank.dataset = m.at("dataset").get<std::string>();
    bank.classes = m.at("classes").get<std::vector<std::string>>();
    bank.bands = m.at("bands").get<std::vector<std::string>>();
    bank.montage_file = m.at("montage_file").get<std::string>();
    n = m.at("counts").at("samples").get<std::size_t>();
    channels = m.at("counts").at("channels").get<Index>();
    nbands = m.at("counts").at("bands").get<Index>();
    const auto& table = m.at("samples");
    if (table.size() != n) throw FormatError("count_mismatch", "manifest: counts.samples != sample table length");
    bank.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = table[i];
      auto& s = bank.samples[i];
      s.subject_id = r.at(0).get<int>();
      s.session_id = r.at(1).get<int>();
      s.trial_id = r.at(2).get<int>();
      s.window_index = r.at(3).get<int>();
      s.label = r.at(4).get<int>();
    }
  } catch (const json::exception& e) {
    throw FormatError("corrupt", std::string("manifest: ") + e.what());
  }
  if (nbands != static_cast<Index>(bank.bands.size()))
    throw FormatError("count_mismatch", "manifest: counts.bands != number of band names");
  bank.montage = load_montage(dir / bank.montage_file);
  if (static_cast<Index>(bank.montage.size()) != channels)
    throw FormatError("count_mismatch", "manifest: channel count does not match montage");

  const auto buf = detail::read_file(dir / "features.bin");
  detail::check_magic(buf, "CLDTAFB1", "features.bin");
  const std::size_t per = static_cast<std::size_t>(channels * nbands) * 4;
  const std::size_t payload = buf.size() - 8;
  if (per == 0 || payload % per != 0) throw FormatError("truncated", "features.bin: truncated payload");
  if (payload / per != n)
    throw FormatError("count_mismatch", "features.bin holds " + std::to_string(payload / per) +
                                            " samples, manifest says " + std::to_string(n));
  const char* p = buf.data() + 8;
  for (auto& s : bank.samples) {
    s.de.resize(channels, nbands);
    for (Index i = 0; i < s.de.size(); ++i, p += 4) s.de.data()[i] = detail::read_le<float>(p);
  }

  if (load_raw && m.contains("raw_trials")) {
    for (const auto& r : m.at("raw_trials")) {
      RawTrial t;
      t.subject_id = r.at("subject").get<int>();
      t.session_id = r.at("session").get<int>();
      t.trial_id = r.at("trial").get<int>();
      t.label = r.at("label").get<int>();
      t.data = read_raw_payload(dir / r.at("file").get<std::string>(), r.at("channels").get<Index>(),
                                r.at("samples").get<Index>(), t.fs);
      bank.raw_trials.push_back(std::move(t));
    }
  }
  bank.validate();
  return bank;
}

// ---------------------------------------------------------------------------
// Split protocols
// ---------------------------------------------------------------------------

struct SplitProtocol {
  std::string name;
  // Trial-list rule, applied within every (subject, session).
  std::vector<int> train_trials;
  std::vector<int> test_trials;
  // Ratio rule: first round(ratio * trials) trials of each (subject, session)
  // train, the rest test. Used when the trial lists are empty.
  std::optional<double> train_ratio;

  static SplitProtocol seed() { return trial_range("seed", 9, 6); }
  static SplitProtocol seed_iv() { return trial_range("seed-iv", 16, 8); }
  static SplitProtocol deap() { return SplitProtocol{"deap", {}, {}, 0.8}; }

  static SplitProtocol trial_range(std::string name, int n_train, int n_test) {
    SplitProtocol p;
    p.name = std::move(name);
    for (int i = 0; i < n_train; ++i) p.train_trials.push_back(i);
    for (int i = 0; i < n_test; ++i) p.test_trials.push_back(n_train + i);
    return p;
  }

  static SplitProtocol by_name(const std::string& name) {
    if (name == "seed") return seed();
    if (name == "seed-iv") return seed_iv();
    if (name == "deap") return deap();
    throw InvalidArgument("unknown split protocol '" + name + "'");
  }
};

inline std::pair<SampleBank, SampleBank> apply_split(const SampleBank& bank, const SplitProtocol& protocol) {
  SampleBank train = bank.header_copy(), test = bank.header_copy();
  if (!protocol.train_trials.empty() || !protocol.test_trials.empty()) {
    const std::set<int> tr(protocol.train_trials.begin(), protocol.train_trials.end());
    const std::set<int> te(protocol.test_trials.begin(), protocol.test_trials.end());
    if (tr.empty() || te.empty()) throw InvalidArgument("split: both sides need trials");
    for (int t : tr)
      if (te.count(t)) throw InvalidArgument("split: trial " + std::to_string(t) + " on both sides");
    std::set<int> present;
    for (const auto& s : bank.samples) present.insert(s.trial_id);
    for (int t : tr)
      if (!present.count(t)) throw InvalidArgument("split: unknown trial index " + std::to_string(t));
    for (int t : te)
      if (!present.count(t)) throw InvalidArgument("split: unknown trial index " + std::to_string(t));
    for (const auto& s : bank.samples) {
      if (tr.count(s.trial_id)) train.samples.push_back(s);
      else if (te.count(s.trial_id)) test.samples.push_back(s);
    }
  } else if (protocol.train_ratio) {
    const double r = *protocol.train_ratio;
    if (!(r > 0 && r < 1)) throw InvalidArgument("split: ratio must be in (0, 1)");
    std::map<std::pair<int, int>, std::set<int>> trials;
    for (const auto& s : bank.samples) trials[{s.subject_id, s.session_id}].insert(s.trial_id);
    std::map<std::pair<int, int>, std::set<int>> train_set;
    for (const auto& [key, ids] : trials) {
      const auto k = static_cast<std::size_t>(std::llround(r * static_cast<double>(ids.size())));
      auto it = ids.begin();
      for (std::size_t i = 0; i < k && it != ids.end(); ++i, ++it) train_set[key].insert(*it);
    }
    for (const auto& s : bank.samples) {
      if (train_set[{s.subject_id, s.session_id}].count(s.trial_id)) train.samples.push_back(s);
      else test.samples.push_back(s);
    }
  } else {
    throw InvalidArgument("split: protocol defines no rule");
  }
  if (train.samples.empty() || test.samples.empty()) throw InvalidArgument("split: a side is empty");
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic banks
// ---------------------------------------------------------------------------

enum class SynthMode { features, timeseries };

struct SynthSpec {
  int n_subjects = 5;
  int n_classes = 3;
  int n_channels = 62;
  int n_bands = 5;
  int trials_per_subject = 10;  // per session
  int n_sessions = 1;
  int samples_per_trial = 30;
  double class_mean_scale = 1.0;
  double subject_shift_std = 0.5;
  double sample_noise_std = 0.5;
  std::uint64_t seed = 42;
  SynthMode mode = SynthMode::features;
  double fs = 200.0;  // timeseries mode

  void validate() const {
    if (n_subjects < 1 || n_classes < 1 || n_channels < 1 || n_bands < 1 || trials_per_subject < 1 ||
        n_sessions < 1 || samples_per_trial < 1)
      throw InvalidArgument("synth spec: counts must be positive");
    if (class_mean_scale < 0 || subject_shift_std < 0 || sample_noise_std < 0)
      throw InvalidArgument("synth spec: standard deviations must be non-negative");
    if (mode == SynthMode::timeseries && n_bands != 5)
      throw InvalidArgument("synth spec: timeseries mode uses the five standard bands");
  }
};

// Generating parameters, kept for tests that check recovery.
struct SynthTruth {
  std::vector<MatD> class_means;     // [class] channels x bands
  std::vector<MatD> subject_shifts;  // [subject] channels x bands
};

// Features mode: de = mu_class + delta_subject + eps with
// mu ~ N(0, class_mean_scale^2), delta ~ N(0, subject_shift_std^2),
// eps ~ N(0, sample_noise_std^2). Trial t carries label t % n_classes.
//
// Timeseries mode: per channel, each band contributes band-passed white
// noise scaled so that its band-filtered 1 s window DE averages
// base_b + mu + delta + a per-trial jitter; extract_de over the trial then
// yields the samples.
inline SampleBank gen_synthetic(const SynthSpec& spec, const ChannelMontage& montage, SynthTruth* truth = nullptr) {
  spec.validate();
  if (static_cast<int>(montage.size()) != spec.n_channels)
    throw InvalidArgument("gen_synthetic: montage size does not match n_channels");
  Rng rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const Index nc = spec.n_channels, nb = spec.n_bands;
  auto draw = [&](double sd) {
    MatD m(nc, nb);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = sd * unit(rng);
    return m;
  };
  SynthTruth tr;
  for (int c = 0; c < spec.n_classes; ++c) tr.class_means.push_back(draw(spec.class_mean_scale));
  for (int s = 0; s < spec.n_subjects; ++s) tr.subject_shifts.push_back(draw(spec.subject_shift_std));

  SampleBank bank;
  bank.dataset = spec.mode == SynthMode::features ? "synthetic-features" : "synthetic-timeseries";
  for (int c = 0; c < spec.n_classes; ++c) bank.classes.push_back("class" + std::to_string(c));
  if (spec.n_bands == 5) {
    bank.bands = BandSpec::standard().names();
  } else {
    for (int b = 0; b < spec.n_bands; ++b) bank.bands.push_back("band" + std::to_string(b));
  }
  bank.montage = montage;

  const BandSpec bands = BandSpec::standard();
  const double base_de[5] = {2.5, 2.0, 1.8, 1.4, 0.8};
  for (int s = 0; s < spec.n_subjects; ++s) {
    for (int session = 0; session < spec.n_sessions; ++session) {
      for (int t = 0; t < spec.trials_per_subject; ++t) {
        const int label = t % spec.n_classes;
        const MatD center = tr.class_means[static_cast<std::size_t>(label)] + tr.subject_shifts[static_cast<std::size_t>(s)];
        if (spec.mode == SynthMode::features) {
          for (int w = 0; w < spec.samples_per_trial; ++w) {
            FeatureSample fs;
            fs.subject_id = s;
            fs.session_id = session;
            fs.trial_id = t;
            fs.window_index = w;
            fs.label = label;
            fs.de = (center + draw(spec.sample_noise_std)).cast<float>();
            bank.samples.push_back(std::move(fs));
          }
          continue;
        }
        RawTrial raw;
        raw.subject_id = s;
        raw.session_id = session;
        raw.trial_id = t;
        raw.label = label;
        raw.fs = spec.fs;
        const Index ns = static_cast<Index>(std::llround(spec.samples_per_trial * spec.fs));
        raw.data = MatD::Zero(nc, ns);
        const MatD target = center + draw(spec.sample_noise_std);
        const WindowLayout win = tail_windows(raw, 1.0);
        for (Index b = 0; b < nb; ++b) {
          MatD noise(nc, ns);
          for (Index i = 0; i < noise.size(); ++i) noise.data()[i] = unit(rng);
          const auto& band = bands.bands[static_cast<std::size_t>(b)];
          const MatD comp = bandpass(noise, band.low, band.high, spec.fs);
          // gain set on what extraction measures: the refiltered component's
          // mean 1 s window DE (DE shifts by ln a under scaling by a)
          const MatD seen = bandpass(comp, band.low, band.high, spec.fs);
          for (Index c = 0; c < nc; ++c) {
            double mean_de = 0;
            for (Index k = 0; k < win.count; ++k)
              mean_de += differential_entropy(
                  std::span<const double>(seen.row(c).data() + win.start + k * win.length,
                                          static_cast<std::size_t>(win.length)));
            mean_de /= static_cast<double>(win.count);
            const double de = base_de[b] + target(c, b);
            raw.data.row(c) += std::exp(de - mean_de) * comp.row(c);
          }
        }
        for (auto& f : extract_de(raw, bands, 1.0)) bank.samples.push_back(std::move(f));
        bank.raw_trials.push_back(std::move(raw));
      }
    }
  }
  if (truth) *truth = std::move(tr);
  return bank;
}

}  // namespace cldta
