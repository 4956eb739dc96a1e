#pragma once

// Parameter checkpoints.
//
//   "CLDTACK1"
//   u64 LE   header length
//   header   JSON: format_version, scalar (float32|float64), model config,
//            params [{name, rows, cols}], bn momentum, optional optimizer
//            {lr, beta1, beta2, eps, weight_decay, step, moments [names]}
//   payload  parameter values in header order, then bn1/bn2 running mean and
//            variance, then optimizer first moments and second moments, all
//            row-major little-endian in the header's scalar type
//
// Loading into a different scalar type casts every value with static_cast
// (float64 -> float32 rounds to nearest).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cldta/config.hpp"
#include "cldta/data_io.hpp"
#include "cldta/error.hpp"
#include "cldta/model.hpp"
#include "cldta/train.hpp"

namespace cldta {

template <class T>
struct Checkpoint {
  DtaModel<T> model;
  std::optional<OptimizerState<T>> optimizer;
};

template <class T>
void save_checkpoint(const DtaModel<T>& model, const OptimizerState<T>* opt, const std::filesystem::path& path) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  using nlohmann::json;
  json h;
  h["format_version"] = 1;
  h["scalar"] = sizeof(T) == 4 ? "float32" : "float64";
  h["model"] = to_json(model.config());
  h["bn_momentum"] = model.bn(0).momentum;
  json params = json::array();
  for (const auto& p : model.params()) params.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  h["params"] = std::move(params);
  std::vector<std::string> moments;
  if (opt) {
    for (const auto& [name, m] : opt->m) moments.push_back(name);
    h["optimizer"] = {{"lr", opt->lr},   {"beta1", opt->beta1},
                      {"beta2", opt->beta2}, {"eps", opt->eps},
                      {"weight_decay", opt->weight_decay}, {"step", opt->step},
                      {"moments", moments}};
  } else {
    h["optimizer"] = nullptr;
  }
  const std::string header = h.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write("CLDTACK1", 8);
  detail::write_le<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  auto dump = [&](const Mat<T>& m) {
    for (Index i = 0; i < m.size(); ++i) detail::write_le<T>(out, m.data()[i]);
  };
  for (const auto& p : model.params()) dump(p.value);
  for (int i = 0; i < 2; ++i) {
    dump(model.bn(i).running_mean);
    dump(model.bn(i).running_var);
  }
  if (opt) {
    for (const auto& n : moments) dump(opt->m.at(n));
    for (const auto& n : moments) dump(opt->v.at(n));
  }
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

// Reads a checkpoint into scalar type T. With `expected`, the stored model
// config must match it exactly.
template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  using nlohmann::json;
  const auto buf = detail::read_file(path);
  detail::check_magic(buf, "CLDTACK1", path.string());
  if (buf.size() < 16) throw FormatError("truncated", "checkpoint: truncated header");
  const auto hlen = detail::read_le<std::uint64_t>(buf.data() + 8);
  if (hlen > buf.size() - 16) throw FormatError("truncated", "checkpoint: truncated header");
  json h;
  ModelConfig mc;
  try {
    h = json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    if (h.at("format_version").get<int>() != 1) throw FormatError("corrupt", "checkpoint: unsupported version");
    mc = model_config_from_json(h.at("model"));
  } catch (const json::exception& e) {
    throw FormatError("corrupt", std::string("checkpoint header: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError("corrupt", std::string("checkpoint header: ") + e.what());
  }
  if (expected && !(*expected == mc)) {
    std::string why = "checkpoint: model config mismatch";
    if (expected->n_channels != mc.n_channels)
      why += " (n_channels " + std::to_string(mc.n_channels) + " stored, " + std::to_string(expected->n_channels) +
             " expected)";
    throw FormatError("config_mismatch", why);
  }
  const std::string scalar = h.value("scalar", "");
  if (scalar != "float32" && scalar != "float64") throw FormatError("corrupt", "checkpoint: unknown scalar type");
  const std::size_t width = scalar == "float32" ? 4 : 8;

  const char* p = buf.data() + 16 + hlen;
  const char* end = buf.data() + buf.size();
  auto fill = [&](Mat<T>& m) {
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * width;
    if (static_cast<std::size_t>(end - p) < bytes) throw FormatError("truncated", "checkpoint: truncated payload");
    for (Index i = 0; i < m.size(); ++i, p += width)
      m.data()[i] = width == 4 ? static_cast<T>(detail::read_le<float>(p)) : static_cast<T>(detail::read_le<double>(p));
  };

  Checkpoint<T> ck{DtaModel<T>(mc, 0), std::nullopt};
  auto& params = ck.model.params();
  try {
    const auto& list = h.at("params");
    if (list.size() != params.size()) throw FormatError("corrupt", "checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < list.size(); ++i) {
      auto& prm = params[i];
      if (list[i].at("name").get<std::string>() != prm.name || list[i].at("rows").get<Index>() != prm.value.rows() ||
          list[i].at("cols").get<Index>() != prm.value.cols())
        throw FormatError("corrupt", "checkpoint: parameter table does not match the model layout");
      fill(prm.value);
    }
    for (int i = 0; i < 2; ++i) {
      ck.model.bn(i).momentum = h.at("bn_momentum").get<double>();
      fill(ck.model.bn(i).running_mean);
      fill(ck.model.bn(i).running_var);
    }
    if (!h.at("optimizer").is_null()) {
      const auto& o = h.at("optimizer");
      OptimizerState<T> st;
      st.lr = o.at("lr").get<double>();
      st.beta1 = o.at("beta1").get<double>();
      st.beta2 = o.at("beta2").get<double>();
      st.eps = o.at("eps").get<double>();
      st.weight_decay = o.at("weight_decay").get<double>();
      st.step = o.at("step").get<long>();
      const auto names = o.at("moments").get<std::vector<std::string>>();
      for (const auto& n : names) {
        if (!params.contains(n)) throw FormatError("corrupt", "checkpoint: moment for unknown parameter " + n);
        const auto& v = params.at(n).value;
        st.m[n] = Mat<T>(v.rows(), v.cols());
        st.v[n] = Mat<T>(v.rows(), v.cols());
      }
      for (const auto& n : names) fill(st.m[n]);
      for (const auto& n : names) fill(st.v[n]);
      ck.optimizer = std::move(st);
    }
  } catch (const json::exception& e) {
    throw FormatError("corrupt", std::string("checkpoint header: ") + e.what());
  }
  if (p != end) throw FormatError("corrupt", "checkpoint: trailing bytes after payload");
  return ck;
}

}  // namespace cldta
