#pragma once

// Electrode geometry: named channels with unit-sphere positions.
//
// Montage files are UTF-8 CSV with header `name,x,y,z`. Positions whose norm
// lies in [0.5, 2.0] are rescaled to unit length on load; anything outside
// that band (including zero) is rejected.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cldta/error.hpp"
#include "cldta/gradcore.hpp"

namespace cldta {

struct Channel {
  std::string name;
  Eigen::Vector3d position;
};

class ChannelMontage {
 public:
  ChannelMontage() = default;

  explicit ChannelMontage(std::vector<Channel> channels) : channels_(std::move(channels)) {
    if (channels_.empty()) throw InvalidArgument("montage: no channels");
    for (std::size_t i = 0; i < channels_.size(); ++i) {
      const auto& c = channels_[i];
      if (!index_.emplace(c.name, i).second) throw InvalidArgument("montage: duplicate channel name '" + c.name + "'");
      if (!c.position.allFinite() || std::abs(c.position.norm() - 1.0) > 1e-6)
        throw InvalidArgument("montage: position of '" + c.name + "' is not unit length");
    }
  }

  std::size_t size() const { return channels_.size(); }
  const Channel& channel(std::size_t i) const { return channels_.at(i); }
  const std::vector<Channel>& channels() const { return channels_; }

  std::optional<std::size_t> index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(channels_.size());
    for (const auto& c : channels_) out.push_back(c.name);
    return out;
  }

  // n x 3 coordinate matrix in channel order.
  MatD positions() const {
    MatD p(static_cast<Index>(channels_.size()), 3);
    for (std::size_t i = 0; i < channels_.size(); ++i) p.row(static_cast<Index>(i)) = channels_[i].position.transpose();
    return p;
  }

  double distance(std::size_t i, std::size_t j) const {
    return (channels_.at(i).position - channels_.at(j).position).norm();
  }

 private:
  std::vector<Channel> channels_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& context) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InvalidArgument(context + ": not a number: '" + s + "'");
  }
}

}  // namespace detail

inline ChannelMontage parse_montage(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("montage: empty file");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
  const auto header = detail::split_csv(detail::trim(line));
  if (header != std::vector<std::string>{"name", "x", "y", "z"})
    throw InvalidArgument("montage: header must be 'name,x,y,z'");
  std::vector<Channel> channels;
  std::set<std::string> seen;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    const std::string ctx = "montage row " + std::to_string(row);
    if (cells.size() != 4) throw InvalidArgument(ctx + ": expected 4 columns");
    if (cells[0].empty()) throw InvalidArgument(ctx + ": empty channel name");
    if (!seen.insert(cells[0]).second) throw InvalidArgument(ctx + ": duplicate channel name '" + cells[0] + "'");
    Eigen::Vector3d p(detail::parse_double(cells[1], ctx), detail::parse_double(cells[2], ctx),
                      detail::parse_double(cells[3], ctx));
    const double n = p.norm();
    if (!std::isfinite(n) || n < 0.5 || n > 2.0)
      throw InvalidArgument(ctx + ": coordinate norm " + std::to_string(n) + " outside [0.5, 2.0]");
    // Already-unit rows are kept bit-for-bit so save/load cycles are stable.
    channels.push_back(Channel{cells[0], std::abs(n - 1.0) <= 1e-12 ? p : Eigen::Vector3d(p / n)});
  }
  if (channels.empty()) throw InvalidArgument("montage: no channel rows");
  return ChannelMontage(std::move(channels));
}

inline ChannelMontage load_montage(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("montage: cannot open " + path.string());
  return parse_montage(in);
}

inline void save_montage(const ChannelMontage& montage, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("montage: cannot write " + path.string());
  out << "name,x,y,z\n" << std::setprecision(17);
  for (const auto& c : montage.channels())
    out << c.name << ',' << c.position.x() << ',' << c.position.y() << ',' << c.position.z() << '\n';
}

// Where each row of a smaller recording lands in a reference montage.
struct ChannelSubsetMap {
  std::vector<std::string> source_names;
  std::vector<std::size_t> target_indices;

  static ChannelSubsetMap resolve(const std::vector<std::string>& source_names, const ChannelMontage& reference) {
    ChannelSubsetMap map;
    map.source_names = source_names;
    std::set<std::size_t> used;
    for (const auto& name : source_names) {
      auto idx = reference.index_of(name);
      if (!idx) throw InvalidArgument("channel '" + name + "' is not in the reference montage");
      if (!used.insert(*idx).second) throw InvalidArgument("channel '" + name + "' mapped twice");
      map.target_indices.push_back(*idx);
    }
    return map;
  }
};

// Scatters source rows into a zero-filled n_ref x bands matrix.
template <class T>
Mat<T> align_to_reference(const Mat<T>& features, const ChannelSubsetMap& map, const ChannelMontage& reference) {
  if (features.rows() != static_cast<Index>(map.source_names.size()) ||
      map.target_indices.size() != map.source_names.size())
    throw ShapeMismatch("align_to_reference: feature rows do not match the channel map");
  Mat<T> out = Mat<T>::Zero(static_cast<Index>(reference.size()), features.cols());
  for (std::size_t k = 0; k < map.target_indices.size(); ++k) {
    const std::size_t t = map.target_indices[k];
    if (t >= reference.size()) throw InvalidArgument("align_to_reference: target index out of range");
    auto idx = reference.index_of(map.source_names[k]);
    if (!idx || *idx != t) throw InvalidArgument("align_to_reference: unresolved name '" + map.source_names[k] + "'");
    out.row(static_cast<Index>(t)) = features.row(static_cast<Index>(k));
  }
  return out;
}

// Indices of the k channels closest to `index` (chordal distance), skipping
// `index` itself and anything in `excluded`. Ties go to the lower index.
inline std::vector<std::size_t> nearest_neighbors(const ChannelMontage& montage, std::size_t index, std::size_t k,
                                                  const std::set<std::size_t>& excluded = {}) {
  if (index >= montage.size()) throw InvalidArgument("nearest_neighbors: channel index out of range");
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t j = 0; j < montage.size(); ++j) {
    if (j == index || excluded.count(j)) continue;
    cand.emplace_back(montage.distance(index, j), j);
  }
  std::stable_sort(cand.begin(), cand.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(k, cand.size()); ++i) out.push_back(cand[i].second);
  return out;
}

inline std::size_t nearest_neighbor(const ChannelMontage& montage, std::size_t index) {
  if (montage.size() < 2) throw InvalidArgument("nearest_neighbor: montage has a single channel");
  return nearest_neighbors(montage, index, 1).front();
}

}  // namespace cldta
