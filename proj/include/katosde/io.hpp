#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <iterator>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "katosde/error.hpp"
#include "katosde/field.hpp"

namespace katosde {

using Json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary files are written little-endian");

inline constexpr char kBinMagic[8] = {'K', 'S', 'D', 'E', 'B', 'I', 'N', '1'};

/// Sorted keys (std::map objects) and shortest round-trip doubles, so equal
/// inputs give equal bytes. Non-finite numbers become null.
inline std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path);
  os << text;
  if (!os) throw Error("write failed: " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_json(const std::string& path, const Json& j) { write_text(path, dump_json(j)); }

// ---------------------------------------------------------------------------
// Flat binary: magic, u64 header length, JSON header, float64 payload

inline void write_bin(const std::string& path, const Json& header, const std::vector<const std::vector<double>*>& arrays) {
  std::string h = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path);
  os.write(kBinMagic, 8);
  std::uint64_t len = h.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto* a : arrays)
    os.write(reinterpret_cast<const char*>(a->data()), static_cast<std::streamsize>(a->size() * sizeof(double)));
  if (!os) throw Error("write failed: " + path);
}

struct BinFile {
  Json header;
  std::vector<double> payload;
};

inline BinFile read_bin(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || !std::equal(magic, magic + 8, kBinMagic)) throw ConfigError(path + ": not a KSDEBIN1 file");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || len > (1ull << 30)) throw ConfigError(path + ": bad header length");
  std::string h(len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(len));
  if (!is) throw ConfigError(path + ": truncated header");
  BinFile f;
  try {
    f.header = Json::parse(h);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": header is not JSON: " + e.what());
  }
  std::vector<char> rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (rest.size() % sizeof(double) != 0) throw ConfigError(path + ": payload is not a float64 array");
  f.payload.resize(rest.size() / sizeof(double));
  std::memcpy(f.payload.data(), rest.data(), rest.size());
  return f;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> cols) : cols_(std::move(cols)) {
    for (std::size_t i = 0; i < cols_.size(); ++i) out_ += (i ? "," : "") + cols_[i];
    out_ += "\n";
  }
  void row(const std::vector<double>& v) {
    if (v.size() != cols_.size()) throw Error("csv: row width differs from header");
    for (std::size_t i = 0; i < v.size(); ++i) out_ += (i ? "," : "") + fmt_num(v[i]);
    out_ += "\n";
  }
  const std::string& str() const { return out_; }
  void save(const std::string& path) const { write_text(path, out_); }

 private:
  std::vector<std::string> cols_;
  std::string out_;
};

// ---------------------------------------------------------------------------
// Lattice fields from CSV: rows t,x1..xd,value1..valuem on a full tensor grid

namespace detail {

inline std::vector<double> uniform_axis(std::vector<double> v, const std::string& what, const std::string& path) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  if (v.size() >= 3) {
    double h = (v.back() - v.front()) / (v.size() - 1);
    for (std::size_t k = 0; k < v.size(); ++k)
      if (std::abs(v[k] - (v.front() + k * h)) > 1e-9 * std::max(1.0, std::abs(h) * v.size()))
        throw ConfigError(path + ": " + what + " values are not uniformly spaced");
  }
  return v;
}

}  // namespace detail

inline GridField read_grid_csv(const std::string& path, int dim) {
  std::istringstream in(read_text(path));
  std::string line;
  std::vector<std::vector<double>> rows;
  int width = -1;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> r;
    std::stringstream ls(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t pos = 0;
        r.push_back(std::stod(cell, &pos));
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (rows.empty()) continue;  // header line
      throw ConfigError(path + ": non-numeric row '" + line + "'");
    }
    if (width < 0) width = static_cast<int>(r.size());
    if (static_cast<int>(r.size()) != width) throw ConfigError(path + ": ragged rows");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ConfigError(path + ": no data rows");
  const int m = width - 1 - dim;
  if (m < 1) throw ConfigError(path + ": need t, " + std::to_string(dim) + " coordinates and at least one value");
  std::vector<double> ts;
  std::vector<std::vector<double>> xs(dim);
  for (const auto& r : rows) {
    ts.push_back(r[0]);
    for (int i = 0; i < dim; ++i) xs[i].push_back(r[1 + i]);
  }
  ts = detail::uniform_axis(ts, "t", path);
  LatticeSpec spec;
  spec.t0 = ts.front();
  spec.t1 = ts.back();
  spec.time_steps = static_cast<int>(ts.size()) - 1;
  for (int i = 0; i < dim; ++i) {
    auto a = detail::uniform_axis(xs[i], "x" + std::to_string(i + 1), path);
    if (a.size() < 2) throw ConfigError(path + ": axis " + std::to_string(i + 1) + " needs two nodes");
    spec.lo.push_back(a.front());
    spec.hi.push_back(a.back());
    spec.n.push_back(static_cast<int>(a.size()));
  }
  if (rows.size() != spec.space_size() * spec.time_nodes())
    throw ConfigError(path + ": rows do not cover the full lattice");
  GridField g(spec, m);
  std::vector<char> seen(rows.size(), 0);
  for (const auto& r : rows) {
    int k = spec.time_steps > 0 ? static_cast<int>(std::lround((r[0] - spec.t0) / spec.dt())) : 0;
    std::size_t s = 0;
    for (int i = 0; i < dim; ++i)
      s = s * spec.n[i] + static_cast<std::size_t>(std::lround((r[1 + i] - spec.lo[i]) / spec.spacing(i)));
    std::size_t flat = k * spec.space_size() + s;
    if (seen[flat]) throw ConfigError(path + ": duplicate lattice node");
    seen[flat] = 1;
    for (int c = 0; c < m; ++c) g.at(k, s, c) = r[1 + dim + c];
  }
  return g;
}

}  // namespace katosde
