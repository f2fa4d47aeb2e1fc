#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mptf/cloud_io.hpp"
#include "mptf/dataset.hpp"
#include "mptf/fusion_net.hpp"

namespace mptf {

// Manifest: one frame per line, whitespace separated, fixed field order
//
//   frame_id  scan_path  east  north  yaw|-  split
//
// `scan_path` is relative to the manifest's directory unless absolute; `-`
// marks an unknown yaw; split is one of database, query, train. Blank lines
// and lines starting with '#' are ignored.

struct ManifestEntry {
  FrameMeta meta;
  std::filesystem::path scan;  ///< resolved against the manifest directory
  Split split = Split::kDatabase;
};

struct Manifest {
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> with_split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(&e);
    return out;
  }
};

namespace detail {

inline double parse_double(const std::string& tok, const std::string& where) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
    throw Error(where + ": '" + tok + "' is not a finite number");
  }
  return v;
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

inline Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                               const std::string& what = "manifest") {
  Manifest m;
  std::set<std::string> ids;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    const std::string where = what + ":" + std::to_string(lineno);
    if (tok.size() != 6) throw Error(where + ": expected 6 fields, got " + std::to_string(tok.size()));
    ManifestEntry e;
    e.meta.frame_id = tok[0];
    if (!ids.insert(tok[0]).second) throw Error(where + ": duplicate frame_id " + tok[0]);
    const std::filesystem::path p(tok[1]);
    e.scan = p.is_absolute() ? p : base_dir / p;
    e.meta.east = detail::parse_double(tok[2], where);
    e.meta.north = detail::parse_double(tok[3], where);
    if (tok[4] != "-") e.meta.yaw = detail::parse_double(tok[4], where);
    const auto split = parse_split(tok[5]);
    if (!split) throw Error(where + ": unknown split '" + tok[5] + "'");
    e.split = *split;
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path(), path.string());
}

/// Writes scan paths relative to `base_dir` when they live below it.
inline std::string format_manifest(const Manifest& m, const std::filesystem::path& base_dir,
                                   const std::string& stamp = "") {
  std::ostringstream out;
  out << "# frame_id scan_path east north yaw split\n";
  if (!stamp.empty()) out << "# " << stamp << "\n";
  for (const auto& e : m.entries) {
    std::filesystem::path rel = e.scan.lexically_relative(base_dir);
    if (rel.empty() || *rel.begin() == "..") rel = e.scan;
    out << e.meta.frame_id << ' ' << rel.generic_string() << ' ' << detail::format_double(e.meta.east) << ' '
        << detail::format_double(e.meta.north) << ' '
        << (e.meta.yaw ? detail::format_double(*e.meta.yaw) : std::string("-")) << ' ' << split_name(e.split) << '\n';
  }
  return out.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m, const std::string& stamp = "") {
  write_text(path, format_manifest(m, path.parent_path(), stamp));
}

// ---------------------------------------------------------------------------
// Descriptor file
//
//   "MPTFDSC1\n"
//   "# config_hash=<16 hex digits>\n"
//   per descriptor: "frame_id <id> <east> <north> <dim>\n" then dim
//                   little-endian float64 values
// ---------------------------------------------------------------------------

struct DescriptorRecord {
  std::string frame_id;
  double east = 0.0;
  double north = 0.0;
  Descriptor descriptor;
};

inline std::vector<unsigned char> encode_descriptors(const std::vector<DescriptorRecord>& recs,
                                                     std::uint64_t config_hash) {
  std::string head = "MPTFDSC1\n# config_hash=" + hex64(config_hash) + "\n";
  std::vector<unsigned char> b(head.begin(), head.end());
  for (const auto& r : recs) {
    const std::string line = "frame_id " + r.frame_id + " " + detail::format_double(r.east) + " " +
                             detail::format_double(r.north) + " " + std::to_string(r.descriptor.size()) + "\n";
    b.insert(b.end(), line.begin(), line.end());
    for (double v : r.descriptor.values) detail::put_u64(b, std::bit_cast<std::uint64_t>(v));
  }
  return b;
}

struct DescriptorFile {
  std::uint64_t config_hash = 0;
  std::vector<DescriptorRecord> records;
};

inline DescriptorFile decode_descriptors(const std::vector<unsigned char>& bytes, const std::string& what) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto start = pos;
    while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    if (pos >= bytes.size()) throw Error(what + ": truncated header line");
    return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                       bytes.begin() + static_cast<std::ptrdiff_t>(pos++));
  };
  if (next_line() != "MPTFDSC1") throw Error(what + ": bad magic");
  const std::string stamp = next_line();
  const std::string key = "# config_hash=";
  if (stamp.rfind(key, 0) != 0 || stamp.size() != key.size() + 16) throw Error(what + ": missing config hash");
  DescriptorFile f;
  f.config_hash = std::stoull(stamp.substr(key.size()), nullptr, 16);
  while (pos < bytes.size()) {
    std::istringstream ls(next_line());
    std::string tag, east, north;
    std::size_t dim = 0;
    DescriptorRecord r;
    if (!(ls >> tag >> r.frame_id >> east >> north >> dim) || tag != "frame_id") throw Error(what + ": bad record header");
    r.east = detail::parse_double(east, what);
    r.north = detail::parse_double(north, what);
    if (bytes.size() - pos < dim * 8) throw Error(what + ": truncated descriptor " + r.frame_id);
    r.descriptor.values.resize(dim);
    for (double& v : r.descriptor.values) {
      std::uint64_t u = 0;
      for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(bytes[pos + static_cast<std::size_t>(k)]) << (8 * k);
      v = std::bit_cast<double>(u);
      pos += 8;
    }
    f.records.push_back(std::move(r));
  }
  return f;
}

inline void save_descriptors(const std::filesystem::path& path, const std::vector<DescriptorRecord>& recs,
                             std::uint64_t config_hash) {
  write_bytes(path, encode_descriptors(recs, config_hash));
}

inline DescriptorFile load_descriptors(const std::filesystem::path& path) {
  return decode_descriptors(detail::read_file_bytes(path), path.string());
}

}  // namespace mptf
