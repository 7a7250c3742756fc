#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>

#include "ast/io.hpp"

namespace ast {

inline std::string format_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Binary 16-bit PGM (P5, big-endian samples), min-max normalized. A
/// constant map encodes as all zeros.
inline std::string encode_pgm16(const Tensor<float>& map) {
  if (map.rank() != 2) throw DimensionError("PGM export expects an [H,W] map");
  const index_t H = map.dim(0), W = map.dim(1);
  float lo = map[0], hi = map[0];
  for (float v : map.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n65535\n";
  const double range = static_cast<double>(hi) - lo;
  for (index_t i = 0; i < map.size(); ++i) {
    unsigned v = 0;
    if (range > 0) v = static_cast<unsigned>(std::lround((static_cast<double>(map[i]) - lo) / range * 65535.0));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
  }
  return out;
}

/// Long-format CSV: header "row,col,value", one line per pixel.
inline std::string encode_map_csv(const Tensor<float>& map) {
  if (map.rank() != 2) throw DimensionError("CSV export expects an [H,W] map");
  std::ostringstream os;
  os << "row,col,value\n";
  for (index_t i = 0; i < map.dim(0); ++i)
    for (index_t j = 0; j < map.dim(1); ++j) os << i << ',' << j << ',' << format_float(map.at(i, j)) << '\n';
  return os.str();
}

/// Writes `<stem>.pgm` and `<stem>.csv`.
inline void export_score_map(const Tensor<float>& map, const std::filesystem::path& stem) {
  std::filesystem::path pgm = stem, csv = stem;
  pgm += ".pgm";
  csv += ".csv";
  try {
    write_file_atomic(pgm, encode_pgm16(map));
    write_file_atomic(csv, encode_map_csv(map));
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(std::string("cannot export score map to ") + stem.string() + ": " + e.what());
  }
}

}  // namespace ast
