#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ast/sample.hpp"

namespace ast {

static_assert(std::endian::native == std::endian::little, "ASTT I/O assumes a little-endian host");

// ASTT tensor file:
//   "ASTT" | u32 version=1 | u8 dtype=1 (f32) | u8 ndims | ndims x u32 extents | f32 payload
// All integers and floats little-endian.
inline constexpr char kAsttMagic[4] = {'A', 'S', 'T', 'T'};
inline constexpr std::uint32_t kAsttVersion = 1;
inline constexpr std::uint8_t kAsttFloat32 = 1;

inline std::size_t astt_header_size(std::size_t ndims) { return 4 + 4 + 1 + 1 + 4 * ndims; }

inline std::vector<char> encode_tensor(const Tensor<float>& t) {
  std::vector<char> out(astt_header_size(t.shape().size()) + static_cast<std::size_t>(t.size()) * 4);
  char* p = out.data();
  std::memcpy(p, kAsttMagic, 4);
  p += 4;
  std::memcpy(p, &kAsttVersion, 4);
  p += 4;
  *p++ = static_cast<char>(kAsttFloat32);
  *p++ = static_cast<char>(t.shape().size());
  for (index_t e : t.shape()) {
    const auto u = static_cast<std::uint32_t>(e);
    std::memcpy(p, &u, 4);
    p += 4;
  }
  std::memcpy(p, t.data(), static_cast<std::size_t>(t.size()) * 4);
  return out;
}

/// Decodes one ASTT tensor starting at `offset`; advances `offset` past it.
inline Tensor<float> decode_tensor(std::string_view bytes, std::size_t& offset) {
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - offset < n) throw FormatError(std::string("truncated ASTT data: missing ") + what, offset);
  };
  if (offset > bytes.size()) throw FormatError("offset past end of data", offset);
  need(4, "magic");
  if (std::memcmp(bytes.data() + offset, kAsttMagic, 4) != 0) throw FormatError("bad ASTT magic", offset);
  offset += 4;
  need(4, "version");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + offset, 4);
  if (version != kAsttVersion) throw FormatError("unsupported ASTT version " + std::to_string(version), offset);
  offset += 4;
  need(2, "dtype/ndims");
  const auto dtype = static_cast<std::uint8_t>(bytes[offset]);
  if (dtype != kAsttFloat32) throw FormatError("unsupported ASTT dtype " + std::to_string(dtype), offset);
  offset += 1;
  const auto ndims = static_cast<std::uint8_t>(bytes[offset]);
  if (ndims == 0) throw FormatError("ASTT tensor with zero dimensions", offset);
  offset += 1;
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint8_t i = 0; i < ndims; ++i) {
    need(4, "extent");
    std::uint32_t e;
    std::memcpy(&e, bytes.data() + offset, 4);
    if (e == 0) throw FormatError("zero extent in ASTT shape", offset);
    offset += 4;
    shape.push_back(static_cast<index_t>(e));
    count *= e;
    if (count > (std::uint64_t{1} << 40)) throw FormatError("ASTT tensor too large", offset);
  }
  need(static_cast<std::size_t>(count) * 4, "payload");
  std::vector<float> data(static_cast<std::size_t>(count));
  std::memcpy(data.data(), bytes.data() + offset, data.size() * 4);
  offset += data.size() * 4;
  return Tensor<float>(std::move(shape), std::move(data));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes through a temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  const auto bytes = encode_tensor(t);
  write_file_atomic(path, std::string_view(bytes.data(), bytes.size()));
}

inline Tensor<float> load_tensor(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::size_t offset = 0;
  Tensor<float> t = decode_tensor(bytes, offset);
  if (offset != bytes.size()) throw FormatError("trailing bytes after ASTT tensor in " + path.string(), offset);
  return t;
}

// Corpus manifest:
// {"samples":[{"features":path,"depth":path|null,"label":"normal"|"anomalous","gt_mask":path|null}],
//  "meta":{...}}
// Paths are relative to the manifest's directory. "meta.depth" may carry
// DepthParams overrides (resize_to, factor, threshold_cm, dilation, fill_iterations).

inline DepthParams depth_params_from_json(const nlohmann::json& j, DepthParams p = {}) {
  if (!j.is_object()) return p;
  p.resize_to = j.value("resize_to", p.resize_to);
  p.factor = j.value("factor", p.factor);
  p.threshold_cm = j.value("threshold_cm", p.threshold_cm);
  p.dilation = j.value("dilation", p.dilation);
  p.fill_iterations = j.value("fill_iterations", p.fill_iterations);
  return p;
}

inline nlohmann::json depth_params_to_json(const DepthParams& p) {
  return {{"resize_to", p.resize_to},
          {"factor", p.factor},
          {"threshold_cm", p.threshold_cm},
          {"dilation", p.dilation},
          {"fill_iterations", p.fill_iterations}};
}

struct ManifestEntry {
  std::string features;
  std::optional<std::string> depth;
  Label label = Label::normal;
  std::optional<std::string> gt_mask;
};

struct Manifest {
  std::vector<ManifestEntry> samples;
  nlohmann::json meta = nlohmann::json::object();
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& e : m.samples) {
    samples.push_back({{"features", e.features},
                       {"depth", e.depth ? nlohmann::json(*e.depth) : nlohmann::json(nullptr)},
                       {"label", to_string(e.label)},
                       {"gt_mask", e.gt_mask ? nlohmann::json(*e.gt_mask) : nlohmann::json(nullptr)}});
  }
  return {{"samples", samples}, {"meta", m.meta}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("samples") || !j["samples"].is_array())
    throw Error("manifest needs a \"samples\" array");
  Manifest m;
  for (const auto& s : j["samples"]) {
    ManifestEntry e;
    e.features = s.at("features").get<std::string>();
    if (s.contains("depth") && !s["depth"].is_null()) e.depth = s["depth"].get<std::string>();
    e.label = parse_label(s.value("label", std::string("normal")));
    if (s.contains("gt_mask") && !s["gt_mask"].is_null()) e.gt_mask = s["gt_mask"].get<std::string>();
    m.samples.push_back(std::move(e));
  }
  if (j.contains("meta")) m.meta = j["meta"];
  return m;
}

/// Loads every sample of a manifest, running the depth preprocessing chain.
/// Samples come back in manifest order.
inline std::vector<Sample> load_corpus(const std::filesystem::path& manifest_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what(), e.byte);
  }
  const Manifest m = manifest_from_json(j);
  const auto dir = manifest_path.parent_path();
  const DepthParams dp = depth_params_from_json(m.meta.value("depth", nlohmann::json::object()));
  std::vector<Sample> out;
  for (const auto& e : m.samples) {
    Tensor<float> features = load_tensor(dir / e.features);
    std::optional<Tensor<float>> depth, mask, gt;
    if (e.depth) {
      ProcessedDepth pd = preprocess_depth(load_tensor(dir / *e.depth), dp);
      depth = std::move(pd.channels);
      mask = std::move(pd.mask.mask);
    }
    if (e.gt_mask) gt = load_tensor(dir / *e.gt_mask);
    out.push_back(assemble_sample(std::move(features), std::move(depth), std::move(mask), e.label, std::move(gt)));
  }
  return out;
}

}  // namespace ast
