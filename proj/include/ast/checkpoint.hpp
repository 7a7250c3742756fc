#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ast/io.hpp"
#include "ast/training.hpp"

namespace ast {

// Checkpoint container:
//   "ASTC" | u32 version=1 | u64 header_length | UTF-8 JSON header | sections
// Each section is one ASTT tensor. The header maps section names to their
// byte offset (relative to the first section), length and shape, and carries
// the model description plus the TrainConfig used.
inline constexpr char kCheckpointMagic[4] = {'A', 'S', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Tensor<float>> sections;
};

inline std::string encode_checkpoint(const nlohmann::json& meta, const NamedParams<float>& tensors) {
  std::string payload;
  nlohmann::json sections = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    const auto bytes = encode_tensor(*t);
    sections.push_back({{"name", name}, {"offset", payload.size()}, {"length", bytes.size()}, {"shape", t->shape()}});
    payload.append(bytes.data(), bytes.size());
  }
  nlohmann::json header = meta;
  header["format"] = "ast-checkpoint";
  header["version"] = kCheckpointVersion;
  header["sections"] = sections;
  const std::string json = header.dump();
  std::string out(kCheckpointMagic, 4);
  out.append(reinterpret_cast<const char*>(&kCheckpointVersion), 4);
  const std::uint64_t len = json.size();
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += json;
  out += payload;
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16) throw FormatError("truncated checkpoint header", bytes.size());
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  std::uint64_t len;
  std::memcpy(&len, bytes.data() + 8, 8);
  if (len > bytes.size() - 16) throw FormatError("checkpoint header length exceeds file", 8);
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(bytes.substr(16, static_cast<std::size_t>(len)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(), 16 + e.byte);
  }
  const std::size_t base = 16 + static_cast<std::size_t>(len);
  for (const auto& s : ck.header.at("sections")) {
    std::size_t offset = base + s.at("offset").get<std::size_t>();
    const std::size_t start = offset;
    Tensor<float> t = decode_tensor(bytes, offset);
    if (offset - start != s.at("length").get<std::size_t>())
      throw FormatError("section length mismatch for " + s.at("name").get<std::string>(), start);
    ck.sections.emplace(s.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

namespace detail {

inline void restore(const Checkpoint& ck, const NamedParams<float>& into) {
  for (const auto& [name, t] : into) {
    auto it = ck.sections.find(name);
    if (it == ck.sections.end()) throw FormatError("checkpoint lacks section " + name, 0);
    if (it->second.shape() != t->shape())
      throw FormatError("section " + name + " has shape " + to_string(it->second.shape()) + ", expected " +
                        to_string(t->shape()), 0);
    *t = it->second;
  }
}

}  // namespace detail

inline std::string encode_teacher(TeacherModel<float>& model, const TrainConfig& config) {
  const auto& tc = model.config();
  nlohmann::json perms = nlohmann::json::array();
  for (const auto& b : model.blocks()) perms.push_back(b.perm);
  nlohmann::json meta = {{"kind", "teacher"},
                         {"config", to_json(config)},
                         {"model",
                          {{"channels", tc.channels},
                           {"cond_channels", tc.cond_channels},
                           {"n_blocks", tc.n_blocks},
                           {"hidden", tc.hidden},
                           {"kernel", tc.kernel},
                           {"alpha", tc.alpha},
                           {"permutations", perms}}}};
  return encode_checkpoint(meta, model.named_parameters());
}

struct LoadedTeacher {
  TeacherModel<float> model;
  TrainConfig config;
};

inline LoadedTeacher decode_teacher(std::string_view bytes) {
  Checkpoint ck = decode_checkpoint(bytes);
  if (ck.header.value("kind", std::string()) != "teacher") throw FormatError("checkpoint is not a teacher", 16);
  const auto& m = ck.header.at("model");
  TeacherConfig tc{m.at("channels").get<index_t>(), m.at("cond_channels").get<index_t>(),
                   m.at("n_blocks").get<index_t>(), m.at("hidden").get<index_t>(), m.at("kernel").get<index_t>(),
                   m.at("alpha").get<double>()};
  Rng rng(0);
  LoadedTeacher out{TeacherModel<float>(tc, rng), train_config_from_json(ck.header.at("config"))};
  const auto& perms = m.at("permutations");
  if (static_cast<index_t>(perms.size()) != tc.n_blocks) throw FormatError("permutation count mismatch", 16);
  for (std::size_t i = 0; i < perms.size(); ++i) {
    auto p = perms[i].get<std::vector<index_t>>();
    check_permutation(p, tc.channels);
    out.model.blocks()[i].perm = std::move(p);
  }
  detail::restore(ck, out.model.named_parameters());
  return out;
}

inline std::string encode_student(StudentModel<float>& model, const TrainConfig& config) {
  const auto& sc = model.config();
  nlohmann::json meta = {{"kind", "student"},
                         {"config", to_json(config)},
                         {"model",
                          {{"in_channels", sc.in_channels},
                           {"cond_channels", sc.cond_channels},
                           {"out_channels", sc.out_channels},
                           {"hidden", sc.hidden},
                           {"n_blocks", sc.n_blocks},
                           {"leaky_slope", sc.leaky_slope},
                           {"bn_eps", sc.bn_eps},
                           {"bn_momentum", sc.bn_momentum}}}};
  NamedParams<float> all = model.named_parameters();
  for (const auto& b : model.named_buffers()) all.push_back(b);
  return encode_checkpoint(meta, all);
}

struct LoadedStudent {
  StudentModel<float> model;
  TrainConfig config;
};

inline LoadedStudent decode_student(std::string_view bytes) {
  Checkpoint ck = decode_checkpoint(bytes);
  if (ck.header.value("kind", std::string()) != "student") throw FormatError("checkpoint is not a student", 16);
  const auto& m = ck.header.at("model");
  StudentConfig sc{m.at("in_channels").get<index_t>(),  m.at("cond_channels").get<index_t>(),
                   m.at("out_channels").get<index_t>(), m.at("hidden").get<index_t>(),
                   m.at("n_blocks").get<index_t>(),     m.at("leaky_slope").get<double>(),
                   m.at("bn_eps").get<double>(),        m.at("bn_momentum").get<double>()};
  Rng rng(0);
  LoadedStudent out{StudentModel<float>(sc, rng), train_config_from_json(ck.header.at("config"))};
  NamedParams<float> all = out.model.named_parameters();
  for (const auto& b : out.model.named_buffers()) all.push_back(b);
  detail::restore(ck, all);
  return out;
}

inline void save_teacher(const std::filesystem::path& path, TeacherModel<float>& model, const TrainConfig& config) {
  write_file_atomic(path, encode_teacher(model, config));
}
inline LoadedTeacher load_teacher(const std::filesystem::path& path) { return decode_teacher(read_file(path)); }
inline void save_student(const std::filesystem::path& path, StudentModel<float>& model, const TrainConfig& config) {
  write_file_atomic(path, encode_student(model, config));
}
inline LoadedStudent load_student(const std::filesystem::path& path) { return decode_student(read_file(path)); }

}  // namespace ast
