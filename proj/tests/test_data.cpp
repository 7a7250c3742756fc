#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "ast/ast.hpp"

using namespace ast;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ast_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthSpec tiny_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.seed = seed;
  s.n_train = 6;
  s.n_test_normal = 3;
  s.n_test_anomalous = 3;
  s.channels = 4;
  s.height = 8;
  s.width = 8;
  return s;
}

}  // namespace

TEST(AsttTest, RoundTripBitwise) {
  const auto dir = scratch("roundtrip");
  Rng rng(0);
  auto t = rng.normal_tensor<float>({3, 5, 7});
  t[4] = -0.0f;
  t[5] = 1e-42f;
  save_tensor(dir / "t.astt", t);
  const auto back = load_tensor(dir / "t.astt");
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.data(), t.data(), static_cast<std::size_t>(t.size()) * 4), 0);
}

TEST(AsttTest, FileSizeFromFormat) {
  const auto dir = scratch("size");
  save_tensor(dir / "x.astt", Tensor<float>(Shape{368, 24, 24}));
  EXPECT_EQ(fs::file_size(dir / "x.astt"), 368u * 24 * 24 * 4 + 4 + 4 + 1 + 1 + 3 * 4);
}

TEST(AsttTest, HeaderBytes) {
  const auto bytes = encode_tensor(Tensor<float>(Shape{2, 3}, 1.0f));
  ASSERT_GE(bytes.size(), 18u);
  EXPECT_EQ(std::string(bytes.data(), 4), "ASTT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9], 2);
  EXPECT_EQ(bytes[10], 2);
  EXPECT_EQ(bytes[14], 3);
}

TEST(AsttTest, TruncatedAndCorruptFiles) {
  const auto dir = scratch("trunc");
  const auto bytes = encode_tensor(Tensor<float>(Shape{4, 4}, 2.0f));
  auto write = [&](const std::string& name, std::string data) {
    std::ofstream(dir / name, std::ios::binary) << data;
    return dir / name;
  };
  const std::string full(bytes.begin(), bytes.end());
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9}, std::size_t{15}, full.size() - 1}) {
    try {
      load_tensor(write("cut.astt", full.substr(0, cut)));
      FAIL() << "cut " << cut;
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), cut);
    }
  }
  std::string bad = full;
  bad[0] = 'X';
  EXPECT_THROW(load_tensor(write("magic.astt", bad)), FormatError);
  bad = full;
  bad[4] = 2;
  EXPECT_THROW(load_tensor(write("version.astt", bad)), FormatError);
  bad = full;
  bad[8] = 7;
  EXPECT_THROW(load_tensor(write("dtype.astt", bad)), FormatError);
  EXPECT_THROW(load_tensor(write("trailing.astt", full + "x")), FormatError);
  EXPECT_THROW(load_tensor(dir / "missing.astt"), IoError);
}

TEST(ManifestTest, JsonRoundTrip) {
  Manifest m;
  m.samples.push_back({"a.astt", std::nullopt, Label::normal, std::nullopt});
  m.samples.push_back({"b.astt", "bd.astt", Label::anomalous, "bg.astt"});
  m.meta["note"] = "x";
  const auto j = manifest_to_json(m);
  EXPECT_TRUE(j["samples"][0]["depth"].is_null());
  EXPECT_EQ(j["samples"][1]["label"], "anomalous");
  const Manifest back = manifest_from_json(j);
  ASSERT_EQ(back.samples.size(), 2u);
  EXPECT_EQ(back.samples[1].depth.value(), "bd.astt");
  EXPECT_EQ(back.samples[1].gt_mask.value(), "bg.astt");
  EXPECT_EQ(back.meta["note"], "x");
  EXPECT_THROW(manifest_from_json(nlohmann::json::object()), Error);
  EXPECT_THROW(manifest_from_json({{"samples", {{{"features", "a"}, {"label", "odd"}}}}}), Error);
}

TEST(CorpusTest, WriteThenLoadMatchesInMemory) {
  const auto dir = scratch("corpus");
  const SynthSpec spec = tiny_spec();
  const RawCorpus raw = synth_raw_corpus(spec);
  write_corpus(raw, dir, {{"synth", synth_spec_to_json(spec)}});
  const Corpus mem = synth_corpus(spec);
  const auto train = load_corpus(dir / "train.json");
  const auto test = load_corpus(dir / "test.json");
  ASSERT_EQ(train.size(), mem.train.size());
  ASSERT_EQ(test.size(), mem.test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    EXPECT_EQ(test[i].input, mem.test[i].input);
    EXPECT_EQ(test[i].mask, mem.test[i].mask);
    EXPECT_EQ(test[i].label, mem.test[i].label);
    EXPECT_EQ(test[i].gt_mask.has_value(), mem.test[i].gt_mask.has_value());
  }
  EXPECT_THROW(load_corpus(dir / "nope.json"), IoError);
  std::ofstream(dir / "broken.json") << "{not json";
  EXPECT_THROW(load_corpus(dir / "broken.json"), FormatError);
}

TEST(SynthTest, DeterministicPerSeed) {
  const Corpus a = synth_corpus(tiny_spec(5)), b = synth_corpus(tiny_spec(5)), c = synth_corpus(tiny_spec(6));
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].input, b.train[i].input);
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    EXPECT_EQ(a.test[i].input, b.test[i].input);
    EXPECT_EQ(a.test[i].gt_mask, b.test[i].gt_mask);
  }
  EXPECT_NE(a.train[0].input, c.train[0].input);
}

TEST(SynthTest, TrainIsNormalAndShapesMatch) {
  const Corpus c = synth_corpus(tiny_spec());
  for (const auto& s : c.train) {
    EXPECT_EQ(s.label, Label::normal);
    EXPECT_EQ(s.channels(), 4 + 4);
    EXPECT_TRUE(s.mask.has_value());
  }
  index_t anomalous = 0;
  for (const auto& s : c.test) anomalous += s.label == Label::anomalous ? 1 : 0;
  EXPECT_EQ(anomalous, 3);
}

TEST(SynthTest, GroundTruthCoversExactlyThePerturbedPatch) {
  for (AnomalyKind kind : {AnomalyKind::features, AnomalyKind::depth}) {
    SynthSpec on = tiny_spec(7), off = tiny_spec(7);
    on.kind = off.kind = kind;
    off.amplitude = 0.0;
    off.depth_amplitude = 0.0;
    const RawCorpus a = synth_raw_corpus(on), b = synth_raw_corpus(off);
    for (std::size_t i = 0; i < a.test.size(); ++i) {
      const auto& ra = a.test[i];
      const auto& rb = b.test[i];
      if (ra.label == Label::normal) {
        EXPECT_EQ(ra.features, rb.features);
        continue;
      }
      const auto& gt = *ra.gt_mask;
      index_t count = 0;
      for (float v : gt.values()) count += v > 0 ? 1 : 0;
      EXPECT_EQ(count, on.patch * on.patch);
      if (kind == AnomalyKind::features) {
        EXPECT_EQ(*ra.raw_depth, *rb.raw_depth);
        for (index_t c = 0; c < on.channels; ++c)
          for (index_t y = 0; y < on.height; ++y)
            for (index_t x = 0; x < on.width; ++x) {
              const bool changed = ra.features.at(c, y, x) != rb.features.at(c, y, x);
              if (gt.at(y, x) == 0.0f) {
                EXPECT_FALSE(changed);
              }
            }
        index_t changed_pixels = 0;
        for (index_t y = 0; y < on.height; ++y)
          for (index_t x = 0; x < on.width; ++x) {
            bool any = false;
            for (index_t c = 0; c < on.channels; ++c) any = any || ra.features.at(c, y, x) != rb.features.at(c, y, x);
            changed_pixels += any ? 1 : 0;
          }
        EXPECT_EQ(changed_pixels, count);
      } else {
        EXPECT_EQ(ra.features, rb.features);
        const index_t f = on.depth_factor;
        for (index_t y = 0; y < on.height * f; ++y)
          for (index_t x = 0; x < on.width * f; ++x) {
            const bool changed = ra.raw_depth->at(y, x) != rb.raw_depth->at(y, x);
            const bool in_patch = gt.at(y / f, x / f) > 0;
            EXPECT_EQ(changed, in_patch && rb.raw_depth->at(y, x) != 0.0f) << y << "," << x;
          }
      }
    }
  }
}

TEST(SynthTest, RgbOnlyCorpus) {
  SynthSpec s = tiny_spec();
  s.depth_factor = 0;
  s.kind = AnomalyKind::features;
  const Corpus c = synth_corpus(s);
  EXPECT_EQ(c.train[0].channels(), 4);
  EXPECT_FALSE(c.train[0].mask.has_value());
  s.kind = AnomalyKind::depth;
  EXPECT_THROW(synth_corpus(s), Error);
}

TEST(SynthTest, SpecJsonRoundTrip) {
  SynthSpec s = tiny_spec(11);
  s.kind = AnomalyKind::both;
  s.amplitude = 0.25;
  const SynthSpec back = synth_spec_from_json(synth_spec_to_json(s));
  EXPECT_EQ(synth_spec_to_json(back), synth_spec_to_json(s));
}

TEST(CheckpointTest, TeacherRoundTrip) {
  Rng rng(1);
  TeacherModel<float> m = random_active_teacher<float>({4, 8, 2, 6, 3, 1.9}, rng);
  TrainConfig cfg = preset_config("desk");
  cfg.cond_channels = 8;
  cfg.seed = 42;
  const std::string bytes = encode_teacher(m, cfg);
  LoadedTeacher back = decode_teacher(bytes);
  EXPECT_EQ(encode_teacher(back.model, back.config), bytes);
  EXPECT_EQ(back.config.seed, 42u);
  const auto x = rng.normal_tensor<float>({4, 3, 3});
  const auto c = positional_encoding(3, 3, 8);
  EXPECT_EQ(teacher_forward(back.model, x, c).z, teacher_forward(m, x, c).z);
  for (std::size_t i = 0; i < m.blocks().size(); ++i) EXPECT_EQ(back.model.blocks()[i].perm, m.blocks()[i].perm);
  EXPECT_THROW(decode_student(bytes), FormatError);
  EXPECT_THROW(decode_teacher(bytes.substr(0, bytes.size() - 3)), FormatError);
}

TEST(CheckpointTest, StudentRoundTripIncludesRunningStats) {
  Rng rng(2);
  StudentConfig sc{4, 8, 4, 6, 1, 0.2, 1e-5, 0.1};
  StudentModel<float> m(sc, rng);
  {
    Tape<float> t;
    ParamScope<float> s(t, false);
    m.forward(s, t.constant(rng.normal_tensor<float>({2, 4, 3, 3}, 3.0)), t.constant(positional_encoding(3, 3, 8)),
              Mode::train);
  }
  const TrainConfig cfg = preset_config("desk");
  const std::string bytes = encode_student(m, cfg);
  LoadedStudent back = decode_student(bytes);
  EXPECT_EQ(encode_student(back.model, back.config), bytes);
  const auto x = rng.normal_tensor<float>({4, 3, 3});
  EXPECT_EQ(back.model.predict(x, positional_encoding(3, 3, 8)), m.predict(x, positional_encoding(3, 3, 8)));
}

TEST(CheckpointTest, FileRoundTrip) {
  const auto dir = scratch("ckpt");
  Rng rng(3);
  TeacherModel<float> m({4, 4, 1, 4, 3, 3.0}, rng);
  TrainConfig cfg;
  cfg.cond_channels = 4;
  save_teacher(dir / "t.astc", m, cfg);
  LoadedTeacher back = load_teacher(dir / "t.astc");
  EXPECT_EQ(encode_teacher(back.model, back.config), encode_teacher(m, cfg));
}

TEST(ExportTest, ConstantMapIsZeroPgm) {
  const std::string pgm = encode_pgm16(Tensor<float>(Shape{3, 5}, 4.0f));
  const std::string header = "P5\n5 3\n65535\n";
  ASSERT_EQ(pgm.size(), header.size() + 3 * 5 * 2);
  EXPECT_EQ(pgm.substr(0, header.size()), header);
  for (std::size_t i = header.size(); i < pgm.size(); ++i) EXPECT_EQ(pgm[i], '\0');
}

TEST(ExportTest, PgmRangeAndByteOrder) {
  Tensor<float> m(Shape{1, 3}, std::vector<float>{-1.0f, 0.0f, 1.0f});
  const std::string pgm = encode_pgm16(m);
  const std::size_t h = std::string("P5\n3 1\n65535\n").size();
  auto sample = [&](int k) {
    return (static_cast<unsigned>(static_cast<unsigned char>(pgm[h + 2 * k])) << 8) |
           static_cast<unsigned char>(pgm[h + 2 * k + 1]);
  };
  EXPECT_EQ(sample(0), 0u);
  EXPECT_EQ(sample(1), 32768u);
  EXPECT_EQ(sample(2), 65535u);
}

TEST(ExportTest, CsvRoundTripAndFiles) {
  Rng rng(4);
  const auto map = rng.normal_tensor<float>({4, 6}, 1e3);
  const std::string csv = encode_map_csv(map);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "row,col,value");
  Tensor<float> back(Shape{4, 6});
  int rows = 0;
  while (std::getline(in, line)) {
    index_t i, j;
    char c1, c2;
    std::istringstream ls(line);
    std::string v;
    ls >> i >> c1 >> j >> c2 >> v;
    back.at(i, j) = std::stof(v);
    ++rows;
  }
  EXPECT_EQ(rows, 24);
  EXPECT_EQ(back, map);

  const auto dir = scratch("export");
  export_score_map(map, dir / "m");
  std::ifstream pgm(dir / "m.pgm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(pgm)), {});
  EXPECT_EQ(bytes, encode_pgm16(map));
  EXPECT_EQ(read_file(dir / "m.csv"), csv);
}
