#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ast/io.hpp"
#include "ast/nn.hpp"

namespace ast {

enum class AnomalyKind { features, depth, both, mixed };

inline const char* to_string(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::features: return "features";
    case AnomalyKind::depth: return "depth";
    case AnomalyKind::both: return "both";
    case AnomalyKind::mixed: return "mixed";
  }
  return "?";
}

inline AnomalyKind parse_anomaly_kind(const std::string& s) {
  for (auto k : {AnomalyKind::features, AnomalyKind::depth, AnomalyKind::both, AnomalyKind::mixed})
    if (s == to_string(k)) return k;
  throw Error("unknown anomaly kind '" + s + "'");
}

/// Everything needed to regenerate a synthetic corpus bit-exactly.
struct SynthSpec {
  std::uint64_t seed = 0;
  index_t n_train = 200;
  index_t n_test_normal = 40;
  index_t n_test_anomalous = 40;
  index_t channels = 16;  // feature channels
  index_t height = 12;
  index_t width = 12;
  index_t depth_factor = 2;  // 0 disables depth (RGB-only corpus)
  index_t latent = 4;        // dimension of the normal-data manifold
  double noise = 0.05;
  index_t patch = 3;  // anomaly patch side at feature resolution
  double amplitude = 1.0;
  double depth_amplitude = 1.5;  // cm
  AnomalyKind kind = AnomalyKind::mixed;
  std::string generator = "manifold";
  index_t dilation = 8;
};

inline nlohmann::json synth_spec_to_json(const SynthSpec& s) {
  return {{"seed", s.seed},
          {"n_train", s.n_train},
          {"n_test_normal", s.n_test_normal},
          {"n_test_anomalous", s.n_test_anomalous},
          {"channels", s.channels},
          {"height", s.height},
          {"width", s.width},
          {"depth_factor", s.depth_factor},
          {"latent", s.latent},
          {"noise", s.noise},
          {"patch", s.patch},
          {"amplitude", s.amplitude},
          {"depth_amplitude", s.depth_amplitude},
          {"kind", to_string(s.kind)},
          {"generator", s.generator},
          {"dilation", s.dilation}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j, SynthSpec s = {}) {
  s.seed = j.value("seed", s.seed);
  s.n_train = j.value("n_train", s.n_train);
  s.n_test_normal = j.value("n_test_normal", s.n_test_normal);
  s.n_test_anomalous = j.value("n_test_anomalous", s.n_test_anomalous);
  s.channels = j.value("channels", s.channels);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.depth_factor = j.value("depth_factor", s.depth_factor);
  s.latent = j.value("latent", s.latent);
  s.noise = j.value("noise", s.noise);
  s.patch = j.value("patch", s.patch);
  s.amplitude = j.value("amplitude", s.amplitude);
  s.depth_amplitude = j.value("depth_amplitude", s.depth_amplitude);
  if (j.contains("kind")) s.kind = parse_anomaly_kind(j["kind"].get<std::string>());
  s.generator = j.value("generator", s.generator);
  s.dilation = j.value("dilation", s.dilation);
  return s;
}

/// A sample before depth preprocessing, as written to disk.
struct RawSample {
  Tensor<float> features;                  // [C,H,W]
  std::optional<Tensor<float>> raw_depth;  // [H*d, W*d], cm, 0 = missing
  Label label = Label::normal;
  std::optional<Tensor<float>> gt_mask;  // [H,W]
};

struct RawCorpus {
  std::vector<RawSample> train;
  std::vector<RawSample> test;
  DepthParams depth;
};

inline DepthParams synth_depth_params(const SynthSpec& s) {
  DepthParams p;
  p.factor = s.depth_factor;
  p.resize_to = s.height * s.depth_factor;
  p.dilation = s.dilation;
  return p;
}

namespace detail {

// Smooth random field: white noise blurred by a fixed Gaussian kernel,
// normalized to unit variance. Noise is drawn on a padded grid so the
// blur has no boundary effects.
inline Tensor<float> smooth_field(Rng& rng, index_t h, index_t w, double sigma) {
  const index_t r = static_cast<index_t>(std::ceil(2.5 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double norm = 0;
  for (index_t i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    norm += k[static_cast<std::size_t>(i + r)] * k[static_cast<std::size_t>(i + r)];
  }
  const index_t ph = h + 2 * r, pw = w + 2 * r;
  std::vector<double> noise(static_cast<std::size_t>(ph * pw));
  for (auto& v : noise) v = rng.normal();
  std::vector<double> rows(static_cast<std::size_t>(ph * w), 0.0);
  for (index_t i = 0; i < ph; ++i)
    for (index_t j = 0; j < w; ++j) {
      double s = 0;
      for (index_t o = -r; o <= r; ++o) s += k[static_cast<std::size_t>(o + r)] * noise[static_cast<std::size_t>(i * pw + j + r + o)];
      rows[static_cast<std::size_t>(i * w + j)] = s;
    }
  Tensor<float> out(Shape{h, w});
  // Unit variance: the 2-D kernel's squared norm is norm^2.
  const double inv = 1.0 / norm;
  for (index_t i = 0; i < h; ++i)
    for (index_t j = 0; j < w; ++j) {
      double s = 0;
      for (index_t o = -r; o <= r; ++o) s += k[static_cast<std::size_t>(o + r)] * rows[static_cast<std::size_t>((i + r + o) * w + j)];
      out.at(i, j) = static_cast<float>(s * inv);
    }
  return out;
}

// Corpus-wide structure shared by every sample.
struct SynthWorld {
  std::vector<double> sigmas;  // latent smoothing widths
  Tensor<float> mixing;        // [C, L]
  Tensor<float> offsets;       // [C,H,W] fixed spatial pattern
  double plane_base = 40.0, plane_tilt_x = 0.0, plane_tilt_y = 0.0;
};

inline SynthWorld make_world(const SynthSpec& s, Rng& rng) {
  SynthWorld w;
  for (index_t l = 0; l < s.latent; ++l) w.sigmas.push_back(rng.uniform(1.0, 2.0));
  w.mixing = rng.normal_tensor<float>({s.channels, s.latent}, 1.0 / std::sqrt(static_cast<double>(s.latent)));
  w.offsets = Tensor<float>(Shape{s.channels, s.height, s.width});
  for (index_t c = 0; c < s.channels; ++c) {
    Tensor<float> f = smooth_field(rng, s.height, s.width, 3.0);
    std::copy(f.values().begin(), f.values().end(), w.offsets.data() + c * s.height * s.width);
  }
  w.plane_base = rng.uniform(35.0, 45.0);
  w.plane_tilt_x = rng.uniform(-1.0, 1.0);
  w.plane_tilt_y = rng.uniform(-1.0, 1.0);
  return w;
}

inline Tensor<float> normal_features(const SynthSpec& s, const SynthWorld& w, Rng& rng) {
  const index_t P = s.height * s.width;
  std::vector<Tensor<float>> latent;
  for (index_t l = 0; l < s.latent; ++l) latent.push_back(smooth_field(rng, s.height, s.width, w.sigmas[static_cast<std::size_t>(l)]));
  Tensor<float> x(Shape{s.channels, s.height, s.width});
  for (index_t c = 0; c < s.channels; ++c)
    for (index_t p = 0; p < P; ++p) {
      double v = w.offsets[c * P + p];
      for (index_t l = 0; l < s.latent; ++l) v += w.mixing.at(c, l) * std::tanh(1.5 * latent[static_cast<std::size_t>(l)][p]);
      x[c * P + p] = static_cast<float>(v + s.noise * rng.normal());
    }
  return x;
}

// Tilted background plane with a raised elliptical object and a few holes.
inline Tensor<float> normal_depth(const SynthSpec& s, const SynthWorld& w, Rng& rng) {
  const index_t H = s.height * s.depth_factor, W = s.width * s.depth_factor;
  const double cy = (H - 1) / 2.0 + rng.uniform(-0.05, 0.05) * H, cx = (W - 1) / 2.0 + rng.uniform(-0.05, 0.05) * W;
  const double ry = rng.uniform(0.22, 0.3) * H, rx = rng.uniform(0.22, 0.3) * W;
  const double height = rng.uniform(1.5, 2.5);
  Tensor<float> bumps = smooth_field(rng, H, W, 2.0 * static_cast<double>(s.depth_factor));
  Tensor<float> d(Shape{H, W});
  for (index_t i = 0; i < H; ++i)
    for (index_t j = 0; j < W; ++j) {
      const double u = static_cast<double>(j) / static_cast<double>(W - 1), v = static_cast<double>(i) / static_cast<double>(H - 1);
      double z = w.plane_base + w.plane_tilt_x * u + w.plane_tilt_y * v;
      const double e = ((i - cy) * (i - cy)) / (ry * ry) + ((j - cx) * (j - cx)) / (rx * rx);
      if (e < 1.0) z -= height * std::sqrt(1.0 - e) + 0.15 * bumps.at(i, j);
      d.at(i, j) = static_cast<float>(z);
    }
  for (index_t i = 0; i < H; ++i)
    for (index_t j = 0; j < W; ++j) {
      const bool corner = (i == 0 || i == H - 1) && (j == 0 || j == W - 1);
      if (!corner && rng.uniform(0.0, 1.0) < 0.02) d.at(i, j) = 0.0f;
    }
  return d;
}

}  // namespace detail

/// Generates train (normal only) and test (normal then anomalous) samples.
inline RawCorpus synth_raw_corpus(const SynthSpec& s) {
  if (s.channels <= 0 || s.height <= 0 || s.width <= 0 || s.latent <= 0 || s.patch <= 0)
    throw Error("synth: sizes must be positive");
  if (s.patch > s.height || s.patch > s.width) throw Error("synth: anomaly patch larger than the map");
  if (s.depth_factor == 0 && (s.kind == AnomalyKind::depth || s.kind == AnomalyKind::both))
    throw Error("synth: depth anomalies need depth_factor > 0");
  Rng rng(s.seed);
  const detail::SynthWorld world = detail::make_world(s, rng);
  RawCorpus corpus;
  corpus.depth = synth_depth_params(s);
  const bool with_depth = s.depth_factor > 0;

  auto make_normal = [&](Rng& r) {
    RawSample rs;
    rs.features = detail::normal_features(s, world, r);
    if (with_depth) rs.raw_depth = detail::normal_depth(s, world, r);
    return rs;
  };

  for (index_t i = 0; i < s.n_train; ++i) corpus.train.push_back(make_normal(rng));
  for (index_t i = 0; i < s.n_test_normal; ++i) corpus.test.push_back(make_normal(rng));
  for (index_t i = 0; i < s.n_test_anomalous; ++i) {
    RawSample rs = make_normal(rng);
    rs.label = Label::anomalous;

    // Patch fully inside the feature-level foreground when depth exists.
    std::optional<Tensor<float>> fg;
    if (with_depth) fg = preprocess_depth(*rs.raw_depth, corpus.depth).mask.mask;
    index_t top = 0, left = 0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      top = rng.integer(0, s.height - s.patch);
      left = rng.integer(0, s.width - s.patch);
      if (!fg) break;
      bool inside = true;
      for (index_t a = 0; a < s.patch && inside; ++a)
        for (index_t b = 0; b < s.patch && inside; ++b) inside = fg->at(top + a, left + b) > 0.0f;
      if (inside) break;
    }
    Tensor<float> gt(Shape{s.height, s.width});
    for (index_t a = 0; a < s.patch; ++a)
      for (index_t b = 0; b < s.patch; ++b) gt.at(top + a, left + b) = 1.0f;

    AnomalyKind kind = s.kind;
    if (kind == AnomalyKind::mixed) {
      const index_t pick = with_depth ? rng.integer(0, 2) : 0;
      kind = pick == 0 ? AnomalyKind::features : pick == 1 ? AnomalyKind::depth : AnomalyKind::both;
    }
    if (kind == AnomalyKind::features || kind == AnomalyKind::both) {
      std::vector<double> dir(static_cast<std::size_t>(s.channels));
      for (auto& v : dir) v = rng.normal();
      for (index_t c = 0; c < s.channels; ++c)
        for (index_t a = 0; a < s.patch; ++a)
          for (index_t b = 0; b < s.patch; ++b)
            rs.features.at(c, top + a, left + b) += static_cast<float>(s.amplitude * dir[static_cast<std::size_t>(c)]);
    }
    if (kind == AnomalyKind::depth || kind == AnomalyKind::both) {
      const index_t f = s.depth_factor;
      for (index_t a = 0; a < s.patch * f; ++a)
        for (index_t b = 0; b < s.patch * f; ++b) {
          float& v = rs.raw_depth->at(top * f + a, left * f + b);
          if (v != 0.0f) v += static_cast<float>(s.depth_amplitude);
        }
    }
    rs.gt_mask = std::move(gt);
    corpus.test.push_back(std::move(rs));
  }
  return corpus;
}

inline Sample to_sample(const RawSample& rs, const DepthParams& dp) {
  std::optional<Tensor<float>> depth, mask;
  if (rs.raw_depth) {
    ProcessedDepth pd = preprocess_depth(*rs.raw_depth, dp);
    depth = std::move(pd.channels);
    mask = std::move(pd.mask.mask);
  }
  return assemble_sample(rs.features, std::move(depth), std::move(mask), rs.label, rs.gt_mask);
}

inline std::vector<Sample> to_samples(const std::vector<RawSample>& raw, const DepthParams& dp) {
  std::vector<Sample> out;
  out.reserve(raw.size());
  for (const auto& rs : raw) out.push_back(to_sample(rs, dp));
  return out;
}

struct Corpus {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

inline Corpus synth_corpus(const SynthSpec& s) {
  RawCorpus raw = synth_raw_corpus(s);
  return {to_samples(raw.train, raw.depth), to_samples(raw.test, raw.depth)};
}

/// Writes ASTT files plus train.json / test.json manifests into `dir`.
inline void write_corpus(const RawCorpus& corpus, const std::filesystem::path& dir, const nlohmann::json& meta = {}) {
  auto write_split = [&](const std::vector<RawSample>& samples, const std::string& split) {
    Manifest m;
    m.meta = meta.is_object() ? meta : nlohmann::json::object();
    m.meta["depth"] = depth_params_to_json(corpus.depth);
    m.meta["split"] = split;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& rs = samples[i];
      const std::string stem = split + "/" + std::to_string(i);
      ManifestEntry e;
      e.features = stem + "_features.astt";
      save_tensor(dir / e.features, rs.features);
      if (rs.raw_depth) {
        e.depth = stem + "_depth.astt";
        save_tensor(dir / *e.depth, *rs.raw_depth);
      }
      if (rs.gt_mask) {
        e.gt_mask = stem + "_gt.astt";
        save_tensor(dir / *e.gt_mask, *rs.gt_mask);
      }
      e.label = rs.label;
      m.samples.push_back(std::move(e));
    }
    write_file_atomic(dir / (split + ".json"), manifest_to_json(m).dump(2));
  };
  write_split(corpus.train, "train");
  write_split(corpus.test, "test");
}

}  // namespace ast
