#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ast/preprocess.hpp"

namespace ast {

enum class Label { normal, anomalous };

inline const char* to_string(Label l) { return l == Label::normal ? "normal" : "anomalous"; }

inline Label parse_label(const std::string& s) {
  if (s == "normal") return Label::normal;
  if (s == "anomalous") return Label::anomalous;
  throw Error("unknown label '" + s + "'");
}

struct Sample {
  Tensor<float> features;              // [C_f,H,W]
  std::optional<Tensor<float>> depth;  // [d^2,H,W], preprocessed
  std::optional<Tensor<float>> mask;   // [H,W] foreground at feature resolution
  Label label = Label::normal;
  std::optional<Tensor<float>> gt_mask;  // [H,W] anomaly ground truth
  Tensor<float> input;                   // features then depth channels

  index_t channels() const { return input.dim(0); }
  index_t height() const { return input.dim(1); }
  index_t width() const { return input.dim(2); }
  const Tensor<float>* mask_ptr() const { return mask ? &*mask : nullptr; }
};

/// Model input is features followed by depth channels. Without depth (and
/// without a mask) every pixel counts as foreground.
inline Sample assemble_sample(Tensor<float> features, std::optional<Tensor<float>> depth = std::nullopt,
                              std::optional<Tensor<float>> mask = std::nullopt, Label label = Label::normal,
                              std::optional<Tensor<float>> gt_mask = std::nullopt) {
  if (features.rank() != 3) throw DimensionError("features must be [C,H,W], got " + to_string(features.shape()));
  const index_t H = features.dim(1), W = features.dim(2);
  auto check_map = [&](const Tensor<float>& m, const char* what) {
    if (m.shape() != Shape{H, W})
      throw DimensionError(std::string(what) + " shape " + to_string(m.shape()) + " != feature map " +
                           to_string(Shape{H, W}));
  };
  if (mask) check_map(*mask, "mask");
  if (gt_mask) check_map(*gt_mask, "gt_mask");
  Sample s;
  if (depth) {
    if (depth->rank() != 3 || depth->dim(1) != H || depth->dim(2) != W)
      throw DimensionError("depth channels " + to_string(depth->shape()) + " do not match features " +
                           to_string(features.shape()));
    s.input = concat_channels(features, *depth);
  } else {
    s.input = features;
  }
  s.features = std::move(features);
  s.depth = std::move(depth);
  s.mask = std::move(mask);
  s.label = label;
  s.gt_mask = std::move(gt_mask);
  return s;
}

}  // namespace ast
