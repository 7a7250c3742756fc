#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ast/flow_teacher.hpp"
#include "ast/optim.hpp"
#include "ast/sample.hpp"
#include "ast/student.hpp"

namespace ast {

struct TrainConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-5;
  index_t epochs_teacher = 240;
  index_t epochs_student = 240;
  index_t batch_size = 8;
  std::uint64_t seed = 0;
  index_t cond_channels = 32;
  index_t n_blocks = 4;
  double alpha = 3.0;
  index_t teacher_hidden = 1024;
  index_t student_hidden = 1024;
  index_t n_st_blocks = 4;
  double leaky_slope = 0.2;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  std::string preset = "mvt2d";

  AdamParams adam() const { return {lr, beta1, beta2, adam_eps, weight_decay}; }

  void validate() const {
    if (lr <= 0 || adam_eps <= 0 || weight_decay < 0 || batch_size <= 0 || epochs_teacher < 0 ||
        epochs_student < 0 || cond_channels <= 0 || n_blocks < 0 || alpha <= 0 || teacher_hidden <= 0 ||
        student_hidden <= 0 || n_st_blocks < 0 || bn_momentum <= 0 || bn_eps <= 0)
      throw Error("invalid training configuration");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw Error("Adam betas must lie in [0,1)");
    if (cond_channels % 4 != 0) throw Error("cond_channels must be a multiple of 4");
  }
};

/// mvt2d / mvt3d follow the published settings; desk is sized for seconds
/// per run on one core.
inline TrainConfig preset_config(const std::string& name) {
  TrainConfig c;
  c.preset = name;
  if (name == "mvt2d") return c;
  if (name == "mvt3d") {
    c.epochs_teacher = 72;
    c.epochs_student = 72;
    c.alpha = 1.9;
    c.teacher_hidden = 64;
    return c;
  }
  if (name == "desk") {
    c.epochs_teacher = 30;
    c.epochs_student = 30;
    c.alpha = 1.9;
    c.teacher_hidden = 32;
    c.student_hidden = 64;
    c.lr = 1e-3;
    return c;
  }
  throw Error("unknown preset '" + name + "' (expected mvt2d, mvt3d or desk)");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"epochs_teacher", c.epochs_teacher},
          {"epochs_student", c.epochs_student},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"cond_channels", c.cond_channels},
          {"n_blocks", c.n_blocks},
          {"alpha", c.alpha},
          {"teacher_hidden", c.teacher_hidden},
          {"student_hidden", c.student_hidden},
          {"n_st_blocks", c.n_st_blocks},
          {"leaky_slope", c.leaky_slope},
          {"bn_momentum", c.bn_momentum},
          {"bn_eps", c.bn_eps},
          {"preset", c.preset}};
}

/// Fields absent from `j` keep the values of `base`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs_teacher = j.value("epochs_teacher", c.epochs_teacher);
  c.epochs_student = j.value("epochs_student", c.epochs_student);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.cond_channels = j.value("cond_channels", c.cond_channels);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.alpha = j.value("alpha", c.alpha);
  c.teacher_hidden = j.value("teacher_hidden", c.teacher_hidden);
  c.student_hidden = j.value("student_hidden", c.student_hidden);
  c.n_st_blocks = j.value("n_st_blocks", c.n_st_blocks);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.bn_eps = j.value("bn_eps", c.bn_eps);
  c.preset = j.value("preset", c.preset);
  return c;
}

inline TeacherConfig teacher_config(const TrainConfig& c, index_t channels) {
  return {channels, c.cond_channels, c.n_blocks, c.teacher_hidden, 3, c.alpha};
}

inline StudentConfig student_config(const TrainConfig& c, index_t channels) {
  return {channels, c.cond_channels, channels, c.student_hidden, c.n_st_blocks, c.leaky_slope, c.bn_eps, c.bn_momentum};
}

// Seed streams for the two phases.
inline std::uint64_t teacher_seed(std::uint64_t seed) { return seed * 2 + 1; }
inline std::uint64_t student_seed(std::uint64_t seed) { return seed * 2 + 2; }

/// Mini-batch of equally shaped samples.
struct Batch {
  Tensor<float> x;                    // [N,C,H,W]
  Tensor<float> c;                    // [N,C_pe,H,W]
  std::optional<Tensor<float>> mask;  // [N,H,W]
  std::vector<std::size_t> indices;
  const Tensor<float>* mask_ptr() const { return mask ? &*mask : nullptr; }
};

inline void check_corpus(const std::vector<Sample>& corpus, bool training) {
  if (corpus.empty()) throw Error("corpus is empty");
  for (const auto& s : corpus) {
    if (s.input.shape() != corpus.front().input.shape())
      throw DimensionError("corpus samples have different shapes: " + to_string(s.input.shape()) + " vs " +
                           to_string(corpus.front().input.shape()));
    if (training && s.label != Label::normal) throw Error("training corpus must contain only normal samples");
  }
}

inline Batch make_batch(const std::vector<Sample>& corpus, std::span<const std::size_t> idx, const Tensor<float>& pe) {
  Batch b;
  std::vector<const Tensor<float>*> xs;
  bool any_mask = false;
  for (std::size_t i : idx) {
    xs.push_back(&corpus[i].input);
    any_mask = any_mask || corpus[i].mask.has_value();
  }
  b.x = stack(xs);
  b.c = repeat(pe, static_cast<index_t>(idx.size()));
  if (any_mask) {
    const Tensor<float> ones(Shape{corpus[idx[0]].height(), corpus[idx[0]].width()}, 1.0f);
    std::vector<const Tensor<float>*> ms;
    for (std::size_t i : idx) ms.push_back(corpus[i].mask ? &*corpus[i].mask : &ones);
    b.mask = stack(ms);
  }
  b.indices.assign(idx.begin(), idx.end());
  return b;
}

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, index_t batch_size, Rng& rng) {
  std::vector<index_t> order = rng.permutation(static_cast<index_t>(n));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> b;
    for (std::size_t i = s; i < std::min(n, s + static_cast<std::size_t>(batch_size)); ++i)
      b.push_back(static_cast<std::size_t>(order[i]));
    out.push_back(std::move(b));
  }
  return out;
}

struct TeacherRun {
  TeacherModel<float> model;
  std::vector<double> losses;  // mean batch loss per epoch
};

struct StudentRun {
  StudentModel<float> model;
  std::vector<double> losses;
};

using EpochCallback = std::function<void(index_t epoch, double loss)>;

/// Phase 1: maximum-likelihood training of the flow on normal samples.
inline TeacherRun train_teacher(const std::vector<Sample>& corpus, const TrainConfig& config,
                                const EpochCallback& on_epoch = {}) {
  config.validate();
  check_corpus(corpus, true);
  Rng rng(teacher_seed(config.seed));
  TeacherRun run{TeacherModel<float>(teacher_config(config, corpus.front().channels()), rng), {}};
  const Tensor<float> pe = positional_encoding(corpus.front().height(), corpus.front().width(), config.cond_channels);
  const auto named = run.model.named_parameters();
  const auto params = tensors_of(named);
  std::vector<std::string> names;
  for (const auto& [n, p] : named) names.push_back(n);
  AdamState<float> adam;
  for (index_t epoch = 0; epoch < config.epochs_teacher; ++epoch) {
    double total = 0;
    const auto batches = epoch_batches(corpus.size(), config.batch_size, rng);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Batch b = make_batch(corpus, batches[bi], pe);
      Tape<float> tape;
      ParamScope<float> scope(tape, true);
      Var<float> loss = teacher_loss(scope, run.model, tape.constant(b.x), tape.constant(b.c), b.mask_ptr());
      const double l = loss.value()[0];
      if (!std::isfinite(l))
        throw NonFiniteError("teacher: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bi));
      tape.backward(loss);
      std::vector<Tensor<float>> grads;
      for (auto* p : params) grads.push_back(scope.grad(*p));
      adam_step(params, grads, adam, config.adam(), names);
      total += l;
    }
    run.losses.push_back(total / static_cast<double>(batches.size()));
    if (on_epoch) on_epoch(epoch, run.losses.back());
  }
  return run;
}

/// Teacher outputs z for every sample (the frozen regression targets).
inline std::vector<Tensor<float>> teacher_targets(const std::vector<Sample>& corpus, const TeacherModel<float>& teacher,
                                                  index_t cond_channels) {
  std::vector<Tensor<float>> out;
  if (corpus.empty()) return out;
  const Tensor<float> pe = positional_encoding(corpus.front().height(), corpus.front().width(), cond_channels);
  for (const auto& s : corpus) out.push_back(teacher_forward(teacher, s.input, pe).z);
  return out;
}

/// Phase 2: regress the frozen teacher's outputs with the student.
inline StudentRun train_student(const std::vector<Sample>& corpus, const TeacherModel<float>& teacher,
                                const TrainConfig& config, const EpochCallback& on_epoch = {}) {
  config.validate();
  check_corpus(corpus, true);
  if (teacher.config().cond_channels != config.cond_channels)
    throw Error("teacher condition channels differ from the training configuration");
  Rng rng(student_seed(config.seed));
  StudentRun run{StudentModel<float>(student_config(config, corpus.front().channels()), rng), {}};
  if (teacher.config().channels != corpus.front().channels())
    throw DimensionError("teacher channel count does not match the corpus");
  const std::vector<Tensor<float>> targets = teacher_targets(corpus, teacher, config.cond_channels);
  const Tensor<float> pe = positional_encoding(corpus.front().height(), corpus.front().width(), config.cond_channels);
  const auto named = run.model.named_parameters();
  const auto params = tensors_of(named);
  std::vector<std::string> names;
  for (const auto& [n, p] : named) names.push_back(n);
  AdamState<float> adam;
  for (index_t epoch = 0; epoch < config.epochs_student; ++epoch) {
    double total = 0;
    const auto batches = epoch_batches(corpus.size(), config.batch_size, rng);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Batch b = make_batch(corpus, batches[bi], pe);
      std::vector<const Tensor<float>*> ts;
      for (std::size_t i : b.indices) ts.push_back(&targets[i]);
      Tape<float> tape;
      ParamScope<float> scope(tape, true);
      Var<float> pred = run.model.forward(scope, tape.constant(b.x), tape.constant(b.c), Mode::train);
      Var<float> loss = student_loss(distance_map(pred, tape.constant(stack(ts))), b.mask_ptr());
      const double l = loss.value()[0];
      if (!std::isfinite(l))
        throw NonFiniteError("student: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bi));
      tape.backward(loss);
      std::vector<Tensor<float>> grads;
      for (auto* p : params) grads.push_back(scope.grad(*p));
      adam_step(params, grads, adam, config.adam(), names);
      total += l;
    }
    run.losses.push_back(total / static_cast<double>(batches.size()));
    if (on_epoch) on_epoch(epoch, run.losses.back());
  }
  return run;
}

/// Scores of one test sample.
struct ScoreReport {
  Tensor<float> distance;      // [H,W] student-teacher distance
  Tensor<float> teacher_nll;   // [H,W] teacher-only score map
  double score = 0;            // aggregated distance
  double teacher_score = 0;    // aggregated teacher NLL
  Label label = Label::normal;
};

inline ScoreReport score_sample(const Sample& s, const TeacherModel<float>& teacher, const StudentModel<float>& student,
                                const Tensor<float>& pe) {
  FlowOutput<float> flow = teacher_forward(teacher, s.input, pe);
  Tensor<float> pred = student.predict(s.input, pe);
  ScoreReport r;
  r.distance = distance_map(pred, flow.z);
  r.teacher_nll = nll_map(flow);
  r.score = image_score(r.distance, s.mask_ptr());
  r.teacher_score = image_score(r.teacher_nll, s.mask_ptr());
  r.label = s.label;
  return r;
}

/// Scores every test sample. Results are in corpus order and independent of
/// the thread count.
inline std::vector<ScoreReport> score_corpus(const std::vector<Sample>& test, const TeacherModel<float>& teacher,
                                             const StudentModel<float>& student, unsigned threads = 1) {
  std::vector<ScoreReport> out(test.size());
  if (test.empty()) return out;
  check_corpus(test, false);
  const Tensor<float> pe =
      positional_encoding(test.front().height(), test.front().width(), teacher.config().cond_channels);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(test.size())));
  if (threads == 1) {
    for (std::size_t i = 0; i < test.size(); ++i) out[i] = score_sample(test[i], teacher, student, pe);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < test.size(); i += threads) out[i] = score_sample(test[i], teacher, student, pe);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace ast
