#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ast/ast.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  unsigned threads = 1;
  std::string preset;
  std::string corpus;
  std::string teacher;
  std::string student;
};

json read_json(const std::string& path) {
  try {
    return json::parse(ast::read_file(path));
  } catch (const json::parse_error& e) {
    throw ast::FormatError(path + " is not valid JSON: " + e.what(), e.byte);
  }
}

fs::path require_out(const Options& o) {
  if (o.out.empty()) throw ast::Error("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

// A directory argument resolves to <dir>/<split>.json.
fs::path manifest_path(const std::string& corpus, const char* split) {
  if (corpus.empty()) throw ast::Error("--corpus is required");
  fs::path p = corpus;
  if (fs::is_directory(p)) p /= std::string(split) + ".json";
  if (!fs::exists(p)) throw ast::IoError("no corpus manifest at " + p.string());
  return p;
}

// preset, then --config, then --seed.
ast::TrainConfig train_config(const Options& o, ast::TrainConfig base) {
  if (!o.preset.empty()) base = ast::preset_config(o.preset);
  if (!o.config.empty()) base = ast::train_config_from_json(read_json(o.config), base);
  if (o.seed) base.seed = *o.seed;
  base.validate();
  return base;
}

std::string losses_csv(const std::vector<double>& losses) {
  std::ostringstream os;
  os << "epoch,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << ast::format_float(losses[i]) << '\n';
  return os.str();
}

void progress(const char* phase, ast::index_t epochs) {
  std::fprintf(stderr, "%s: %ld epochs\n", phase, static_cast<long>(epochs));
}

int cmd_synth(const Options& o) {
  ast::SynthSpec spec;
  if (!o.config.empty()) spec = ast::synth_spec_from_json(read_json(o.config));
  if (o.seed) spec.seed = *o.seed;
  const fs::path out = require_out(o);
  const ast::RawCorpus raw = ast::synth_raw_corpus(spec);
  ast::write_corpus(raw, out, {{"synth", ast::synth_spec_to_json(spec)}});
  std::printf("wrote %zu train and %zu test samples to %s\n", raw.train.size(), raw.test.size(), out.c_str());
  return 0;
}

int cmd_train_teacher(const Options& o) {
  const ast::TrainConfig cfg = train_config(o, {});
  const fs::path out = require_out(o);
  const auto train = ast::load_corpus(manifest_path(o.corpus, "train"));
  progress("teacher", cfg.epochs_teacher);
  auto run = ast::train_teacher(train, cfg, [](ast::index_t e, double l) {
    std::fprintf(stderr, "  epoch %ld loss %.6g\n", static_cast<long>(e), l);
  });
  ast::save_teacher(out / "teacher.astc", run.model, cfg);
  ast::write_file_atomic(out / "teacher_losses.csv", losses_csv(run.losses));
  std::printf("teacher: %ld parameters, final loss %.6g -> %s\n",
              static_cast<long>(ast::parameter_count(run.model.named_parameters())),
              run.losses.empty() ? 0.0 : run.losses.back(), (out / "teacher.astc").c_str());
  return 0;
}

int cmd_train_student(const Options& o) {
  if (o.teacher.empty()) throw ast::Error("--teacher is required");
  ast::LoadedTeacher t = ast::load_teacher(o.teacher);
  const ast::TrainConfig cfg = train_config(o, t.config);
  const fs::path out = require_out(o);
  const auto train = ast::load_corpus(manifest_path(o.corpus, "train"));
  progress("student", cfg.epochs_student);
  auto run = ast::train_student(train, t.model, cfg, [](ast::index_t e, double l) {
    std::fprintf(stderr, "  epoch %ld loss %.6g\n", static_cast<long>(e), l);
  });
  ast::save_student(out / "student.astc", run.model, cfg);
  ast::write_file_atomic(out / "student_losses.csv", losses_csv(run.losses));
  std::printf("student: %ld parameters, final loss %.6g -> %s\n",
              static_cast<long>(ast::parameter_count(run.model.named_parameters())),
              run.losses.empty() ? 0.0 : run.losses.back(), (out / "student.astc").c_str());
  return 0;
}

struct Scored {
  std::vector<ast::Sample> test;
  ast::LoadedTeacher teacher;
  ast::LoadedStudent student;
  std::vector<ast::ScoreReport> reports;
};

Scored score_all(const Options& o) {
  if (o.teacher.empty() || o.student.empty()) throw ast::Error("--teacher and --student are required");
  Scored s{ast::load_corpus(manifest_path(o.corpus, "test")), ast::load_teacher(o.teacher),
           ast::load_student(o.student), {}};
  s.reports = ast::score_corpus(s.test, s.teacher.model, s.student.model, o.threads);
  return s;
}

std::string scores_csv(const std::vector<ast::ScoreReport>& reports) {
  std::ostringstream os;
  os << "index,label,score,teacher_score\n";
  for (std::size_t i = 0; i < reports.size(); ++i)
    os << i << ',' << ast::to_string(reports[i].label) << ',' << ast::format_float(reports[i].score) << ','
       << ast::format_float(reports[i].teacher_score) << '\n';
  return os.str();
}

int cmd_score(const Options& o) {
  const fs::path out = require_out(o);
  Scored s = score_all(o);
  fs::create_directories(out / "maps");
  for (std::size_t i = 0; i < s.reports.size(); ++i)
    ast::export_score_map(s.reports[i].distance, out / "maps" / std::to_string(i));
  ast::write_file_atomic(out / "scores.csv", scores_csv(s.reports));
  std::printf("scored %zu samples -> %s\n", s.reports.size(), (out / "scores.csv").c_str());
  return 0;
}

// FNV-1a, printed as 16 hex digits.
std::string digest(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

int cmd_eval(const Options& o) {
  const fs::path out = require_out(o);
  Scored s = score_all(o);
  std::vector<double> ast_scores, teacher_scores;
  std::vector<int> labels;
  for (const auto& r : s.reports) {
    ast_scores.push_back(r.score);
    teacher_scores.push_back(r.teacher_score);
    labels.push_back(r.label == ast::Label::anomalous ? 1 : 0);
  }
  json report = {{"n_test", s.reports.size()},
                 {"n_anomalous", std::count(labels.begin(), labels.end(), 1)},
                 {"image_auroc", ast::auroc(ast_scores, labels)},
                 {"teacher_image_auroc", ast::auroc(teacher_scores, labels)},
                 {"pixel_auroc", nullptr}};

  // Pixel level: samples without ground truth count as defect-free.
  std::vector<ast::Tensor<float>> maps, gts, fgs;
  bool any_mask = false, any_defect = false;
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    const auto& smp = s.test[i];
    const auto& d = s.reports[i].distance;
    ast::Tensor<float> gt(d.shape());
    if (smp.gt_mask) {
      gt = *smp.gt_mask;
      if (gt.shape() != d.shape()) gt = ast::downsample_mask({gt}, d.dim(0), d.dim(1)).mask;
    }
    for (float v : gt.values()) any_defect = any_defect || v > 0.0f;
    any_mask = any_mask || smp.mask.has_value();
    maps.push_back(d);
    gts.push_back(std::move(gt));
    fgs.push_back(smp.mask ? *smp.mask : ast::Tensor<float>(d.shape(), 1.0f));
  }
  if (any_defect) {
    try {
      report["pixel_auroc"] = ast::pixel_auroc(maps, gts, any_mask ? &fgs : nullptr);
    } catch (const ast::DegenerateLabelsError&) {
    }
  }
  report["config"] = ast::to_json(s.student.config);
  report["seed"] = s.student.config.seed;
  report["config_digest"] = digest(ast::to_json(s.teacher.config).dump() + ast::to_json(s.student.config).dump());
  report["scores"] = json::array();
  for (std::size_t i = 0; i < s.reports.size(); ++i)
    report["scores"].push_back({{"index", i},
                                {"label", ast::to_string(s.reports[i].label)},
                                {"score", s.reports[i].score},
                                {"teacher_score", s.reports[i].teacher_score}});

  std::ostringstream metrics;
  metrics << "metric,value\n";
  for (const char* k : {"image_auroc", "teacher_image_auroc", "pixel_auroc"})
    metrics << k << ',' << (report[k].is_null() ? std::string() : ast::format_float(report[k].get<double>())) << '\n';

  const ast::Histogram h = ast::histogram(ast_scores, labels, 20);
  std::ostringstream hist;
  hist << "bin,lo,hi,normal,anomalous\n";
  for (std::size_t b = 0; b < h.normal.size(); ++b)
    hist << b << ',' << ast::format_float(h.edges[b]) << ',' << ast::format_float(h.edges[b + 1]) << ','
         << h.normal[b] << ',' << h.anomalous[b] << '\n';

  // Teacher and student outputs of every pixel, projected with one basis.
  const auto& tcfg = s.teacher.model.config();
  const ast::Tensor<float> pe =
      ast::positional_encoding(s.test.front().height(), s.test.front().width(), tcfg.cond_channels);
  const ast::ProjectionBasis basis = ast::make_projection_basis(tcfg.channels, s.teacher.config.seed);
  std::ostringstream proj;
  proj << "sample,row,col,label,source,u,v\n";
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    const auto z = ast::teacher_forward(s.teacher.model, s.test[i].input, pe).z;
    const auto p = s.student.model.predict(s.test[i].input, pe);
    for (ast::index_t r = 0; r < z.dim(1); ++r)
      for (ast::index_t c = 0; c < z.dim(2); ++c)
        for (auto [name, m] : {std::pair{"teacher", &z}, std::pair{"student", &p}}) {
          const ast::Tensor<float> point = ast::pixel_vector(*m, r, c);
          const auto [u, v] = basis.project(point.values());
          proj << i << ',' << r << ',' << c << ',' << ast::to_string(s.test[i].label) << ',' << name << ','
               << ast::format_float(u) << ',' << ast::format_float(v) << '\n';
        }
  }

  ast::write_file_atomic(out / "metrics.json", report.dump(2) + "\n");
  ast::write_file_atomic(out / "metrics.csv", metrics.str());
  ast::write_file_atomic(out / "scores.csv", scores_csv(s.reports));
  ast::write_file_atomic(out / "histogram.csv", hist.str());
  ast::write_file_atomic(out / "projection.csv", proj.str());
  std::printf("image AUROC %.4f (teacher only %.4f)\n", report["image_auroc"].get<double>(),
              report["teacher_image_auroc"].get<double>());
  return 0;
}

int cmd_toy(const Options& o) {
  ast::ToySpec spec;
  if (!o.config.empty()) spec = ast::toy_spec_from_json(read_json(o.config));
  if (o.seed) spec.seed = *o.seed;
  const ast::ToyReport r = ast::toy_experiment(spec);
  json report = {{"spec", ast::toy_spec_to_json(spec)},
                 {"teacher_range", r.teacher_range},
                 {"symmetric_in_dist", r.symmetric_in},
                 {"asymmetric_in_dist", r.asymmetric_in},
                 {"symmetric_ood_dist", r.symmetric_ood ? json(*r.symmetric_ood) : json(nullptr)},
                 {"asymmetric_ood_dist", r.asymmetric_ood ? json(*r.asymmetric_ood) : json(nullptr)}};
  if (!o.out.empty()) {
    const fs::path out = require_out(o);
    ast::write_file_atomic(out / "toy.json", report.dump(2) + "\n");
    ast::write_file_atomic(out / "toy_curves.csv", r.curves_csv());
  }
  std::printf("%s\n", report.dump(2).c_str());
  return 0;
}

int report_rows(const std::vector<ast::CheckRow>& rows, const Options& o, const char* file) {
  bool ok = true;
  std::ostringstream csv;
  csv << "check,value,tolerance,pass\n";
  std::printf("%-40s %12s %10s\n", "check", "value", "tolerance");
  for (const auto& r : rows) {
    std::printf("%-40s %12.3e %10.0e  %s\n", r.name.c_str(), r.value, r.tolerance, r.pass() ? "ok" : "FAIL");
    csv << '"' << r.name << "\"," << ast::format_float(r.value) << ',' << ast::format_float(r.tolerance) << ','
        << (r.pass() ? 1 : 0) << '\n';
    ok = ok && r.pass();
  }
  if (!o.out.empty()) ast::write_file_atomic(require_out(o) / file, csv.str());
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Asymmetric student-teacher anomaly detection"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON configuration");
    sub->add_option("--seed", seed, "random seed")->each([&](const std::string&) { o.seed = seed; });
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--threads", o.threads, "worker threads for scoring (1 = deterministic)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--preset", o.preset, "training preset")->check(CLI::IsMember({"mvt2d", "mvt3d", "desk"}));
  };
  auto add_models = [&](CLI::App* sub, bool student) {
    sub->add_option("--corpus", o.corpus, "corpus directory or manifest");
    sub->add_option("--teacher", o.teacher, "teacher checkpoint");
    if (student) sub->add_option("--student", o.student, "student checkpoint");
  };

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus");
  auto* train_t = app.add_subcommand("train-teacher", "train the normalizing-flow teacher");
  auto* train_s = app.add_subcommand("train-student", "train the student against a teacher");
  auto* score = app.add_subcommand("score", "score a test corpus and export score maps");
  auto* eval = app.add_subcommand("eval", "image/pixel AUROC, histograms and projections");
  auto* toy = app.add_subcommand("toy", "1-D symmetric vs asymmetric student experiment");
  auto* grad = app.add_subcommand("gradcheck", "gradient verification table");
  auto* self = app.add_subcommand("selftest", "all invariant checks");
  for (auto* sub : {synth, train_t, train_s, score, eval, toy, grad, self}) add_common(sub);
  train_t->add_option("--corpus", o.corpus, "corpus directory or manifest");
  add_models(train_s, false);
  add_models(score, true);
  add_models(eval, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*train_t) return cmd_train_teacher(o);
    if (*train_s) return cmd_train_student(o);
    if (*score) return cmd_score(o);
    if (*eval) return cmd_eval(o);
    if (*toy) return cmd_toy(o);
    if (*grad) return report_rows(ast::gradcheck_suite(o.seed.value_or(0)), o, "gradcheck.csv");
    if (*self) return report_rows(ast::selftest_suite(o.seed.value_or(0)), o, "selftest.csv");
  } catch (const ast::NonFiniteError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
