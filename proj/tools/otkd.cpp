// Command-line front end: dataset generation, teacher training, student
// distillation and evaluation, wired for reproducible seeded runs.
//
// Exit codes: 0 ok, 2 config/usage error, 3 I/O error, 4 training
// divergence, 5 checkpoint or data incompatibility.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "otkd/config.hpp"
#include "otkd/ctc.hpp"
#include "otkd/data.hpp"
#include "otkd/distill.hpp"
#include "otkd/error.hpp"
#include "otkd/eval.hpp"
#include "otkd/model.hpp"
#include "otkd/random.hpp"

namespace {

using namespace otkd;

int env_threads() {
  const char* v = std::getenv("OTKD_THREADS");
  if (!v) return 1;
  const int n = std::atoi(v);
  return n > 1 ? n : 1;
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

/// Run log: every config value as a '# key=value' provenance line, then one
/// tab-separated row per epoch.
void write_run_log(const std::string& path, const std::vector<std::pair<std::string, std::string>>& header,
                   const Config& cfg, const std::vector<TrainLogEntry>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write log file: " + path);
  for (const auto& [k, v] : header) out << "# " << k << "=" << v << "\n";
  for (const auto& [k, v] : cfg.entries()) out << "# " << k << "=" << v << "\n";
  for (const auto& e : log) {
    out << e.epoch << "\t" << e.phase << "\t" << fmt6(e.loss) << "\t" << fmt6(e.cer) << "\n";
  }
  if (!out) throw IoError("cannot write log file: " + path);
}

Config load_config(const std::string& path) {
  Config cfg = Config::from_file(path);
  cfg.reject_unknown_keys(known_config_keys());
  return cfg;
}

void cmd_gen_data(const std::string& config_path, const std::string& out_path) {
  Config cfg = load_config(config_path);
  TaskSpec spec = task_from_config(cfg);
  std::vector<Sample> samples = generate_dataset(spec);
  const std::string buf = serialize_dataset(samples);
  detail::write_file(out_path, buf);
  std::cout << "samples=" << samples.size() << "\n";
  std::cout << "bytes=" << buf.size() << "\n";
}

AnyModel build_teacher(ModelKind kind, const Config& cfg) {
  StreamRng rng(cfg.get_u64("seed"), "teacher-init");
  AnyModel m;
  m.kind = kind;
  if (is_oracle_kind(kind)) {
    m.teacher = std::make_shared<OracleTeacher>(teacher_from_config(cfg), kind, rng);
  } else {
    m.conv = std::make_shared<ConvCtcModel>(conventional_from_config(cfg), kind, rng);
  }
  return m;
}

void save_any(const std::string& path, const AnyModel& m) {
  if (m.teacher) {
    save_model(path, *m.teacher);
  } else {
    save_model(path, *m.conv);
  }
}

void cmd_train_teacher(const std::string& kind_name_str, const std::string& config_path,
                       const std::string& data_path, const std::string& out_path) {
  Config cfg = load_config(config_path);
  const ModelKind kind = kind_from_name(kind_name_str);
  TaskSpec spec = task_from_config(cfg);
  std::vector<Sample> samples = read_dataset(data_path);
  SplitView split = split_dataset(samples, spec.train_count, spec.eval_count);

  AnyModel model = build_teacher(kind, cfg);
  TrainPlan plan = train_plan_from_config(cfg);
  plan.eval_threads = env_threads();
  std::vector<TrainLogEntry> log = train_ctc(model, split.train, split.eval, plan);

  save_any(out_path, model);
  write_run_log(out_path + ".log", {{"cmd", "train-teacher"}, {"kind", kind_name_str}}, cfg, log);
  const double final_loss = log.empty() ? 0.0 : log.back().loss;
  const double final_cer = log.empty() ? 0.0 : log.back().cer;
  std::cout << "final_train_loss=" << fmt6(final_loss) << "\n";
  std::cout << "eval_cer=" << fmt6(final_cer) << "\n";
}

void cmd_distill(const std::string& teacher_path, const std::string& config_path,
                 const std::string& data_path, const std::string& out_path,
                 const std::string& kd_flag, std::uint64_t seed_flag, bool has_seed_flag,
                 bool compare_baseline) {
  Config cfg = load_config(config_path);
  DistillPlan plan = distill_plan_from_config(cfg);
  if (!kd_flag.empty()) plan.kd = kd_from_name(kd_flag);
  if (has_seed_flag) plan.seed = seed_flag;
  plan.eval_threads = env_threads();

  TaskSpec spec = task_from_config(cfg);
  std::vector<Sample> samples = read_dataset(data_path);
  SplitView split = split_dataset(samples, spec.train_count, spec.eval_count);

  AnyModel teacher = load_model(teacher_path);
  StudentConfig student_cfg = student_from_config(cfg);

  auto fresh_student = [&]() {
    StreamRng rng(plan.seed, "student-init");
    AnyModel m;
    m.kind = ModelKind::Student;
    m.conv = std::make_shared<ConvCtcModel>(student_cfg, ModelKind::Student, rng);
    return m;
  };

  AnyModel student = fresh_student();
  std::vector<TrainLogEntry> log = distill_student(student, &teacher, split.train, split.eval, plan);
  save_any(out_path, student);

  std::vector<std::pair<std::string, std::string>> header{
      {"cmd", "distill"}, {"teacher", teacher_path}, {"kd", kd_name(plan.kd)}};
  if (has_seed_flag) header.emplace_back("seed_override", std::to_string(seed_flag));
  write_run_log(out_path + ".log", header, cfg, log);

  const double distilled_cer = log.empty() ? 0.0 : log.back().cer;
  if (compare_baseline) {
    AnyModel baseline = fresh_student();
    std::vector<TrainLogEntry> base_log =
        distill_student(baseline, nullptr, split.train, split.eval, plan);
    const double baseline_cer = base_log.empty() ? 0.0 : base_log.back().cer;
    std::cout << "baseline_cer=" << fmt6(baseline_cer) << "\n";
  }
  std::cout << "distilled_cer=" << fmt6(distilled_cer) << "\n";
}

void cmd_eval(const std::string& model_path, const std::string& data_path,
              const std::string& heatmap_path, const std::string& attention_path) {
  AnyModel model = load_model(model_path);
  std::vector<Sample> samples = read_dataset(data_path);
  if (!attention_path.empty() && !is_oracle_kind(model.kind)) {
    throw CompatError("attention export requires an oracle-kind checkpoint, got " +
                      std::string(kind_name(model.kind)));
  }
  EvalReport rep = evaluate(model, samples, env_threads());
  if (!heatmap_path.empty()) {
    if (samples.empty()) throw UsageError("cannot export a heatmap from an empty dataset");
    const Sample& s = samples.front();
    Vocab vocab(model.vocab());
    export_posterior_heatmap(model.grid(s.features, s.labels), vocab, heatmap_path);
  }
  if (!attention_path.empty()) {
    if (samples.empty()) throw UsageError("cannot export attention from an empty dataset");
    const Sample& s = samples.front();
    TeacherOutput out = model.teacher->forward(s.features, s.labels);
    export_attention(out.attn, attention_path);
  }
  std::cout << "samples=" << rep.count << "\n";
  std::cout << "cer=" << fmt6(rep.cer) << "\n";
  std::cout << "accuracy=" << fmt6(rep.accuracy) << "\n";
  std::cout << "edits=" << rep.total_edits << "\n";
  std::cout << "ref_len=" << rep.total_ref_len << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequence-learning workbench: synthetic data, CTC training, distillation"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_path, model_path;
  std::string kind_str, teacher_path, kd_flag, heatmap_path, attention_path;
  std::uint64_t seed_flag = 0;
  bool compare_baseline = false;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  gen->add_option("--config", config_path, "Run config file")->required();
  gen->add_option("--out", out_path, "Output dataset path")->required();

  CLI::App* tt = app.add_subcommand("train-teacher", "Train a teacher model with CTC");
  tt->add_option("--kind", kind_str, "Model kind")
      ->required()
      ->check(CLI::IsMember({"oracle", "oracle-wo-target", "oracle-wo-source", "conventional"}));
  tt->add_option("--config", config_path, "Run config file")->required();
  tt->add_option("--data", data_path, "Dataset file")->required();
  tt->add_option("--out", out_path, "Output checkpoint path")->required();

  CLI::App* di = app.add_subcommand("distill", "Train a student against a teacher checkpoint");
  di->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();
  di->add_option("--config", config_path, "Run config file")->required();
  di->add_option("--data", data_path, "Dataset file")->required();
  di->add_option("--out", out_path, "Output checkpoint path")->required();
  di->add_option("--kd", kd_flag, "Transfer loss")->check(CLI::IsMember({"fitnets", "kl", "l2"}));
  CLI::Option* seed_opt = di->add_option("--seed", seed_flag, "Override the config seed");
  di->add_flag("--compare-baseline", compare_baseline,
               "Also train a no-transfer baseline from the same init and report both");

  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--model", model_path, "Model checkpoint")->required();
  ev->add_option("--data", data_path, "Dataset file")->required();
  ev->add_option("--export-heatmap", heatmap_path, "Write the first sample's posterior grid CSV");
  ev->add_option("--export-attention", attention_path,
                 "Write the first sample's cross-attention CSV (oracle kinds only)");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) cmd_gen_data(config_path, out_path);
    if (tt->parsed()) cmd_train_teacher(kind_str, config_path, data_path, out_path);
    if (di->parsed()) {
      cmd_distill(teacher_path, config_path, data_path, out_path, kd_flag, seed_flag,
                  seed_opt->count() > 0, compare_baseline);
    }
    if (ev->parsed()) cmd_eval(model_path, data_path, heatmap_path, attention_path);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const CompatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const InfeasibleError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const GenerationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
