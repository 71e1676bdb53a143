#include "pcd/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "pcd/config.hpp"
#include "pcd/erf.hpp"
#include "pcd/modelzoo.hpp"
#include "pcd/trainer.hpp"
#include "pcd/verify.hpp"

namespace pcd {

namespace {

struct GlobalOpts {
  std::string config_path;
  std::string out;
  int64_t seed = -1;  // -1 = keep the config's seed
};

TrainConfig load_config(const GlobalOpts& g) {
  TrainConfig cfg =
      g.config_path.empty() ? desk_default_config() : parse_config_file(g.config_path);
  if (g.seed >= 0) cfg.seed = static_cast<uint64_t>(g.seed);
  return cfg;
}

void emit_default_config(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f << config_to_json(desk_default_config()).dump(2) << "\n";
}

int run_gen_data(const GlobalOpts& g) {
  TrainConfig cfg = load_config(g);
  if (g.out.empty()) throw std::runtime_error("gen-data: --out DIR is required");
  ImageStore store = synth_dataset(cfg.data.n_images, cfg.data.image_size, cfg.seed);
  save_dataset(store, g.out);
  std::printf("wrote %lld images (%lldx%lld) to %s\n",
              static_cast<long long>(store.count()), static_cast<long long>(store.size),
              static_cast<long long>(store.size), g.out.c_str());
  return 0;
}

int run_pretrain(const GlobalOpts& g, const std::string& data_dir, bool random_init,
                 const std::string& metrics_path) {
  TrainConfig cfg = load_config(g);
  if (g.out.empty()) throw std::runtime_error("pretrain-teacher: --out FILE is required");
  ImageStore data = load_dataset(data_dir);
  PretrainResult res = pretrain_teacher(cfg, data, random_init);
  save_checkpoint(res.checkpoint, g.out);
  if (!metrics_path.empty()) write_metrics(res.log, metrics_path);
  if (!res.log.empty())
    std::printf("pretrained %zu steps, loss %.4f -> %.4f\n", res.log.size(),
                res.log.front().loss, res.log.back().loss);
  std::printf("teacher checkpoint written to %s\n", g.out.c_str());
  return 0;
}

int run_adapt_head(const GlobalOpts& g, const std::string& in_path, bool drop_last_bn,
                   double tol, int trials, const std::string& report_path) {
  if (g.out.empty()) throw std::runtime_error("adapt-head: --out FILE is required");
  Checkpoint ckpt = load_checkpoint(in_path);
  std::string head_kind = ckpt.metadata.value("head_kind", std::string("none"));
  if (head_kind == "map") throw std::runtime_error("adapt-head: head is already adapted");
  if (head_kind != "vector")
    throw std::runtime_error("adapt-head: checkpoint has no vector head to adapt");

  HeadSpec original = head_from_checkpoint(ckpt, "head", ckpt.metadata.at("head"));
  freeze_head(original);
  HeadSpec adapted = adapt_head(original, drop_last_bn);
  freeze_head(adapted);
  HeadSpec base = drop_last_bn ? strip_trailing_affine_free_bn(original)
                               : clone_head(original);
  freeze_head(base);
  InvarianceReport rep = verify_invariance(base, adapted, trials, 7, tol);
  std::cout << rep.text();
  if (!report_path.empty()) {
    std::ofstream rf(report_path);
    if (!rf) throw std::runtime_error("adapt-head: cannot write report '" + report_path + "'");
    rf << rep.text();
  }
  if (!rep.pass) throw std::runtime_error("adapt-head: invariance verification failed");

  Checkpoint out;
  out.metadata = ckpt.metadata;
  out.metadata["head_kind"] = "map";
  out.metadata["head"] = head_structure_json(adapted);
  out.metadata["invariance"] = {{"pass", rep.pass},
                                {"max_abs_dev", rep.max_abs_dev},
                                {"tol", rep.tol},
                                {"trials", rep.trials}};
  for (const auto& e : ckpt.entries)
    if (e.path.rfind("backbone.", 0) == 0) out.entries.push_back(e);
  append_head(out, "head", adapted);
  save_checkpoint(out, g.out);
  std::printf("adapted checkpoint written to %s\n", g.out.c_str());
  return 0;
}

int run_distill(const GlobalOpts& g, const std::string& data_dir,
                const std::string& teacher_path, const std::string& level,
                int symmetric_override, const std::string& resume_path,
                bool no_teacher_head, bool keep_last_bn) {
  TrainConfig cfg = load_config(g);
  if (g.out.empty()) throw std::runtime_error("distill: --out DIR is required");
  if (!level.empty()) cfg.loss.level = level;
  if (symmetric_override >= 0) cfg.loss.symmetric = symmetric_override != 0;
  ImageStore data = load_dataset(data_dir);
  Checkpoint teacher = load_checkpoint(teacher_path);

  Checkpoint resume;
  bool has_resume = !resume_path.empty();
  if (has_resume) resume = load_checkpoint(resume_path);

  std::filesystem::create_directories(g.out);
  DistillResult res = distill(cfg, data, teacher, has_resume ? &resume : nullptr,
                              !no_teacher_head, !keep_last_bn);
  write_metrics(res.log, g.out + "/metrics.tsv");
  save_checkpoint(res.raw, g.out + "/student_raw.pcdckpt");
  save_checkpoint(res.exported, g.out + "/student_export.pcdckpt");
  std::printf("distilled %zu steps (%s level), loss %.4f -> %.4f, pixel cosine %.4f -> %.4f\n",
              res.log.size(), cfg.loss.level.c_str(), res.log.front().loss,
              res.log.back().loss, res.log.front().pixel_cosine,
              res.log.back().pixel_cosine);
  std::printf("outputs in %s: metrics.tsv student_raw.pcdckpt student_export.pcdckpt\n",
              g.out.c_str());
  return 0;
}

int run_export(const GlobalOpts& g, const std::string& in_path, float anchor) {
  if (g.out.empty()) throw std::runtime_error("export: --out FILE is required");
  Checkpoint raw = load_checkpoint(in_path);
  Student s = student_from_checkpoint(raw);
  uint64_t seed = 0;
  if (raw.metadata.contains("seed_lineage") && !raw.metadata["seed_lineage"].empty())
    seed = raw.metadata["seed_lineage"][0].get<uint64_t>();
  Checkpoint out = norm_rescale_export(s, anchor, seed);
  save_checkpoint(out, g.out);
  std::printf("exported backbone (anchor %.4g) to %s\n", static_cast<double>(anchor),
              g.out.c_str());
  return 0;
}

int run_erf(const GlobalOpts& g, const std::string& ckpt_path, const std::string& probe,
            const std::string& format, int samples, int64_t input_size) {
  TrainConfig cfg = load_config(g);
  if (g.out.empty()) throw std::runtime_error("erf: --out FILE is required");
  int64_t size = input_size > 0 ? input_size : cfg.data.image_size;

  ModelFn model;
  Student student;
  Backbone backbone;
  if (probe == "student") {
    if (!ckpt_path.empty()) {
      student = student_from_checkpoint(load_checkpoint(ckpt_path));
    } else {
      student = build_student(cfg.model,
                              RngStream::derive(cfg.seed, "init-student").next_u64());
    }
    student.set_train(false);
    model = [&student](const Tensor& x) { return student_forward(x, student).s_star; };
  } else if (probe == "backbone") {
    if (!ckpt_path.empty()) {
      backbone = backbone_from_any_checkpoint(load_checkpoint(ckpt_path));
    } else {
      backbone = build_backbone(cfg.model.student_backbone,
                                RngStream::derive(cfg.seed, "init-student").next_u64());
      backbone.set_train(false);
    }
    model = [&backbone](const Tensor& x) { return backbone_forward(x, backbone); };
  } else {
    throw std::runtime_error("erf: --probe must be 'backbone' or 'student'");
  }

  ErfMap map = compute_erf(model, size, samples, cfg.seed);
  if (map.degenerate) throw std::runtime_error("erf: degenerate (all-zero) map");
  write_heatmap(map, g.out, format);
  std::printf("erf map %lldx%lld, 0.95-mass radius %lld, written to %s\n",
              static_cast<long long>(size), static_cast<long long>(size),
              static_cast<long long>(erf_radius(map, 0.95)), g.out.c_str());
  return 0;
}

int run_verify(const GlobalOpts& g) {
  TrainConfig cfg = load_config(g);
  std::vector<CheckResult> results = run_all_suites(cfg.seed);
  bool all = true;
  for (const auto& r : results) {
    std::printf("[%s] %-22s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                r.detail.c_str());
    all = all && r.pass;
  }
  if (!all) throw std::runtime_error("verification failed");
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"pixel-wise contrastive distillation toolkit"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  GlobalOpts g;
  std::string emit_config_path;
  app.add_option("--config", g.config_path, "JSON config file (desk defaults when omitted)");
  app.add_option("--seed", g.seed, "master seed override");
  app.add_option("--out", g.out, "output file or directory");
  app.add_option("--emit-default-config", emit_config_path,
                 "write the canonical default config to PATH and exit");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic image store");

  auto* pre = app.add_subcommand("pretrain-teacher", "pre-train the teacher");
  std::string pre_data, pre_metrics;
  bool pre_random = false;
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_flag("--random", pre_random, "skip training, save the random-init teacher");
  pre->add_option("--metrics", pre_metrics, "write per-step metrics to FILE");

  auto* adapt = app.add_subcommand("adapt-head", "rewrite a vector head for maps");
  std::string adapt_in, adapt_report;
  bool drop_last_bn = true;
  double adapt_tol = 1e-5;
  int adapt_trials = 64;
  adapt->add_option("--in", adapt_in, "teacher checkpoint")->required();
  adapt->add_flag("--drop-last-bn,!--keep-last-bn", drop_last_bn,
                  "drop a trailing affine-free BN before adaptation (default on)");
  adapt->add_option("--tol", adapt_tol, "invariance tolerance");
  adapt->add_option("--trials", adapt_trials, "invariance trials");
  adapt->add_option("--report", adapt_report, "also write the report to FILE");

  auto* dist = app.add_subcommand("distill", "run the distillation loop");
  std::string dist_data, dist_teacher, dist_level, dist_resume;
  bool dist_no_head = false, dist_keep_bn = false;
  int dist_symmetric = -1;
  dist->add_option("--data", dist_data, "dataset directory")->required();
  dist->add_option("--teacher", dist_teacher, "teacher checkpoint")->required();
  dist->add_option("--level", dist_level, "loss level: pixel|image")
      ->check(CLI::IsMember({"pixel", "image"}));
  dist->add_flag("--symmetric{1},--asymmetric{0}", dist_symmetric,
                 "two-view symmetric loss (config default otherwise)");
  dist->add_option("--resume", dist_resume, "resume from a raw student checkpoint");
  dist->add_flag("--no-teacher-head", dist_no_head,
                 "distill against raw backbone maps (head removed)");
  dist->add_flag("--keep-last-bn", dist_keep_bn,
                 "keep a trailing affine-free BN when adapting the teacher head");

  auto* exp = app.add_subcommand("export", "strip heads and rescale the backbone");
  std::string exp_in;
  float exp_anchor = 0.25f;
  exp->add_option("--in", exp_in, "raw student checkpoint")->required();
  exp->add_option("--anchor", exp_anchor, "rescale constant (1.0 = no rescale)");

  auto* erf = app.add_subcommand("erf", "effective receptive field probe");
  std::string erf_ckpt, erf_probe = "backbone", erf_format = "pgm";
  int erf_samples = 64;
  int64_t erf_input = 0;
  erf->add_option("--ckpt", erf_ckpt, "checkpoint (random init from config when omitted)");
  erf->add_option("--probe", erf_probe, "backbone|student")
      ->check(CLI::IsMember({"backbone", "student"}));
  erf->add_option("--format", erf_format, "pgm|csv")
      ->check(CLI::IsMember({"pgm", "csv"}));
  erf->add_option("--samples", erf_samples, "probe sample count");
  erf->add_option("--input-size", erf_input, "input side length (config image size otherwise)");

  auto* ver = app.add_subcommand("verify",
                                 "run the invariance, gradient, and oracle suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (!emit_config_path.empty()) {
      emit_default_config(emit_config_path);
      std::printf("default config written to %s\n", emit_config_path.c_str());
      return 0;
    }
    if (gen->parsed()) return run_gen_data(g);
    if (pre->parsed()) return run_pretrain(g, pre_data, pre_random, pre_metrics);
    if (adapt->parsed())
      return run_adapt_head(g, adapt_in, drop_last_bn, adapt_tol, adapt_trials, adapt_report);
    if (dist->parsed())
      return run_distill(g, dist_data, dist_teacher, dist_level, dist_symmetric,
                         dist_resume, dist_no_head, dist_keep_bn);
    if (exp->parsed()) return run_export(g, exp_in, exp_anchor);
    if (erf->parsed())
      return run_erf(g, erf_ckpt, erf_probe, erf_format, erf_samples, erf_input);
    if (ver->parsed()) return run_verify(g);
    std::cerr << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace pcd
