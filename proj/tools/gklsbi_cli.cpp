#include "gklsbi/harness.hpp"
#include "gklsbi/log.hpp"

#include "CLI11.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <iostream>

using namespace gklsbi;

namespace {

// Settings for sample/evaluate: checkpoint metadata, then an optional config.
RunConfig config_for_checkpoint(const LoadedCheckpoint& ck, const std::string& config_path) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = load_run_config(config_path);
  if (auto it = ck.meta.find("task"); it != ck.meta.end() && config_path.empty()) cfg.task = it->second;
  if (auto it = ck.meta.find("model"); it != ck.meta.end() && config_path.empty()) {
    cfg.model = parse_model_kind(it->second);
  }
  if (auto it = ck.meta.find("seed"); it != ck.meta.end() && config_path.empty()) cfg.seed = std::stoull(it->second);
  return cfg;
}

int run_report(const std::string& in, const std::string& out) {
  const char* env = std::getenv("GKLSBI_PYTHON");
  const std::string python = env && *env ? env : "python3";
  const pid_t pid = fork();
  if (pid < 0) {
    std::perror("fork");
    return 1;
  }
  if (pid == 0) {
    execlp(python.c_str(), python.c_str(), "-m", "gklsbi_report", "--in", in.c_str(), "--out", out.c_str(),
           static_cast<char*>(nullptr));
    std::perror(("cannot run " + python).c_str());
    _exit(127);
  }
  int status = 0;
  waitpid(pid, &status, 0);
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"posterior surrogates: training, sampling and benchmarking"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "debug|info|warning|error|quiet")->capture_default_str();

  // simulate
  auto* sim = app.add_subcommand("simulate", "draw a joint (theta, x) dataset");
  std::string sim_task, sim_out;
  std::size_t sim_budget = 0;
  std::uint64_t sim_seed = 0;
  sim->add_option("--task", sim_task)->required();
  sim->add_option("--budget", sim_budget)->required();
  sim->add_option("--seed", sim_seed)->required();
  sim->add_option("--out", sim_out)->required();

  // train
  auto* tr = app.add_subcommand("train", "train a surrogate from a config file");
  std::string tr_config, tr_out, tr_curve;
  tr->add_option("--config", tr_config)->required()->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "checkpoint path (overrides run.checkpoint)");
  tr->add_option("--curve", tr_curve, "write the per-epoch loss curve as CSV");

  // sample
  auto* sm = app.add_subcommand("sample", "draw posterior samples from a checkpoint");
  std::string sm_ckpt, sm_out, sm_config;
  int sm_obs = 1;
  std::size_t sm_n = 10000;
  bool sm_base = false;
  std::uint64_t sm_seed = 0;
  sm->add_option("--checkpoint", sm_ckpt)->required()->check(CLI::ExistingFile);
  sm->add_option("--observation", sm_obs)->required();
  sm->add_option("--n", sm_n)->capture_default_str();
  sm->add_option("--out", sm_out)->required();
  sm->add_option("--config", sm_config, "sampler settings");
  sm->add_option("--seed", sm_seed)->capture_default_str();
  sm->add_flag("--base-only", sm_base, "hybrids: sample the base flow only");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "C2ST of a checkpoint against reference samples");
  std::string ev_ckpt, ev_task, ev_config;
  std::vector<int> ev_obs;
  bool ev_base = false;
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--task", ev_task);
  ev->add_option("--obs", ev_obs, "observation indices")->required();
  ev->add_option("--config", ev_config, "evaluation settings");
  ev->add_flag("--base-only", ev_base);

  // benchmark
  auto* bm = app.add_subcommand("benchmark", "run a tasks x models x budgets x seeds sweep");
  std::string bm_matrix, bm_out;
  std::size_t bm_workers = 1;
  bm->add_option("--matrix", bm_matrix)->required()->check(CLI::ExistingFile);
  bm->add_option("--out-dir", bm_out)->required();
  bm->add_option("--workers", bm_workers)->capture_default_str();

  // report
  auto* rp = app.add_subcommand("report", "render plots from benchmark output (python gklsbi_report)");
  std::string rp_in, rp_out;
  rp->add_option("--in", rp_in)->required();
  rp->add_option("--out", rp_out)->required();

  // observations
  auto* ob = app.add_subcommand("observations", "write the 10 fixed observations of a task as text files");
  std::string ob_task, ob_out;
  ob->add_option("--task", ob_task)->required();
  ob->add_option("--out-dir", ob_out)->required();

  // reference
  auto* rf = app.add_subcommand("reference", "write reference posterior samples");
  std::string rf_task, rf_out;
  int rf_obs = 1;
  std::size_t rf_n = 10000;
  rf->add_option("--task", rf_task)->required();
  rf->add_option("--obs", rf_obs)->required();
  rf->add_option("--n", rf_n)->capture_default_str();
  rf->add_option("--out", rf_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    set_log_level(parse_log_level(log_level));

    if (*sim) {
      save_dataset(sim_out, generate_dataset(get_task(sim_task), sim_budget, sim_seed));
    } else if (*tr) {
      RunConfig cfg = load_run_config(tr_config);
      if (!tr_out.empty()) cfg.checkpoint = tr_out;
      if (cfg.checkpoint.empty()) throw std::invalid_argument("no checkpoint path: set run.checkpoint or --out");
      const TrainResult res = train(cfg);
      save_checkpoint(cfg.checkpoint, res.surrogate,
                      {{"task", cfg.task},
                       {"model", model_kind_name(cfg.model)},
                       {"budget", std::to_string(cfg.budget)},
                       {"seed", std::to_string(cfg.seed)},
                       {"best_epoch", std::to_string(res.best_epoch)},
                       {"best_val_loss", std::to_string(res.best_val_loss)}});
      if (!tr_curve.empty()) {
        std::string text = "epoch,train_loss,val_loss,lr\n";
        for (const auto& e : res.curve) {
          text += std::to_string(e.epoch) + "," + std::to_string(e.train_loss) + "," + std::to_string(e.val_loss) +
                  "," + std::to_string(e.lr) + "\n";
        }
        write_file_atomic(tr_curve, text);
      }
      std::printf("epochs %zu  steps %zu  batch %zu  best_epoch %zu  best_val_loss %.6f  wall %.1fs%s\n", res.epochs,
                  res.steps, res.batch_size, res.best_epoch, res.best_val_loss, res.wall_seconds,
                  res.lr_halved ? "  (lr halved)" : "");
    } else if (*sm) {
      const LoadedCheckpoint ck = load_checkpoint(sm_ckpt);
      RunConfig cfg = config_for_checkpoint(ck, sm_config);
      const TaskSpec& task = get_task(cfg.task);
      const Observation obs = observation(task, sm_obs);
      Rng rng = make_stream(sm_seed, "sample", static_cast<std::uint64_t>(sm_obs));
      const PosteriorDraw draw = draw_posterior(ck.surrogate, obs.x, sm_n, cfg, sm_base, rng);
      const std::string model = std::string(model_kind_name(cfg.model)) + (sm_base ? "_base" : "");
      save_samples(sm_out, {task.name, model, sm_obs, draw.samples});
      std::printf("%zu samples via %s%s%s\n", draw.samples.rows(), draw.diagnostics.method.c_str(),
                  draw.flags.empty() ? "" : "  flags ", join_flags(draw.flags).c_str());
    } else if (*ev) {
      const LoadedCheckpoint ck = load_checkpoint(ev_ckpt);
      RunConfig cfg = config_for_checkpoint(ck, ev_config);
      if (!ev_task.empty()) cfg.task = ev_task;
      const TaskSpec& task = get_task(cfg.task);
      std::printf("observation,c2st,method,flags\n");
      for (int o : ev_obs) {
        const EvalOutcome e = evaluate(ck.surrogate, task, o, cfg, ev_base);
        std::printf("%d,%.4f,%s,%s\n", o, e.c2st, e.diagnostics.method.c_str(), join_flags(e.flags).c_str());
        std::fflush(stdout);
      }
    } else if (*bm) {
      const BenchmarkReport rep = run_benchmark(load_matrix(bm_matrix), bm_out, bm_workers);
      std::printf("cells %zu  ran %zu  skipped %zu  failed %zu\n", rep.cells, rep.ran, rep.skipped, rep.failed);
      for (const auto& s : rep.summary) {
        std::printf("%-24s %-12s %7zu  seeds %zu  c2st %.4f +- %.4f\n", s.task.c_str(), s.model.c_str(), s.budget,
                    s.seeds, s.mean, s.ci95);
      }
      return rep.failed ? 2 : 0;
    } else if (*rp) {
      return run_report(rp_in, rp_out);
    } else if (*ob) {
      const TaskSpec& task = get_task(ob_task);
      for (int i = 1; i <= kObservationCount; ++i) {
        const Observation obs = observation(task, i);
        const std::filesystem::path dir(ob_out);
        save_vector_text(dir / (task.name + "_obs" + std::to_string(i) + "_x.txt"), obs.x);
        save_vector_text(dir / (task.name + "_obs" + std::to_string(i) + "_theta.txt"), obs.theta_true);
      }
    } else if (*rf) {
      const TaskSpec& task = get_task(rf_task);
      save_samples(rf_out, {task.name, "reference", rf_obs, reference_samples(task, rf_obs, rf_n)});
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
