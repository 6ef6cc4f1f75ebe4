#include "gklsbi/harness.hpp"
#include "gklsbi/log.hpp"
#include "gklsbi/objectives.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace gklsbi;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Tensor& t) {
  py::array_t<double> out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const Array& a) {
  if (a.ndim() == 1) return Tensor(1, a.shape(0), std::vector<double>(a.data(), a.data() + a.size()));
  if (a.ndim() != 2) throw std::invalid_argument("expected a 1D or 2D array");
  return Tensor(a.shape(0), a.shape(1), std::vector<double>(a.data(), a.data() + a.size()));
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

RunConfig config_from_ini(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  boost::property_tree::read_ini(in, tree);
  RunConfig cfg = parse_run_config(tree);
  cfg.validate();
  return cfg;
}

// Checkpoint plus the settings used to sample and evaluate it.
struct Model {
  Surrogate surrogate;
  std::map<std::string, std::string> meta;
  RunConfig cfg;
};

Model open_model(const std::filesystem::path& path, const std::string& ini) {
  LoadedCheckpoint ck = load_checkpoint(path);
  RunConfig cfg = ini.empty() ? RunConfig{} : config_from_ini(ini);
  if (ini.empty()) {
    if (auto it = ck.meta.find("task"); it != ck.meta.end()) cfg.task = it->second;
    if (auto it = ck.meta.find("model"); it != ck.meta.end()) cfg.model = parse_model_kind(it->second);
    if (auto it = ck.meta.find("seed"); it != ck.meta.end()) cfg.seed = std::stoull(it->second);
  }
  return {std::move(ck.surrogate), {ck.meta.begin(), ck.meta.end()}, cfg};
}

py::dict row_dict(const ResultRow& r) {
  py::dict d;
  d["task"] = r.task;
  d["model"] = r.model;
  d["budget"] = r.budget;
  d["seed"] = r.seed;
  d["observation"] = r.observation;
  d["c2st"] = r.c2st;
  d["wall_seconds"] = r.wall_seconds;
  d["flags"] = r.flags;
  return d;
}

py::dict summary_dict(const SummaryRow& s) {
  py::dict d;
  d["task"] = s.task;
  d["model"] = s.model;
  d["budget"] = s.budget;
  d["seeds"] = s.seeds;
  d["mean_c2st"] = s.mean;
  d["ci95_half_width"] = s.ci95;
  return d;
}

}  // namespace

PYBIND11_MODULE(_gklsbi, m) {
  m.doc() = "Posterior surrogates trained from simulator draws";

  m.def("set_log_level", [](const std::string& level) { set_log_level(parse_log_level(level)); });

  m.def(
      "gkl_grid",
      [](const Array& p, const Array& q, double cell) { return gkl_grid({to_vector(p), to_vector(q), cell}); },
      py::arg("p"), py::arg("q"), py::arg("cell_volume"));
  m.def(
      "kl_grid",
      [](const Array& p, const Array& q, double cell) { return kl_grid({to_vector(p), to_vector(q), cell}); },
      py::arg("p"), py::arg("q"), py::arg("cell_volume"));

  m.def("task_names", &task_names);
  m.def(
      "observation",
      [](const std::string& task, int index) {
        const Observation o = observation(get_task(task), index);
        return py::make_tuple(to_numpy(Tensor::row(o.theta_true)), to_numpy(Tensor::row(o.x)));
      },
      py::arg("task"), py::arg("index"), "(theta_true, x) as 1 x d arrays");
  m.def(
      "simulate",
      [](const std::string& task, std::size_t n, std::uint64_t seed) {
        const JointSample j = simulate_joint(get_task(task), n, seed);
        return py::make_tuple(to_numpy(j.theta), to_numpy(j.x));
      },
      py::arg("task"), py::arg("n"), py::arg("seed"));
  m.def(
      "reference_samples",
      [](const std::string& task, int obs, std::size_t n) { return to_numpy(reference_samples(get_task(task), obs, n)); },
      py::arg("task"), py::arg("observation"), py::arg("n") = 10000);
  m.def(
      "c2st",
      [](const Array& p, const Array& q, std::uint64_t seed) {
        Rng rng = make_stream(seed, "c2st");
        const C2stResult r = c2st(from_numpy(p), from_numpy(q), {}, rng);
        return r.accuracy;
      },
      py::arg("p"), py::arg("q"), py::arg("seed") = 0, "mean held-out classifier accuracy (unfolded)");

  m.def(
      "train",
      [](const std::string& ini, const std::filesystem::path& checkpoint) {
        RunConfig cfg = config_from_ini(ini);
        TrainResult res = [&] {
          py::gil_scoped_release release;
          return train(cfg);
        }();
        save_checkpoint(checkpoint, res.surrogate,
                        {{"task", cfg.task},
                         {"model", model_kind_name(cfg.model)},
                         {"budget", std::to_string(cfg.budget)},
                         {"seed", std::to_string(cfg.seed)},
                         {"best_epoch", std::to_string(res.best_epoch)},
                         {"best_val_loss", std::to_string(res.best_val_loss)}});
        py::dict d;
        d["epochs"] = res.epochs;
        d["steps"] = res.steps;
        d["batch_size"] = res.batch_size;
        d["best_epoch"] = res.best_epoch;
        d["best_val_loss"] = res.best_val_loss;
        d["stopped_early"] = res.stopped_early;
        d["lr_halved"] = res.lr_halved;
        d["wall_seconds"] = res.wall_seconds;
        py::list curve;
        for (const auto& e : res.curve) curve.append(py::make_tuple(e.epoch, e.train_loss, e.val_loss, e.lr));
        d["curve"] = curve;
        return d;
      },
      py::arg("config"), py::arg("checkpoint"), "train from INI text and write a checkpoint");

  py::class_<Model>(m, "Model")
      .def(py::init(&open_model), py::arg("checkpoint"), py::arg("config") = "")
      .def_property_readonly("kind", [](const Model& s) { return surrogate_kind_name(s.surrogate.kind()); })
      .def_property_readonly("meta", [](const Model& s) { return s.meta; })
      .def_property_readonly("task", [](const Model& s) { return s.cfg.task; })
      .def(
          "log_unnorm",
          [](const Model& s, const Array& theta, const Array& x) {
            const Tensor t = from_numpy(theta);
            Tensor xs = from_numpy(x);
            if (xs.rows() == 1 && t.rows() > 1) xs = xs.repeat_row(t.rows());
            return to_numpy(log_unnorm(s.surrogate, t, xs));
          },
          py::arg("theta"), py::arg("x"))
      .def(
          "sample",
          [](const Model& s, const Array& x, std::size_t n, std::uint64_t seed, bool base_only) {
            const std::vector<double> xv = to_vector(x);
            Rng rng = make_stream(seed, "sample");
            PosteriorDraw d;
            {
              py::gil_scoped_release release;
              d = draw_posterior(s.surrogate, xv, n, s.cfg, base_only, rng);
            }
            return py::make_tuple(to_numpy(d.samples), d.diagnostics.method, d.flags);
          },
          py::arg("x"), py::arg("n"), py::arg("seed") = 0, py::arg("base_only") = false,
          "(samples, method, flags)")
      .def(
          "evaluate",
          [](const Model& s, int obs, bool base_only) {
            EvalOutcome e;
            {
              py::gil_scoped_release release;
              e = evaluate(s.surrogate, get_task(s.cfg.task), obs, s.cfg, base_only);
            }
            py::dict d;
            d["observation"] = e.observation;
            d["c2st"] = e.c2st;
            d["method"] = e.diagnostics.method;
            d["flags"] = e.flags;
            d["wall_seconds"] = e.wall_seconds;
            return d;
          },
          py::arg("observation"), py::arg("base_only") = false);

  m.def(
      "run_benchmark",
      [](const std::filesystem::path& matrix, const std::filesystem::path& out_dir, std::size_t workers) {
        const Matrix mx = load_matrix(matrix);
        BenchmarkReport rep;
        {
          py::gil_scoped_release release;
          rep = run_benchmark(mx, out_dir, workers);
        }
        py::dict d;
        d["cells"] = rep.cells;
        d["ran"] = rep.ran;
        d["skipped"] = rep.skipped;
        d["failed"] = rep.failed;
        py::list summary;
        for (const auto& s : rep.summary) summary.append(summary_dict(s));
        d["summary"] = summary;
        return d;
      },
      py::arg("matrix"), py::arg("out_dir"), py::arg("workers") = 1);
  m.def(
      "read_results",
      [](const std::filesystem::path& path) {
        py::list out;
        for (const auto& r : read_results(path)) out.append(row_dict(r));
        return out;
      },
      py::arg("path"));
  m.def(
      "summarize",
      [](const std::filesystem::path& results) {
        py::list out;
        for (const auto& s : summarize(read_results(results))) out.append(summary_dict(s));
        return out;
      },
      py::arg("results_csv"));
  m.def(
      "load_samples",
      [](const std::filesystem::path& path) {
        const SampleSet s = load_samples(path);
        return py::make_tuple(s.task, s.model, s.observation, to_numpy(s.samples));
      },
      py::arg("path"), "(task, model, observation, samples)");
}
