#pragma once

#include "gklsbi/io.hpp"
#include "gklsbi/metrics.hpp"
#include "gklsbi/samplers.hpp"
#include "gklsbi/surrogates.hpp"
#include "gklsbi/tasks.hpp"

#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace gklsbi {

enum class ModelKind { flow, ratio, ratio_big, hybrid, hybrid_big };

ModelKind parse_model_kind(const std::string& name);
const char* model_kind_name(ModelKind kind);
SurrogateKind surrogate_kind_of(ModelKind kind);
std::vector<std::size_t> default_ratio_hidden(ModelKind kind);

struct TrainSettings {
  std::size_t batch_size = 16384;  // clamped to the training split
  double lr = 1e-3;
  double weight_decay = 1e-3;
  bool amsgrad = true;
  std::size_t max_epochs = 2000;
  double warmup_fraction = 0.1;
  double start_lr = 1e-8;
  double final_lr = 1e-8;
  double min_delta = 0.003;
  std::size_t patience = 322;
  std::size_t contrastive_sets = 1;
  // Source of x' for the ratio loss: "permutation" of the batch, or
  // "simulation" (fresh prior draws pushed through the simulator; these cost
  // extra simulator calls beyond the budget).
  std::string contrast = "permutation";
  // Only update flow weights; the ratio stays at its (zero) initialization.
  bool freeze_ratio = false;
};

struct EvalSettings {
  std::size_t n_samples = 10000;
  std::size_t n_reference = 10000;
  // Hybrids: sample the base flow alone.
  bool base_only = false;
};

struct RunConfig {
  std::string task = "two_moons";
  ModelKind model = ModelKind::flow;
  std::size_t budget = 10000;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  std::vector<int> observations = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::string dataset;     // optional input dataset file
  std::string checkpoint;  // output of `train`

  TrainSettings train;
  FlowConfig flow;
  std::optional<std::vector<std::size_t>> ratio_hidden;  // defaults by model
  std::vector<std::size_t> ratio_embedding_hidden = {64};
  EvalSettings eval;
  RejectionConfig rejection;
  MhConfig mh;
  C2stConfig c2st;

  void validate() const;
  SurrogateSpec surrogate_spec() const;
};

// INI text with sections run/train/flow/ratio/eval/rejection/mh/c2st; keys
// are the field names above. Unknown keys are errors.
RunConfig parse_run_config(const boost::property_tree::ptree& tree, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_to_ini(const RunConfig& cfg);

Dataset generate_dataset(const TaskSpec& task, std::size_t budget, std::uint64_t seed);

struct Split {
  Tensor train_theta, train_x;
  Tensor val_theta, val_x;
};

// First `budget` rows of the dataset, shuffled with the run seed, then cut
// into validation and training parts.
Split split_dataset(const Dataset& data, std::size_t budget, double validation_fraction, std::uint64_t seed);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // at the last step of the epoch
};

class TrainingFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  Surrogate surrogate;  // best validation weights
  std::vector<EpochRecord> curve;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::size_t epochs = 0;
  std::size_t steps = 0;
  std::size_t batch_size = 0;
  bool stopped_early = false;
  bool lr_halved = false;
  std::size_t clamped = 0;
  double wall_seconds = 0.0;
};

TrainResult train(const RunConfig& cfg, const Dataset* data = nullptr);

// Mean loss over a split, in chunks, with fixed noise for the contrastive
// parts so values are comparable across epochs.
double validation_loss(const Surrogate& q, const Tensor& theta, const Tensor& x, std::size_t contrastive_sets,
                       std::uint64_t seed);

// Reference posterior draws for an observation, fixed per (task, observation).
Tensor reference_samples(const TaskSpec& task, int observation, std::size_t n);

struct SamplerDiagnostics {
  std::string method;  // direct | rejection | mh
  double acceptance = 1.0;
  double log_bound = 0.0;
  std::size_t bound_violations = 0;
  double max_rhat = 0.0;
  double step_size = 0.0;
};

struct PosteriorDraw {
  Tensor samples;
  SamplerDiagnostics diagnostics;
  std::vector<std::string> flags;
};

PosteriorDraw draw_posterior(const Surrogate& q, std::span<const double> x, std::size_t n, const RunConfig& cfg,
                             bool base_only, Rng& rng);

struct EvalOutcome {
  int observation = 0;
  double c2st = 0.5;  // folded
  double raw_accuracy = 0.5;
  double wall_seconds = 0.0;
  SamplerDiagnostics diagnostics;
  std::vector<std::string> flags;
  Tensor samples;
};

// `reference` may be supplied to avoid recomputing it.
EvalOutcome evaluate(const Surrogate& q, const TaskSpec& task, int observation, const RunConfig& cfg, bool base_only,
                     const Tensor* reference = nullptr);

struct ResultRow {
  std::string task;
  std::string model;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  int observation = 0;
  double c2st = 0.0;
  double wall_seconds = 0.0;
  std::string flags;
};

inline constexpr const char* kResultsHeader = "task,model,budget,seed,observation,c2st,wall_seconds,flags";

std::string format_result_row(const ResultRow& row);
ResultRow parse_result_row(const std::string& line);
std::vector<ResultRow> read_results(const std::filesystem::path& path);
void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
std::string join_flags(const std::vector<std::string>& flags);

// Two-sided t-interval half width: t_{level, n-1} * sd / sqrt(n). Zero for n < 2.
double ci_half_width(const std::vector<double>& values, double level = 0.95);

struct SummaryRow {
  std::string task;
  std::string model;
  std::size_t budget = 0;
  std::size_t seeds = 0;
  double mean = 0.0;
  double ci95 = 0.0;
};

// Per (task, model, budget): each seed contributes the mean over its
// observations; failed rows (non-finite c2st) are skipped.
std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows);
void write_summary(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);

struct Matrix {
  std::vector<std::string> tasks;
  std::vector<ModelKind> models;
  std::vector<std::size_t> budgets;
  std::vector<std::uint64_t> seeds;
  bool base_only_rows = true;  // extra "<model>_base" rows for hybrids
  bool save_samples = false;
  RunConfig base;  // shared overrides

  void validate() const;
  std::vector<RunConfig> cells() const;
};

Matrix load_matrix(const std::filesystem::path& path);
Matrix parse_matrix(const boost::property_tree::ptree& tree);

std::string cell_id(const RunConfig& cfg);

struct BenchmarkReport {
  std::size_t cells = 0;
  std::size_t ran = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
  std::vector<ResultRow> rows;
  std::vector<SummaryRow> summary;
};

// Runs every cell not yet marked done under out_dir/cells/<id>/, then merges
// per-cell rows into out_dir/results.csv and writes out_dir/summary.csv.
BenchmarkReport run_benchmark(const Matrix& matrix, const std::filesystem::path& out_dir, std::size_t workers);

// Train and evaluate one cell into `cell_dir`; returns its rows.
std::vector<ResultRow> run_cell(const RunConfig& cfg, const std::filesystem::path& cell_dir,
                                const std::filesystem::path& reference_dir, bool base_only_rows, bool save_samples);

}  // namespace gklsbi
