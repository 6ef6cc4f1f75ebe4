#include "gklsbi/harness.hpp"

#include "gklsbi/log.hpp"
#include "gklsbi/objectives.hpp"
#include "gklsbi/optim.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <boost/property_tree/ini_parser.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace gklsbi {

namespace {

namespace pt = boost::property_tree;
using Clock = std::chrono::steady_clock;

constexpr std::size_t kEvalChunk = 16384;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& text, char sep = ',') {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string tok;
  while (std::getline(in, tok, sep)) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& s) {
  const std::string t = trim(s);
  if (t == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  const std::string t = trim(s);
  // accept 1e4 style budgets when they are exact integers
  if (t.find_first_of("eE.") != std::string::npos) {
    const double d = to_double(t);
    if (d < 0 || d != std::floor(d) || d > 1e18) throw std::invalid_argument("not a non-negative integer: '" + s + "'");
    return static_cast<std::uint64_t>(d);
  }
  std::uint64_t v = 0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw std::invalid_argument("not a non-negative integer: '" + s + "'");
  }
  return v;
}

bool to_bool(const std::string& s) {
  const std::string t = trim(s);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw std::invalid_argument("not a boolean: '" + s + "'");
}

// "1-10" or "1,3,5" or mixes like "1-3,7"
std::vector<int> to_index_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& part : split_list(s)) {
    const auto dash = part.find('-', 1);
    if (dash == std::string::npos) {
      out.push_back(static_cast<int>(to_u64(part)));
    } else {
      const int lo = static_cast<int>(to_u64(part.substr(0, dash)));
      const int hi = static_cast<int>(to_u64(part.substr(dash + 1)));
      if (hi < lo) throw std::invalid_argument("bad range " + part);
      for (int i = lo; i <= hi; ++i) out.push_back(i);
    }
  }
  return out;
}

std::string from_index_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <typename T>
std::string to_text(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, double>) {
    return fmt(v);
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
    return join_sizes(v);
  } else {
    return std::to_string(v);
  }
}

template <typename T>
void from_text(const std::string& s, T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    v = to_bool(s);
  } else if constexpr (std::is_same_v<T, double>) {
    v = to_double(s);
  } else if constexpr (std::is_same_v<T, std::string>) {
    v = trim(s);
  } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
    v = parse_sizes(s);
  } else {
    v = static_cast<T>(to_u64(s));
  }
}

struct Field {
  std::string key;  // section.name
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define GKLSBI_FIELD(key, member)                                                   \
  Field {                                                                           \
    key, [](const RunConfig& c) { return to_text(c.member); },                      \
        [](RunConfig& c, const std::string& v) { from_text(v, c.member); }          \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      GKLSBI_FIELD("run.task", task),
      Field{"run.model", [](const RunConfig& c) { return std::string(model_kind_name(c.model)); },
            [](RunConfig& c, const std::string& v) { c.model = parse_model_kind(trim(v)); }},
      GKLSBI_FIELD("run.budget", budget),
      GKLSBI_FIELD("run.seed", seed),
      GKLSBI_FIELD("run.validation_fraction", validation_fraction),
      Field{"run.observations", [](const RunConfig& c) { return from_index_list(c.observations); },
            [](RunConfig& c, const std::string& v) { c.observations = to_index_list(v); }},
      GKLSBI_FIELD("run.dataset", dataset),
      GKLSBI_FIELD("run.checkpoint", checkpoint),
      GKLSBI_FIELD("train.batch_size", train.batch_size),
      GKLSBI_FIELD("train.lr", train.lr),
      GKLSBI_FIELD("train.weight_decay", train.weight_decay),
      GKLSBI_FIELD("train.amsgrad", train.amsgrad),
      GKLSBI_FIELD("train.max_epochs", train.max_epochs),
      GKLSBI_FIELD("train.warmup_fraction", train.warmup_fraction),
      GKLSBI_FIELD("train.start_lr", train.start_lr),
      GKLSBI_FIELD("train.final_lr", train.final_lr),
      GKLSBI_FIELD("train.min_delta", train.min_delta),
      GKLSBI_FIELD("train.patience", train.patience),
      GKLSBI_FIELD("train.contrastive_sets", train.contrastive_sets),
      GKLSBI_FIELD("train.contrast", train.contrast),
      GKLSBI_FIELD("train.freeze_ratio", train.freeze_ratio),
      Field{"flow.base", [](const RunConfig& c) { return std::string(base_kind_name(c.flow.base)); },
            [](RunConfig& c, const std::string& v) { c.flow.base = parse_base_kind(trim(v)); }},
      GKLSBI_FIELD("flow.transforms", flow.transforms),
      GKLSBI_FIELD("flow.hidden", flow.hidden),
      GKLSBI_FIELD("flow.embedding_hidden", flow.embedding_hidden),
      Field{"ratio.hidden", [](const RunConfig& c) { return c.ratio_hidden ? join_sizes(*c.ratio_hidden) : ""; },
            [](RunConfig& c, const std::string& v) {
              if (trim(v).empty()) {
                c.ratio_hidden.reset();
              } else {
                c.ratio_hidden = parse_sizes(v);
              }
            }},
      GKLSBI_FIELD("ratio.embedding_hidden", ratio_embedding_hidden),
      GKLSBI_FIELD("eval.n_samples", eval.n_samples),
      GKLSBI_FIELD("eval.n_reference", eval.n_reference),
      GKLSBI_FIELD("eval.base_only", eval.base_only),
      GKLSBI_FIELD("rejection.bound_samples", rejection.bound_samples),
      GKLSBI_FIELD("rejection.log_margin", rejection.log_margin),
      GKLSBI_FIELD("rejection.max_attempts", rejection.max_attempts),
      GKLSBI_FIELD("rejection.batch", rejection.batch),
      GKLSBI_FIELD("mh.chains", mh.chains),
      GKLSBI_FIELD("mh.steps", mh.steps),
      GKLSBI_FIELD("mh.burn_in", mh.burn_in),
      GKLSBI_FIELD("mh.thin", mh.thin),
      GKLSBI_FIELD("mh.step_size", mh.step_size),
      GKLSBI_FIELD("mh.accept_low", mh.accept_low),
      GKLSBI_FIELD("mh.accept_high", mh.accept_high),
      GKLSBI_FIELD("mh.tune_rounds", mh.tune_rounds),
      GKLSBI_FIELD("mh.tune_steps", mh.tune_steps),
      GKLSBI_FIELD("mh.init_attempts", mh.init_attempts),
      GKLSBI_FIELD("c2st.folds", c2st.folds),
      GKLSBI_FIELD("c2st.hidden_factor", c2st.hidden_factor),
      GKLSBI_FIELD("c2st.max_epochs", c2st.max_epochs),
      GKLSBI_FIELD("c2st.batch_size", c2st.batch_size),
      GKLSBI_FIELD("c2st.lr", c2st.lr),
      GKLSBI_FIELD("c2st.weight_decay", c2st.weight_decay),
      GKLSBI_FIELD("c2st.validation_fraction", c2st.validation_fraction),
      GKLSBI_FIELD("c2st.patience", c2st.patience),
      GKLSBI_FIELD("c2st.min_delta", c2st.min_delta),
      GKLSBI_FIELD("c2st.standardize", c2st.standardize),
  };
  return table;
}

#undef GKLSBI_FIELD

void apply_tree(RunConfig& cfg, const pt::ptree& tree, const std::vector<std::string>& skip_sections) {
  std::map<std::string, const Field*> index;
  for (const auto& f : fields()) index[f.key] = &f;
  for (const auto& [section, body] : tree) {
    if (std::find(skip_sections.begin(), skip_sections.end(), section) != skip_sections.end()) continue;
    if (body.empty()) throw std::invalid_argument("config key outside a section: " + section);
    for (const auto& [key, value] : body) {
      const auto it = index.find(section + "." + key);
      if (it == index.end()) throw std::invalid_argument("unknown config key: " + section + "." + key);
      try {
        it->second->set(cfg, value.data());
      } catch (const std::exception& e) {
        throw std::invalid_argument(section + "." + key + ": " + e.what());
      }
    }
  }
}

pt::ptree read_ini_file(const std::filesystem::path& path) {
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("cannot read config: ") + e.what());
  }
  return tree;
}

// Equal-ish partition of n rows into ceil(n / size) groups of at most `size`.
std::vector<std::size_t> chunk_sizes(std::size_t n, std::size_t size) {
  const std::size_t count = (n + size - 1) / size;
  std::vector<std::size_t> out(count, n / count);
  for (std::size_t i = 0; i < n % count; ++i) ++out[i];
  return out;
}

// Batch boundaries for an epoch: full batches plus the remainder, folded
// into the last batch when it is too small for a derangement.
std::vector<std::size_t> batch_sizes(std::size_t n, std::size_t batch) {
  std::vector<std::size_t> out(n / batch, batch);
  const std::size_t rest = n % batch;
  if (rest >= 2 || out.empty()) {
    out.push_back(rest);
  } else if (rest) {
    out.back() += rest;
  }
  return out;
}

std::string sanitize_flag(std::string s) {
  for (char& c : s) {
    if (c == ',' || c == '\n' || c == '\r' || c == ';' || c == '"') c = ' ';
  }
  return s;
}

std::string sanitize_field(std::string s) {
  for (char& c : s) {
    if (c == ',' || c == '\n' || c == '\r' || c == '"') c = ' ';
  }
  return s;
}

}  // namespace

// ---- config ----

ModelKind parse_model_kind(const std::string& name) {
  if (name == "flow") return ModelKind::flow;
  if (name == "ratio") return ModelKind::ratio;
  if (name == "ratio_big") return ModelKind::ratio_big;
  if (name == "hybrid") return ModelKind::hybrid;
  if (name == "hybrid_big") return ModelKind::hybrid_big;
  throw std::invalid_argument("unknown model kind: " + name);
}

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::flow: return "flow";
    case ModelKind::ratio: return "ratio";
    case ModelKind::ratio_big: return "ratio_big";
    case ModelKind::hybrid: return "hybrid";
    case ModelKind::hybrid_big: return "hybrid_big";
  }
  return "?";
}

SurrogateKind surrogate_kind_of(ModelKind kind) {
  switch (kind) {
    case ModelKind::flow: return SurrogateKind::flow;
    case ModelKind::ratio:
    case ModelKind::ratio_big: return SurrogateKind::ratio;
    case ModelKind::hybrid:
    case ModelKind::hybrid_big: return SurrogateKind::hybrid;
  }
  throw std::logic_error("unreachable model kind");
}

std::vector<std::size_t> default_ratio_hidden(ModelKind kind) {
  return kind == ModelKind::ratio_big || kind == ModelKind::hybrid_big ? std::vector<std::size_t>{256, 256}
                                                                         : std::vector<std::size_t>{128};
}

void RunConfig::validate() const {
  const TaskSpec& spec = get_task(task);
  (void)spec;
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw std::invalid_argument("validation_fraction must be in (0, 1)");
  }
  const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(budget)));
  if (n_val < 2 || budget < n_val + 2) {
    throw std::invalid_argument("budget " + std::to_string(budget) +
                                " leaves no room for a validation split and one training batch");
  }
  if (train.batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  if (train.max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (!(train.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (train.contrastive_sets < 1) throw std::invalid_argument("contrastive_sets must be >= 1");
  if (train.contrast != "permutation" && train.contrast != "simulation") {
    throw std::invalid_argument("train.contrast must be permutation or simulation");
  }
  if (train.freeze_ratio && surrogate_kind_of(model) != SurrogateKind::hybrid) {
    throw std::invalid_argument("freeze_ratio applies to hybrid models only");
  }
  if (eval.n_samples < 1 || eval.n_reference < 1) throw std::invalid_argument("sample counts must be >= 1");
  for (int o : observations) {
    if (o < 1 || o > kObservationCount) throw std::invalid_argument("observation index out of 1..10");
  }
  rejection.validate();
  mh.validate();
  c2st.validate();
}

SurrogateSpec RunConfig::surrogate_spec() const {
  const TaskSpec& spec = get_task(task);
  SurrogateSpec s;
  s.kind = surrogate_kind_of(model);
  s.theta_dim = spec.theta_dim;
  s.x_dim = spec.x_dim;
  s.prior = spec.prior;
  s.flow = flow;
  s.ratio_hidden = ratio_hidden ? *ratio_hidden : default_ratio_hidden(model);
  s.ratio_embedding_hidden = ratio_embedding_hidden;
  return s;
}

RunConfig parse_run_config(const pt::ptree& tree, RunConfig base) {
  apply_tree(base, tree, {});
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig cfg = parse_run_config(read_ini_file(path));
  cfg.validate();
  return cfg;
}

std::string run_config_to_ini(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + ("[" + sec + "]\n");
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

// ---- training ----

Dataset generate_dataset(const TaskSpec& task, std::size_t budget, std::uint64_t seed) {
  JointSample joint = simulate_joint(task, budget, seed);
  return {task.name, seed, std::move(joint.theta), std::move(joint.x)};
}

double validation_loss(const Surrogate& q, const Tensor& theta, const Tensor& x, std::size_t contrastive_sets,
                       std::uint64_t seed) {
  Rng rng = make_stream(seed, "validation");
  double total = 0.0;
  std::size_t begin = 0;
  for (std::size_t m : chunk_sizes(theta.rows(), kEvalChunk)) {
    Batch batch{theta.rows_slice(begin, m), x.rows_slice(begin, m), {}};
    if (q.kind() == SurrogateKind::ratio) add_permuted_contrast(batch, contrastive_sets, rng);
    Graph graph;
    const Var loss = surrogate_loss(graph, batch, q, rng);
    total += graph.value(loss).item() * static_cast<double>(m);
    begin += m;
  }
  return total / static_cast<double>(theta.rows());
}

Split split_dataset(const Dataset& data, std::size_t budget, double validation_fraction, std::uint64_t seed) {
  if (data.theta.rows() < budget) throw std::invalid_argument("dataset smaller than the budget");
  std::vector<std::size_t> order(budget);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_stream(seed, "split");
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(budget)));
  const std::span<const std::size_t> val(order.data(), n_val);
  const std::span<const std::size_t> tr(order.data() + n_val, budget - n_val);
  return {data.theta.gather_rows(tr), data.x.gather_rows(tr), data.theta.gather_rows(val), data.x.gather_rows(val)};
}

TrainResult train(const RunConfig& cfg, const Dataset* given) {
  cfg.validate();
  const auto t0 = Clock::now();
  const TaskSpec& task = get_task(cfg.task);

  Dataset owned;
  const Dataset* data = given;
  if (!data && !cfg.dataset.empty()) {
    owned = load_dataset(cfg.dataset);
    data = &owned;
  }
  if (!data) {
    owned = generate_dataset(task, cfg.budget, cfg.seed);
    data = &owned;
  }
  if (data->task != task.name) throw std::invalid_argument("dataset is for task " + data->task + ", not " + task.name);
  if (data->theta.rows() < cfg.budget) {
    throw std::invalid_argument("dataset holds " + std::to_string(data->theta.rows()) + " draws, budget is " +
                                std::to_string(cfg.budget));
  }
  if (data->theta.cols() != task.theta_dim || data->x.cols() != task.x_dim) {
    throw ShapeError("dataset dimensions do not match task " + task.name);
  }

  const Split split = split_dataset(*data, cfg.budget, cfg.validation_fraction, cfg.seed);
  const Tensor& train_theta = split.train_theta;
  const Tensor& train_x = split.train_x;
  const Tensor& val_theta = split.val_theta;
  const Tensor& val_x = split.val_x;
  const std::size_t n_train = train_theta.rows();

  const SurrogateSpec spec = cfg.surrogate_spec();
  Rng init_rng = make_stream(cfg.seed, "init");
  Surrogate q = Surrogate::create(spec, init_rng);

  const std::size_t batch = std::min(cfg.train.batch_size, n_train);
  const std::vector<std::size_t> sizes = batch_sizes(n_train, batch);
  LrSchedule schedule{static_cast<std::uint64_t>(cfg.train.max_epochs * sizes.size()), cfg.train.warmup_fraction,
                      cfg.train.start_lr, cfg.train.lr, cfg.train.final_lr};
  schedule.validate();
  AdamW opt({.lr = cfg.train.lr, .weight_decay = cfg.train.weight_decay, .amsgrad = cfg.train.amsgrad});
  if (cfg.train.freeze_ratio) opt.set_trainable_prefix(std::string(kFlowPrefix) + ".");
  EarlyStopping stopper(cfg.train.min_delta, cfg.train.patience);

  Rng shuffle_rng = make_stream(cfg.seed, "shuffle");
  Rng contrast_rng = make_stream(cfg.seed, "contrast");
  const MarginalSampler draw_marginal_x = [&task](std::size_t m, Rng& r) {
    return simulate_rows(task, sample_rows(task.prior, m, r), r);
  };
  Rng noise_rng = make_stream(cfg.seed, "loss-noise");

  TrainResult result{q, {}, 0, std::numeric_limits<double>::infinity()};
  result.batch_size = batch;
  ParamStore best = q.params();
  double lr_scale = 1.0;
  std::uint64_t step = 0;
  LossDiagnostics diag;

  for (std::size_t epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
    // snapshot for the NaN restart
    const ParamStore params0 = q.params();
    const AdamW opt0 = opt;
    const Rng shuffle0 = shuffle_rng, contrast0 = contrast_rng, noise0 = noise_rng;
    const std::uint64_t step0 = step;

    EpochRecord rec;
    rec.epoch = epoch;
    for (;;) {
      try {
        std::vector<std::size_t> perm(n_train);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), shuffle_rng);
        double total = 0.0;
        std::size_t begin = 0;
        for (std::size_t m : sizes) {
          const std::span<const std::size_t> idx(perm.data() + begin, m);
          Batch b{train_theta.gather_rows(idx), train_x.gather_rows(idx), {}};
          if (q.kind() == SurrogateKind::ratio) {
            if (cfg.train.contrast == "simulation") {
              add_simulated_contrast(b, cfg.train.contrastive_sets, draw_marginal_x, contrast_rng);
            } else {
              add_permuted_contrast(b, cfg.train.contrastive_sets, contrast_rng);
            }
          }
          Graph graph;
          const Var loss = surrogate_loss(graph, b, q, noise_rng, &diag);
          const double value = graph.value(loss).item();
          if (!std::isfinite(value)) throw NumericalError("non-finite training loss");
          const GradientMap grads = gradient(graph, q.params());
          rec.lr = lr_scale * schedule.lr_at(step);
          opt.step(q.params(), grads, rec.lr);
          ++step;
          total += value * static_cast<double>(m);
          begin += m;
        }
        rec.train_loss = total / static_cast<double>(n_train);
        rec.val_loss = validation_loss(q, val_theta, val_x, cfg.train.contrastive_sets, cfg.seed);
        if (!std::isfinite(rec.val_loss)) throw NumericalError("non-finite validation loss");
        break;
      } catch (const NumericalError& e) {
        if (result.lr_halved) {
          throw TrainingFailure("second numerical failure in epoch " + std::to_string(epoch) + ": " + e.what());
        }
        log_warning("epoch " + std::to_string(epoch) + ": " + e.what() + "; halving the learning rate and retrying");
        result.lr_halved = true;
        lr_scale = 0.5;
        q.params() = params0;
        opt = opt0;
        shuffle_rng = shuffle0;
        contrast_rng = contrast0;
        noise_rng = noise0;
        step = step0;
      }
    }

    result.curve.push_back(rec);
    const StopDecision decision = stopper.update(rec.val_loss);
    if (stopper.improved()) {
      best = q.params();
      result.best_epoch = epoch;
      result.best_val_loss = rec.val_loss;
    }
    if (epoch % 50 == 0) {
      log_info(cfg.task + "/" + model_kind_name(cfg.model) + " epoch " + std::to_string(epoch) +
               " train " + fmt(rec.train_loss) + " val " + fmt(rec.val_loss));
    }
    if (decision == StopDecision::stop) {
      result.stopped_early = true;
      break;
    }
  }

  result.surrogate = Surrogate(spec, std::move(best));
  result.epochs = result.curve.size();
  result.steps = step;
  result.clamped = diag.clamped;
  result.wall_seconds = seconds_since(t0);
  return result;
}

// ---- evaluation ----

Tensor reference_samples(const TaskSpec& task, int observation_index, std::size_t n) {
  const Observation obs = observation(task, observation_index);
  Rng rng = make_stream(static_cast<std::uint64_t>(observation_index), "reference:" + task.name);
  return reference_posterior_samples(task, obs.x, n, rng);
}

namespace {

PosteriorDraw mh_draw(const LogDensityFn& target, const Distribution& prior, std::size_t n, const MhConfig& base,
                      Rng& rng) {
  // stretch the kept part of each chain so the pooled draw is exactly n
  MhConfig mh = base;
  const std::size_t per_chain = (n + mh.chains - 1) / mh.chains;
  const std::size_t avail = mh.steps - mh.burn_in;
  mh.thin = std::max(mh.thin, avail / per_chain);
  mh.steps = mh.burn_in + mh.thin * per_chain;
  const MhResult res = mh_sample(target, prior, mh, rng);
  PosteriorDraw out;
  out.samples = res.samples.rows_slice(0, n);
  out.diagnostics.method = "mh";
  out.diagnostics.acceptance =
      std::accumulate(res.acceptance.begin(), res.acceptance.end(), 0.0) / static_cast<double>(res.acceptance.size());
  out.diagnostics.max_rhat = *std::max_element(res.rhat.begin(), res.rhat.end());
  out.diagnostics.step_size = res.step_size;
  if (res.rhat_warning) out.flags.push_back("rhat_warning");
  for (const auto& w : res.warnings) log_warning(w);
  return out;
}

}  // namespace

PosteriorDraw draw_posterior(const Surrogate& q, std::span<const double> x, std::size_t n, const RunConfig& cfg,
                             bool base_only, Rng& rng) {
  if (x.size() != q.spec().x_dim) throw ShapeError("observation dimension does not match the surrogate");
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  const Tensor xo = Tensor::row(x);
  const LogDensityFn target = [&q, &xo](const Tensor& theta) { return log_unnorm(q, theta, xo.repeat_row(theta.rows())); };

  if (q.kind() == SurrogateKind::flow || (q.kind() == SurrogateKind::hybrid && base_only)) {
    PosteriorDraw out;
    out.samples = q.flow()->sample(q.params(), xo.repeat_row(n), rng);
    out.diagnostics.method = "direct";
    return out;
  }
  if (base_only) throw std::invalid_argument("base-only sampling needs a hybrid surrogate");
  if (q.kind() == SurrogateKind::ratio) return mh_draw(target, q.prior(), n, cfg.mh, rng);

  const FlowSurrogate& flow = *q.flow();
  const Proposal proposal{
      [&](std::size_t m, Rng& r) { return flow.sample(q.params(), xo.repeat_row(m), r); },
      [&](const Tensor& theta) { return flow.log_prob(q.params(), theta, xo.repeat_row(theta.rows())); }};
  try {
    RejectionResult res = rejection_sample(target, proposal, n, cfg.rejection, rng);
    PosteriorDraw out;
    out.samples = std::move(res.samples);
    out.diagnostics.method = "rejection";
    out.diagnostics.acceptance = res.acceptance_rate;
    out.diagnostics.log_bound = res.log_bound;
    out.diagnostics.bound_violations = res.bound_violations;
    if (res.bound_reestimated) out.flags.push_back("bound_reestimated");
    for (const auto& w : res.warnings) log_warning(w);
    return out;
  } catch (const RejectionAbort& e) {
    log_warning(std::string("rejection sampling aborted (") + e.what() + "); falling back to MH");
    PosteriorDraw out = mh_draw(target, q.prior(), n, cfg.mh, rng);
    out.flags.insert(out.flags.begin(), "rejection_fallback_mh");
    return out;
  }
}

EvalOutcome evaluate(const Surrogate& q, const TaskSpec& task, int observation_index, const RunConfig& cfg,
                     bool base_only, const Tensor* reference) {
  const auto t0 = Clock::now();
  if (q.spec().theta_dim != task.theta_dim || q.spec().x_dim != task.x_dim) {
    throw ShapeError("surrogate dimensions do not match task " + task.name);
  }
  const Observation obs = observation(task, observation_index);
  const Tensor owned = reference ? Tensor() : reference_samples(task, observation_index, cfg.eval.n_reference);
  const Tensor& ref = reference ? *reference : owned;

  const std::string tag = std::string(surrogate_kind_name(q.kind())) + (base_only ? ":base" : "");
  Rng rng = make_stream(cfg.seed, "evaluate:" + tag, static_cast<std::uint64_t>(observation_index));
  PosteriorDraw draw = draw_posterior(q, obs.x, cfg.eval.n_samples, cfg, base_only, rng);

  Rng c2st_rng = make_stream(cfg.seed, "c2st:" + tag, static_cast<std::uint64_t>(observation_index));
  const C2stResult res = c2st(ref, draw.samples, cfg.c2st, c2st_rng);
  for (const auto& w : res.warnings) log_warning(w);

  EvalOutcome out;
  out.observation = observation_index;
  out.raw_accuracy = res.accuracy;
  out.c2st = fold_accuracy(res.accuracy);
  out.diagnostics = draw.diagnostics;
  out.flags = std::move(draw.flags);
  if (!res.dropped_features.empty()) out.flags.push_back("dropped_features");
  out.samples = std::move(draw.samples);
  out.wall_seconds = seconds_since(t0);
  return out;
}

// ---- results ----

std::string join_flags(const std::vector<std::string>& flags) {
  std::string out;
  for (const auto& f : flags) {
    if (f.empty()) continue;
    out += (out.empty() ? "" : ";") + sanitize_flag(f);
  }
  return out;
}

std::string format_result_row(const ResultRow& r) {
  return r.task + "," + r.model + "," + std::to_string(r.budget) + "," + std::to_string(r.seed) + "," +
         std::to_string(r.observation) + "," + fmt(r.c2st) + "," + fmt(std::round(r.wall_seconds * 1000.0) / 1000.0) +
         "," + sanitize_field(r.flags);
}

ResultRow parse_result_row(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    cols.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (cols.size() != 8) throw std::invalid_argument("result row needs 8 columns: " + line);
  ResultRow r;
  r.task = cols[0];
  r.model = cols[1];
  r.budget = to_u64(cols[2]);
  r.seed = to_u64(cols[3]);
  r.observation = static_cast<int>(to_u64(cols[4]));
  r.c2st = to_double(cols[5]);
  r.wall_seconds = to_double(cols[6]);
  r.flags = cols[7];
  return r;
}

std::vector<ResultRow> read_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != kResultsHeader) {
    throw std::invalid_argument(path.string() + ": unexpected results header");
  }
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) rows.push_back(parse_result_row(line));
  }
  return rows;
}

void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  std::string text = std::string(kResultsHeader) + "\n";
  for (const auto& r : rows) text += format_result_row(r) + "\n";
  write_file_atomic(path, text);
}

double ci_half_width(const std::vector<double>& values, double level) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  const double t = boost::math::quantile(boost::math::complement(dist, (1.0 - level) / 2.0));
  return t * sd / std::sqrt(static_cast<double>(n));
}

std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
  using Key = std::tuple<std::string, std::string, std::size_t>;
  std::vector<Key> order;
  std::map<Key, std::map<std::uint64_t, std::pair<double, std::size_t>>> acc;
  for (const auto& r : rows) {
    if (!std::isfinite(r.c2st)) continue;
    const Key key{r.task, r.model, r.budget};
    if (!acc.count(key)) order.push_back(key);
    auto& slot = acc[key][r.seed];
    slot.first += r.c2st;
    ++slot.second;
  }
  std::vector<SummaryRow> out;
  for (const auto& key : order) {
    std::vector<double> per_seed;
    for (const auto& [seed, s] : acc[key]) per_seed.push_back(s.first / static_cast<double>(s.second));
    SummaryRow row{std::get<0>(key), std::get<1>(key), std::get<2>(key), per_seed.size()};
    row.mean = std::accumulate(per_seed.begin(), per_seed.end(), 0.0) / static_cast<double>(per_seed.size());
    row.ci95 = ci_half_width(per_seed);
    out.push_back(row);
  }
  return out;
}

void write_summary(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
  std::string text = "task,model,budget,seeds,mean_c2st,ci95_half_width\n";
  for (const auto& r : rows) {
    text += r.task + "," + r.model + "," + std::to_string(r.budget) + "," + std::to_string(r.seeds) + "," +
            fmt(r.mean) + "," + fmt(r.ci95) + "\n";
  }
  write_file_atomic(path, text);
}

// ---- benchmark ----

void Matrix::validate() const {
  if (tasks.empty() || models.empty() || budgets.empty() || seeds.empty()) {
    throw std::invalid_argument("benchmark matrix is empty");
  }
  for (const auto& cfg : cells()) cfg.validate();
}

std::vector<RunConfig> Matrix::cells() const {
  std::vector<RunConfig> out;
  for (const auto& task : tasks)
    for (ModelKind model : models)
      for (std::size_t budget : budgets)
        for (std::uint64_t seed : seeds) {
          RunConfig cfg = base;
          cfg.task = task;
          cfg.model = model;
          cfg.budget = budget;
          cfg.seed = seed;
          cfg.checkpoint.clear();
          cfg.dataset.clear();
          out.push_back(std::move(cfg));
        }
  return out;
}

Matrix parse_matrix(const pt::ptree& tree) {
  Matrix m;
  apply_tree(m.base, tree, {"matrix"});
  const auto section = tree.get_child_optional("matrix");
  if (!section) throw std::invalid_argument("matrix file needs a [matrix] section");
  for (const auto& [key, value] : *section) {
    const std::string v = value.data();
    if (key == "tasks") {
      m.tasks = split_list(v);
    } else if (key == "models") {
      for (const auto& s : split_list(v)) m.models.push_back(parse_model_kind(s));
    } else if (key == "budgets") {
      for (const auto& s : split_list(v)) m.budgets.push_back(to_u64(s));
    } else if (key == "seeds") {
      for (int s : to_index_list(v)) m.seeds.push_back(static_cast<std::uint64_t>(s));
    } else if (key == "base_only_rows") {
      m.base_only_rows = to_bool(v);
    } else if (key == "save_samples") {
      m.save_samples = to_bool(v);
    } else {
      throw std::invalid_argument("unknown matrix key: " + key);
    }
  }
  m.validate();
  return m;
}

Matrix load_matrix(const std::filesystem::path& path) { return parse_matrix(read_ini_file(path)); }

std::string cell_id(const RunConfig& cfg) {
  return cfg.task + "__" + model_kind_name(cfg.model) + "__" + std::to_string(cfg.budget) + "__s" +
         std::to_string(cfg.seed);
}

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tensor cached_reference(const TaskSpec& task, int obs, std::size_t n, const std::filesystem::path& dir) {
  const auto path = dir / (task.name + "_obs" + std::to_string(obs) + "_n" + std::to_string(n) + ".bin");
  if (std::filesystem::exists(path)) {
    try {
      SampleSet s = load_samples(path);
      if (s.samples.rows() == n && s.samples.cols() == task.theta_dim) return std::move(s.samples);
    } catch (const std::exception& e) {
      log_warning("ignoring unreadable reference cache " + path.string() + ": " + e.what());
    }
  }
  Tensor ref = reference_samples(task, obs, n);
  save_samples(path, {task.name, "reference", obs, ref});
  return ref;
}

}  // namespace

std::vector<ResultRow> run_cell(const RunConfig& cfg, const std::filesystem::path& cell_dir,
                                const std::filesystem::path& reference_dir, bool base_only_rows, bool save_samples_flag) {
  std::filesystem::create_directories(cell_dir);
  const TaskSpec& task = get_task(cfg.task);
  const TrainResult tr = train(cfg);
  save_checkpoint(cell_dir / "model.ckpt", tr.surrogate,
                  {{"task", cfg.task},
                   {"model", model_kind_name(cfg.model)},
                   {"budget", std::to_string(cfg.budget)},
                   {"seed", std::to_string(cfg.seed)},
                   {"best_epoch", std::to_string(tr.best_epoch)},
                   {"best_val_loss", fmt(tr.best_val_loss)}});
  {
    std::string curve = "epoch,train_loss,val_loss,lr\n";
    for (const auto& e : tr.curve) {
      curve += std::to_string(e.epoch) + "," + fmt(e.train_loss) + "," + fmt(e.val_loss) + "," + fmt(e.lr) + "\n";
    }
    write_file_atomic(cell_dir / "curve.csv", curve);
  }
  std::vector<std::string> train_flags;
  if (tr.lr_halved) train_flags.push_back("lr_halved");
  if (tr.clamped) train_flags.push_back("rho_clamped");

  const bool hybrid = surrogate_kind_of(cfg.model) == SurrogateKind::hybrid;
  std::vector<ResultRow> rows;
  std::string diag = "observation,model,method,acceptance,log_bound,bound_violations,max_rhat,step_size,raw_accuracy\n";
  for (int obs : cfg.observations) {
    const Tensor ref = cached_reference(task, obs, cfg.eval.n_reference, reference_dir);
    std::vector<bool> variants{cfg.eval.base_only && hybrid};
    if (hybrid && base_only_rows && !cfg.eval.base_only) variants.push_back(true);
    for (bool base : variants) {
      const EvalOutcome e = evaluate(tr.surrogate, task, obs, cfg, base, &ref);
      const std::string model = std::string(model_kind_name(cfg.model)) + (base ? "_base" : "");
      std::vector<std::string> flags = train_flags;
      flags.insert(flags.end(), e.flags.begin(), e.flags.end());
      rows.push_back({cfg.task, model, cfg.budget, cfg.seed, obs, e.c2st, tr.wall_seconds + e.wall_seconds,
                      join_flags(flags)});
      const auto& d = e.diagnostics;
      diag += std::to_string(obs) + "," + model + "," + d.method + "," + fmt(d.acceptance) + "," + fmt(d.log_bound) +
              "," + std::to_string(d.bound_violations) + "," + fmt(d.max_rhat) + "," + fmt(d.step_size) + "," +
              fmt(e.raw_accuracy) + "\n";
      if (save_samples_flag) {
        save_samples(cell_dir / ("samples_" + model + "_obs" + std::to_string(obs) + ".bin"),
                     {cfg.task, model, obs, e.samples});
      }
    }
  }
  write_file_atomic(cell_dir / "diagnostics.csv", diag);
  return rows;
}

BenchmarkReport run_benchmark(const Matrix& matrix, const std::filesystem::path& out_dir, std::size_t workers) {
  matrix.validate();
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
  const auto cells = matrix.cells();
  const auto cells_dir = out_dir / "cells";
  const auto reference_dir = out_dir / "reference";
  std::filesystem::create_directories(cells_dir);
  std::filesystem::create_directories(reference_dir);

  BenchmarkReport report;
  report.cells = cells.size();
  std::atomic<std::size_t> next{0}, ran{0}, skipped{0}, failed{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const RunConfig& cfg = cells[i];
      const auto dir = cells_dir / cell_id(cfg);
      const std::string ini = run_config_to_ini(cfg);
      if (std::filesystem::exists(dir / ".done")) {
        if (read_text(dir / "config.ini") == ini) {
          ++skipped;
          continue;
        }
        log_warning("cell " + cell_id(cfg) + " was run with different settings; rerunning");
        std::filesystem::remove(dir / ".done");
      }
      std::filesystem::create_directories(dir);
      write_file_atomic(dir / "config.ini", ini);
      log_info("cell " + cell_id(cfg) + " starting");
      std::vector<ResultRow> rows;
      try {
        rows = run_cell(cfg, dir, reference_dir, matrix.base_only_rows, matrix.save_samples);
        ++ran;
      } catch (const std::exception& e) {
        log_error("cell " + cell_id(cfg) + " failed: " + e.what());
        std::filesystem::create_directories(dir);
        write_file_atomic(dir / "error.txt", std::string(e.what()) + "\n");
        rows.clear();
        for (int obs : cfg.observations) {
          rows.push_back({cfg.task, model_kind_name(cfg.model), cfg.budget, cfg.seed, obs,
                          std::numeric_limits<double>::quiet_NaN(), 0.0, "failed"});
        }
        ++failed;
      }
      write_results(dir / "rows.csv", rows);
      write_file_atomic(dir / ".done", "");
    }
  };
  std::vector<std::thread> pool;
  const std::size_t n_threads = std::min(workers, std::max<std::size_t>(cells.size(), 1));
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  // merge in matrix order; each cell's rows appear once regardless of reruns
  for (const auto& cfg : cells) {
    const auto dir = cells_dir / cell_id(cfg);
    if (!std::filesystem::exists(dir / ".done")) continue;
    const auto rows = read_results(dir / "rows.csv");
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  report.ran = ran;
  report.skipped = skipped;
  report.failed = failed;
  report.summary = summarize(report.rows);
  write_results(out_dir / "results.csv", report.rows);
  write_summary(out_dir / "summary.csv", report.summary);
  return report;
}

}  // namespace gklsbi
