#include "gklsbi/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <thread>

namespace gklsbi {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("truncated binary payload");
  return to_little(v);
}

void put_doubles(std::ostream& out, std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  } else {
    for (double v : values) put(out, v);
  }
}

void get_doubles(std::istream& in, std::span<double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw FormatError("truncated binary payload");
  } else {
    for (double& v : values) v = get<double>(in);
  }
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError("bad number: " + s);
  return v;
}

std::string join_doubles(std::span<const double> v, char sep = ' ') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += format_double(v[i]);
  }
  return out;
}

std::vector<double> split_doubles(const std::string& text) {
  std::istringstream in(text);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) out.push_back(parse_double(tok));
  return out;
}

void write_header(std::ostream& out, const char* magic, const Header& header) {
  out << magic << ' ' << kFormatVersion << '\n';
  for (const auto& [k, v] : header) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("header entry not representable: " + k);
    }
    out << k << '=' << v << '\n';
  }
  out << "END\n";
}

Header read_header(std::istream& in, const char* magic) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty file");
  std::istringstream first(line);
  std::string got;
  int version = 0;
  first >> got >> version;
  if (got != magic) throw FormatError(std::string("expected ") + magic + " header, found '" + line + "'");
  if (version != kFormatVersion) throw FormatError("unsupported format version " + std::to_string(version));
  Header header;
  while (std::getline(in, line)) {
    if (line == "END") return header;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed header line: " + line);
    header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  throw FormatError("header not terminated by END");
}

const std::string& need(const Header& h, const std::string& key) {
  const auto it = h.find(key);
  if (it == h.end()) throw FormatError("header lacks '" + key + "'");
  return it->second;
}

std::size_t need_size(const Header& h, const std::string& key) {
  const std::string& s = need(h, key);
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError("bad integer for " + key + ": " + s);
  return v;
}

void write_matrix(std::ostream& out, const Tensor& t) { put_doubles(out, t.data()); }

Tensor read_matrix(std::istream& in, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  get_doubles(in, t.data());
  return t;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

void expect_eof(std::istream& in, const fs::path& path) {
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
}

}  // namespace

std::string serialize_prior(const Distribution& prior) {
  return std::visit(
      [](const auto& d) -> std::string {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, UniformBox>) {
          return "uniform " + std::to_string(d.dim()) + " " + join_doubles(d.lower) + " " + join_doubles(d.upper);
        } else if constexpr (std::is_same_v<T, Gaussian>) {
          std::vector<double> chol;
          for (std::size_t i = 0; i < d.dim(); ++i)
            for (std::size_t j = 0; j <= i; ++j) chol.push_back(d.chol(i, j));
          return "gaussian " + std::to_string(d.dim()) + " " + join_doubles(d.mean) + " " + join_doubles(chol);
        } else {
          return "mixture2 " + std::to_string(d.dim()) + " " + join_doubles(d.mean) + " " + format_double(d.scale_a) +
                 " " + format_double(d.scale_b) + " " + format_double(d.weight);
        }
      },
      prior);
}

Distribution parse_prior(const std::string& text) {
  std::istringstream in(text);
  std::string kind;
  std::size_t d = 0;
  if (!(in >> kind >> d) || d == 0) throw FormatError("bad prior: " + text);
  std::string rest;
  std::getline(in, rest);
  const std::vector<double> v = split_doubles(rest);
  auto take = [&](std::size_t begin, std::size_t count) { return Vec(v.begin() + begin, v.begin() + begin + count); };
  if (kind == "uniform") {
    if (v.size() != 2 * d) throw FormatError("bad uniform prior: " + text);
    return UniformBox(take(0, d), take(d, d));
  }
  if (kind == "gaussian") {
    if (v.size() != d + d * (d + 1) / 2) throw FormatError("bad gaussian prior: " + text);
    Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(d, d);
    std::size_t k = d;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) chol(i, j) = v[k++];
    return Gaussian(take(0, d), chol);
  }
  if (kind == "mixture2") {
    if (v.size() != d + 3) throw FormatError("bad mixture prior: " + text);
    return GaussianMixture2(take(0, d), v[d], v[d + 1], v[d + 2]);
  }
  throw FormatError("unknown prior kind: " + kind);
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::string tok;
  std::istringstream in(text);
  while (std::getline(in, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t[");
    const auto e = tok.find_last_not_of(" \t]");
    if (b == std::string::npos) continue;
    tok = tok.substr(b, e - b + 1);
    std::size_t v = 0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) throw FormatError("bad size list: " + text);
    out.push_back(v);
  }
  return out;
}

void write_tensor_archive(std::ostream& out, const ParamStore& params) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params.tensors()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, t.rows());
    put<std::uint64_t>(out, t.cols());
    write_matrix(out, t);
  }
}

ParamStore read_tensor_archive(std::istream& in) {
  ParamStore params;
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in);
    if (len > 4096) throw FormatError("tensor name too long");
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = get<std::uint32_t>(in);
    if (rank != 2) throw FormatError("tensor " + name + " has rank " + std::to_string(rank) + ", expected 2");
    const auto rows = get<std::uint64_t>(in);
    const auto cols = get<std::uint64_t>(in);
    if (rows * cols > (std::uint64_t{1} << 32)) throw FormatError("tensor " + name + " too large");
    params.add(name, read_matrix(in, rows, cols));
  }
  return params;
}

void save_checkpoint(const fs::path& path, const Surrogate& q, const Header& meta) {
  const SurrogateSpec& s = q.spec();
  Header h = meta;
  h["kind"] = surrogate_kind_name(s.kind);
  h["theta_dim"] = std::to_string(s.theta_dim);
  h["x_dim"] = std::to_string(s.x_dim);
  h["prior"] = serialize_prior(s.prior);
  h["flow.base"] = base_kind_name(s.flow.base);
  h["flow.transforms"] = std::to_string(s.flow.transforms);
  h["flow.hidden"] = join_sizes(s.flow.hidden);
  h["flow.embedding_hidden"] = join_sizes(s.flow.embedding_hidden);
  h["ratio.hidden"] = join_sizes(s.ratio_hidden);
  h["ratio.embedding_hidden"] = join_sizes(s.ratio_embedding_hidden);
  h["support_bijection"] = s.support_bijection ? "1" : "0";
  std::ostringstream out(std::ios::binary);
  write_header(out, kCheckpointMagic, h);
  write_tensor_archive(out, q.params());
  write_file_atomic(path, out.str());
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream in = open_in(path);
  Header h = read_header(in, kCheckpointMagic);
  SurrogateSpec s;
  s.kind = parse_surrogate_kind(need(h, "kind"));
  s.theta_dim = need_size(h, "theta_dim");
  s.x_dim = need_size(h, "x_dim");
  s.prior = parse_prior(need(h, "prior"));
  s.flow.base = parse_base_kind(need(h, "flow.base"));
  s.flow.transforms = need_size(h, "flow.transforms");
  s.flow.hidden = parse_sizes(need(h, "flow.hidden"));
  s.flow.embedding_hidden = parse_sizes(need(h, "flow.embedding_hidden"));
  s.ratio_hidden = parse_sizes(need(h, "ratio.hidden"));
  s.ratio_embedding_hidden = parse_sizes(need(h, "ratio.embedding_hidden"));
  s.support_bijection = need(h, "support_bijection") == "1";
  ParamStore params = read_tensor_archive(in);
  expect_eof(in, path);
  return {Surrogate(std::move(s), std::move(params)), std::move(h)};
}

void save_dataset(const fs::path& path, const Dataset& data) {
  if (data.theta.rows() != data.x.rows()) throw ShapeError("dataset theta and x row counts differ");
  const Header h{{"task", data.task},
                 {"theta_dim", std::to_string(data.theta.cols())},
                 {"x_dim", std::to_string(data.x.cols())},
                 {"seed", std::to_string(data.seed)},
                 {"count", std::to_string(data.theta.rows())}};
  std::ostringstream out(std::ios::binary);
  write_header(out, kDatasetMagic, h);
  write_matrix(out, data.theta);
  write_matrix(out, data.x);
  write_file_atomic(path, out.str());
}

Dataset load_dataset(const fs::path& path) {
  std::ifstream in = open_in(path);
  const Header h = read_header(in, kDatasetMagic);
  Dataset d;
  d.task = need(h, "task");
  d.seed = need_size(h, "seed");
  const std::size_t n = need_size(h, "count");
  d.theta = read_matrix(in, n, need_size(h, "theta_dim"));
  d.x = read_matrix(in, n, need_size(h, "x_dim"));
  expect_eof(in, path);
  return d;
}

void save_samples(const fs::path& path, const SampleSet& set) {
  const Header h{{"task", set.task},
                 {"model", set.model},
                 {"observation", std::to_string(set.observation)},
                 {"n", std::to_string(set.samples.rows())},
                 {"dim", std::to_string(set.samples.cols())}};
  std::ostringstream out(std::ios::binary);
  write_header(out, kSamplesMagic, h);
  write_matrix(out, set.samples);
  write_file_atomic(path, out.str());
}

SampleSet load_samples(const fs::path& path) {
  std::ifstream in = open_in(path);
  const Header h = read_header(in, kSamplesMagic);
  SampleSet s;
  s.task = need(h, "task");
  s.model = need(h, "model");
  s.observation = static_cast<int>(need_size(h, "observation"));
  s.samples = read_matrix(in, need_size(h, "n"), need_size(h, "dim"));
  expect_eof(in, path);
  return s;
}

void save_vector_text(const fs::path& path, const std::vector<double>& v) {
  write_file_atomic(path, join_doubles(v) + "\n");
}

std::vector<double> load_vector_text(const fs::path& path) {
  std::ifstream in = open_in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return split_doubles(ss.str());
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  // unique per thread so concurrent writers of the same file don't collide
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace gklsbi
