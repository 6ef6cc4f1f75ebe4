#pragma once

#include "gklsbi/params.hpp"
#include "gklsbi/surrogates.hpp"
#include "gklsbi/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace gklsbi {

namespace fs = std::filesystem;

// All binary files share one layout: a text header of key=value lines opened
// by "<MAGIC> <version>" and closed by "END", then little-endian payload.
using Header = std::map<std::string, std::string>;

inline constexpr const char* kCheckpointMagic = "GKLSBI-CKPT";
inline constexpr const char* kDatasetMagic = "GKLSBI-DATA";
inline constexpr const char* kSamplesMagic = "GKLSBI-SAMPLES";
inline constexpr int kFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string serialize_prior(const Distribution& prior);
Distribution parse_prior(const std::string& text);

std::string join_sizes(const std::vector<std::size_t>& v);
std::vector<std::size_t> parse_sizes(const std::string& text);

// Checkpoint: surrogate settings plus free-form metadata (task, model, ...), then a
// named-tensor archive: u32 count, then per tensor u32 name length, name,
// u32 rank, u64 dims, f64 values.
void save_checkpoint(const fs::path& path, const Surrogate& q, const Header& meta = {});
struct LoadedCheckpoint {
  Surrogate surrogate;
  Header meta;
};
LoadedCheckpoint load_checkpoint(const fs::path& path);

void write_tensor_archive(std::ostream& out, const ParamStore& params);
ParamStore read_tensor_archive(std::istream& in);

struct Dataset {
  std::string task;
  std::uint64_t seed = 0;
  Tensor theta;
  Tensor x;
};
void save_dataset(const fs::path& path, const Dataset& data);
Dataset load_dataset(const fs::path& path);

struct SampleSet {
  std::string task;
  std::string model;  // "reference" for reference posterior draws
  int observation = 0;
  Tensor samples;
};
void save_samples(const fs::path& path, const SampleSet& set);
SampleSet load_samples(const fs::path& path);

// One whitespace-separated line of numbers.
void save_vector_text(const fs::path& path, const std::vector<double>& v);
std::vector<double> load_vector_text(const fs::path& path);

// Writes to a sibling temp file and renames, so readers never see partial files.
void write_file_atomic(const fs::path& path, const std::string& contents);

}  // namespace gklsbi
