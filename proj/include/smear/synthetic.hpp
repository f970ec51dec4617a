#pragma once

// Multi-domain classification benchmark. Every domain shares the same class
// centers but sees them through its own orthogonal transform, so a model that
// knows (or learns) the domain can undo the rotation and one that does not
// cannot.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace smear {

struct DomainSpec {
  int domain_id = 0;
  std::vector<double> q;  // d×d orthogonal, row-major
  double noise_sigma = 0.0;
};

struct Example {
  std::int64_t id = 0;
  int tag = 0;
  std::vector<double> x;  // L×d row-major
  std::size_t label = 0;
  bool operator==(const Example&) const = default;
};

struct SyntheticConfig {
  std::size_t K = 6;   // domains
  std::size_t C = 16;  // classes
  std::size_t d = 32;
  std::size_t L = 4;
  std::size_t n_per_domain = 600;
  double noise_sigma = 0.3;
  std::uint64_t seed = 0;
  /// Domain k receives n_per_domain / 2^k examples (at least 3·C).
  bool heterogeneous_sizes = false;
  bool operator==(const SyntheticConfig&) const = default;
};

struct DatasetSplits {
  SyntheticConfig config;
  std::vector<double> centers;  // C×d, unit rows
  std::vector<DomainSpec> domains;
  std::vector<Example> train, validation, test;
};

enum class Split { train, validation, test };
const std::vector<Example>& split_examples(const DatasetSplits& s, Split which);
const char* split_name(Split which);

/// Pure function of the config. Throws ConfigError when C > d or a
/// (domain, class) cell would be too small to appear in every split.
DatasetSplits generate(const SyntheticConfig& config);

/// Nearest-center accuracy on mean-pooled positions of `which`, optionally
/// after applying each example's inverse domain transform.
double oracle_accuracy(const DatasetSplits& splits, bool use_domain_transform,
                       Split which = Split::test);

/// Max |QᵀQ - I| entry over all domains.
double max_orthogonality_error(const DatasetSplits& splits);

/// Text format with hexadecimal floats; loading reproduces every bit.
void save_dataset(const DatasetSplits& splits, const std::filesystem::path& path);
DatasetSplits load_dataset(const std::filesystem::path& path);

}  // namespace smear
