#include "smear/synthetic.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "smear/io.hpp"
#include "smear/strategies.hpp"

namespace smear {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<double> random_orthogonal(std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix g(d, d);
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR();
  // Fix column signs so the draw is Haar-distributed and deterministic.
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return {q.data(), q.data() + q.size()};
}

std::size_t domain_size(const SyntheticConfig& c, std::size_t k) {
  if (!c.heterogeneous_sizes) return c.n_per_domain;
  const std::size_t shift = std::min<std::size_t>(k, 62);
  return std::max(3 * c.C, c.n_per_domain >> shift);
}

// Mean over positions of an L×d example.
std::vector<double> pooled(const Example& e, std::size_t L, std::size_t d) {
  std::vector<double> v(d, 0.0);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < d; ++j) v[j] += e.x[l * d + j];
  for (auto& x : v) x /= static_cast<double>(L);
  return v;
}

}  // namespace

const std::vector<Example>& split_examples(const DatasetSplits& s, Split which) {
  switch (which) {
    case Split::train:
      return s.train;
    case Split::validation:
      return s.validation;
    case Split::test:
      break;
  }
  return s.test;
}

const char* split_name(Split which) {
  switch (which) {
    case Split::train:
      return "train";
    case Split::validation:
      return "validation";
    case Split::test:
      break;
  }
  return "test";
}

DatasetSplits generate(const SyntheticConfig& c) {
  if (c.K < 1 || c.C < 1 || c.d < 1 || c.L < 1 || c.n_per_domain < 1) {
    throw ConfigError("generate: K, C, d, L and n_per_domain must be positive");
  }
  if (c.C > c.d) {
    throw ConfigError("generate: C=" + std::to_string(c.C) + " classes cannot exceed d=" +
                      std::to_string(c.d));
  }
  if (!(c.noise_sigma >= 0.0)) throw ConfigError("generate: noise_sigma must be non-negative");
  for (std::size_t k = 0; k < c.K; ++k) {
    if (domain_size(c, k) < 3 * c.C) {
      throw ConfigError("generate: each domain needs at least 3·C examples so every class reaches "
                        "every split");
    }
  }

  Rng rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  DatasetSplits out;
  out.config = c;

  out.centers.resize(c.C * c.d);
  for (std::size_t y = 0; y < c.C; ++y) {
    double norm = 0.0;
    for (std::size_t j = 0; j < c.d; ++j) {
      const double v = normal(rng);
      out.centers[y * c.d + j] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < c.d; ++j) out.centers[y * c.d + j] /= norm;
  }

  for (std::size_t k = 0; k < c.K; ++k) {
    out.domains.push_back({static_cast<int>(k), random_orthogonal(c.d, rng), c.noise_sigma});
  }

  std::int64_t next_id = 0;
  std::vector<double> e(c.d);
  for (std::size_t k = 0; k < c.K; ++k) {
    const auto& q = out.domains[k].q;
    std::vector<std::vector<Example>> cells(c.C);
    const std::size_t n = domain_size(c, k);
    for (std::size_t j = 0; j < n; ++j) {
      Example ex;
      ex.id = next_id++;
      ex.tag = static_cast<int>(k);
      ex.label = j % c.C;
      ex.x.assign(c.L * c.d, 0.0);
      for (std::size_t l = 0; l < c.L; ++l) {
        for (std::size_t i = 0; i < c.d; ++i) {
          e[i] = out.centers[ex.label * c.d + i] + c.noise_sigma * normal(rng);
        }
        for (std::size_t r = 0; r < c.d; ++r) {
          double s = 0.0;
          for (std::size_t i = 0; i < c.d; ++i) s += q[r * c.d + i] * e[i];
          ex.x[l * c.d + r] = s;
        }
      }
      cells[ex.label].push_back(std::move(ex));
    }
    // Stratified 80/10/10 per (domain, class) cell.
    for (auto& cell : cells) {
      std::shuffle(cell.begin(), cell.end(), rng);
      const std::size_t held = std::max<std::size_t>(1, (cell.size() + 5) / 10);
      for (std::size_t i = 0; i < cell.size(); ++i) {
        auto& dst = i < held ? out.validation : (i < 2 * held ? out.test : out.train);
        dst.push_back(std::move(cell[i]));
      }
    }
  }
  auto by_id = [](const Example& a, const Example& b) { return a.id < b.id; };
  std::sort(out.train.begin(), out.train.end(), by_id);
  std::sort(out.validation.begin(), out.validation.end(), by_id);
  std::sort(out.test.begin(), out.test.end(), by_id);
  return out;
}

double oracle_accuracy(const DatasetSplits& s, bool use_domain_transform, Split which) {
  const auto& c = s.config;
  const auto& examples = split_examples(s, which);
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  std::vector<double> w(c.d);
  for (const auto& ex : examples) {
    const auto v = pooled(ex, c.L, c.d);
    if (use_domain_transform) {
      const auto& q = s.domains.at(static_cast<std::size_t>(ex.tag)).q;
      for (std::size_t i = 0; i < c.d; ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < c.d; ++r) acc += q[r * c.d + i] * v[r];
        w[i] = acc;
      }
    } else {
      w = v;
    }
    std::size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < c.C; ++y) {
      double dist = 0.0;
      for (std::size_t i = 0; i < c.d; ++i) {
        const double diff = w[i] - s.centers[y * c.d + i];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = y;
      }
    }
    correct += best == ex.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

double max_orthogonality_error(const DatasetSplits& s) {
  const std::size_t d = s.config.d;
  double worst = 0.0;
  for (const auto& dom : s.domains) {
    Eigen::Map<const Matrix> q(dom.q.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    const Matrix err = q.transpose() * q - Matrix::Identity(q.rows(), q.cols());
    worst = std::max(worst, err.cwiseAbs().maxCoeff());
  }
  return worst;
}

// Layout (one record per line, whitespace separated, floats in %a):
//   smear-dataset 1
//   config K C d L n_per_domain noise_sigma seed heterogeneous
//   centers            followed by C lines of d floats
//   domain <id>        followed by d lines of d floats (row-major Q)
//   split <name> <count>
//   example <id> <tag> <label> <L·d floats>   (count lines)
void save_dataset(const DatasetSplits& s, const std::filesystem::path& path) {
  const auto& c = s.config;
  std::ostringstream os;
  os << "smear-dataset 1\n";
  os << "config " << c.K << ' ' << c.C << ' ' << c.d << ' ' << c.L << ' ' << c.n_per_domain << ' '
     << format_hex(c.noise_sigma) << ' ' << c.seed << ' ' << (c.heterogeneous_sizes ? 1 : 0) << '\n';
  os << "centers\n";
  for (std::size_t y = 0; y < c.C; ++y) {
    for (std::size_t j = 0; j < c.d; ++j) os << (j ? " " : "") << format_hex(s.centers[y * c.d + j]);
    os << '\n';
  }
  for (const auto& dom : s.domains) {
    os << "domain " << dom.domain_id << ' ' << format_hex(dom.noise_sigma) << '\n';
    for (std::size_t r = 0; r < c.d; ++r) {
      for (std::size_t j = 0; j < c.d; ++j) os << (j ? " " : "") << format_hex(dom.q[r * c.d + j]);
      os << '\n';
    }
  }
  for (Split which : {Split::train, Split::validation, Split::test}) {
    const auto& ex = split_examples(s, which);
    os << "split " << split_name(which) << ' ' << ex.size() << '\n';
    for (const auto& e : ex) {
      os << "example " << e.id << ' ' << e.tag << ' ' << e.label;
      for (double v : e.x) os << ' ' << format_hex(v);
      os << '\n';
    }
  }
  write_file(path, os.str());
}

DatasetSplits load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("dataset file not found: " + path.string());
  std::ifstream in(path);
  LineReader rd(in, path.string());
  auto f = rd.expect_fields(2);
  if (f[0] != "smear-dataset" || f[1] != "1") rd.fail("not a smear-dataset v1 file");
  DatasetSplits s;
  auto& c = s.config;
  try {
    f = rd.expect_fields(9);
    if (f[0] != "config") rd.fail("expected config line");
    c.K = static_cast<std::size_t>(parse_int(f[1]));
    c.C = static_cast<std::size_t>(parse_int(f[2]));
    c.d = static_cast<std::size_t>(parse_int(f[3]));
    c.L = static_cast<std::size_t>(parse_int(f[4]));
    c.n_per_domain = static_cast<std::size_t>(parse_int(f[5]));
    c.noise_sigma = parse_double(f[6]);
    c.seed = std::stoull(f[7]);
    c.heterogeneous_sizes = parse_int(f[8]) != 0;

    auto read_rows = [&](std::size_t rows, std::size_t cols, std::vector<double>& dst) {
      dst.resize(rows * cols);
      for (std::size_t r = 0; r < rows; ++r) {
        auto row = rd.expect_fields(cols);
        if (row.size() != cols) rd.fail("expected " + std::to_string(cols) + " values");
        for (std::size_t j = 0; j < cols; ++j) dst[r * cols + j] = parse_double(row[j]);
      }
    };
    f = rd.expect_fields(1);
    if (f[0] != "centers") rd.fail("expected centers");
    read_rows(c.C, c.d, s.centers);
    for (std::size_t k = 0; k < c.K; ++k) {
      f = rd.expect_fields(3);
      if (f[0] != "domain") rd.fail("expected domain record");
      DomainSpec dom;
      dom.domain_id = static_cast<int>(parse_int(f[1]));
      dom.noise_sigma = parse_double(f[2]);
      read_rows(c.d, c.d, dom.q);
      s.domains.push_back(std::move(dom));
    }
    for (Split which : {Split::train, Split::validation, Split::test}) {
      f = rd.expect_fields(3);
      if (f[0] != "split" || f[1] != split_name(which)) {
        rd.fail(std::string("expected split ") + split_name(which));
      }
      const auto count = static_cast<std::size_t>(parse_int(f[2]));
      auto& dst = which == Split::train ? s.train : (which == Split::validation ? s.validation : s.test);
      for (std::size_t i = 0; i < count; ++i) {
        auto ef = rd.expect_fields(4 + c.L * c.d);
        if (ef[0] != "example" || ef.size() != 4 + c.L * c.d) rd.fail("malformed example record");
        Example e;
        e.id = parse_int(ef[1]);
        e.tag = static_cast<int>(parse_int(ef[2]));
        e.label = static_cast<std::size_t>(parse_int(ef[3]));
        e.x.resize(c.L * c.d);
        for (std::size_t j = 0; j < e.x.size(); ++j) e.x[j] = parse_double(ef[4 + j]);
        dst.push_back(std::move(e));
      }
    }
  } catch (const ParseError& e) {
    if (std::string(e.what()).rfind(path.string(), 0) == 0) throw;
    rd.fail(e.what());
  }
  return s;
}

}  // namespace smear
