#include "smear/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "smear/io.hpp"

namespace smear {

using nlohmann::json;

namespace {

// Consumes keys from one JSON object and rejects whatever is left over.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* raw(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void number(const char* key, double& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number()) throw ConfigError(path(key) + ": expected a number");
      out = v->get<double>();
      if (!std::isfinite(out)) throw ConfigError(path(key) + ": must be finite");
    }
  }

  template <class T>
  void count(const char* key, T& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0)) {
        throw ConfigError(path(key) + ": expected a non-negative integer");
      }
      out = static_cast<T>(v->get<std::uint64_t>());
    }
  }

  void boolean(const char* key, bool& out) {
    if (const json* v = raw(key)) {
      if (!v->is_boolean()) throw ConfigError(path(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }

  void string(const char* key, std::string& out) {
    if (const json* v = raw(key)) {
      if (!v->is_string()) throw ConfigError(path(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path(it.key().c_str()) + ": unknown key");
    }
  }

  std::string path(const char* key) const { return where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

std::map<int, std::size_t> parse_tag_map(const json& v, std::size_t K, std::size_t N) {
  std::map<int, std::size_t> map;
  if (v.is_string()) {
    if (v.get<std::string>() != "modulo") {
      throw ConfigError("strategy.map: expected an object or \"modulo\"");
    }
    for (std::size_t k = 0; k < K; ++k) map[static_cast<int>(k)] = k % N;
    return map;
  }
  if (!v.is_object()) throw ConfigError("strategy.map: expected an object or \"modulo\"");
  for (auto it = v.begin(); it != v.end(); ++it) {
    long long tag = 0;
    try {
      tag = parse_int(it.key());
    } catch (const ParseError&) {
      throw ConfigError("strategy.map: tag '" + it.key() + "' is not an integer");
    }
    if (!it->is_number_unsigned()) {
      throw ConfigError("strategy.map." + it.key() + ": expected an expert index");
    }
    map[static_cast<int>(tag)] = it->get<std::size_t>();
  }
  return map;
}

// Fields of `j` (minus "name") applied on top of the strategy's defaults.
StrategyConfig strategy_from_json(const std::string& name, const json& j, const std::string& where,
                                  std::size_t K, std::size_t N) {
  StrategyConfig cfg = default_strategy(name);
  ObjectReader r(j, where);
  r.raw("name");
  if (auto* c = std::get_if<SmearConfig>(&cfg)) r.number("expert_dropout_p", c->expert_dropout_p);
  if (auto* c = std::get_if<Top1Config>(&cfg)) r.number("expert_dropout_p", c->expert_dropout_p);
  if (auto* c = std::get_if<STGumbelConfig>(&cfg)) {
    r.number("tau0", c->tau0);
    r.number("anneal_rate", c->anneal_rate);
    r.number("tau_min", c->tau_min);
  }
  if (auto* c = std::get_if<ReinforceConfig>(&cfg)) {
    r.number("alpha", c->alpha);
    r.number("beta", c->beta);
    r.number("gamma", c->gamma);
    r.count("baseline_hidden", c->baseline_hidden);
    std::string sign = c->entropy_sign == EntropySign::literal ? "literal" : "exploration";
    r.string("entropy_sign", sign);
    if (sign == "literal") {
      c->entropy_sign = EntropySign::literal;
    } else if (sign == "exploration") {
      c->entropy_sign = EntropySign::exploration;
    } else {
      throw ConfigError(r.path("entropy_sign") + ": expected \"literal\" or \"exploration\"");
    }
  }
  if (auto* c = std::get_if<DSelect1Config>(&cfg)) {
    r.number("step_gamma", c->step_gamma);
    r.number("entropy_weight", c->entropy_weight);
  }
  if (auto* c = std::get_if<HashConfig>(&cfg)) r.count("seed", c->seed);
  if (auto* c = std::get_if<TagConfig>(&cfg)) {
    if (const json* v = r.raw("map")) c->map = parse_tag_map(*v, K, N);
  }
  if (auto* c = std::get_if<SingleExpertConfig>(&cfg)) r.count("width_multiplier", c->width_multiplier);
  if (auto* c = std::get_if<AdamixConfig>(&cfg)) r.number("consistency_weight", c->consistency_weight);
  if (auto* c = std::get_if<LatentSkillsConfig>(&cfg)) {
    c->num_tasks = K;  // tasks are domains unless stated otherwise
    r.count("num_tasks", c->num_tasks);
    r.number("gate_temperature", c->gate_temperature);
  }
  r.finish();
  return cfg;
}

void validate_experiment_strategy(const StrategyConfig& cfg, const ExperimentConfig& c) {
  validate_strategy(cfg, c.N);
  if (const auto* s = std::get_if<SingleExpertConfig>(&cfg)) {
    if (s->width_multiplier != 1 && s->width_multiplier != c.N) {
      throw ConfigError("single_expert: width_multiplier must be 1 or N");
    }
  }
  if (const auto* t = std::get_if<TagConfig>(&cfg)) {
    for (const auto& [tag, e] : t->map) {
      if (e >= c.N) {
        throw ConfigError("tag map sends tag " + std::to_string(tag) + " to expert " +
                          std::to_string(e) + " but N=" + std::to_string(c.N));
      }
    }
    for (std::size_t k = 0; k < c.dataset.K; ++k) {
      if (!t->map.count(static_cast<int>(k))) {
        throw ConfigError("tag map has no entry for domain " + std::to_string(k));
      }
    }
  }
  if (const auto* l = std::get_if<LatentSkillsConfig>(&cfg)) {
    if (l->num_tasks < c.dataset.K) {
      throw ConfigError("latent_skills: num_tasks must cover all " + std::to_string(c.dataset.K) +
                        " domains");
    }
    if (!(l->gate_temperature > 0.0)) throw ConfigError("latent_skills: gate_temperature must be positive");
  }
}

std::string hex8(std::uint64_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", static_cast<unsigned>(v & 0xffffffffu));
  return buf;
}

std::vector<std::string> csv_fields(const std::string& line, std::size_t expected, const LineReader& reader) {
  auto f = split(line, ',');
  if (f.size() != expected) {
    reader.fail("expected " + std::to_string(expected) + " fields, got " + std::to_string(f.size()));
  }
  return f;
}

template <class F>
auto parse_field(const LineReader& reader, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ParseError& e) {
    reader.fail(e.what());
  }
}

}  // namespace

// ---- configuration -------------------------------------------------------------

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
  return dataset == o.dataset && dataset_path == o.dataset_path && m == o.m && N == o.N &&
         num_blocks == o.num_blocks && trunk_seed == o.trunk_seed && strategy == o.strategy &&
         optimizer.lr == o.optimizer.lr && optimizer.batch == o.optimizer.batch &&
         optimizer.steps == o.optimizer.steps && optimizer.log_every == o.optimizer.log_every &&
         seeds == o.seeds && output_dir == o.output_dir && strategy_options == o.strategy_options;
}

ExperimentConfig parse_config(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader top(root, "config");

  if (const json* ds = top.raw("dataset")) {
    ObjectReader r(*ds, "dataset");
    r.count("K", c.dataset.K);
    r.count("C", c.dataset.C);
    r.count("d", c.dataset.d);
    r.count("L", c.dataset.L);
    r.count("n_per_domain", c.dataset.n_per_domain);
    r.number("noise_sigma", c.dataset.noise_sigma);
    r.count("seed", c.dataset.seed);
    r.boolean("heterogeneous_sizes", c.dataset.heterogeneous_sizes);
    r.string("path", c.dataset_path);
    r.finish();
  }
  if (const json* md = top.raw("model")) {
    ObjectReader r(*md, "model");
    r.count("m", c.m);
    r.count("N", c.N);
    r.count("num_blocks", c.num_blocks);
    r.count("trunk_seed", c.trunk_seed);
    r.finish();
  }
  if (const json* op = top.raw("optimizer")) {
    ObjectReader r(*op, "optimizer");
    r.number("lr", c.optimizer.lr);
    r.count("batch", c.optimizer.batch);
    r.count("steps", c.optimizer.steps);
    r.count("log_every", c.optimizer.log_every);
    r.finish();
  }
  if (const json* seeds = top.raw("seeds")) {
    if (!seeds->is_array() || seeds->empty()) throw ConfigError("config.seeds: expected a non-empty array");
    c.seeds.clear();
    for (const auto& s : *seeds) {
      if (!s.is_number_unsigned()) throw ConfigError("config.seeds: expected non-negative integers");
      c.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  top.string("output_dir", c.output_dir);
  if (const json* so = top.raw("strategy_options")) {
    if (!so->is_object()) throw ConfigError("config.strategy_options: expected an object");
    for (auto it = so->begin(); it != so->end(); ++it) {
      default_strategy(it.key());  // rejects unknown names
      if (!it->is_object()) throw ConfigError("config.strategy_options." + it.key() + ": expected an object");
      c.strategy_options[it.key()] = *it;
    }
  }
  const json* st = top.raw("strategy");
  top.finish();

  if (c.dataset.K == 0 || c.dataset.C == 0 || c.dataset.d == 0 || c.dataset.L == 0 ||
      c.dataset.n_per_domain == 0) {
    throw ConfigError("dataset dimensions must be positive");
  }
  if (!(c.dataset.noise_sigma >= 0.0)) throw ConfigError("dataset.noise_sigma must be >= 0");
  if (c.m == 0 || c.N == 0) throw ConfigError("model.m and model.N must be positive");
  if (!(c.optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (c.optimizer.batch == 0) throw ConfigError("optimizer.batch must be positive");

  if (st) {
    if (!st->is_object() || !st->contains("name") || !(*st)["name"].is_string()) {
      throw ConfigError("config.strategy: expected an object with a string \"name\"");
    }
    c.strategy = strategy_from_json((*st)["name"].get<std::string>(), *st, "strategy", c.dataset.K, c.N);
  }
  validate_experiment_strategy(c.strategy, c);
  // Canonicalize option blocks so that serialization round-trips exactly.
  for (auto& [name, opts] : c.strategy_options) {
    json full = opts;
    full["name"] = name;
    opts = strategy_to_json(strategy_from_json(name, full, "strategy_options." + name, c.dataset.K, c.N));
    opts.erase("name");
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(read_file(path));
}

json strategy_to_json(const StrategyConfig& strategy) {
  json j;
  j["name"] = strategy_name(strategy);
  if (const auto* c = std::get_if<SmearConfig>(&strategy)) j["expert_dropout_p"] = c->expert_dropout_p;
  if (const auto* c = std::get_if<Top1Config>(&strategy)) j["expert_dropout_p"] = c->expert_dropout_p;
  if (const auto* c = std::get_if<STGumbelConfig>(&strategy)) {
    j["tau0"] = c->tau0;
    j["anneal_rate"] = c->anneal_rate;
    j["tau_min"] = c->tau_min;
  }
  if (const auto* c = std::get_if<ReinforceConfig>(&strategy)) {
    j["alpha"] = c->alpha;
    j["beta"] = c->beta;
    j["gamma"] = c->gamma;
    j["baseline_hidden"] = c->baseline_hidden;
    j["entropy_sign"] = c->entropy_sign == EntropySign::literal ? "literal" : "exploration";
  }
  if (const auto* c = std::get_if<DSelect1Config>(&strategy)) {
    j["step_gamma"] = c->step_gamma;
    j["entropy_weight"] = c->entropy_weight;
  }
  if (const auto* c = std::get_if<HashConfig>(&strategy)) j["seed"] = c->seed;
  if (const auto* c = std::get_if<TagConfig>(&strategy)) {
    json map = json::object();
    for (const auto& [tag, e] : c->map) map[std::to_string(tag)] = e;
    j["map"] = map;
  }
  if (const auto* c = std::get_if<SingleExpertConfig>(&strategy)) j["width_multiplier"] = c->width_multiplier;
  if (const auto* c = std::get_if<AdamixConfig>(&strategy)) j["consistency_weight"] = c->consistency_weight;
  if (const auto* c = std::get_if<LatentSkillsConfig>(&strategy)) {
    j["num_tasks"] = c->num_tasks;
    j["gate_temperature"] = c->gate_temperature;
  }
  return j;
}

std::string serialize_config(const ExperimentConfig& c) {
  json j;
  j["dataset"] = {{"K", c.dataset.K},
                  {"C", c.dataset.C},
                  {"d", c.dataset.d},
                  {"L", c.dataset.L},
                  {"n_per_domain", c.dataset.n_per_domain},
                  {"noise_sigma", c.dataset.noise_sigma},
                  {"seed", c.dataset.seed},
                  {"heterogeneous_sizes", c.dataset.heterogeneous_sizes},
                  {"path", c.dataset_path}};
  j["model"] = {{"m", c.m}, {"N", c.N}, {"num_blocks", c.num_blocks}, {"trunk_seed", c.trunk_seed}};
  j["strategy"] = strategy_to_json(c.strategy);
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"batch", c.optimizer.batch},
                    {"steps", c.optimizer.steps},
                    {"log_every", c.optimizer.log_every}};
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["strategy_options"] = json::object();
  for (const auto& [name, opts] : c.strategy_options) j["strategy_options"][name] = opts;
  return j.dump(2) + "\n";
}

StrategyConfig resolve_strategy(const ExperimentConfig& config, std::string_view name) {
  StrategyConfig cfg;
  if (strategy_name(config.strategy) == name) {
    cfg = config.strategy;
  } else {
    json j = json::object();
    if (auto it = config.strategy_options.find(std::string(name)); it != config.strategy_options.end()) {
      j = it->second;
    }
    cfg = strategy_from_json(std::string(name), j, "strategy_options." + std::string(name),
                             config.dataset.K, config.N);
  }
  validate_experiment_strategy(cfg, config);
  return cfg;
}

ModelConfig model_config(const ExperimentConfig& c) {
  ModelConfig mc;
  mc.d = c.dataset.d;
  mc.m = c.m;
  mc.L = c.dataset.L;
  mc.N = c.N;
  mc.num_blocks = c.num_blocks;
  mc.num_classes = c.dataset.C;
  mc.strategy = c.strategy;
  mc.trunk_seed = c.trunk_seed;
  return mc;
}

DatasetSplits obtain_dataset(const ExperimentConfig& c) {
  if (c.dataset_path.empty()) return generate(c.dataset);
  if (!std::filesystem::exists(c.dataset_path)) {
    throw DatasetMissingError("dataset file not found: " + c.dataset_path);
  }
  DatasetSplits data = load_dataset(c.dataset_path);
  const auto& g = data.config;
  if (g.d != c.dataset.d || g.L != c.dataset.L || g.C != c.dataset.C || g.K != c.dataset.K) {
    throw ConfigError("dataset file " + c.dataset_path + " does not match the configured K, C, d, L");
  }
  return data;
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.seeds = {0};
  c.output_dir.clear();
  const std::string text = serialize_config(c);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string run_directory_name(const ExperimentConfig& config, std::uint64_t seed) {
  return strategy_name(config.strategy) + "-seed" + std::to_string(seed) + "-" + hex8(config_hash(config));
}

// ---- runs ----------------------------------------------------------------------

std::vector<RunArtifacts> train_all(const ExperimentConfig& config, const DatasetSplits& data,
                                    const std::filesystem::path& out, bool force) {
  const ModelConfig mc = model_config(config);
  // Refuse before training anything so that a partial rerun never happens.
  for (const auto seed : config.seeds) {
    const auto dir = out / run_directory_name(config, seed);
    if (std::filesystem::exists(dir) && !force) {
      throw RunExistsError("run directory " + dir.string() + " exists; pass --force to overwrite");
    }
  }
  std::vector<RunArtifacts> runs;
  for (const auto seed : config.seeds) {
    const auto dir = out / run_directory_name(config, seed);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const RunResult result = train_run(data, mc, config.optimizer, seed);
    ExperimentConfig single = config;
    single.seeds = {seed};
    write_file(dir / "config.json", serialize_config(single));
    write_file(dir / "metrics.csv", metrics_csv(result.metrics));
    write_file(dir / "routing.csv", routing_csv(result.test));
    save_checkpoint(result.params, dir / "checkpoint.txt");
    runs.push_back({strategy_name(config.strategy), seed, dir, result.test.accuracy});
  }
  return runs;
}

SummaryRow summarize(const std::string& strategy, const std::vector<double>& acc) {
  SummaryRow row;
  row.strategy = strategy;
  row.seeds = acc.size();
  if (acc.empty()) return row;
  double sum = 0.0;
  for (double a : acc) sum += a;
  row.mean_accuracy = sum / static_cast<double>(acc.size());
  if (acc.size() > 1) {
    double ss = 0.0;
    for (double a : acc) ss += (a - row.mean_accuracy) * (a - row.mean_accuracy);
    row.std_accuracy = std::sqrt(ss / static_cast<double>(acc.size() - 1));
  }
  return row;
}

std::vector<SummaryRow> compare(const ExperimentConfig& config, const std::vector<std::string>& strategies,
                                const std::filesystem::path& out, bool force) {
  if (strategies.empty()) throw ConfigError("compare needs at least one strategy");
  std::vector<ExperimentConfig> configs;
  for (const auto& name : strategies) {
    ExperimentConfig c = config;
    c.strategy = resolve_strategy(config, name);
    configs.push_back(std::move(c));
  }
  const DatasetSplits data = obtain_dataset(config);
  std::vector<SummaryRow> rows;
  for (const auto& c : configs) {
    std::vector<double> acc;
    for (const auto& run : train_all(c, data, out, force)) acc.push_back(run.test_accuracy);
    rows.push_back(summarize(strategy_name(c.strategy), acc));
  }
  write_file(out / "summary.csv", summary_csv(rows));
  return rows;
}

// ---- file formats --------------------------------------------------------------

std::string metrics_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  os << "step,split,domain,metric,value\n";
  for (const auto& r : records) {
    os << r.step << ',' << r.split << ',' << r.domain << ',' << r.metric << ',' << format_exact(r.value) << '\n';
  }
  return os.str();
}

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  LineReader reader(in, source);
  std::string line;
  if (!reader.next(line) || line != "step,split,domain,metric,value") reader.fail("missing metrics header");
  std::vector<MetricsRecord> out;
  while (reader.next(line)) {
    if (line.empty()) continue;
    const auto f = csv_fields(line, 5, reader);
    MetricsRecord r;
    r.step = parse_field(reader, [&] { return static_cast<std::size_t>(parse_int(f[0])); });
    r.split = f[1];
    r.domain = f[2];
    r.metric = f[3];
    r.value = parse_field(reader, [&] { return parse_double(f[4]); });
    out.push_back(std::move(r));
  }
  return out;
}

std::string routing_csv(const EvalResult& result) {
  std::ostringstream os;
  os << "block,domain,expert,mean_prob\n";
  for (std::size_t b = 0; b < result.routing_mean.size(); ++b) {
    for (const auto& [domain, row] : result.routing_mean[b]) {
      for (std::size_t e = 0; e < row.size(); ++e) {
        os << b << ',' << domain << ',' << e << ',' << format_exact(row[e]) << '\n';
      }
    }
  }
  return os.str();
}

std::vector<RoutingRow> parse_routing_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  LineReader reader(in, source);
  std::string line;
  if (!reader.next(line) || line != "block,domain,expert,mean_prob") reader.fail("missing routing header");
  std::vector<RoutingRow> out;
  while (reader.next(line)) {
    if (line.empty()) continue;
    const auto f = csv_fields(line, 4, reader);
    RoutingRow r;
    r.block = parse_field(reader, [&] { return static_cast<std::size_t>(parse_int(f[0])); });
    r.domain = parse_field(reader, [&] { return static_cast<int>(parse_int(f[1])); });
    r.expert = parse_field(reader, [&] { return static_cast<std::size_t>(parse_int(f[2])); });
    r.mean_prob = parse_field(reader, [&] { return parse_double(f[3]); });
    out.push_back(r);
  }
  return out;
}

std::vector<std::filesystem::path> export_routing_matrices(const std::filesystem::path& path,
                                                           const std::filesystem::path& out) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("routing file not found: " + path.string());
  const auto rows = parse_routing_csv(read_file(path), path.string());
  std::map<std::size_t, std::map<int, std::vector<double>>> blocks;
  for (const auto& r : rows) {
    auto& row = blocks[r.block][r.domain];
    if (row.size() <= r.expert) row.resize(r.expert + 1, 0.0);
    row[r.expert] = r.mean_prob;
  }
  std::vector<std::filesystem::path> written;
  for (const auto& [b, domains] : blocks) {
    std::size_t n = 0;
    for (const auto& [dom, row] : domains) n = std::max(n, row.size());
    std::ostringstream os;
    os << "domain";
    for (std::size_t e = 0; e < n; ++e) os << ",e" << e;
    os << '\n';
    for (const auto& [dom, row] : domains) {
      os << dom;
      for (std::size_t e = 0; e < n; ++e) os << ',' << format_exact(e < row.size() ? row[e] : 0.0);
      os << '\n';
    }
    const auto file = out / ("routing_block" + std::to_string(b) + ".csv");
    write_file(file, os.str());
    written.push_back(file);
  }
  return written;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "strategy,num_seeds,mean_test_accuracy,std_test_accuracy\n";
  for (const auto& r : rows) {
    os << r.strategy << ',' << r.seeds << ',' << format_exact(r.mean_accuracy) << ','
       << format_exact(r.std_accuracy) << '\n';
  }
  return os.str();
}

std::vector<SummaryRow> parse_summary_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  LineReader reader(in, source);
  std::string line;
  if (!reader.next(line) || line != "strategy,num_seeds,mean_test_accuracy,std_test_accuracy") {
    reader.fail("missing summary header");
  }
  std::vector<SummaryRow> out;
  while (reader.next(line)) {
    if (line.empty()) continue;
    const auto f = csv_fields(line, 4, reader);
    SummaryRow r;
    r.strategy = f[0];
    r.seeds = parse_field(reader, [&] { return static_cast<std::size_t>(parse_int(f[1])); });
    r.mean_accuracy = parse_field(reader, [&] { return parse_double(f[2]); });
    r.std_accuracy = parse_field(reader, [&] { return parse_double(f[3]); });
    out.push_back(r);
  }
  return out;
}

std::vector<CostReport> cost_reports(const ExperimentConfig& config, int timing_repeats) {
  const CostDims dims{config.dataset.L, config.N, config.dataset.d, config.m};
  std::vector<CostReport> out;
  for (const char* name : kStrategyNames) {
    StrategyConfig cfg;
    try {
      cfg = resolve_strategy(config, name);
    } catch (const ConfigError&) {
      if (std::string_view(name) != "tag") continue;  // e.g. dselect1 with N not a power of two
      cfg = TagConfig{};
    }
    out.push_back(measure_block_cost(cfg, dims, CostPhase::inference, 0, timing_repeats));
  }
  return out;
}

std::string cost_csv(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  os << "strategy,L,N,d,m,analytic,measured,wall_clock_us\n";
  for (const auto& r : reports) {
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", r.wall_clock_us_per_example);
    os << r.strategy << ',' << r.dims.L << ',' << r.dims.N << ',' << r.dims.d << ',' << r.dims.m << ','
       << r.analytic_flops << ',' << r.measured_flops << ',' << wall << '\n';
  }
  return os.str();
}

// ---- gradient checks -----------------------------------------------------------

std::vector<GradCheckCase> model_grad_checks(std::uint64_t seed) {
  std::vector<GradCheckCase> out;
  const std::vector<std::pair<std::string, StrategyConfig>> cases = {
      {"smear", SmearConfig{}},
      {"ensemble", EnsembleConfig{}},
      {"latent_skills", LatentSkillsConfig{2, 1.0}},
  };
  for (const auto& [name, strategy] : cases) {
    const auto start = std::chrono::steady_clock::now();
    ModelConfig mc;
    mc.d = 8;
    mc.m = 4;
    mc.N = 3;
    mc.L = 2;
    mc.num_blocks = 2;
    mc.num_classes = 4;
    mc.strategy = strategy;
    ModelParams params = init_model(mc, seed);
    // Larger up-projections and nonzero biases so every path carries signal.
    Rng rng = make_rng(seed, 7);
    std::normal_distribution<double> normal(0.0, 0.5);
    for (auto& block : params.blocks) {
      for (auto& e : block.experts) {
        for (Tensor t : {e.w_up, e.b_down, e.b_up}) {
          for (double& v : t.mutable_data()) v = normal(rng);
        }
      }
    }
    Batch batch;
    std::vector<double> x(2 * mc.L * mc.d);
    for (double& v : x) v = normal(rng) * 2.0;
    batch.x = Tensor::from({2, mc.L, mc.d}, x);
    batch.ids = {0, 1};
    batch.tags = {0, 1};
    batch.task_ids = {0, 1};
    batch.labels = {1, 3};
    ForwardOptions opt;
    opt.training = std::holds_alternative<LatentSkillsConfig>(strategy);
    opt.freeze_noise = true;
    opt.rng = &rng;
    std::vector<Tensor> tensors;
    for (const auto& p : params.trainable()) tensors.push_back(p.tensor);
    const auto res = grad_check_params(
        [&] { return training_loss(batch, mc, params, opt).total; }, tensors);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.push_back({name, res.max_rel_error, secs});
  }
  return out;
}

}  // namespace smear
