#include "smear/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "smear/io.hpp"

namespace smear {

namespace {

void push_expert(std::vector<NamedTensor>& out, const std::string& prefix, const ExpertParams& e) {
  const auto ts = e.tensors();
  for (std::size_t f = 0; f < ts.size(); ++f) {
    out.push_back({prefix + "." + ExpertParams::kFieldNames[f], ts[f]});
  }
}

std::vector<NamedTensor> block_tensors(const BlockParams& bp, std::size_t b) {
  std::vector<NamedTensor> out;
  const std::string pre = "block" + std::to_string(b);
  for (std::size_t i = 0; i < bp.experts.size(); ++i) {
    push_expert(out, pre + ".expert" + std::to_string(i), bp.experts[i]);
  }
  if (bp.router) out.push_back({pre + ".w_route", bp.router->w_route});
  if (bp.baseline) {
    out.push_back({pre + ".baseline.w1", bp.baseline->w1});
    out.push_back({pre + ".baseline.b1", bp.baseline->b1});
    out.push_back({pre + ".baseline.w2", bp.baseline->w2});
    out.push_back({pre + ".baseline.b2", bp.baseline->b2});
  }
  if (bp.dselect) out.push_back({pre + ".w_sel", bp.dselect->w_sel});
  if (bp.skills) out.push_back({pre + ".skill_logits", bp.skills->logits});
  return out;
}

Tensor copy_tensor(const Tensor& t) { return t.defined() ? t.clone_leaf(t.requires_grad()) : t; }

ExpertParams copy_expert(const ExpertParams& e) {
  return {copy_tensor(e.w_down), copy_tensor(e.b_down), copy_tensor(e.w_up), copy_tensor(e.b_up)};
}

bool finite_all(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

std::vector<NamedTensor> ModelParams::trainable() const {
  std::vector<NamedTensor> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto part = block_tensors(blocks[b], b);
    out.insert(out.end(), part.begin(), part.end());
  }
  out.push_back({"head_w", head_w});
  out.push_back({"head_b", head_b});
  return out;
}

std::vector<NamedTensor> ModelParams::all() const {
  auto out = trainable();
  out.insert(out.begin(), NamedTensor{"trunk", trunk});
  return out;
}

void validate_model_config(const ModelConfig& c) {
  if (c.d == 0 || c.m == 0 || c.L == 0 || c.N == 0 || c.num_classes == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  validate_strategy(c.strategy, c.N);
}

Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

ModelParams init_model(const ModelConfig& c, std::uint64_t seed) {
  validate_model_config(c);
  ModelParams p;
  Rng trunk_rng = make_rng(c.trunk_seed, 0);
  p.trunk = normal_tensor({c.d, c.d}, 1.0 / static_cast<double>(c.d), trunk_rng, false);
  Rng rng = make_rng(seed, 1);
  for (std::size_t b = 0; b < c.num_blocks; ++b) {
    p.blocks.push_back(init_block(c.strategy, c.d, c.m, c.N, rng));
  }
  p.head_w = normal_tensor({c.d, c.num_classes}, 1.0 / static_cast<double>(c.d), rng, true);
  p.head_b = Tensor::zeros({c.num_classes}, true);
  return p;
}

ModelParams clone_params(const ModelParams& src) {
  ModelParams p;
  p.trunk = copy_tensor(src.trunk);
  for (const auto& b : src.blocks) {
    BlockParams nb;
    for (const auto& e : b.experts) nb.experts.push_back(copy_expert(e));
    if (b.router) nb.router = RouterParams{copy_tensor(b.router->w_route)};
    if (b.baseline) {
      nb.baseline = BaselineParams{copy_tensor(b.baseline->w1), copy_tensor(b.baseline->b1),
                                   copy_tensor(b.baseline->w2), copy_tensor(b.baseline->b2)};
    }
    if (b.dselect) nb.dselect = DSelectParams{copy_tensor(b.dselect->w_sel)};
    if (b.skills) nb.skills = SkillMatrix{copy_tensor(b.skills->logits), b.skills->gate_temperature};
    p.blocks.push_back(std::move(nb));
  }
  p.head_w = copy_tensor(src.head_w);
  p.head_b = copy_tensor(src.head_b);
  return p;
}

Batch make_batch(const std::vector<Example>& examples, std::span<const std::size_t> indices,
                 std::size_t L, std::size_t d) {
  Batch batch;
  std::vector<double> x;
  x.reserve(indices.size() * L * d);
  for (const std::size_t i : indices) {
    const Example& e = examples.at(i);
    if (e.x.size() != L * d) {
      throw ShapeError("example " + std::to_string(e.id) + " has " + std::to_string(e.x.size()) +
                       " features, expected " + std::to_string(L * d));
    }
    x.insert(x.end(), e.x.begin(), e.x.end());
    batch.ids.push_back(e.id);
    batch.tags.push_back(e.tag);
    batch.task_ids.push_back(e.tag);
    batch.labels.push_back(e.label);
  }
  batch.x = Tensor::from({indices.size(), L, d}, std::move(x));
  return batch;
}

ForwardResult model_forward(const Batch& batch, const ModelConfig& config,
                            const ModelParams& params, const ForwardOptions& options) {
  const auto& s = batch.x.shape();
  if (s.size() != 3 || s[1] != config.L || s[2] != config.d) {
    throw ShapeError("model_forward: input " + shape_str(s) + " does not match L=" +
                     std::to_string(config.L) + ", d=" + std::to_string(config.d));
  }
  ForwardResult out;
  Tensor h = matmul(batch.x, params.trunk);
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    RoutingContext ctx;
    ctx.training = options.training;
    ctx.step = options.step;
    ctx.block_index = b;
    ctx.example_ids = batch.ids;
    ctx.tags = batch.tags;
    ctx.task_ids = batch.task_ids;
    ctx.rng = options.rng;
    ctx.freeze_noise = options.freeze_noise;
    ctx.activation = options.activation;
    BlockOutput bo = route_block(config.strategy, params.blocks[b], h, ctx);
    h = bo.activations;
    for (auto& [name, value] : bo.aux_losses) {
      auto it = out.aux_losses.find(name);
      if (it == out.aux_losses.end()) {
        out.aux_losses.emplace(name, value);
      } else {
        it->second = it->second + value;
      }
    }
    out.routing.push_back(bo.routing_record);
    if (bo.reinforce) out.reinforce.push_back(*bo.reinforce);
  }
  const Tensor pooled = mean_axis(h, 1);
  out.logits = matmul(pooled, params.head_w) + reshape(params.head_b, {1, config.num_classes});
  return out;
}

namespace {

Tensor sum_aux(const std::map<std::string, Tensor>& aux, Tensor total, LossBreakdown& report,
               double scale = 1.0) {
  for (const auto& [name, value] : aux) {
    const Tensor v = scale == 1.0 ? value : scale * value;
    total = total + v;
    report.aux[name] += v.item();
  }
  return total;
}

Tensor symmetric_kl(const Tensor& logits_a, const Tensor& logits_b) {
  const Tensor pa = softmax_last_axis(logits_a), pb = softmax_last_axis(logits_b);
  const Tensor la = log(pa), lb = log(pb);
  const Tensor kl = sum_axis(pa * (la - lb), 1) + sum_axis(pb * (lb - la), 1);
  return mean(kl);
}

}  // namespace

LossBreakdown training_loss(const Batch& batch, const ModelConfig& config, const ModelParams& params,
                            const ForwardOptions& options) {
  if (batch.size() == 0) throw ContractError("training_loss: empty batch");
  LossBreakdown report;
  const auto* adamix = std::get_if<AdamixConfig>(&config.strategy);
  if (adamix && options.training) {
    // Two independently routed passes; the task loss averages both.
    ForwardResult a = model_forward(batch, config, params, options);
    ForwardResult b = model_forward(batch, config, params, options);
    const Tensor ce = 0.5 * (mean(cross_entropy(a.logits, batch.labels)) +
                             mean(cross_entropy(b.logits, batch.labels)));
    report.task_loss = ce.item();
    const Tensor consistency = adamix->consistency_weight * symmetric_kl(a.logits, b.logits);
    report.aux["consistency"] = consistency.item();
    report.total = ce + consistency;
    return report;
  }
  ForwardResult fwd = model_forward(batch, config, params, options);
  const Tensor per_example = cross_entropy(fwd.logits, batch.labels);
  Tensor total = mean(per_example);
  report.task_loss = total.item();
  total = sum_aux(fwd.aux_losses, total, report);
  if (!fwd.reinforce.empty()) {
    std::vector<double> rewards(per_example.data().begin(), per_example.data().end());
    for (double& r : rewards) r = -r;
    for (const auto& trace : fwd.reinforce) {
      total = sum_aux(reinforce_losses(trace, rewards), total, report);
    }
  }
  report.total = total;
  return report;
}

OptimState make_optimizer(const std::vector<NamedTensor>& params, AdamOptions options) {
  OptimState s;
  s.options = options;
  for (const auto& p : params) {
    s.first.emplace_back(p.tensor.numel(), 0.0);
    s.second.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adam_update(OptimState& s, const std::vector<NamedTensor>& params) {
  if (params.size() != s.first.size()) {
    throw ContractError("adam_update: optimizer tracks " + std::to_string(s.first.size()) +
                        " tensors, got " + std::to_string(params.size()));
  }
  ++s.step;
  const auto& o = s.options;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].tensor;
    if (s.first[k].size() != p.numel()) throw ContractError("adam_update: moment shape mismatch");
    if (!p.has_grad()) continue;  // untouched this step: zero gradient
    const std::vector<double> g = p.grad();
    auto w = p.mutable_data();
    auto& m1 = s.first[k];
    auto& m2 = s.second[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m1[i] = o.beta1 * m1[i] + (1.0 - o.beta1) * g[i];
      m2[i] = o.beta2 * m2[i] + (1.0 - o.beta2) * g[i] * g[i];
      w[i] -= o.lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + o.epsilon);
    }
  }
}

MetricsRecord train_step(const Batch& batch, ModelParams& params, OptimState& optim,
                         const ModelConfig& config, Rng& rng) {
  const auto named = params.trainable();
  for (auto p : named) p.tensor.zero_grad();
  ForwardOptions opt;
  opt.training = true;
  opt.step = optim.step;
  opt.rng = &rng;
  LossBreakdown loss = training_loss(batch, config, params, opt);
  const double value = loss.total.item();
  if (!std::isfinite(value)) {
    std::string culprit = "none (all parameters finite)";
    for (const auto& p : params.all()) {
      if (!finite_all(p.tensor.data())) {
        culprit = p.name;
        break;
      }
    }
    throw TrainingError("non-finite loss at step " + std::to_string(optim.step) +
                        "; first non-finite parameter: " + culprit);
  }
  loss.total.backward();
  adam_update(optim, named);
  return {optim.step - 1, "train", "all", "loss", value};
}

EvalResult evaluate(const std::vector<Example>& examples, const ModelConfig& config,
                    const ModelParams& params) {
  EvalResult r;
  r.routing_mean.resize(params.blocks.size());
  std::map<int, std::size_t> count, correct;
  std::map<int, double> loss_sum;
  std::vector<std::map<int, std::vector<double>>> routing_sum(params.blocks.size());
  constexpr std::size_t kChunk = 256;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    const std::size_t stop = std::min(examples.size(), start + kChunk);
    idx.resize(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const Batch batch = make_batch(examples, idx, config.L, config.d);
    const ForwardResult fwd = model_forward(batch, config, params, ForwardOptions{});
    const Tensor ce = cross_entropy(fwd.logits, batch.labels);
    const auto pred = argmax_rows(fwd.logits);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const int tag = batch.tags[i];
      ++count[tag];
      correct[tag] += pred[i] == batch.labels[i] ? 1 : 0;
      loss_sum[tag] += ce.data()[i];
      for (std::size_t b = 0; b < fwd.routing.size(); ++b) {
        const Tensor& rec = fwd.routing[b];
        const std::size_t n = rec.dim(1);
        auto& acc = routing_sum[b][tag];
        acc.resize(n, 0.0);
        for (std::size_t e = 0; e < n; ++e) acc[e] += rec.data()[i * n + e];
      }
    }
  }
  std::size_t total = 0, total_correct = 0;
  double total_loss = 0.0;
  for (const auto& [tag, n] : count) {
    const double dn = static_cast<double>(n);
    r.domain_accuracy[tag] = static_cast<double>(correct[tag]) / dn;
    r.domain_loss[tag] = loss_sum[tag] / dn;
    total += n;
    total_correct += correct[tag];
    total_loss += loss_sum[tag];
    for (std::size_t b = 0; b < routing_sum.size(); ++b) {
      auto row = routing_sum[b][tag];
      for (double& v : row) v /= dn;
      r.routing_mean[b][tag] = std::move(row);
    }
  }
  if (total > 0) {
    r.accuracy = static_cast<double>(total_correct) / static_cast<double>(total);
    r.loss = total_loss / static_cast<double>(total);
  }
  return r;
}

std::vector<MetricsRecord> eval_metrics(const EvalResult& r, std::size_t step, const std::string& split) {
  std::vector<MetricsRecord> out;
  for (const auto& [tag, acc] : r.domain_accuracy) {
    out.push_back({step, split, std::to_string(tag), "accuracy", acc});
    out.push_back({step, split, std::to_string(tag), "loss", r.domain_loss.at(tag)});
  }
  out.push_back({step, split, "all", "accuracy", r.accuracy});
  out.push_back({step, split, "all", "loss", r.loss});
  return out;
}

RunResult train_run(const DatasetSplits& data, const ModelConfig& config,
                    const TrainOptions& options, std::uint64_t seed) {
  if (data.train.empty()) throw ConfigError("training split is empty");
  if (options.batch == 0) throw ConfigError("batch size must be positive");
  RunResult run;
  run.params = init_model(config, seed);
  OptimState optim = make_optimizer(run.params.trainable(), AdamOptions{.lr = options.lr});
  Rng batch_rng = make_rng(seed, 2);
  Rng route_rng = make_rng(seed, 3);
  std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
  std::vector<std::size_t> idx(options.batch);
  for (std::size_t step = 0; step < options.steps; ++step) {
    for (auto& i : idx) i = pick(batch_rng);
    const Batch batch = make_batch(data.train, idx, config.L, config.d);
    const MetricsRecord rec = train_step(batch, run.params, optim, config, route_rng);
    const bool log = step == 0 || step + 1 == options.steps ||
                     (options.log_every > 0 && step % options.log_every == 0);
    if (log) run.metrics.push_back(rec);
  }
  run.validation = evaluate(data.validation, config, run.params);
  run.test = evaluate(data.test, config, run.params);
  for (const auto& m : eval_metrics(run.validation, options.steps, "validation")) run.metrics.push_back(m);
  for (const auto& m : eval_metrics(run.test, options.steps, "test")) run.metrics.push_back(m);
  return run;
}

// ---- checkpoints -------------------------------------------------------------

namespace {

struct Slot {
  long long block;
  long long expert;
  std::string field;
  Tensor tensor;
};

std::vector<Slot> checkpoint_slots(const ModelParams& p) {
  std::vector<Slot> out;
  out.push_back({-1, -1, "trunk", p.trunk});
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const auto bi = static_cast<long long>(b);
    const BlockParams& bp = p.blocks[b];
    for (std::size_t e = 0; e < bp.experts.size(); ++e) {
      const auto ts = bp.experts[e].tensors();
      for (std::size_t f = 0; f < ts.size(); ++f) {
        out.push_back({bi, static_cast<long long>(e), ExpertParams::kFieldNames[f], ts[f]});
      }
    }
    if (bp.router) out.push_back({bi, -1, "w_route", bp.router->w_route});
    if (bp.baseline) {
      out.push_back({bi, -1, "baseline.w1", bp.baseline->w1});
      out.push_back({bi, -1, "baseline.b1", bp.baseline->b1});
      out.push_back({bi, -1, "baseline.w2", bp.baseline->w2});
      out.push_back({bi, -1, "baseline.b2", bp.baseline->b2});
    }
    if (bp.dselect) out.push_back({bi, -1, "w_sel", bp.dselect->w_sel});
    if (bp.skills) out.push_back({bi, -1, "skill_logits", bp.skills->logits});
  }
  out.push_back({-1, -1, "head_w", p.head_w});
  out.push_back({-1, -1, "head_b", p.head_b});
  return out;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "smear-checkpoint 1\n";
  for (const auto& s : checkpoint_slots(params)) {
    const auto& shape = s.tensor.shape();
    os << "tensor " << s.block << ' ' << s.expert << ' ' << s.field << ' ' << shape.size();
    for (auto n : shape) os << ' ' << n;
    os << '\n';
    bool first = true;
    for (double v : s.tensor.data()) {
      if (!first) os << ' ';
      os << format_hex(v);
      first = false;
    }
    os << '\n';
  }
  write_file(path, os.str());
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  ModelParams p = init_model(config, 0);
  auto slots = checkpoint_slots(p);
  std::vector<bool> filled(slots.size(), false);
  std::ifstream in(path);
  LineReader reader(in, path.string());
  const auto header = reader.expect_fields(2);
  if (header[0] != "smear-checkpoint" || header[1] != "1") reader.fail("not a checkpoint file");
  std::string line;
  while (reader.next(line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::vector<std::string> f;
    for (std::string w; is >> w;) f.push_back(w);
    if (f.size() < 5 || f[0] != "tensor") reader.fail("expected a tensor record");
    const long long block = parse_int(f[1]), expert = parse_int(f[2]);
    const std::string& field = f[3];
    const auto rank = static_cast<std::size_t>(parse_int(f[4]));
    if (f.size() != 5 + rank) reader.fail("shape has the wrong number of dimensions");
    Shape shape;
    for (std::size_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(parse_int(f[5 + i])));
    const auto values = reader.expect_fields(0);
    std::size_t k = 0;
    for (; k < slots.size(); ++k) {
      if (slots[k].block == block && slots[k].expert == expert && slots[k].field == field) break;
    }
    const std::string label = "block " + f[1] + " expert " + f[2] + " " + field;
    if (k == slots.size()) throw ShapeError("checkpoint/config dimension mismatch: unexpected " + label);
    if (shape != slots[k].tensor.shape()) {
      throw ShapeError("checkpoint/config dimension mismatch: " + label + " has shape " +
                       shape_str(shape) + ", config expects " + shape_str(slots[k].tensor.shape()));
    }
    if (values.size() != shape_numel(shape)) reader.fail("value count does not match shape");
    auto dst = slots[k].tensor.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) dst[i] = parse_double(values[i]);
    filled[k] = true;
  }
  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (!filled[k]) {
      throw ShapeError("checkpoint/config dimension mismatch: missing block " +
                       std::to_string(slots[k].block) + " expert " + std::to_string(slots[k].expert) +
                       " " + slots[k].field);
    }
  }
  return p;
}

}  // namespace smear
