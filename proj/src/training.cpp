#include "recurformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rfm {

void TrainConfig::validate() const {
  if (learning_rate <= 0) throw config_error("train config: learning_rate must be positive");
  if (batch_size <= 0) throw config_error("train config: batch_size must be positive");
  if (steps <= 0) throw config_error("train config: steps must be positive");
  if (grad_clip <= 0) throw config_error("train config: grad_clip must be positive");
  if (weight_decay < 0) throw config_error("train config: weight_decay must be nonnegative");
  if (warmup_steps < 0 || warmup_steps > steps) {
    throw config_error("train config: warmup_steps must lie in [0, steps]");
  }
}

double lr_at(const TrainConfig& cfg, i64 step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.learning_rate * static_cast<double>(step + 1) /
           static_cast<double>(cfg.warmup_steps);
  }
  const i64 decay_steps = cfg.steps - cfg.warmup_steps;
  if (decay_steps <= 0) return cfg.learning_rate;
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(decay_steps);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

double TrainTrace::final_loss(i64 window) const {
  if (rows.empty()) return 0.0;
  const i64 n = std::min<i64>(window, static_cast<i64>(rows.size()));
  double s = 0.0;
  for (i64 i = static_cast<i64>(rows.size()) - n; i < static_cast<i64>(rows.size()); ++i) {
    s += rows[static_cast<size_t>(i)].loss;
  }
  return s / static_cast<double>(n);
}

void write_trace_csv(const TrainTrace& trace, const std::string& metric_name,
                     const std::string& path) {
  std::ostringstream out;
  out << "step,loss," << metric_name << "\n";
  for (const TraceRow& r : trace.rows) {
    out << r.step << "," << format_double(r.loss) << ",";
    if (r.has_metric) out << format_double(r.metric);
    out << "\n";
  }
  write_text_file(path, out.str());
}

AdamW::AdamW(std::vector<Tensor*> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (Tensor* p : params_) {
    if (!p->requires_grad()) throw contract_error("AdamW: parameter without grad");
    m_.emplace_back(static_cast<size_t>(p->numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(p->numel()), 0.0);
  }
}

void AdamW::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

double AdamW::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (Tensor* p : params_) {
    const double* g = p->grad();
    const i64 n = p->numel();
    for (i64 i = 0; i < n; ++i) sq += g[i] * g[i];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Tensor* p : params_) {
      double* g = p->grad();
      const i64 n = p->numel();
      for (i64 i = 0; i < n; ++i) g[i] *= s;
    }
  }
  return norm;
}

void AdamW::step(double lr, double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor* p = params_[pi];
    double* w = p->data();
    const double* g = p->grad();
    std::vector<double>& m = m_[pi];
    std::vector<double>& v = v_[pi];
    const i64 n = p->numel();
    for (i64 i = 0; i < n; ++i) {
      m[static_cast<size_t>(i)] = beta1_ * m[static_cast<size_t>(i)] + (1.0 - beta1_) * g[i];
      v[static_cast<size_t>(i)] =
          beta2_ * v[static_cast<size_t>(i)] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = m[static_cast<size_t>(i)] / bc1;
      const double vhat = v[static_cast<size_t>(i)] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * w[i]);
    }
  }
}

Tensor cross_entropy_next_token(const Tensor& logits, const std::vector<int>& targets,
                                const std::vector<std::uint8_t>& mask) {
  return ops::cross_entropy_masked(logits, targets, mask);
}

// ---------------------------------------------------------------------------
// MQAR ablation

MQARParams MqarTaskConfig::instance_params(i64 n_pairs, i64 length, double pad_split) const {
  MQARParams p;
  p.n_pairs = n_pairs;
  p.length = length;
  p.key_vocab = key_vocab;
  p.value_vocab = value_vocab;
  p.pad_split = pad_split;
  return p;
}

namespace {

struct Batch {
  std::vector<int> tokens;           // [B * L]
  std::vector<int> targets;          // per row
  std::vector<std::uint8_t> mask;    // per row
  i64 batch = 0, len = 0;
};

// One training batch: a shared length, per-sample pair counts, loss masked
// to the query positions (the pad split is randomised per sample so the
// model sees a spread of key->query distances).
Batch sample_mqar_batch(const MqarTaskConfig& task, i64 batch_size, Rng& rng) {
  Batch b;
  b.batch = batch_size;
  static const i64 ladder[] = {64, 96, 128, 160, 192, 224, 256};
  i64 choices = 0;
  for (i64 v : ladder) {
    if (v >= task.min_len && v <= task.max_len) ++choices;
  }
  i64 len = task.max_len;
  if (choices > 0) {
    i64 pick = rng.uniform_int(choices);
    for (i64 v : ladder) {
      if (v >= task.min_len && v <= task.max_len && pick-- == 0) {
        len = v;
        break;
      }
    }
  }
  b.len = len;
  b.tokens.resize(static_cast<size_t>(batch_size * len));
  b.targets.assign(static_cast<size_t>(batch_size * len), 0);
  b.mask.assign(static_cast<size_t>(batch_size * len), 0);
  for (i64 s = 0; s < batch_size; ++s) {
    const i64 cap = std::min(task.max_pairs, (len - 2) / 4);
    const i64 n_pairs = task.min_pairs + rng.uniform_int(std::max<i64>(1, cap - task.min_pairs + 1));
    const double pad_split = rng.uniform01();
    MQARInstance inst = generate_mqar(rng.next_u64(), task.instance_params(n_pairs, len, pad_split));
    std::copy(inst.tokens.begin(), inst.tokens.end(), b.tokens.begin() + s * len);
    for (size_t qi = 0; qi < inst.query_positions.size(); ++qi) {
      const i64 pos = s * len + inst.query_positions[qi];
      b.targets[static_cast<size_t>(pos)] = inst.answers[qi];
      b.mask[static_cast<size_t>(pos)] = 1;
    }
  }
  return b;
}

}  // namespace

double eval_mqar_accuracy(const Model& m, const MqarTaskConfig& task, i64 n_pairs,
                          i64 length, i64 n_samples, u64 seed) {
  NoGradGuard ng;
  Rng rng(seed);
  i64 correct = 0, total = 0;
  for (i64 s = 0; s < n_samples; ++s) {
    MQARInstance inst = generate_mqar(rng.next_u64(), task.instance_params(n_pairs, length, 1.0));
    Tensor logits = model_forward(m, inst.tokens, 1, length, nullptr, &inst.query_positions);
    const i64 v = logits.dim(-1);
    for (size_t qi = 0; qi < inst.query_positions.size(); ++qi) {
      const double* row = logits.data() + static_cast<i64>(qi) * v;
      i64 best = 0;
      for (i64 j = 1; j < v; ++j) {
        if (row[j] > row[best]) best = j;
      }
      if (static_cast<int>(best) == inst.answers[qi]) ++correct;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

MqarRunResult train_mqar_single(double beta, const ModelConfig& model_template,
                                const MqarTaskConfig& task, const TrainConfig& train,
                                const std::vector<std::pair<i64, i64>>& eval_cells,
                                i64 eval_samples) {
  train.validate();
  ModelConfig cfg = model_template;
  cfg.vocab_size = task.vocab_size();
  cfg.validate();

  const HeadAssignment assign =
      HeadAssignment::per_layer_prefix(cfg.n_layers, cfg.attention.n_heads, beta);
  MqarRunResult result;
  result.beta = beta;
  result.model = Model::random(cfg, assign, train.seed);

  AdamW opt(result.model.parameters());
  Rng data_rng = Rng(train.seed).fork(0xda7a);

  for (i64 step = 0; step < train.steps; ++step) {
    Batch b = sample_mqar_batch(task, train.batch_size, data_rng);
    // only the query positions are scored, so only they reach the head
    std::vector<i64> rows;
    std::vector<int> row_targets;
    for (i64 i = 0; i < b.batch * b.len; ++i) {
      if (b.mask[static_cast<size_t>(i)]) {
        rows.push_back(i);
        row_targets.push_back(b.targets[static_cast<size_t>(i)]);
      }
    }
    const std::vector<std::uint8_t> all_on(rows.size(), 1);
    Tensor logits = model_forward(result.model, b.tokens, b.batch, b.len, nullptr, &rows);
    Tensor loss = cross_entropy_next_token(logits, row_targets, all_on);
    const double loss_val = loss.item();
    if (!std::isfinite(loss_val)) {
      throw experiment_failure("mqar training diverged at step " + std::to_string(step));
    }
    backward(loss);
    opt.clip_grad_norm(train.grad_clip);
    opt.step(lr_at(train, step), train.weight_decay);
    opt.zero_grad();
    result.trace.rows.push_back({step, loss_val, 0.0, false});
  }

  for (const auto& [pairs, length] : eval_cells) {
    const double acc = eval_mqar_accuracy(result.model, task, pairs, length, eval_samples,
                                          Rng(train.seed).fork(0xe7a1).next_u64());
    result.eval.push_back({pairs, length, acc});
  }
  return result;
}

std::vector<MqarRunResult> train_mqar_ablation(
    const std::vector<double>& betas, const ModelConfig& model_template,
    const MqarTaskConfig& task, const TrainConfig& train,
    const std::vector<std::pair<i64, i64>>& eval_cells, i64 eval_samples) {
  std::vector<MqarRunResult> out;
  for (double beta : betas) {
    out.push_back(train_mqar_single(beta, model_template, task, train, eval_cells, eval_samples));
  }
  return out;
}

// ---------------------------------------------------------------------------
// continual training

MarkovCorpus::MarkovCorpus(i64 vocab, i64 branching, u64 seed) : vocab_(vocab) {
  if (vocab <= 1 || branching <= 0 || branching > vocab) {
    throw config_error("markov corpus: bad vocab/branching");
  }
  Rng rng(seed);
  successors_.assign(static_cast<size_t>(vocab), {});
  for (i64 s = 0; s < vocab; ++s) {
    for (i64 b = 0; b < branching; ++b) {
      successors_[static_cast<size_t>(s)].push_back(static_cast<int>(rng.uniform_int(vocab)));
    }
  }
  // decaying transition profile shared by all states
  std::vector<double> weights(static_cast<size_t>(branching));
  double w = 1.0, total = 0.0;
  for (i64 b = 0; b < branching; ++b) {
    weights[static_cast<size_t>(b)] = w;
    total += w;
    w *= 0.5;
  }
  double acc = 0.0;
  for (i64 b = 0; b < branching; ++b) {
    acc += weights[static_cast<size_t>(b)] / total;
    cumulative_.push_back(acc);
  }
}

std::vector<int> MarkovCorpus::sample(i64 length, Rng& rng) const {
  std::vector<int> out(static_cast<size_t>(length));
  int state = static_cast<int>(rng.uniform_int(vocab_));
  for (i64 t = 0; t < length; ++t) {
    out[static_cast<size_t>(t)] = state;
    const double u = rng.uniform01();
    size_t pick = 0;
    while (pick + 1 < cumulative_.size() && u > cumulative_[pick]) ++pick;
    state = successors_[static_cast<size_t>(state)][pick];
  }
  return out;
}

namespace {

Batch sample_corpus_batch(const MarkovCorpus& corpus, i64 batch_size, i64 seq_len, Rng& rng) {
  Batch b;
  b.batch = batch_size;
  b.len = seq_len;
  b.tokens.resize(static_cast<size_t>(batch_size * seq_len));
  b.targets.assign(static_cast<size_t>(batch_size * seq_len), 0);
  b.mask.assign(static_cast<size_t>(batch_size * seq_len), 0);
  for (i64 s = 0; s < batch_size; ++s) {
    const std::vector<int> stream = corpus.sample(seq_len, rng);
    std::copy(stream.begin(), stream.end(), b.tokens.begin() + s * seq_len);
    for (i64 t = 0; t + 1 < seq_len; ++t) {
      b.targets[static_cast<size_t>(s * seq_len + t)] = stream[static_cast<size_t>(t + 1)];
      b.mask[static_cast<size_t>(s * seq_len + t)] = 1;
    }
  }
  return b;
}

}  // namespace

TrainTrace train_on_corpus(Model& m, const MarkovCorpus& corpus, i64 seq_len,
                           const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.vocab() > m.cfg.vocab_size) {
    throw config_error("train_on_corpus: corpus vocab exceeds model vocab");
  }
  AdamW opt(m.parameters());
  Rng data_rng = Rng(cfg.seed).fork(0xc0de);
  TrainTrace trace;
  for (i64 step = 0; step < cfg.steps; ++step) {
    Batch b = sample_corpus_batch(corpus, cfg.batch_size, seq_len, data_rng);
    Tensor logits = model_forward(m, b.tokens, b.batch, b.len);
    Tensor loss = cross_entropy_next_token(logits, b.targets, b.mask);
    const double loss_val = loss.item();
    if (!std::isfinite(loss_val)) {
      throw experiment_failure("corpus training diverged at step " + std::to_string(step));
    }
    backward(loss);
    opt.clip_grad_norm(cfg.grad_clip);
    opt.step(lr_at(cfg, step), cfg.weight_decay);
    opt.zero_grad();
    trace.rows.push_back({step, loss_val, 0.0, false});
  }
  return trace;
}

double eval_corpus_loss(const Model& m, const MarkovCorpus& corpus, i64 seq_len,
                        i64 n_batches, i64 batch_size, u64 seed) {
  NoGradGuard ng;
  Rng rng(seed);
  double total = 0.0;
  for (i64 i = 0; i < n_batches; ++i) {
    Batch b = sample_corpus_batch(corpus, batch_size, seq_len, rng);
    Tensor logits = model_forward(m, b.tokens, b.batch, b.len);
    total += cross_entropy_next_token(logits, b.targets, b.mask).item();
  }
  return total / static_cast<double>(n_batches);
}

ContinualResult continual_train(Model& hybrid, const Model& base,
                                const MarkovCorpus& corpus, i64 seq_len,
                                const TrainConfig& cfg) {
  cfg.validate();
  AdamW opt(hybrid.parameters());
  Rng data_rng = Rng(cfg.seed).fork(0xc0de);
  ContinualResult result;
  for (i64 step = 0; step < cfg.steps; ++step) {
    Batch b = sample_corpus_batch(corpus, cfg.batch_size, seq_len, data_rng);
    double base_loss;
    {
      NoGradGuard ng;
      Tensor base_logits = model_forward(base, b.tokens, b.batch, b.len);
      base_loss = cross_entropy_next_token(base_logits, b.targets, b.mask).item();
    }
    Tensor logits = model_forward(hybrid, b.tokens, b.batch, b.len);
    Tensor loss = cross_entropy_next_token(logits, b.targets, b.mask);
    const double loss_val = loss.item();
    if (!std::isfinite(loss_val)) {
      throw experiment_failure("continual training diverged at step " + std::to_string(step));
    }
    backward(loss);
    opt.clip_grad_norm(cfg.grad_clip);
    opt.step(lr_at(cfg, step), cfg.weight_decay);
    opt.zero_grad();
    result.trace.rows.push_back({step, loss_val, base_loss, true});
  }
  const u64 eval_seed = Rng(cfg.seed).fork(0xe5a1).next_u64();
  result.base_final_loss = eval_corpus_loss(base, corpus, seq_len, 4, cfg.batch_size, eval_seed);
  result.hybrid_final_loss =
      eval_corpus_loss(hybrid, corpus, seq_len, 4, cfg.batch_size, eval_seed);
  return result;
}

}  // namespace rfm
