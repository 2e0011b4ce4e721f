#pragma once

#include "recurformer/model.hpp"
#include "recurformer/tasks.hpp"

namespace rfm {

struct TrainConfig {
  double learning_rate = 3e-4;
  i64 batch_size = 32;
  i64 steps = 0;
  u64 seed = 0;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  i64 warmup_steps = 0;

  void validate() const;
};

// linear warmup then cosine decay to zero
double lr_at(const TrainConfig& cfg, i64 step);

struct TraceRow {
  i64 step = 0;
  double loss = 0.0;
  double metric = 0.0;
  bool has_metric = false;
};

struct TrainTrace {
  std::vector<TraceRow> rows;
  double final_loss(i64 window = 10) const;  // mean over the trailing window
};

void write_trace_csv(const TrainTrace& trace, const std::string& metric_name,
                     const std::string& path);

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(double lr, double weight_decay);
  void zero_grad();
  // global L2 clip applied to the grads in place; returns the pre-clip norm
  double clip_grad_norm(double max_norm);

 private:
  std::vector<Tensor*> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  i64 t_ = 0;
};

// Mean next-token NLL over masked positions (perplexity = exp(loss)).
Tensor cross_entropy_next_token(const Tensor& logits, const std::vector<int>& targets,
                                const std::vector<std::uint8_t>& mask);

// --------------------------------------------------------------------------
// MQAR from-scratch ablation

struct MqarTaskConfig {
  i64 min_pairs = 4, max_pairs = 64;
  i64 min_len = 64, max_len = 256;
  i64 key_vocab = 256, value_vocab = 256;

  i64 vocab_size() const { return 1 + key_vocab + value_vocab; }
  MQARParams instance_params(i64 n_pairs, i64 length, double pad_split) const;
};

struct MqarEvalCell {
  i64 n_pairs = 0;
  i64 length = 0;
  double accuracy = 0.0;
};

struct MqarRunResult {
  double beta = 0.0;
  TrainTrace trace;
  std::vector<MqarEvalCell> eval;
  Model model;
};

// Argmax accuracy at query positions over n_samples instances of one cell.
double eval_mqar_accuracy(const Model& m, const MqarTaskConfig& task, i64 n_pairs,
                          i64 length, i64 n_samples, u64 seed);

MqarRunResult train_mqar_single(double beta, const ModelConfig& model_template,
                                const MqarTaskConfig& task, const TrainConfig& train,
                                const std::vector<std::pair<i64, i64>>& eval_cells,
                                i64 eval_samples);

std::vector<MqarRunResult> train_mqar_ablation(
    const std::vector<double>& betas, const ModelConfig& model_template,
    const MqarTaskConfig& task, const TrainConfig& train,
    const std::vector<std::pair<i64, i64>>& eval_cells, i64 eval_samples);

// --------------------------------------------------------------------------
// Continual training on a synthetic corpus

// First-order Markov chain over a small vocabulary: each state transitions
// to `branching` seeded successors with a fixed decaying profile. Entropy is
// bounded away from zero, so converged losses are comparable across models.
class MarkovCorpus {
 public:
  MarkovCorpus(i64 vocab, i64 branching, u64 seed);
  std::vector<int> sample(i64 length, Rng& rng) const;
  i64 vocab() const { return vocab_; }

 private:
  i64 vocab_;
  std::vector<std::vector<int>> successors_;
  std::vector<double> cumulative_;  // shared transition profile
};

struct ContinualResult {
  TrainTrace trace;  // metric column = frozen-base loss on the same batch
  double base_final_loss = 0.0;
  double hybrid_final_loss = 0.0;
};

// Next-token training over corpus streams of length seq_len; the frozen base
// model is evaluated on the same batches for comparison.
ContinualResult continual_train(Model& hybrid, const Model& base,
                                const MarkovCorpus& corpus, i64 seq_len,
                                const TrainConfig& cfg);

// From-scratch training of a pure-attention base model on the same corpus.
TrainTrace train_on_corpus(Model& m, const MarkovCorpus& corpus, i64 seq_len,
                           const TrainConfig& cfg);

double eval_corpus_loss(const Model& m, const MarkovCorpus& corpus, i64 seq_len,
                        i64 n_batches, i64 batch_size, u64 seed);

}  // namespace rfm
