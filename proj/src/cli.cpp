#include "recurformer/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "recurformer/cache_accounting.hpp"
#include "recurformer/model.hpp"
#include "recurformer/training.hpp"

namespace rfm {

namespace {

namespace fs = std::filesystem;

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  if (out.empty()) throw config_error("empty list: " + s);
  return out;
}

std::vector<i64> parse_int_list(const std::string& s) {
  std::vector<i64> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoll(item));
  }
  if (out.empty()) throw config_error("empty list: " + s);
  return out;
}

// "16x128,64x256" -> {(16,128),(64,256)}
std::vector<std::pair<i64, i64>> parse_cells(const std::string& s) {
  std::vector<std::pair<i64, i64>> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t x = item.find('x');
    if (x == std::string::npos) throw config_error("bad eval cell (want PAIRSxLENGTH): " + item);
    out.push_back({std::stoll(item.substr(0, x)), std::stoll(item.substr(x + 1))});
  }
  if (out.empty()) throw config_error("empty cell list: " + s);
  return out;
}

std::vector<std::vector<int>> read_samples_file(const std::string& path) {
  std::stringstream in(read_text_file(path));
  std::vector<std::vector<int>> samples;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<int> toks;
    std::stringstream ls(line);
    int v;
    while (ls >> v) toks.push_back(v);
    if (!toks.empty()) samples.push_back(std::move(toks));
  }
  if (samples.empty()) throw data_error("no samples in " + path);
  return samples;
}

std::string beta_tag(double beta) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", beta);
  std::string s(buf);
  for (char& c : s) {
    if (c == '.') c = 'p';
  }
  return s;
}

void echo_invocation(const std::string& out_dir, const std::string& command,
                     const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ostringstream out;
  out << "command=" << command << "\n";
  for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
  write_text_file(out_dir + "/invocation.txt", out.str());
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string model_dir, samples_path, out_dir;
  i64 band_k = 0;  // 0 -> ceil(L/10)
  double rr_threshold = 0.8;
  bool include_first_token = false;
  bool save_records = true;
};

int cmd_analyze(const AnalyzeArgs& a) {
  NoGradGuard ng;
  const Model model = load_model(a.model_dir);
  const auto samples = read_samples_file(a.samples_path);
  fs::create_directories(a.out_dir);

  const i64 L = static_cast<i64>(samples[0].size());
  for (const auto& s : samples) {
    if (static_cast<i64>(s.size()) != L) {
      throw data_error("analyze: samples must share one sequence length");
    }
  }
  RRConfig cfg;
  cfg.band_k = a.band_k > 0 ? a.band_k : (L + 9) / 10;
  cfg.rr_threshold = a.rr_threshold;
  cfg.exclude_first_token = !a.include_first_token;
  cfg.validate_against(L);

  std::vector<std::vector<AttentionRecord>> records;
  records.reserve(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    std::vector<AttentionRecord> layer_records;
    model_forward(model, samples[i], 1, L, &layer_records);
    records.push_back(std::move(layer_records));
  }
  if (a.save_records) {
    fs::create_directories(a.out_dir + "/records");
    char name[64];
    for (size_t i = 0; i < records.size(); ++i) {
      std::snprintf(name, sizeof(name), "/records/sample%04zu.rftc", i);
      write_record_file(a.out_dir + name, records[i]);
    }
  }

  const RecencyReport report = build_report(records, cfg);
  write_rr_csv(report, a.out_dir + "/rr.csv");
  write_rai_csv(report, a.out_dir + "/rai.csv");
  write_ranking_csv(report, a.out_dir + "/ranking.csv");
  write_rrconfig_json(cfg, report.n_samples, a.out_dir + "/rrconfig.json");
  write_contribution_csv(contribution_stats(records), a.out_dir + "/contribution.csv");

  echo_invocation(a.out_dir, "analyze",
                  {{"model", a.model_dir},
                   {"samples", a.samples_path},
                   {"band_k", std::to_string(cfg.band_k)},
                   {"rr_threshold", format_double(cfg.rr_threshold)},
                   {"exclude_first_token", cfg.exclude_first_token ? "true" : "false"},
                   {"save_records", a.save_records ? "true" : "false"}});
  std::cout << "analyze: " << samples.size() << " samples, " << report.n_layers << "x"
            << report.n_heads << " heads -> " << a.out_dir << "\n";
  return 0;
}

struct ConvertArgs {
  std::string base_dir, report_path, out_dir;
  double beta = 0.0;
  u64 seed = 0;
};

int cmd_convert(const ConvertArgs& a) {
  if (a.beta < 0.0 || a.beta > 1.0) throw config_error("convert: beta must lie in [0,1]");
  const Model base = load_model(a.base_dir);
  const RecencyReport report = load_rai_csv(a.report_path);
  const Model hybrid = convert_model(base, report, a.beta, a.seed);
  save_model(hybrid, a.out_dir);
  echo_invocation(a.out_dir, "convert",
                  {{"base", a.base_dir},
                   {"report", a.report_path},
                   {"beta", format_double(a.beta)},
                   {"seed", std::to_string(a.seed)}});
  std::cout << "convert: beta=" << a.beta << ", replaced " << hybrid.assign.replaced_total()
            << " of " << base.cfg.n_layers * base.cfg.attention.n_heads << " heads -> "
            << a.out_dir << "\n";
  return 0;
}

struct TrainMqarArgs {
  std::string out_dir;
  std::string betas = "0,0.5,1.0";
  i64 steps = 400, batch = 16;
  double lr = 3e-4;
  u64 seed = 7;
  i64 warmup = -1;  // -1: steps / 10
  i64 layers = 2, d_model = 128, heads = 8, kv_heads = 4;
  i64 min_pairs = 4, max_pairs = 64, min_len = 64, max_len = 256;
  i64 key_vocab = 256, value_vocab = 256;
  std::string eval_cells = "16x128,64x256,64x512";
  i64 eval_samples = 32;
};

int cmd_train_mqar(const TrainMqarArgs& a) {
  fs::create_directories(a.out_dir);
  ModelConfig cfg;
  cfg.n_layers = a.layers;
  cfg.attention = {a.d_model, a.heads, a.kv_heads, 10000.0};
  MqarTaskConfig task;
  task.min_pairs = a.min_pairs;
  task.max_pairs = a.max_pairs;
  task.min_len = a.min_len;
  task.max_len = a.max_len;
  task.key_vocab = a.key_vocab;
  task.value_vocab = a.value_vocab;
  TrainConfig train;
  train.learning_rate = a.lr;
  train.batch_size = a.batch;
  train.steps = a.steps;
  train.seed = a.seed;
  train.warmup_steps = a.warmup >= 0 ? a.warmup : a.steps / 10;

  const auto betas = parse_double_list(a.betas);
  const auto cells = parse_cells(a.eval_cells);

  std::ostringstream acc;
  acc << "beta,n_pairs,length,accuracy\n";
  for (double beta : betas) {
    MqarRunResult r = train_mqar_single(beta, cfg, task, train, cells, a.eval_samples);
    const std::string tag = beta_tag(beta);
    write_trace_csv(r.trace, "metric", a.out_dir + "/trace_beta" + tag + ".csv");
    save_model(r.model, a.out_dir + "/model_beta" + tag);
    for (const MqarEvalCell& c : r.eval) {
      acc << format_double(beta) << "," << c.n_pairs << "," << c.length << ","
          << format_double(c.accuracy) << "\n";
    }
    std::cout << "train-mqar: beta=" << beta << " final loss " << r.trace.final_loss()
              << "\n";
  }
  write_text_file(a.out_dir + "/accuracy.csv", acc.str());
  echo_invocation(a.out_dir, "train-mqar",
                  {{"betas", a.betas},
                   {"steps", std::to_string(a.steps)},
                   {"batch", std::to_string(a.batch)},
                   {"lr", format_double(a.lr)},
                   {"seed", std::to_string(a.seed)},
                   {"eval_cells", a.eval_cells},
                   {"eval_samples", std::to_string(a.eval_samples)}});
  return 0;
}

struct ContinualArgs {
  std::string base_dir, report_path, out_dir;
  double beta = 0.5;
  i64 steps = 300, batch = 16, seq_len = 128;
  double lr = 3e-4;
  u64 seed = 11;
  i64 warmup = -1;  // -1: steps / 10
  i64 corpus_vocab = 64, corpus_branching = 4;
  u64 corpus_seed = 5;
};

int cmd_continual_train(const ContinualArgs& a) {
  fs::create_directories(a.out_dir);
  const Model base = load_model(a.base_dir);
  const RecencyReport report = load_rai_csv(a.report_path);
  Model hybrid = convert_model(base, report, a.beta, a.seed);

  MarkovCorpus corpus(a.corpus_vocab, a.corpus_branching, a.corpus_seed);
  TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.batch_size = a.batch;
  cfg.steps = a.steps;
  cfg.seed = a.seed;
  cfg.warmup_steps = a.warmup >= 0 ? a.warmup : a.steps / 10;

  ContinualResult r = continual_train(hybrid, base, corpus, a.seq_len, cfg);
  write_trace_csv(r.trace, "base_loss", a.out_dir + "/trace.csv");
  save_model(hybrid, a.out_dir + "/hybrid");
  std::ostringstream sum;
  sum << "base_final_loss,hybrid_final_loss,ratio\n";
  sum << format_double(r.base_final_loss) << "," << format_double(r.hybrid_final_loss) << ","
      << format_double(r.hybrid_final_loss / r.base_final_loss) << "\n";
  write_text_file(a.out_dir + "/summary.csv", sum.str());
  echo_invocation(a.out_dir, "continual-train",
                  {{"base", a.base_dir},
                   {"report", a.report_path},
                   {"beta", format_double(a.beta)},
                   {"steps", std::to_string(a.steps)},
                   {"seq_len", std::to_string(a.seq_len)},
                   {"seed", std::to_string(a.seed)},
                   {"corpus_seed", std::to_string(a.corpus_seed)}});
  std::cout << "continual-train: base " << r.base_final_loss << ", hybrid "
            << r.hybrid_final_loss << "\n";
  return 0;
}

struct GenTaskArgs {
  std::string task, out_dir;
  u64 seed = 42;
  i64 count = 1;
  i64 h_e = 8, h_p = 16, h_l = 6144;
  i64 pairs = 16, length = 128, n_queries = 0;
  i64 key_vocab = 256, value_vocab = 256;
  double pad_split = 1.0;
  i64 vocab = 64, branching = 4, seq_len = 128;
};

int cmd_gen_task(const GenTaskArgs& a) {
  fs::create_directories(a.out_dir);
  char name[64];
  if (a.task == "hashhop") {
    for (i64 i = 0; i < a.count; ++i) {
      const u64 seed = Rng(a.seed).fork(static_cast<u64>(i)).next_u64();
      const HashHopInstance inst = generate_hashhop(seed, a.h_e, a.h_p, a.h_l);
      std::snprintf(name, sizeof(name), "/hashhop_%04lld.txt", static_cast<long long>(i));
      save_hashhop(inst, seed, a.out_dir + name);
    }
  } else if (a.task == "mqar") {
    MQARParams p;
    p.n_pairs = a.pairs;
    p.length = a.length;
    p.n_queries = a.n_queries;
    p.key_vocab = a.key_vocab;
    p.value_vocab = a.value_vocab;
    p.pad_split = a.pad_split;
    for (i64 i = 0; i < a.count; ++i) {
      const u64 seed = Rng(a.seed).fork(static_cast<u64>(i)).next_u64();
      const MQARInstance inst = generate_mqar(seed, p);
      std::snprintf(name, sizeof(name), "/mqar_%04lld.txt", static_cast<long long>(i));
      save_mqar(inst, seed, p, a.out_dir + name);
    }
  } else if (a.task == "corpus") {
    MarkovCorpus corpus(a.vocab, a.branching, a.seed);
    Rng rng = Rng(a.seed).fork(0x5a);
    std::ostringstream out;
    for (i64 i = 0; i < a.count; ++i) {
      const std::vector<int> s = corpus.sample(a.seq_len, rng);
      for (size_t j = 0; j < s.size(); ++j) {
        if (j) out << " ";
        out << s[j];
      }
      out << "\n";
    }
    write_text_file(a.out_dir + "/samples.txt", out.str());
  } else {
    throw config_error("gen-task: unknown task " + a.task);
  }
  echo_invocation(a.out_dir, "gen-task",
                  {{"task", a.task},
                   {"seed", std::to_string(a.seed)},
                   {"count", std::to_string(a.count)}});
  std::cout << "gen-task: wrote " << a.count << " " << a.task << " item(s) -> " << a.out_dir
            << "\n";
  return 0;
}

struct EvalHashHopArgs {
  std::string model_dir, out_dir, answerer = "model";
  std::vector<std::string> instances;
  i64 max_new = 0;  // 0 -> enough characters for the full chain
};

int cmd_eval_hashhop(const EvalHashHopArgs& a) {
  fs::create_directories(a.out_dir);
  std::optional<Model> model;
  if (a.answerer == "model") model = load_model(a.model_dir);

  std::ostringstream out;
  out << "instance,h_gq\n";
  double total = 0.0;
  for (const std::string& path : a.instances) {
    const HashHopInstance inst = load_hashhop(path);
    std::string output;
    if (a.answerer == "echo") {
      // oracle answerer: emits the true chain
      for (size_t i = 0; i < inst.target_chain.size(); ++i) {
        if (i) output += " -> ";
        output += inst.target_chain[i];
      }
    } else if (a.answerer == "model") {
      const std::string prompt = inst.render();
      std::vector<int> ids;
      ids.reserve(prompt.size());
      for (unsigned char c : prompt) ids.push_back(static_cast<int>(c));
      const i64 budget = a.max_new > 0
                             ? a.max_new
                             : static_cast<i64>(inst.target_chain.size()) * (inst.h_e + 4);
      const std::vector<int> gen = greedy_generate(*model, ids, budget);
      for (int id : gen) output += static_cast<char>(id);
    } else {
      throw config_error("eval-hashhop: unknown answerer " + a.answerer);
    }
    const double score = score_hashhop(inst, output);
    total += score;
    out << fs::path(path).filename().string() << "," << format_double(score) << "\n";
  }
  out << "mean," << format_double(total / static_cast<double>(a.instances.size())) << "\n";
  write_text_file(a.out_dir + "/hgq.csv", out.str());
  echo_invocation(a.out_dir, "eval-hashhop",
                  {{"model", a.model_dir},
                   {"answerer", a.answerer},
                   {"instances", std::to_string(a.instances.size())}});
  std::cout << "eval-hashhop: mean h_gq "
            << total / static_cast<double>(a.instances.size()) << "\n";
  return 0;
}

struct EvalMqarArgs {
  std::string model_dir, out_dir, answerer = "model";
  std::vector<std::string> instances;
};

int cmd_eval_mqar(const EvalMqarArgs& a) {
  fs::create_directories(a.out_dir);
  std::optional<Model> model;
  if (a.answerer == "model") model = load_model(a.model_dir);
  NoGradGuard ng;

  std::ostringstream out;
  out << "instance,accuracy\n";
  double total = 0.0;
  for (const std::string& path : a.instances) {
    const MQARInstance inst = load_mqar(path);
    std::vector<int> preds;
    if (a.answerer == "oracle") {
      preds = inst.answers;
    } else if (a.answerer == "model") {
      const Tensor logits = model_forward(*model, inst.tokens, 1,
                                          static_cast<i64>(inst.tokens.size()), nullptr,
                                          &inst.query_positions);
      const i64 v = logits.dim(-1);
      for (size_t qi = 0; qi < inst.query_positions.size(); ++qi) {
        const double* row = logits.data() + static_cast<i64>(qi) * v;
        i64 best = 0;
        for (i64 j = 1; j < v; ++j) {
          if (row[j] > row[best]) best = j;
        }
        preds.push_back(static_cast<int>(best));
      }
    } else {
      throw config_error("eval-mqar: unknown answerer " + a.answerer);
    }
    const double score = score_mqar(inst, preds);
    total += score;
    out << fs::path(path).filename().string() << "," << format_double(score) << "\n";
  }
  out << "mean," << format_double(total / static_cast<double>(a.instances.size())) << "\n";
  write_text_file(a.out_dir + "/accuracy.csv", out.str());
  echo_invocation(a.out_dir, "eval-mqar",
                  {{"model", a.model_dir},
                   {"answerer", a.answerer},
                   {"instances", std::to_string(a.instances.size())}});
  std::cout << "eval-mqar: mean accuracy " << total / static_cast<double>(a.instances.size())
            << "\n";
  return 0;
}

struct CacheReportArgs {
  std::string out_dir;
  i64 layers = 32, heads = 32, kv_heads = 0, d_head = 128;
  std::string betas = "0,0.25,0.5,0.75,0.9,1.0";
  std::string lengths = "10240,61440";
  double k_epd = 2.0;
  i64 d_conv = 4, d_state = 16;
  bool measure = false;
  double measure_beta = 0.5;
  i64 measure_layers = 2, measure_heads = 8, measure_d_head = 16;
  i64 measure_prefill = 64, measure_gen = 64;
  u64 seed = 3;
};

int cmd_cache_report(const CacheReportArgs& a) {
  fs::create_directories(a.out_dir);
  ModelConfig cfg;
  cfg.n_layers = a.layers;
  const i64 kv = a.kv_heads > 0 ? a.kv_heads : a.heads;
  cfg.attention = {a.heads * a.d_head, a.heads, kv, 10000.0};
  cfg.mamba.k_epd = a.k_epd;
  cfg.mamba.d_conv = a.d_conv;
  cfg.mamba.d_state = a.d_state;
  cfg.vocab_size = 2;  // unused by the closed form

  const auto betas = parse_double_list(a.betas);
  const auto lengths = parse_int_list(a.lengths);
  std::ostringstream out;
  out << "beta,length,fraction\n";
  for (double beta : betas) {
    const HeadAssignment assign = HeadAssignment::per_layer_prefix(a.layers, a.heads, beta);
    for (i64 l : lengths) {
      out << format_double(beta) << "," << l << ","
          << format_double(closed_form_fraction(cfg, assign, l)) << "\n";
    }
  }
  write_text_file(a.out_dir + "/fractions.csv", out.str());

  if (a.measure) {
    ModelConfig toy;
    toy.n_layers = a.measure_layers;
    toy.attention = {a.measure_heads * a.measure_d_head, a.measure_heads, a.measure_heads,
                     10000.0};
    toy.vocab_size = 64;
    const HeadAssignment assign =
        HeadAssignment::per_layer_prefix(toy.n_layers, a.measure_heads, a.measure_beta);
    const Model toy_model = Model::random(toy, assign, a.seed);
    const auto stats = measured_stats(toy_model, a.measure_prefill, a.measure_gen,
                                      PrefillMode::streaming, a.seed);
    write_cache_stats_csv(stats, toy, assign, a.measure_prefill,
                          a.out_dir + "/measured_beta" + beta_tag(a.measure_beta) + ".csv");
  }

  echo_invocation(a.out_dir, "cache-report",
                  {{"layers", std::to_string(a.layers)},
                   {"heads", std::to_string(a.heads)},
                   {"kv_heads", std::to_string(kv)},
                   {"d_head", std::to_string(a.d_head)},
                   {"betas", a.betas},
                   {"lengths", a.lengths},
                   {"measure", a.measure ? "true" : "false"}});
  std::cout << "cache-report -> " << a.out_dir << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"RecurFormer-style hybrid attention/SSM toolkit"};
  app.require_subcommand(1);
  app.set_config("--config")->configurable(false);
  app.allow_config_extras(CLI::config_extras_mode::error);

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "Record attention and build an RR/RA-I report");
  analyze->add_option("--model", an.model_dir, "model checkpoint directory")->required();
  analyze->add_option("--samples", an.samples_path, "token-id samples, one line each")->required();
  analyze->add_option("--out", an.out_dir, "output directory")->required();
  analyze->add_option("--band-k", an.band_k, "RR band width (0 = ceil(L/10))");
  analyze->add_option("--rr-threshold", an.rr_threshold, "RA-I recording threshold");
  analyze->add_flag("--include-first-token", an.include_first_token,
                    "keep the first token in RR sums");
  analyze->add_flag("!--no-save-records", an.save_records, "skip per-sample record files");

  ConvertArgs cv;
  auto* convert = app.add_subcommand("convert", "Replace high-RA-I heads with Mamba blocks");
  convert->add_option("--base", cv.base_dir, "base checkpoint directory")->required();
  convert->add_option("--report", cv.report_path, "rai.csv from analyze")->required();
  convert->add_option("--beta", cv.beta, "fraction of heads to replace")->required();
  convert->add_option("--seed", cv.seed, "seed for fresh Mamba parameters");
  convert->add_option("--out", cv.out_dir, "output checkpoint directory")->required();

  TrainMqarArgs tm;
  auto* train_mqar = app.add_subcommand("train-mqar", "From-scratch MQAR ablation over beta");
  train_mqar->add_option("--out", tm.out_dir)->required();
  train_mqar->add_option("--betas", tm.betas);
  train_mqar->add_option("--steps", tm.steps);
  train_mqar->add_option("--batch", tm.batch);
  train_mqar->add_option("--lr", tm.lr);
  train_mqar->add_option("--seed", tm.seed);
  train_mqar->add_option("--warmup", tm.warmup);
  train_mqar->add_option("--layers", tm.layers);
  train_mqar->add_option("--d-model", tm.d_model);
  train_mqar->add_option("--heads", tm.heads);
  train_mqar->add_option("--kv-heads", tm.kv_heads);
  train_mqar->add_option("--min-pairs", tm.min_pairs);
  train_mqar->add_option("--max-pairs", tm.max_pairs);
  train_mqar->add_option("--min-len", tm.min_len);
  train_mqar->add_option("--max-len", tm.max_len);
  train_mqar->add_option("--key-vocab", tm.key_vocab);
  train_mqar->add_option("--value-vocab", tm.value_vocab);
  train_mqar->add_option("--eval-cells", tm.eval_cells, "comma list of PAIRSxLENGTH");
  train_mqar->add_option("--eval-samples", tm.eval_samples);

  ContinualArgs ct;
  auto* continual = app.add_subcommand("continual-train",
                                       "Convert a base model and recover its loss");
  continual->add_option("--base", ct.base_dir)->required();
  continual->add_option("--report", ct.report_path)->required();
  continual->add_option("--out", ct.out_dir)->required();
  continual->add_option("--beta", ct.beta);
  continual->add_option("--steps", ct.steps);
  continual->add_option("--batch", ct.batch);
  continual->add_option("--seq-len", ct.seq_len);
  continual->add_option("--lr", ct.lr);
  continual->add_option("--seed", ct.seed);
  continual->add_option("--warmup", ct.warmup);
  continual->add_option("--corpus-vocab", ct.corpus_vocab);
  continual->add_option("--corpus-branching", ct.corpus_branching);
  continual->add_option("--corpus-seed", ct.corpus_seed);

  GenTaskArgs gt;
  auto* gen_task = app.add_subcommand("gen-task", "Generate task instances or corpus samples");
  gen_task->add_option("--task", gt.task, "hashhop | mqar | corpus")->required();
  gen_task->add_option("--out", gt.out_dir)->required();
  gen_task->add_option("--seed", gt.seed);
  gen_task->add_option("--count", gt.count);
  gen_task->add_option("--h-e", gt.h_e);
  gen_task->add_option("--h-p", gt.h_p);
  gen_task->add_option("--h-l", gt.h_l);
  gen_task->add_option("--pairs", gt.pairs);
  gen_task->add_option("--length", gt.length);
  gen_task->add_option("--n-queries", gt.n_queries);
  gen_task->add_option("--key-vocab", gt.key_vocab);
  gen_task->add_option("--value-vocab", gt.value_vocab);
  gen_task->add_option("--pad-split", gt.pad_split);
  gen_task->add_option("--vocab", gt.vocab);
  gen_task->add_option("--branching", gt.branching);
  gen_task->add_option("--seq-len", gt.seq_len);

  EvalHashHopArgs eh;
  auto* eval_hashhop = app.add_subcommand("eval-hashhop", "Score h_gq on instance files");
  eval_hashhop->add_option("--model", eh.model_dir);
  eval_hashhop->add_option("--instances", eh.instances)->required()->expected(-1);
  eval_hashhop->add_option("--out", eh.out_dir)->required();
  eval_hashhop->add_option("--answerer", eh.answerer, "model | echo");
  eval_hashhop->add_option("--max-new", eh.max_new);

  EvalMqarArgs em;
  auto* eval_mqar = app.add_subcommand("eval-mqar", "Score recall accuracy on instance files");
  eval_mqar->add_option("--model", em.model_dir);
  eval_mqar->add_option("--instances", em.instances)->required()->expected(-1);
  eval_mqar->add_option("--out", em.out_dir)->required();
  eval_mqar->add_option("--answerer", em.answerer, "model | oracle");

  CacheReportArgs cr;
  auto* cache_report = app.add_subcommand("cache-report",
                                          "Closed-form and measured cache fractions");
  cache_report->add_option("--out", cr.out_dir)->required();
  cache_report->add_option("--layers", cr.layers);
  cache_report->add_option("--heads", cr.heads);
  cache_report->add_option("--kv-heads", cr.kv_heads, "0 = same as --heads");
  cache_report->add_option("--d-head", cr.d_head);
  cache_report->add_option("--betas", cr.betas);
  cache_report->add_option("--lengths", cr.lengths);
  cache_report->add_option("--k-epd", cr.k_epd);
  cache_report->add_option("--d-conv", cr.d_conv);
  cache_report->add_option("--d-state", cr.d_state);
  cache_report->add_flag("--measure", cr.measure, "also measure a toy hybrid per step");
  cache_report->add_option("--measure-beta", cr.measure_beta);
  cache_report->add_option("--measure-layers", cr.measure_layers);
  cache_report->add_option("--measure-heads", cr.measure_heads);
  cache_report->add_option("--measure-d-head", cr.measure_d_head);
  cache_report->add_option("--measure-prefill", cr.measure_prefill);
  cache_report->add_option("--measure-gen", cr.measure_gen);
  cache_report->add_option("--seed", cr.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (*analyze) return cmd_analyze(an);
    if (*convert) return cmd_convert(cv);
    if (*train_mqar) return cmd_train_mqar(tm);
    if (*continual) return cmd_continual_train(ct);
    if (*gen_task) return cmd_gen_task(gt);
    if (*eval_hashhop) return cmd_eval_hashhop(eh);
    if (*eval_mqar) return cmd_eval_mqar(em);
    if (*cache_report) return cmd_cache_report(cr);
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const experiment_failure& e) {
    std::cerr << "experiment failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace rfm
