// Acceptance suite: one check per numbered criterion, each printing a
// single PASS/FAIL line. Run all, or a subset via --criterion N.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "fd_check.hpp"
#include "recurformer/cache_accounting.hpp"
#include "recurformer/cli.hpp"
#include "recurformer/training.hpp"

namespace fs = std::filesystem;
using namespace rfm;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// ---------------------------------------------------------------- 1
Outcome cache_fractions() {
  ModelConfig cfg;
  cfg.n_layers = 32;
  cfg.attention = {32 * 128, 32, 32, 10000.0};
  cfg.mamba = {2.0, 4, 16, 256};
  cfg.vocab_size = 2;

  const std::vector<double> betas{0.0, 0.25, 0.5, 0.75, 0.9, 1.0};
  const std::vector<double> cs60k{1.0000, 0.7500, 0.5000, 0.2500, 0.1000, 0.0010};
  const std::vector<double> cs10k{1.0000, 0.7510, 0.5020, 0.2530, 0.1030, 0.0040};

  Outcome out;
  std::ostringstream d;
  for (size_t i = 0; i < betas.size(); ++i) {
    const HeadAssignment assign = HeadAssignment::per_layer_prefix(32, 32, betas[i]);
    const double f60 = closed_form_fraction(cfg, assign, 61440);
    const double f10 = closed_form_fraction(cfg, assign, 10240);
    if (std::fabs(f60 - cs60k[i]) > 0.005) {
      out.pass = false;
      d << " cs60k(beta=" << betas[i] << ")=" << f60 << " want " << cs60k[i] << ";";
    }
    if (std::fabs(f10 - cs10k[i]) > 0.01) {
      out.pass = false;
      d << " cs10k(beta=" << betas[i] << ")=" << f10 << " want " << cs10k[i] << ";";
    }
  }
  {
    const HeadAssignment a09 = HeadAssignment::per_layer_prefix(32, 32, 0.9);
    i64 retained = 0;
    for (const auto& hs : a09.heads_att) retained += static_cast<i64>(hs.size());
    if (retained != 102) {
      out.pass = false;
      d << " beta=0.9 retains " << retained << " heads, want 102;";
    }
  }
  out.detail = d.str();
  return out;
}

// ---------------------------------------------------------------- 2
Outcome measured_ledger() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.attention = {8 * 16, 8, 8, 10000.0};
  cfg.vocab_size = 64;
  const HeadAssignment assign = HeadAssignment::per_layer_prefix(2, 8, 0.5);
  const Model m = Model::random(cfg, assign, 41);

  Outcome out;
  // measured_stats raises on any ledger/closed-form mismatch
  const auto stats = measured_stats(m, 64, 64, PrefillMode::streaming, 5);
  if (stats.size() != 65) {
    out.pass = false;
    out.detail = "expected 65 checkpoints";
    return out;
  }
  const i64 mamba_const = mamba_elements_closed_form(cfg, assign);
  i64 prev = stats[0].attention_elements;
  i64 slope = -1;
  for (size_t i = 1; i < stats.size(); ++i) {
    if (stats[i].mamba_elements != mamba_const) {
      out.pass = false;
      out.detail = "mamba element count moved";
      return out;
    }
    const i64 inc = stats[i].attention_elements - prev;
    if (slope < 0) slope = inc;
    if (inc != slope) {
      out.pass = false;
      out.detail = "attention growth is not linear";
      return out;
    }
    prev = stats[i].attention_elements;
  }
  out.detail = " 65 checkpoints exact, slope " + std::to_string(slope) + " per step";
  return out;
}

// ---------------------------------------------------------------- 3
Outcome ssm_mode_equivalence() {
  Rng rng(43);
  Outcome out;
  double worst = 0;
  int trials = 0;
  while (trials < 100) {
    MambaConfig cfg;
    cfg.d_model_in = 1 + rng.uniform_int(32);  // d_inner = 2 * d_model_in <= 64
    cfg.k_epd = 2.0;
    cfg.d_conv = 2 + rng.uniform_int(3);
    cfg.d_state = 1 + rng.uniform_int(16);
    const MambaParams p = MambaParams::init(cfg, rng, false);
    const i64 L = 1 + rng.uniform_int(128);
    Tensor v = Tensor::uniform({L, cfg.d_model_in}, rng, -2.0, 2.0);
    NoGradGuard ng;
    Tensor yp = mamba_forward_parallel(v, p);
    MambaState st = MambaState::zeros(p);
    for (i64 t = 0; t < L; ++t) {
      std::vector<double> row(v.data() + t * p.d_in, v.data() + (t + 1) * p.d_in);
      const auto y = mamba_step(row, p, st);
      for (i64 e = 0; e < p.d_in; ++e) {
        const double a = y[static_cast<size_t>(e)];
        const double b = yp.data()[t * p.d_in + e];
        const double denom = std::max({std::fabs(a), std::fabs(b), 1e-9});
        worst = std::max(worst, std::fabs(a - b) / denom);
      }
    }
    ++trials;
  }
  out.pass = worst <= 1e-5;
  std::ostringstream d;
  d << " 100 random configs, max rel deviation " << worst;
  out.detail = d.str();
  return out;
}

// ---------------------------------------------------------------- 4
Outcome gradient_fidelity() {
  Rng rng(44);
  Outcome out;
  double worst_att = 0, worst_mamba = 0, worst_block = 0;

  // attention block probes
  for (int probe = 0; probe < 20; ++probe) {
    const i64 dh = 2 * (1 + rng.uniform_int(3));
    const i64 H = 1 + rng.uniform_int(3);
    const i64 L = 2 + rng.uniform_int(5);
    Tensor q = Tensor::uniform({1, L, H * dh}, rng, -2.0, 2.0, true);
    Tensor k = Tensor::uniform({1, L, H * dh}, rng, -2.0, 2.0, true);
    Tensor v = Tensor::uniform({1, L, H * dh}, rng, -2.0, 2.0, true);
    Tensor w = Tensor::uniform({1, L, H * dh}, rng, 0.5, 1.5);
    std::vector<i64> map(static_cast<size_t>(H));
    for (i64 h = 0; h < H; ++h) map[static_cast<size_t>(h)] = h;
    std::vector<i64> pos(static_cast<size_t>(L));
    for (i64 t = 0; t < L; ++t) pos[static_cast<size_t>(t)] = t;
    auto fwd = [&] {
      Tensor rq = ops::rope(q, H, dh, pos, 10000.0);
      Tensor rk = ops::rope(k, H, dh, pos, 10000.0);
      return ops::sum_all(ops::mul(ops::causal_attention(rq, rk, v, H, H, dh, map), w));
    };
    worst_att = std::max(
        worst_att, rfm::testing::check_grads_fd(fwd, {q, k, v}, rng, 8).max_rel_err);
  }

  // mamba block probes
  for (int probe = 0; probe < 20; ++probe) {
    MambaConfig cfg{2 + rng.uniform_int(5), 2.0, 2 + rng.uniform_int(3),
                    1 + rng.uniform_int(6), 0};
    MambaParams p = MambaParams::init(cfg, rng, true);
    const i64 L = 2 + rng.uniform_int(6);
    Tensor v = Tensor::uniform({1, L, cfg.d_model_in}, rng, -1.5, 1.5, true);
    Tensor w = Tensor::uniform({1, L, cfg.d_model_in}, rng, 0.5, 1.5);
    auto fwd = [&] { return ops::sum_all(ops::mul(mamba_forward_parallel(v, p), w)); };
    std::vector<Tensor> leaves{v};
    for (Tensor* t : p.parameters()) leaves.push_back(*t);
    worst_mamba = std::max(
        worst_mamba, rfm::testing::check_grads_fd(fwd, leaves, rng, 4).max_rel_err);
  }

  // full hybrid block probes (through the model forward and the CE loss)
  for (int probe = 0; probe < 20; ++probe) {
    ModelConfig cfg;
    cfg.n_layers = 1;
    const i64 dh = 4;
    const i64 H = 4;
    cfg.attention = {H * dh, H, (probe % 2 == 0) ? H : H / 2, 10000.0};
    cfg.vocab_size = 12;
    cfg.mamba.d_conv = 3;
    cfg.mamba.d_state = 4;
    const double beta = (probe % 3 == 0) ? 0.5 : (probe % 3 == 1 ? 0.25 : 0.75);
    const Model model =
        Model::random(cfg, HeadAssignment::per_layer_prefix(1, H, beta), 100 + probe);
    const i64 L = 5;
    std::vector<int> tokens(static_cast<size_t>(L));
    for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(cfg.vocab_size));
    std::vector<int> targets(static_cast<size_t>(L));
    for (auto& t : targets) t = static_cast<int>(rng.uniform_int(cfg.vocab_size));
    std::vector<std::uint8_t> mask(static_cast<size_t>(L), 1);
    Model& mm = const_cast<Model&>(model);
    auto fwd = [&] {
      Tensor logits = model_forward(mm, tokens, 1, L);
      return ops::cross_entropy_masked(logits, targets, mask);
    };
    std::vector<Tensor> leaves;
    for (Tensor* t : mm.parameters()) leaves.push_back(*t);
    worst_block = std::max(
        worst_block, rfm::testing::check_grads_fd(fwd, leaves, rng, 3).max_rel_err);
  }

  out.pass = worst_att <= 1e-4 && worst_mamba <= 1e-4 && worst_block <= 1e-4;
  std::ostringstream d;
  d << " max rel err: attention " << worst_att << ", mamba " << worst_mamba
    << ", full block " << worst_block;
  out.detail = d.str();
  return out;
}

// ---------------------------------------------------------------- 5
Outcome conversion_fidelity() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.attention = {64, 8, 4, 10000.0};
  cfg.vocab_size = 48;
  const Model base = Model::random(cfg, HeadAssignment::full_attention(2, 8), 45);
  RecencyReport rep;
  rep.n_layers = 2;
  rep.n_heads = 8;
  rep.n_samples = 8;
  Rng rng(46);
  for (i64 i = 0; i < 16; ++i) rep.ra_index.push_back(rng.uniform_int(9));

  Outcome out;
  const Model conv = convert_model(base, rep, 0.0, 99);
  NoGradGuard ng;
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const i64 L = 4 + rng.uniform_int(12);
    std::vector<int> tokens(static_cast<size_t>(L));
    for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(cfg.vocab_size));
    Tensor a = model_forward(base, tokens, 1, L);
    Tensor b = model_forward(conv, tokens, 1, L);
    for (i64 i = 0; i < a.numel(); ++i) {
      worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]));
    }
  }
  if (worst > 1e-9) {
    out.pass = false;
    out.detail = " beta=0 logit deviation " + format_double(worst);
    return out;
  }

  // exact partial-projection scaling across several betas
  for (double beta : {0.25, 0.5, 0.75}) {
    const Model h = convert_model(base, rep, beta, 99);
    for (i64 l = 0; l < 2; ++l) {
      const i64 att = static_cast<i64>(h.assign.heads_att[static_cast<size_t>(l)].size());
      const i64 want_q = base.layers[static_cast<size_t>(l)].wq.numel() * att / 8;
      const i64 got_q = h.plans[static_cast<size_t>(l)].has_attention()
                            ? h.layers[static_cast<size_t>(l)].wq.numel()
                            : 0;
      if (got_q != want_q) {
        out.pass = false;
        out.detail = " W_Q element count off at beta=" + format_double(beta);
        return out;
      }
    }
  }
  out.detail = " max beta=0 logit deviation " + format_double(worst) +
               ", partial W_Q/W_K counts exact";
  return out;
}

// ---------------------------------------------------------------- 6
Outcome mqar_ablation() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.attention = {128, 8, 4, 10000.0};
  MqarTaskConfig task;  // pairs 4..64, lengths 64..256
  TrainConfig train;
  train.steps = 700;
  train.batch_size = 16;
  train.learning_rate = 1e-3;
  train.warmup_steps = 50;
  train.seed = 7;

  const std::vector<std::pair<i64, i64>> id_cells{{8, 128}, {32, 192}, {64, 256}};
  const std::pair<i64, i64> gap_cell{64, 512};
  std::vector<std::pair<i64, i64>> cells = id_cells;
  cells.push_back(gap_cell);

  std::map<double, std::vector<MqarEvalCell>> evals;
  for (double beta : {0.0, 0.5, 1.0}) {
    const MqarRunResult r = train_mqar_single(beta, cfg, task, train, cells, 16);
    evals[beta] = r.eval;
    std::cout << "  [criterion 6] beta=" << beta << " final loss " << r.trace.final_loss()
              << ", eval:";
    for (const auto& c : r.eval) {
      std::cout << " (" << c.n_pairs << "," << c.length << ")=" << c.accuracy;
    }
    std::cout << std::endl;
  }
  auto id_acc = [&](double beta) {
    double s = 0;
    for (size_t i = 0; i < id_cells.size(); ++i) s += evals[beta][i].accuracy;
    return s / static_cast<double>(id_cells.size());
  };
  const double acc0 = id_acc(0.0);
  const double acc05 = id_acc(0.5);
  const double gap0 = evals[0.0].back().accuracy;
  const double gap1 = evals[1.0].back().accuracy;

  Outcome out;
  std::ostringstream d;
  d << " id(beta=0)=" << acc0 << " id(beta=0.5)=" << acc05 << " at512(beta=0)=" << gap0
    << " at512(beta=1)=" << gap1;
  if (acc0 < 0.99) out.pass = false;
  if (gap0 - gap1 < 0.30) out.pass = false;
  if (std::fabs(acc0 - acc05) > 0.05) out.pass = false;
  out.detail = d.str();
  return out;
}

// ---------------------------------------------------------------- 7
Outcome continual_recovery() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.attention = {128, 8, 4, 10000.0};
  cfg.vocab_size = 64;
  Model base = Model::random(cfg, HeadAssignment::full_attention(2, 8), 47);
  MarkovCorpus corpus(64, 4, 19);

  TrainConfig base_cfg;
  base_cfg.steps = 250;
  base_cfg.batch_size = 16;
  base_cfg.learning_rate = 1e-3;
  base_cfg.warmup_steps = 25;
  base_cfg.seed = 3;
  const i64 seq_len = 128;
  train_on_corpus(base, corpus, seq_len, base_cfg);

  // analysis pipeline: recorded forwards -> report -> convert
  std::vector<std::vector<AttentionRecord>> records;
  {
    NoGradGuard ng;
    Rng rng(48);
    for (int s = 0; s < 8; ++s) {
      const auto tokens = corpus.sample(seq_len, rng);
      std::vector<AttentionRecord> rec;
      model_forward(base, tokens, 1, seq_len, &rec);
      records.push_back(std::move(rec));
    }
  }
  const RecencyReport report = build_report(records, RRConfig{(seq_len + 9) / 10, 0.8, true});
  Model hybrid = convert_model(base, report, 0.5, 49);

  TrainConfig cont_cfg = base_cfg;
  cont_cfg.steps = 300;
  cont_cfg.seed = 4;
  const ContinualResult r = continual_train(hybrid, base, corpus, seq_len, cont_cfg);

  Outcome out;
  std::ostringstream d;
  d << " base " << r.base_final_loss << ", hybrid " << r.hybrid_final_loss << " (ratio "
    << r.hybrid_final_loss / r.base_final_loss << ")";
  out.pass = r.hybrid_final_loss <= 1.15 * r.base_final_loss &&
             std::isfinite(r.hybrid_final_loss);
  out.detail = d.str();
  return out;
}

// ---------------------------------------------------------------- 8
Outcome rr_oracle_equivalence() {
  Rng rng(50);
  Outcome out;
  auto brute = [](const std::vector<double>& A, i64 L, i64 k, bool ex) {
    double num = 0, den = 0;
    for (i64 j = 0; j < L; ++j) {  // independent loop order
      for (i64 i = j; i < L; ++i) {
        if (ex && j == 0) continue;
        den += A[static_cast<size_t>(i * L + j)];
        if (i - j <= k) num += A[static_cast<size_t>(i * L + j)];
      }
    }
    return den == 0 ? 0.0 : num / den;
  };

  i64 checked = 0;
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const i64 L = 2 + rng.uniform_int(23);
    std::vector<double> A(static_cast<size_t>(L * L), 0.0);
    const bool sink = trial % 17 == 0;
    for (i64 i = 0; i < L; ++i) {
      if (sink) {
        A[static_cast<size_t>(i * L)] = 1.0;
        continue;
      }
      double z = 0;
      for (i64 j = 0; j <= i; ++j) {
        A[static_cast<size_t>(i * L + j)] = rng.uniform01() + 1e-9;
        z += A[static_cast<size_t>(i * L + j)];
      }
      for (i64 j = 0; j <= i; ++j) A[static_cast<size_t>(i * L + j)] /= z;
    }
    const bool ex = rng.uniform01() < 0.5;
    double prev = -1;
    for (i64 k = 1; k < L; ++k) {
      const double got = recency_ratio(A, L, RRConfig{k, 0.8, ex});
      const double want = brute(A, L, k, ex);
      worst = std::max(worst, std::fabs(got - want));
      if (got < prev - 1e-12) {
        out.pass = false;
        out.detail = " monotonicity violated";
        return out;
      }
      prev = got;
      ++checked;
    }
  }
  if (worst > 1e-12) out.pass = false;

  // build_report recount, exact integer equality
  const i64 L = 12, H = 3, S = 40;
  std::vector<std::vector<AttentionRecord>> records;
  for (i64 s = 0; s < S; ++s) {
    AttentionRecord rec;
    rec.seq_len = L;
    for (i64 h = 0; h < H; ++h) {
      std::vector<double> A(static_cast<size_t>(L * L), 0.0);
      for (i64 i = 0; i < L; ++i) {
        double z = 0;
        for (i64 j = 0; j <= i; ++j) {
          A[static_cast<size_t>(i * L + j)] = rng.uniform01() + 1e-9;
          z += A[static_cast<size_t>(i * L + j)];
        }
        for (i64 j = 0; j <= i; ++j) A[static_cast<size_t>(i * L + j)] /= z;
      }
      rec.head_ids.push_back(h);
      rec.head_weights.push_back(std::move(A));
    }
    rec.value_l1.assign(static_cast<size_t>(L), 1.0);
    rec.value_l2.assign(static_cast<size_t>(L), 1.0);
    records.push_back({rec});
  }
  const RRConfig cfg{3, 0.5, true};
  const RecencyReport rep = build_report(records, cfg);
  for (i64 h = 0; h < H; ++h) {
    i64 count = 0;
    for (i64 s = 0; s < S; ++s) {
      if (brute(records[static_cast<size_t>(s)][0].head_weights[static_cast<size_t>(h)], L,
                cfg.band_k, true) > cfg.rr_threshold) {
        ++count;
      }
    }
    if (count != rep.ra_index[static_cast<size_t>(h)]) {
      out.pass = false;
      out.detail = " ra_index recount mismatch";
      return out;
    }
  }
  std::ostringstream d;
  d << " " << checked << " (matrix, band) probes, max |got - brute| = " << worst;
  out.detail = d.str();
  return out;
}

// ---------------------------------------------------------------- 9
Outcome task_scorers() {
  Outcome out;
  // HashHop appendix chain 01 -> ... -> 06 among gray distractors
  HashHopInstance inst;
  inst.h_e = 2;
  inst.h_p = 5;
  inst.h_l = 200;
  inst.pairs = {{"10", "17"}, {"04", "05"}, {"01", "02"}, {"62", "23"}, {"02", "03"},
                {"99", "85"}, {"21", "34"}, {"03", "04"}, {"42", "73"}, {"05", "06"}};
  inst.start_element = "01";
  inst.target_chain = {"01", "02", "03", "04", "05", "06"};
  inst.validate();
  if (score_hashhop(inst, "01 -> 02 -> 03 -> 04 -> 05 -> 06") != 1.0) out.pass = false;
  if (score_hashhop(inst, "01 02 03 nonsense") != 0.5) out.pass = false;
  if (score_hashhop(inst, "") != 0.0) out.pass = false;

  // MQAR appendix: A->4, F->1, B->3, C->6; queries A, C, F give 4, 6, 1
  MQARInstance mq;
  mq.n_pairs = 4;
  mq.kv_pairs = {{'A', '4'}, {'F', '1'}, {'B', '3'}, {'C', '6'}};
  mq.queries = {'A', 'C', 'F'};
  mq.answers = {'4', '6', '1'};
  if (score_mqar(mq, {'4', '6', '1'}) != 1.0) out.pass = false;
  if (std::fabs(score_mqar(mq, {'4', '9', '1'}) - 2.0 / 3) > 1e-12) out.pass = false;
  out.detail = " appendix worked examples reproduced exactly";
  return out;
}

// ---------------------------------------------------------------- 10
Outcome cli_determinism() {
  const char* cli_env = std::getenv("RECURFORMER_CLI");
  Outcome out;
  if (!cli_env) {
    out.pass = false;
    out.detail = " RECURFORMER_CLI not set";
    return out;
  }
  const std::string cli = cli_env;
  const fs::path root = fs::temp_directory_path() / "rfm_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);

  auto run = [&](const std::string& args) {
    const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
  };
  auto same_tree = [&](const fs::path& a, const fs::path& b) {
    std::vector<std::string> rels;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (e.is_regular_file()) rels.push_back(fs::relative(e.path(), a).string());
    }
    std::sort(rels.begin(), rels.end());
    for (const std::string& r : rels) {
      if (!fs::exists(b / r)) return false;
      if (read_text_file((a / r).string()) != read_text_file((b / r).string())) return false;
    }
    return !rels.empty();
  };

  const std::string ta = (root / "a").string();
  const std::string tb = (root / "b").string();

  std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-corpus", "gen-task --task corpus --vocab 33 --seq-len 24 --count 4 --seed 5 --out "},
      {"gen-hashhop", "gen-task --task hashhop --h-e 4 --h-p 3 --h-l 512 --count 2 --seed 6 --out "},
      {"gen-mqar",
       "gen-task --task mqar --pairs 4 --length 32 --key-vocab 16 --value-vocab 16 --count 2 "
       "--seed 7 --out "},
      {"train-mqar",
       "train-mqar --betas 0,0.5 --steps 6 --batch 2 --layers 1 --d-model 16 --heads 2 "
       "--kv-heads 2 --min-pairs 2 --max-pairs 4 --min-len 24 --max-len 32 --key-vocab 16 "
       "--value-vocab 16 --eval-cells 2x24 --eval-samples 2 --seed 9 --out "},
      {"cache-report", "cache-report --measure --seed 4 --out "},
  };
  for (const auto& [name, prefix] : commands) {
    for (const std::string& dir : {ta + "/" + name, tb + "/" + name}) {
      if (run(prefix + dir) != 0) {
        out.pass = false;
        out.detail = " command failed: " + name;
        return out;
      }
    }
    if (!same_tree(ta + "/" + name, tb + "/" + name)) {
      out.pass = false;
      out.detail = " outputs differ: " + name;
      return out;
    }
  }

  // pipeline commands driven off the train-mqar artifacts
  const std::string base = ta + "/train-mqar/model_beta0";
  std::vector<std::pair<std::string, std::string>> pipeline = {
      {"analyze",
       "analyze --model " + base + " --samples " + ta + "/gen-corpus/samples.txt --out "},
      {"eval-mqar", "eval-mqar --model " + base + " --instances " + ta +
                        "/gen-mqar/mqar_0000.txt " + ta + "/gen-mqar/mqar_0001.txt --out "},
      {"eval-hashhop", "eval-hashhop --answerer echo --instances " + ta +
                           "/gen-hashhop/hashhop_0000.txt --out "},
  };
  for (const auto& [name, prefix] : pipeline) {
    for (const std::string& dir : {ta + "/" + name, tb + "/" + name}) {
      if (run(prefix + dir) != 0) {
        out.pass = false;
        out.detail = " command failed: " + name;
        return out;
      }
    }
    if (!same_tree(ta + "/" + name, tb + "/" + name)) {
      out.pass = false;
      out.detail = " outputs differ: " + name;
      return out;
    }
  }

  // convert + continual-train close the loop on the analyze report
  const std::string report = ta + "/analyze/rai.csv";
  std::vector<std::pair<std::string, std::string>> tail = {
      {"convert", "convert --base " + base + " --report " + report + " --beta 0.5 --seed 3 --out "},
      {"continual-train", "continual-train --base " + base + " --report " + report +
                              " --beta 0.5 --steps 4 --batch 2 --seq-len 24 --corpus-vocab 33 "
                              "--seed 8 --out "},
  };
  for (const auto& [name, prefix] : tail) {
    for (const std::string& dir : {ta + "/" + name, tb + "/" + name}) {
      if (run(prefix + dir) != 0) {
        out.pass = false;
        out.detail = " command failed: " + name;
        return out;
      }
    }
    if (!same_tree(ta + "/" + name, tb + "/" + name)) {
      out.pass = false;
      out.detail = " outputs differ: " + name;
      return out;
    }
  }

  fs::remove_all(root);
  out.detail = " all commands byte-identical across repeated runs";
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  i64 only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--criterion" && i + 1 < argc) only = std::stoll(argv[++i]);
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"cache fractions reproduce the reported MHA ablation row", cache_fractions},
      {"measured cache ledger equals the closed form exactly", measured_ledger},
      {"parallel-scan and recurrent SSM outputs agree to rel 1e-5", ssm_mode_equivalence},
      {"attention/mamba/full-block gradients match finite differences", gradient_fidelity},
      {"beta=0 conversion is logit-identical; partial projections exact", conversion_fidelity},
      {"MQAR ablation: attention needed for recall at high pair counts", mqar_ablation},
      {"continual training recovers the base model's loss within 15%", continual_recovery},
      {"RR/RA-I equal brute-force recomputation on 1000 matrices", rr_oracle_equivalence},
      {"task scorers reproduce the worked examples exactly", task_scorers},
      {"every CLI command is byte-deterministic under a fixed seed", cli_determinism},
  };

  int failures = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const i64 number = static_cast<i64>(i) + 1;
    if (only != 0 && only != number) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string(" exception: ") + e.what();
    }
    std::cout << "ACCEPTANCE " << number << " " << (o.pass ? "PASS" : "FAIL") << " - "
              << criteria[i].first << ":" << o.detail << std::endl;
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
