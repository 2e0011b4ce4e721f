#include "recurformer/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace rfm {

namespace {

constexpr const char* kAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789";
constexpr i64 kAlphabetSize = 36;
constexpr const char* kSeparator = "---";
constexpr const char* kCue = " =>";

std::string random_element(Rng& rng, i64 h_e) {
  std::string s(static_cast<size_t>(h_e), 'a');
  for (auto& c : s) c = kAlphabet[rng.uniform_int(kAlphabetSize)];
  return s;
}

i64 pair_line_chars(i64 h_e) { return 2 * h_e + 5; }  // "a -> b\n"

i64 footer_chars(i64 h_e) {
  // "---\n" + start + " =>\n"
  return 4 + h_e + 4;
}

}  // namespace

std::string HashHopInstance::render() const {
  std::string out;
  for (const auto& [a, b] : pairs) {
    out += a;
    out += " -> ";
    out += b;
    out += "\n";
  }
  out += kSeparator;
  out += "\n";
  out += start_element;
  out += kCue;
  out += "\n";
  return out;
}

void HashHopInstance::validate() const {
  if (static_cast<i64>(target_chain.size()) != h_p + 1) {
    throw data_error("hashhop: target chain must hold h_p + 1 elements");
  }
  if (target_chain.front() != start_element) {
    throw data_error("hashhop: chain must begin at the start element");
  }
  // every element distinct
  std::set<std::string> all;
  for (const auto& [a, b] : pairs) {
    all.insert(a);
    all.insert(b);
  }
  std::set<std::string> sources;
  for (const auto& [a, b] : pairs) {
    (void)b;
    if (!sources.insert(a).second) {
      throw data_error("hashhop: duplicate pair source breaks chain uniqueness");
    }
  }
  std::set<std::string> chain_set(target_chain.begin(), target_chain.end());
  if (chain_set.size() != target_chain.size()) {
    throw data_error("hashhop: chain elements must be distinct");
  }
  // consecutive chain pairs all present; distractors never touch the chain
  std::set<std::pair<std::string, std::string>> pair_set(pairs.begin(), pairs.end());
  std::set<std::pair<std::string, std::string>> links;
  for (i64 i = 0; i < h_p; ++i) {
    const auto link = std::make_pair(target_chain[static_cast<size_t>(i)],
                                     target_chain[static_cast<size_t>(i + 1)]);
    if (!pair_set.count(link)) {
      throw data_error("hashhop: chain link missing from pair list");
    }
    links.insert(link);
  }
  for (const auto& pr : pairs) {
    const bool a_in = chain_set.count(pr.first) > 0;
    const bool b_in = chain_set.count(pr.second) > 0;
    if (a_in && b_in) {
      if (!links.count(pr)) {
        throw data_error("hashhop: non-link pair connects chain elements");
      }
    } else if (a_in != b_in) {
      throw data_error("hashhop: distractor connects into the target chain");
    }
  }
  if (static_cast<i64>(render().size()) > h_l) {
    throw data_error("hashhop: rendered length exceeds the character budget");
  }
}

HashHopInstance generate_hashhop(u64 seed, i64 h_e, i64 h_p, i64 h_l) {
  if (h_e <= 0 || h_p <= 0) throw config_error("hashhop: h_e and h_p must be positive");
  const i64 line = pair_line_chars(h_e);
  const i64 base = h_p * line + footer_chars(h_e);
  const i64 n_distract = (h_l - base) / line;
  if (n_distract < 1) {
    throw config_error("hashhop: budget h_l=" + std::to_string(h_l) +
                       " cannot fit the chain plus one distractor");
  }

  Rng rng(seed);
  std::set<std::string> used;
  auto fresh = [&]() {
    for (;;) {
      std::string s = random_element(rng, h_e);
      if (used.insert(s).second) return s;
    }
  };

  HashHopInstance inst;
  inst.h_e = h_e;
  inst.h_p = h_p;
  inst.h_l = h_l;
  for (i64 i = 0; i <= h_p; ++i) inst.target_chain.push_back(fresh());
  inst.start_element = inst.target_chain.front();
  for (i64 i = 0; i < h_p; ++i) {
    inst.pairs.push_back({inst.target_chain[static_cast<size_t>(i)],
                          inst.target_chain[static_cast<size_t>(i + 1)]});
  }
  for (i64 i = 0; i < n_distract; ++i) {
    const std::string a = fresh();
    const std::string b = fresh();
    inst.pairs.push_back({a, b});
  }
  rng.shuffle(inst.pairs.begin(), inst.pairs.end());
  inst.validate();
  return inst;
}

double score_hashhop(const HashHopInstance& inst, const std::string& output) {
  // tokenize into maximal alphanumeric runs
  std::vector<std::string> toks;
  std::string cur;
  for (char c : output) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur += c;
    } else if (!cur.empty()) {
      toks.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) toks.push_back(cur);

  size_t matched = 0;
  while (matched < inst.target_chain.size() && matched < toks.size() &&
         toks[matched] == inst.target_chain[matched]) {
    ++matched;
  }
  return static_cast<double>(matched) / static_cast<double>(inst.target_chain.size());
}

void save_hashhop(const HashHopInstance& inst, u64 seed, const std::string& path) {
  std::ostringstream out;
  nlohmann::json hdr{{"task", "hashhop"}, {"seed", seed},   {"h_e", inst.h_e},
                     {"h_p", inst.h_p},   {"h_l", inst.h_l}};
  out << hdr.dump() << "\n";
  out << "INPUT\n" << inst.render();
  out << "TARGET\n";
  for (size_t i = 0; i < inst.target_chain.size(); ++i) {
    if (i) out << " ";
    out << inst.target_chain[i];
  }
  out << "\nEND\n";
  write_text_file(path, out.str());
}

HashHopInstance load_hashhop(const std::string& path) {
  std::stringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw data_error("empty hashhop file: " + path);
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw data_error("bad hashhop header in " + path);
  }
  if (hdr.value("task", "") != "hashhop") throw data_error("not a hashhop file: " + path);

  HashHopInstance inst;
  inst.h_e = hdr.at("h_e").get<i64>();
  inst.h_p = hdr.at("h_p").get<i64>();
  inst.h_l = hdr.at("h_l").get<i64>();
  if (!std::getline(in, line) || line != "INPUT") throw data_error("bad hashhop file: " + path);
  while (std::getline(in, line) && line != kSeparator) {
    const size_t arrow = line.find(" -> ");
    if (arrow == std::string::npos) throw data_error("bad hashhop pair line: " + line);
    inst.pairs.push_back({line.substr(0, arrow), line.substr(arrow + 4)});
  }
  if (!std::getline(in, line)) throw data_error("bad hashhop file: " + path);
  const size_t cue = line.find(kCue);
  if (cue == std::string::npos) throw data_error("bad hashhop cue line: " + line);
  inst.start_element = line.substr(0, cue);
  if (!std::getline(in, line) || line != "TARGET") throw data_error("bad hashhop file: " + path);
  if (!std::getline(in, line)) throw data_error("bad hashhop file: " + path);
  std::stringstream ts(line);
  std::string el;
  while (ts >> el) inst.target_chain.push_back(el);
  inst.validate();
  return inst;
}

// ---------------------------------------------------------------------------
// MQAR

int MQARParams::resolved_value_base() const {
  return value_base > 0 ? value_base : key_base + static_cast<int>(key_vocab);
}

i64 MQARParams::min_vocab_size() const {
  return std::max<i64>(pad_token + 1,
                       std::max<i64>(key_base + key_vocab,
                                     resolved_value_base() + value_vocab));
}

void MQARParams::validate() const {
  if (n_pairs <= 0) throw config_error("mqar: n_pairs must be positive");
  if (length <= 0) throw config_error("mqar: length must be positive");
  if (key_vocab <= 0 || value_vocab <= 0) throw config_error("mqar: vocab sizes must be positive");
  if (n_pairs > key_vocab) throw config_error("mqar: n_pairs exceeds the key vocabulary");
  if (pad_split < 0.0 || pad_split > 1.0) throw config_error("mqar: pad_split must lie in [0,1]");
  const int vb = resolved_value_base();
  const int ke = key_base + static_cast<int>(key_vocab);
  const int ve = vb + static_cast<int>(value_vocab);
  const bool overlap = key_base < ve && vb < ke;
  if (overlap) throw config_error("mqar: key and value vocabularies overlap");
  const int toks[] = {pad_token};
  for (int t : toks) {
    if (t >= key_base && t < ke) throw config_error("mqar: pad token collides with keys");
    if (t >= vb && t < ve) throw config_error("mqar: pad token collides with values");
  }
  const i64 nq = n_queries > 0 ? n_queries : std::min(n_pairs, (length - 2 * n_pairs) / 2);
  if (nq < 1 || 2 * (n_pairs + nq) > length) {
    throw config_error("mqar: length " + std::to_string(length) +
                       " cannot fit " + std::to_string(n_pairs) + " pairs plus queries");
  }
}

MQARInstance generate_mqar(u64 seed, const MQARParams& params) {
  params.validate();
  Rng rng(seed);

  // keys without replacement, values with replacement
  std::vector<int> key_ids(static_cast<size_t>(params.key_vocab));
  std::iota(key_ids.begin(), key_ids.end(), params.key_base);
  for (i64 i = 0; i < params.n_pairs; ++i) {
    const i64 j = i + rng.uniform_int(static_cast<i64>(key_ids.size()) - i);
    std::swap(key_ids[static_cast<size_t>(i)], key_ids[static_cast<size_t>(j)]);
  }

  MQARInstance inst;
  inst.n_pairs = params.n_pairs;
  const int vb = params.resolved_value_base();
  for (i64 i = 0; i < params.n_pairs; ++i) {
    const int key = key_ids[static_cast<size_t>(i)];
    const int val = vb + static_cast<int>(rng.uniform_int(params.value_vocab));
    inst.kv_pairs.push_back({key, val});
  }

  const i64 n_queries =
      params.n_queries > 0 ? params.n_queries
                           : std::min(params.n_pairs, (params.length - 2 * params.n_pairs) / 2);
  // queries: a random subset of the keys, in random order
  std::vector<i64> order(static_cast<size_t>(params.n_pairs));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  for (i64 i = 0; i < n_queries; ++i) {
    const auto& [k, v] = inst.kv_pairs[static_cast<size_t>(order[static_cast<size_t>(i)])];
    inst.queries.push_back(k);
    inst.answers.push_back(v);
  }

  const i64 pad_total = params.length - 2 * (params.n_pairs + n_queries);
  const i64 pad_mid = static_cast<i64>(std::llround(params.pad_split * static_cast<double>(pad_total)));
  inst.tokens.reserve(static_cast<size_t>(params.length));
  for (const auto& [k, v] : inst.kv_pairs) {
    inst.tokens.push_back(k);
    inst.tokens.push_back(v);
  }
  for (i64 i = 0; i < pad_mid; ++i) inst.tokens.push_back(params.pad_token);
  for (i64 i = 0; i < n_queries; ++i) {
    inst.query_positions.push_back(static_cast<i64>(inst.tokens.size()));
    inst.tokens.push_back(inst.queries[static_cast<size_t>(i)]);
    inst.tokens.push_back(inst.answers[static_cast<size_t>(i)]);
  }
  while (static_cast<i64>(inst.tokens.size()) < params.length) {
    inst.tokens.push_back(params.pad_token);
  }
  inst.rendered_length = static_cast<i64>(inst.tokens.size());
  return inst;
}

double score_mqar(const MQARInstance& inst, const std::vector<int>& predictions) {
  if (predictions.size() != inst.answers.size()) {
    throw data_error("score_mqar: prediction count " + std::to_string(predictions.size()) +
                     " != query count " + std::to_string(inst.answers.size()));
  }
  if (inst.answers.empty()) return 0.0;
  i64 correct = 0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == inst.answers[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(inst.answers.size());
}

namespace {
void write_ints(std::ostringstream& out, const std::vector<int>& xs) {
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) out << " ";
    out << xs[i];
  }
  out << "\n";
}

std::vector<int> read_ints(const std::string& line) {
  std::vector<int> out;
  std::stringstream ss(line);
  int v;
  while (ss >> v) out.push_back(v);
  return out;
}
}  // namespace

void save_mqar(const MQARInstance& inst, u64 seed, const MQARParams& params,
               const std::string& path) {
  std::ostringstream out;
  nlohmann::json hdr{{"task", "mqar"},
                     {"seed", seed},
                     {"n_pairs", params.n_pairs},
                     {"length", params.length},
                     {"key_vocab", params.key_vocab},
                     {"value_vocab", params.value_vocab},
                     {"pad_split", params.pad_split}};
  out << hdr.dump() << "\n";
  out << "TOKENS\n";
  write_ints(out, inst.tokens);
  out << "QUERIES\n";
  write_ints(out, inst.queries);
  out << "POSITIONS\n";
  std::vector<int> pos(inst.query_positions.begin(), inst.query_positions.end());
  write_ints(out, pos);
  out << "ANSWERS\n";
  write_ints(out, inst.answers);
  out << "END\n";
  write_text_file(path, out.str());
}

MQARInstance load_mqar(const std::string& path) {
  std::stringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw data_error("empty mqar file: " + path);
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw data_error("bad mqar header in " + path);
  }
  if (hdr.value("task", "") != "mqar") throw data_error("not a mqar file: " + path);

  MQARInstance inst;
  inst.n_pairs = hdr.at("n_pairs").get<i64>();
  auto expect = [&](const char* tag) {
    if (!std::getline(in, line) || line != tag) {
      throw data_error(std::string("bad mqar file, expected ") + tag + ": " + path);
    }
  };
  expect("TOKENS");
  std::getline(in, line);
  inst.tokens = read_ints(line);
  expect("QUERIES");
  std::getline(in, line);
  inst.queries = read_ints(line);
  expect("POSITIONS");
  std::getline(in, line);
  for (int p : read_ints(line)) inst.query_positions.push_back(p);
  expect("ANSWERS");
  std::getline(in, line);
  inst.answers = read_ints(line);
  inst.rendered_length = static_cast<i64>(inst.tokens.size());
  if (inst.queries.size() != inst.answers.size() ||
      inst.queries.size() != inst.query_positions.size()) {
    throw data_error("bad mqar file, inconsistent query sections: " + path);
  }
  return inst;
}

}  // namespace rfm
