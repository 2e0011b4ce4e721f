#pragma once

#include <string>
#include <utility>

#include "recurformer/common.hpp"

namespace rfm {

// --------------------------------------------------------------------------
// HashHop: reconstruct a linked list of random strings from its first
// element, surrounded by distractor pairs.

struct HashHopInstance {
  std::vector<std::pair<std::string, std::string>> pairs;  // shuffled
  std::string start_element;
  std::vector<std::string> target_chain;  // h_p + 1 elements
  i64 h_e = 0, h_p = 0, h_l = 0;

  std::string render() const;  // the model input text
  void validate() const;       // throws on any broken invariant
};

HashHopInstance generate_hashhop(u64 seed, i64 h_e, i64 h_p, i64 h_l);

// Longest output prefix matching the target chain from its first element,
// divided by the chain length. Unparseable output scores 0.
double score_hashhop(const HashHopInstance& inst, const std::string& output);

void save_hashhop(const HashHopInstance& inst, u64 seed, const std::string& path);
HashHopInstance load_hashhop(const std::string& path);

// --------------------------------------------------------------------------
// MQAR: recall the value paired with each queried key.

struct MQARParams {
  i64 n_pairs = 0;
  i64 length = 0;       // rendered token count, padded to exactly this
  i64 n_queries = 0;    // 0 -> as many as fit (at most n_pairs)
  i64 key_vocab = 256;
  i64 value_vocab = 256;
  int pad_token = 0;
  int key_base = 1;     // keys occupy [key_base, key_base + key_vocab)
  int value_base = 0;   // 0 -> immediately after the keys
  double pad_split = 1.0;  // fraction of padding between pairs and queries

  int resolved_value_base() const;
  i64 min_vocab_size() const;  // smallest model vocab that fits all tokens
  void validate() const;
};

struct MQARInstance {
  std::vector<std::pair<int, int>> kv_pairs;  // token ids (key, value)
  std::vector<int> queries;                   // key token ids, query order
  std::vector<int> answers;                   // aligned value token ids
  std::vector<int> tokens;                    // rendered sequence
  std::vector<i64> query_positions;           // index of each query key in tokens
  i64 n_pairs = 0;
  i64 rendered_length = 0;
};

MQARInstance generate_mqar(u64 seed, const MQARParams& params);

// Fraction of predictions equal to the paired value.
double score_mqar(const MQARInstance& inst, const std::vector<int>& predictions);

void save_mqar(const MQARInstance& inst, u64 seed, const MQARParams& params,
               const std::string& path);
MQARInstance load_mqar(const std::string& path);

}  // namespace rfm
