#include <doctest.h>

#include <filesystem>
#include <set>

#include "recurformer/tasks.hpp"

using namespace rfm;

TEST_CASE("hashhop generation: determinism and invariants") {
  const HashHopInstance a = generate_hashhop(42, 8, 16, 6144);
  const HashHopInstance b = generate_hashhop(42, 8, 16, 6144);
  CHECK(a.render() == b.render());  // byte-identical regeneration
  CHECK(a.target_chain == b.target_chain);

  const HashHopInstance c = generate_hashhop(43, 8, 16, 6144);
  CHECK(a.render() != c.render());

  a.validate();
  CHECK(a.target_chain.size() == 17);
  CHECK(static_cast<i64>(a.render().size()) <= 6144);
  CHECK(a.pairs.size() > 16);  // distractors present

  // all elements distinct: chain elements shared by adjacent links plus two
  // fresh elements per distractor pair
  std::set<std::string> seen;
  for (const auto& [x, y] : a.pairs) {
    seen.insert(x);
    seen.insert(y);
  }
  const size_t n_distractors = a.pairs.size() - 16;
  CHECK(seen.size() == 17 + 2 * n_distractors);

  CHECK_THROWS_AS(generate_hashhop(1, 8, 16, 100), config_error);
}

TEST_CASE("hashhop: minimal chain of one link") {
  const HashHopInstance inst = generate_hashhop(5, 4, 1, 256);
  CHECK(inst.target_chain.size() == 2);
  CHECK(score_hashhop(inst, inst.target_chain[0] + " -> " + inst.target_chain[1]) == 1.0);
}

TEST_CASE("hashhop: the appendix worked example validates and scores") {
  HashHopInstance inst;
  inst.h_e = 2;
  inst.h_p = 5;
  inst.h_l = 200;
  inst.pairs = {{"10", "17"}, {"04", "05"}, {"01", "02"}, {"62", "23"}, {"02", "03"},
                {"99", "85"}, {"21", "34"}, {"03", "04"}, {"42", "73"}, {"05", "06"}};
  inst.start_element = "01";
  inst.target_chain = {"01", "02", "03", "04", "05", "06"};
  inst.validate();

  CHECK(score_hashhop(inst, "01 -> 02 -> 03 -> 04 -> 05 -> 06") == 1.0);
  CHECK(score_hashhop(inst, "") == 0.0);
  CHECK(score_hashhop(inst, "01 02 03 zz") == doctest::Approx(0.5));
  CHECK(score_hashhop(inst, "garbage ~~ !!") == 0.0);
  // scoring is monotone: extending a correct prefix never lowers h_gq
  double prev = 0.0;
  std::string out;
  for (const std::string& el : inst.target_chain) {
    out += el + " ";
    const double s = score_hashhop(inst, out);
    CHECK(s >= prev);
    prev = s;
  }
}

TEST_CASE("hashhop file round trip") {
  namespace fs = std::filesystem;
  const HashHopInstance inst = generate_hashhop(77, 6, 4, 1024);
  const std::string path = (fs::temp_directory_path() / "rfm_hashhop.txt").string();
  save_hashhop(inst, 77, path);
  const HashHopInstance loaded = load_hashhop(path);
  CHECK(loaded.render() == inst.render());
  CHECK(loaded.target_chain == inst.target_chain);
  fs::remove(path);
}

TEST_CASE("mqar generation: determinism, layout, and feasibility errors") {
  MQARParams p;
  p.n_pairs = 64;
  p.length = 256;
  const MQARInstance a = generate_mqar(9, p);
  const MQARInstance b = generate_mqar(9, p);
  CHECK(a.tokens == b.tokens);  // byte-identical regeneration
  CHECK(a.answers == b.answers);
  CHECK(static_cast<i64>(a.tokens.size()) == 256);

  // every query key appears exactly once among the pairs, answer aligned
  for (size_t i = 0; i < a.queries.size(); ++i) {
    int hits = 0;
    int want = -1;
    for (const auto& [k, v] : a.kv_pairs) {
      if (k == a.queries[i]) {
        ++hits;
        want = v;
      }
    }
    CHECK(hits == 1);
    CHECK(want == a.answers[i]);
    CHECK(a.tokens[static_cast<size_t>(a.query_positions[i])] == a.queries[i]);
    CHECK(a.tokens[static_cast<size_t>(a.query_positions[i] + 1)] == a.answers[i]);
  }

  MQARParams tight;
  tight.n_pairs = 4;
  tight.length = 8;  // no room for a single query
  CHECK_THROWS_AS(generate_mqar(1, tight), config_error);

  MQARParams overlap;
  overlap.n_pairs = 4;
  overlap.length = 64;
  overlap.key_base = 1;
  overlap.value_base = 100;
  overlap.key_vocab = 256;  // keys run into the values
  CHECK_THROWS_AS(generate_mqar(1, overlap), config_error);
}

TEST_CASE("mqar: the appendix worked example scores 1.0 for the oracle") {
  // pairs A->4, F->1, B->3, C->6; queries A, C, F answer 4, 6, 1
  MQARInstance inst;
  inst.n_pairs = 4;
  inst.kv_pairs = {{'A', '4'}, {'F', '1'}, {'B', '3'}, {'C', '6'}};
  inst.queries = {'A', 'C', 'F'};
  inst.answers = {'4', '6', '1'};
  CHECK(score_mqar(inst, {'4', '6', '1'}) == 1.0);
  CHECK(score_mqar(inst, {'4', '6', '9'}) == doctest::Approx(2.0 / 3));
  CHECK(score_mqar(inst, {'0', '0', '0'}) == 0.0);
  CHECK_THROWS_AS(score_mqar(inst, {'4', '6'}), data_error);
}

TEST_CASE("mqar scoring: 3 of 4 correct") {
  MQARParams p;
  p.n_pairs = 8;
  p.length = 64;
  p.n_queries = 4;
  const MQARInstance inst = generate_mqar(12, p);
  std::vector<int> preds = inst.answers;
  preds[1] = preds[1] == 300 ? 301 : 300;
  CHECK(score_mqar(inst, preds) == doctest::Approx(0.75));
  CHECK(score_mqar(inst, inst.answers) == 1.0);
}

TEST_CASE("mqar pad split controls where the padding goes") {
  MQARParams p;
  p.n_pairs = 4;
  p.length = 32;
  p.n_queries = 4;
  p.pad_split = 1.0;
  const MQARInstance mid = generate_mqar(3, p);
  // all padding between the pair block and the query block
  CHECK(mid.tokens[8] == p.pad_token);
  CHECK(mid.tokens.back() != p.pad_token);
  p.pad_split = 0.0;
  const MQARInstance tail = generate_mqar(3, p);
  CHECK(tail.tokens[8] != p.pad_token);
  CHECK(tail.tokens.back() == p.pad_token);
}

TEST_CASE("mqar file round trip") {
  namespace fs = std::filesystem;
  MQARParams p;
  p.n_pairs = 16;
  p.length = 128;
  const MQARInstance inst = generate_mqar(21, p);
  const std::string path = (fs::temp_directory_path() / "rfm_mqar.txt").string();
  save_mqar(inst, 21, p, path);
  const MQARInstance loaded = load_mqar(path);
  CHECK(loaded.tokens == inst.tokens);
  CHECK(loaded.queries == inst.queries);
  CHECK(loaded.answers == inst.answers);
  CHECK(loaded.query_positions == inst.query_positions);
  fs::remove(path);
}
