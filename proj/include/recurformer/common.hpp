#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfm {

using i64 = std::int64_t;
using u64 = std::uint64_t;
using Shape = std::vector<i64>;

// Error taxonomy. The CLI maps these onto its documented exit codes:
// config_error -> 2, data_error -> 3, experiment_failure -> 4.
struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct contract_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct experiment_failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

i64 shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// derived draws below avoid std:: distributions, whose algorithms are
// implementation-defined, so streams are bit-identical across platforms.
class Rng {
 public:
  explicit Rng(u64 seed);

  u64 next_u64();
  double uniform01();                    // [0,1), 53-bit resolution
  double uniform(double lo, double hi);
  i64 uniform_int(i64 n);                // [0,n), rejection sampled
  double normal();                       // Box-Muller, cached spare
  double normal(double mean, double stddev);
  Rng fork(u64 stream) const;            // independent substream

  template <typename It>
  void shuffle(It first, It last) {
    const i64 n = static_cast<i64>(last - first);
    for (i64 i = n - 1; i > 0; --i) {
      const i64 j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
  u64 seed_ = 0;
};

std::string format_double(double v);  // fixed formatting used by all CSV output

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace rfm
