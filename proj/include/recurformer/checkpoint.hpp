#pragma once

#include "recurformer/tensor.hpp"

namespace rfm {

// Tensor container file ("RFTC"). Byte layout is documented in
// docs/formats.md: a little-endian header with a name manifest followed by
// one record per tensor in manifest order.
enum class Dtype : std::uint8_t { f64 = 0, f32 = 1 };

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors,
                       Dtype dtype = Dtype::f64);
std::vector<NamedTensor> read_tensor_file(const std::string& path);

// Names only, in manifest order (cheap: header scan).
std::vector<std::string> read_tensor_manifest(const std::string& path);

}  // namespace rfm
