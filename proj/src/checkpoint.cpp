#include "recurformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace rfm {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'R', 'F', 'T', 'C', '0', '0', '0', '1'};

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f, const std::string& path) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw data_error("truncated tensor file: " + path);
  return v;
}

void put_string(std::ofstream& f, const std::string& s) {
  put<std::uint32_t>(f, static_cast<std::uint32_t>(s.size()));
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::ifstream& f, const std::string& path) {
  const auto n = get<std::uint32_t>(f, path);
  std::string s(n, '\0');
  f.read(s.data(), n);
  if (!f) throw data_error("truncated tensor file: " + path);
  return s;
}

}  // namespace

void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors,
                       Dtype dtype) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open for writing: " + path);
  f.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(f, tensors.size());
  // manifest: every name, in record order
  for (const auto& nt : tensors) put_string(f, nt.name);
  for (const auto& nt : tensors) {
    const Tensor& t = nt.tensor;
    put<std::uint8_t>(f, static_cast<std::uint8_t>(dtype));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(t.ndim()));
    for (i64 d : t.shape()) put<std::uint64_t>(f, static_cast<std::uint64_t>(d));
    const i64 n = t.numel();
    if (dtype == Dtype::f64) {
      f.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(n) * 8);
    } else {
      std::vector<float> buf(static_cast<size_t>(n));
      for (i64 i = 0; i < n; ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t.data()[i]);
      f.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(n) * 4);
    }
  }
  if (!f) throw data_error("write failed: " + path);
}

std::vector<NamedTensor> read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw data_error("bad tensor file magic: " + path);
  }
  const auto count = get<std::uint64_t>(f, path);
  std::vector<std::string> names(count);
  for (auto& n : names) n = get_string(f, path);

  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto dtype = get<std::uint8_t>(f, path);
    if (dtype > 1) throw data_error("unknown dtype tag in: " + path);
    const auto ndim = get<std::uint32_t>(f, path);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<i64>(get<std::uint64_t>(f, path));
    const i64 n = shape_numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    if (static_cast<Dtype>(dtype) == Dtype::f64) {
      f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n) * 8);
    } else {
      std::vector<float> buf(static_cast<size_t>(n));
      f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n) * 4);
      for (i64 j = 0; j < n; ++j) data[static_cast<size_t>(j)] = buf[static_cast<size_t>(j)];
    }
    if (!f) throw data_error("truncated tensor data in: " + path + " at " + names[i]);
    out.push_back({names[i], Tensor::from_data(shape, std::move(data))});
  }
  return out;
}

std::vector<std::string> read_tensor_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw data_error("bad tensor file magic: " + path);
  }
  const auto count = get<std::uint64_t>(f, path);
  std::vector<std::string> names(count);
  for (auto& n : names) n = get_string(f, path);
  return names;
}

}  // namespace rfm
