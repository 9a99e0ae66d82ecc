#include "breaknet/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <type_traits>

namespace breaknet {

namespace {

constexpr std::array<char, 8> kMagic = {'B', 'N', 'T', 'E', 'N', 'S', 'R', '1'};

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  std::array<char, sizeof(U)> bytes;
  if (!is.read(bytes.data(), sizeof(U))) throw IoError("tensor file truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  U v;
  std::memcpy(&v, bytes.data(), sizeof(U));
  return v;
}

template <typename T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

}  // namespace

std::uint64_t encoded_size(const Shape& shape, DType dtype) {
  const std::uint64_t elem = dtype == DType::F32 ? 4 : 8;
  return 8 + 4 + 4 * shape.size() + 1 + elem * static_cast<std::uint64_t>(numel_of(shape));
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  } else {
    for (T v : t.data()) put_le<T>(os, v);
  }
  if (!os) throw IoError("failed to write tensor");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size())) throw IoError("tensor file truncated before magic");
  if (magic != kMagic) throw IoError("bad tensor magic (expected BNTENSR1)");
  const auto rank = get_le<std::uint32_t>(is);
  if (rank > 16) throw IoError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_le<std::uint32_t>(is);
  const auto tag = get_le<std::uint8_t>(is);
  const std::int64_t n = numel_of(shape);
  std::vector<T> data(static_cast<std::size_t>(n));
  if (tag == static_cast<std::uint8_t>(DType::F32)) {
    for (auto& v : data) v = static_cast<T>(get_le<float>(is));
  } else if (tag == static_cast<std::uint8_t>(DType::F64)) {
    for (auto& v : data) v = static_cast<T>(get_le<double>(is));
  } else {
    throw IoError("unknown tensor dtype tag " + std::to_string(tag));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace breaknet
