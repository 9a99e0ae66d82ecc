#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "breaknet/tensor.hpp"

namespace breaknet {

/// Raised on unreadable, truncated or malformed files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raw tensor file: 8-byte magic "BNTENSR1", then little-endian u32 rank,
// u32 dims[rank], u8 dtype tag (0 = f32, 1 = f64) and the row-major buffer.

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

/// Reads one tensor, converting from the stored precision to T.
template <typename T>
Tensor<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

/// Serialized size in bytes of a tensor of this shape and precision.
std::uint64_t encoded_size(const Shape& shape, DType dtype);

}  // namespace breaknet
