#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stylelab/tensor.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

// 64-bit FNV-1a, used for parameter, config and manifest fingerprints.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size);
  void update(std::string_view text) { update(text.data(), text.size()); }
  template <typename T>
  void update_values(std::span<const T> values) {
    update(values.data(), values.size_bytes());
  }
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t value);
std::uint64_t hash_tensors(std::span<const Tensor> tensors);

// Raw tensor container: "STLTNSR1", u32 rank, u32 dims[rank], then the
// row-major payload as little-endian f32 regardless of build precision.
void write_tensor(std::ostream& out, const Tensor& tensor);
void write_tensor_file(const std::filesystem::path& path, const Tensor& tensor);

// Reads one container from a byte buffer starting at `offset` and advances
// it. Malformed input raises FormatError carrying the failing offset.
Tensor read_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);
Tensor read_tensor_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partially written artifact.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

// Little-endian primitive encoding helpers shared by the container formats.
void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& buf, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& buf, float v);
void put_bytes(std::vector<std::uint8_t>& buf, std::string_view bytes);
void put_tensor(std::vector<std::uint8_t>& buf, const Tensor& tensor);

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& offset);
std::uint64_t get_u64(std::span<const std::uint8_t> bytes, std::size_t& offset);
float get_f32(std::span<const std::uint8_t> bytes, std::size_t& offset);
std::string get_bytes(std::span<const std::uint8_t> bytes, std::size_t& offset, std::size_t n);

// Container used by model, probe and checkpoint files: 8-byte magic, u64
// length-prefixed JSON metadata, then tensor containers back to back.
struct Bundle {
  std::string meta;
  std::vector<Tensor> tensors;
};

std::vector<std::uint8_t> encode_bundle(std::string_view magic, std::string_view meta,
                                        std::span<const Tensor> tensors);
// Throws FormatError (with offset) on a wrong magic or any truncation.
Bundle decode_bundle(std::span<const std::uint8_t> bytes, std::string_view magic);

STYLELAB_END_PRECISION
}  // namespace stylelab
