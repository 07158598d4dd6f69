#include "stylelab/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <system_error>

namespace stylelab {
STYLELAB_BEGIN_PRECISION

namespace {

constexpr std::string_view kTensorMagic = "STLTNSR1";
constexpr std::uint32_t kMaxRank = 8;

}  // namespace

void Fnv1a::update(const void* data, std::size_t size) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    state_ ^= p[i];
    state_ *= 0x100000001b3ULL;
  }
}

std::string Fnv1a::hex() const { return hex64(state_); }

std::string hex64(std::uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

std::uint64_t hash_tensors(std::span<const Tensor> tensors) {
  Fnv1a h;
  for (const auto& t : tensors) {
    for (auto d : t.shape()) {
      const auto v = static_cast<std::uint64_t>(d);
      h.update(&v, sizeof v);
    }
    h.update_values(t.data());
  }
  return h.digest();
}

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& buf, float v) { put_u32(buf, std::bit_cast<std::uint32_t>(v)); }

void put_bytes(std::vector<std::uint8_t>& buf, std::string_view bytes) {
  buf.insert(buf.end(), bytes.begin(), bytes.end());
}

void put_tensor(std::vector<std::uint8_t>& buf, const Tensor& tensor) {
  put_bytes(buf, kTensorMagic);
  put_u32(buf, static_cast<std::uint32_t>(tensor.rank()));
  for (auto d : tensor.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
  buf.reserve(buf.size() + tensor.numel() * 4);
  for (real v : tensor.data()) put_f32(buf, static_cast<float>(v));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (bytes.size() < offset + 4) throw FormatError("unexpected end of data reading u32", offset);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes[offset + i]) << (8 * i);
  offset += 4;
  return v;
}

std::uint64_t get_u64(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (bytes.size() < offset + 8) throw FormatError("unexpected end of data reading u64", offset);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes[offset + i]) << (8 * i);
  offset += 8;
  return v;
}

float get_f32(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  return std::bit_cast<float>(get_u32(bytes, offset));
}

std::string get_bytes(std::span<const std::uint8_t> bytes, std::size_t& offset, std::size_t n) {
  if (bytes.size() < offset + n) {
    throw FormatError("unexpected end of data reading " + std::to_string(n) + " bytes", offset);
  }
  std::string out(reinterpret_cast<const char*>(bytes.data() + offset), n);
  offset += n;
  return out;
}

void write_tensor(std::ostream& out, const Tensor& tensor) {
  std::vector<std::uint8_t> buf;
  put_tensor(buf, tensor);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write_tensor: stream write failed");
}

void write_tensor_file(const std::filesystem::path& path, const Tensor& tensor) {
  std::vector<std::uint8_t> buf;
  put_tensor(buf, tensor);
  write_file_atomic(path, buf);
}

Tensor read_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  const std::size_t start = offset;
  std::size_t pos = offset;
  if (get_bytes(bytes, pos, kTensorMagic.size()) != kTensorMagic) {
    throw FormatError("bad tensor magic", start);
  }
  const std::size_t rank_at = pos;
  const auto rank = get_u32(bytes, pos);
  if (rank > kMaxRank) throw FormatError("tensor rank " + std::to_string(rank) + " too large", rank_at);
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = get_u32(bytes, pos);
    count *= d;
    if (count > (std::uint64_t{1} << 32)) throw FormatError("tensor too large", pos);
  }
  if (bytes.size() < pos + count * 4) {
    throw FormatError("truncated tensor payload: need " + std::to_string(count * 4) + " bytes", pos);
  }
  std::vector<real> data(count);
  for (auto& v : data) v = static_cast<real>(get_f32(bytes, pos));
  offset = pos;
  return Tensor(std::move(shape), std::move(data));
}

Tensor read_tensor_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t offset = 0;
  Tensor t = read_tensor(bytes, offset);
  if (offset != bytes.size()) throw FormatError("trailing bytes after tensor", offset);
  return t;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move temporary file onto " + path.string());
  }
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> encode_bundle(std::string_view magic, std::string_view meta,
                                        std::span<const Tensor> tensors) {
  if (magic.size() != 8) throw ParameterError("bundle magic must be 8 bytes");
  std::vector<std::uint8_t> buf;
  put_bytes(buf, magic);
  put_u64(buf, meta.size());
  put_bytes(buf, meta);
  for (const auto& t : tensors) put_tensor(buf, t);
  return buf;
}

Bundle decode_bundle(std::span<const std::uint8_t> bytes, std::string_view magic) {
  std::size_t pos = 0;
  if (get_bytes(bytes, pos, magic.size()) != magic) {
    throw FormatError("bad magic, expected " + std::string(magic), 0);
  }
  Bundle b;
  const std::size_t len_at = pos;
  const auto len = get_u64(bytes, pos);
  if (len > bytes.size() - pos) throw FormatError("metadata length exceeds file size", len_at);
  b.meta = get_bytes(bytes, pos, static_cast<std::size_t>(len));
  while (pos < bytes.size()) b.tensors.push_back(read_tensor(bytes, pos));
  return b;
}

STYLELAB_END_PRECISION
}  // namespace stylelab
