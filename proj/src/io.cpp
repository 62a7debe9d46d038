#include "freqcoda/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace freqcoda::io {
namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

void put_dims_and_payload(std::string& out, const Tensor& t) {
  for (std::size_t d : t.dims()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw InvalidShape("tensor dim exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (float v : t.values()) put_f32(out, v);
}

Tensor take_dims_and_payload(Reader& r, std::size_t rank) {
  Dims dims(rank);
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = r.u32();
    count *= dims[i];
  }
  r.need(count * 4);
  std::vector<float> data(count);
  for (float& v : data) v = r.f32();
  return Tensor(std::move(dims), std::move(data));
}

}  // namespace

std::string encode_tensor(const Tensor& tensor) {
  std::string out = "FQT0";
  put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  put_dims_and_payload(out, tensor);
  return out;
}

Tensor decode_tensor(const std::string& bytes) {
  Reader r(bytes, "FQT0 tensor");
  if (r.str(4) != "FQT0") throw FormatError("FQT0 tensor: bad magic");
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw FormatError("FQT0 tensor: implausible rank " + std::to_string(rank));
  Tensor t = take_dims_and_payload(r, rank);
  if (!r.done()) throw FormatError("FQT0 tensor: trailing bytes");
  return t;
}

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out = "FQCK";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) throw InvalidArgument("tensor name too long");
    if (t.value.rank() > std::numeric_limits<std::uint8_t>::max()) throw InvalidShape("tensor rank too large");
    put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    put_u8(out, kDtypeF32);
    put_u8(out, static_cast<std::uint8_t>(t.value.rank()));
    put_dims_and_payload(out, t.value);
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes, "FQCK checkpoint");
  if (r.str(4) != "FQCK") throw FormatError("FQCK checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("FQCK checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.u16());
    const std::uint8_t dtype = r.u8();
    if (dtype != kDtypeF32) throw FormatError("FQCK checkpoint: unknown dtype tag " + std::to_string(dtype));
    t.value = take_dims_and_payload(r, r.u8());
    out.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("FQCK checkpoint: trailing bytes");
  return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IngestionError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IngestionError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  write_file_atomic(path, encode_tensor(tensor));
}

Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_atomic(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace freqcoda::io
