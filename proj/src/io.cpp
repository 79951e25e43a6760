#include "faxbev/io.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace faxbev {

namespace {

template <typename T>
void write_le(std::ostream& os, T v) {
  // host is little-endian on every supported target
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of stream");
  return v;
}

constexpr char kTdumpMagic[4] = {'T', 'D', 'M', 'P'};
constexpr char kCkptMagic[4] = {'F', 'B', 'C', 'P'};

}  // namespace

void write_tdump(std::ostream& os, const Tensor& t) {
  os.write(kTdumpMagic, 4);
  write_le<uint8_t>(os, 1);
  write_le<uint8_t>(os, static_cast<uint8_t>(t.dtype()));
  write_le<uint8_t>(os, static_cast<uint8_t>(t.rank()));
  for (int64_t d : t.shape()) write_le<uint64_t>(os, static_cast<uint64_t>(d));
  if (t.dtype() == Dtype::F32) {
    for (double v : t.values()) write_le<float>(os, static_cast<float>(v));
  } else {
    for (double v : t.values()) write_le<double>(os, v);
  }
  if (!os) throw IoError("tdump write failed");
}

Tensor read_tdump(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTdumpMagic, 4) != 0) {
    throw IoError("not a tdump stream (bad magic)");
  }
  uint8_t version = read_le<uint8_t>(is);
  if (version != 1) throw IoError("unsupported tdump version " + std::to_string(version));
  uint8_t dt = read_le<uint8_t>(is);
  if (dt > 1) throw IoError("unsupported tdump dtype tag " + std::to_string(dt));
  uint8_t rank = read_le<uint8_t>(is);
  Shape shape(rank);
  for (uint8_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(read_le<uint64_t>(is));
  int64_t n = numel_of(shape);
  std::vector<double> values(static_cast<size_t>(n));
  if (dt == 0) {
    for (int64_t i = 0; i < n; ++i) values[static_cast<size_t>(i)] = read_le<float>(is);
  } else {
    for (int64_t i = 0; i < n; ++i) values[static_cast<size_t>(i)] = read_le<double>(is);
  }
  return Tensor::from_data(std::move(shape), std::move(values),
                           dt == 0 ? Dtype::F32 : Dtype::F64);
}

void save_tdump(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_tdump(os, t);
}

Tensor load_tdump(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  return read_tdump(is);
}

void save_checkpoint(const std::string& path, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kCkptMagic, 4);
  write_le<uint8_t>(os, 1);
  auto params = store.sorted();
  write_le<uint64_t>(os, params.size());
  for (const Parameter& p : params) {
    write_le<uint64_t>(os, p.name.size());
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_tdump(os, p.tensor);
  }
  if (!os) throw IoError("checkpoint write failed: " + path);
}

void load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0) {
    throw IoError("not a checkpoint file: " + path);
  }
  uint8_t version = read_le<uint8_t>(is);
  if (version != 1) throw IoError("unsupported checkpoint version");
  uint64_t count = read_le<uint64_t>(is);
  for (uint64_t i = 0; i < count; ++i) {
    uint64_t len = read_le<uint64_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(len));
    if (!is) throw IoError("truncated checkpoint: " + path);
    Tensor t = read_tdump(is);
    Parameter* p = store.find(name);
    if (!p) throw IoError("checkpoint entry '" + name + "' has no matching parameter");
    if (p->tensor.shape() != t.shape() || p->tensor.dtype() != t.dtype()) {
      throw IoError("checkpoint entry '" + name + "' shape/dtype mismatch: file " +
                    shape_str(t.shape()) + " vs model " + shape_str(p->tensor.shape()));
    }
    p->tensor.mutable_values() = t.values();
  }
}

}  // namespace faxbev
