#include "dpti/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dpti/errors.hpp"

namespace dpti {

namespace {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(u & 0xFFu));
    u = static_cast<U>(u >> 8);
  }
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i])
                                               << (8 * i));
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("DPTI1: truncated container");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t dtype_width(DType t) {
  switch (t) {
    case DType::kF64:
    case DType::kI64:
      return 8;
    case DType::kF32:
      return 4;
    case DType::kU8:
      return 1;
  }
  throw FormatError("DPTI1: unknown dtype tag");
}

}  // namespace

void append_f64_le(std::vector<std::uint8_t>& out, std::span<const double> values) {
  out.reserve(out.size() + values.size() * 8);
  for (double v : values) put_le(out, std::bit_cast<std::uint64_t>(v));
}

std::vector<double> decode_f64_le(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 8 != 0) throw FormatError("f64 payload length not a multiple of 8");
  Reader r(bytes);
  std::vector<double> out(bytes.size() / 8);
  for (double& v : out) v = std::bit_cast<double>(r.get<std::uint64_t>());
  return out;
}

void Container::put(ContainerEntry entry) {
  for (auto& e : entries_) {
    if (e.name == entry.name) {
      e = std::move(entry);
      return;
    }
  }
  entries_.push_back(std::move(entry));
}

void Container::put_f64(const std::string& name, const Shape& shape, std::span<const double> values) {
  if (numel(shape) != values.size()) {
    throw DimensionError("container entry " + name + ": shape " + shape_str(shape) + " vs " +
                         std::to_string(values.size()) + " values");
  }
  ContainerEntry e{name, DType::kF64, shape, {}};
  append_f64_le(e.payload, values);
  put(std::move(e));
}

void Container::put_i64(const std::string& name, std::int64_t value) {
  ContainerEntry e{name, DType::kI64, {1}, {}};
  put_le(e.payload, value);
  put(std::move(e));
}

void Container::put_text(const std::string& name, const std::string& text) {
  ContainerEntry e{name, DType::kU8, {text.size()}, {}};
  e.payload.assign(text.begin(), text.end());
  put(std::move(e));
}

const ContainerEntry* Container::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::vector<double> Container::get_f64(const std::string& name, const Shape* expected_shape) const {
  const auto* e = find(name);
  if (!e) throw FormatError("DPTI1: missing entry " + name);
  if (e->dtype != DType::kF64) throw FormatError("DPTI1: entry " + name + " is not f64");
  if (expected_shape && *expected_shape != e->shape) {
    throw FormatError("DPTI1: entry " + name + " has shape " + shape_str(e->shape) + ", expected " +
                      shape_str(*expected_shape));
  }
  return decode_f64_le(e->payload);
}

std::int64_t Container::get_i64(const std::string& name) const {
  const auto* e = find(name);
  if (!e || e->dtype != DType::kI64) throw FormatError("DPTI1: missing i64 entry " + name);
  Reader r(e->payload);
  return r.get<std::int64_t>();
}

std::string Container::get_text(const std::string& name) const {
  const auto* e = find(name);
  if (!e || e->dtype != DType::kU8) throw FormatError("DPTI1: missing text entry " + name);
  return {e->payload.begin(), e->payload.end()};
}

std::vector<std::uint8_t> Container::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le(out, kVersion);
  put_le(out, static_cast<std::uint64_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_le(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    put_le(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put_le(out, static_cast<std::uint64_t>(d));
    put_le(out, static_cast<std::uint64_t>(e.payload.size()));
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

Container Container::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a DPTI1 container (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw FormatError("DPTI1: unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  Container c;
  for (std::uint64_t i = 0; i < count; ++i) {
    ContainerEntry e;
    const auto name_len = r.get<std::uint32_t>();
    const auto name = r.take(name_len);
    e.name.assign(name.begin(), name.end());
    e.dtype = static_cast<DType>(r.get<std::uint8_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const auto nbytes = r.get<std::uint64_t>();
    if (nbytes != numel(e.shape) * dtype_width(e.dtype)) {
      throw FormatError("DPTI1: entry " + e.name + " payload size does not match its shape");
    }
    const auto payload = r.take(nbytes);
    e.payload.assign(payload.begin(), payload.end());
    c.entries_.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("DPTI1: trailing bytes after last entry");
  return c;
}

void Container::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

Container Container::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a64(read_file(path)); }

std::string hex64(std::uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace dpti
