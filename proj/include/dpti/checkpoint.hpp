#pragma once

// DPTI1 container: a flat list of named, typed, shaped little-endian blobs.
//
//   "DPTI1"                magic, 5 bytes
//   u32  version           currently 1
//   u64  entry count
//   per entry:
//     u32  name length, name bytes (UTF-8)
//     u8   dtype tag (1 = f64, 2 = f32, 3 = i64, 4 = u8)
//     u32  rank, then rank x u64 dims
//     u64  payload byte count, payload (little-endian)

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpti/tensor.hpp"

namespace dpti {

enum class DType : std::uint8_t { kF64 = 1, kF32 = 2, kI64 = 3, kU8 = 4 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ContainerEntry {
  std::string name;
  DType dtype = DType::kF64;
  Shape shape;
  std::vector<std::uint8_t> payload;
};

class Container {
 public:
  static constexpr char kMagic[5] = {'D', 'P', 'T', 'I', '1'};
  static constexpr std::uint32_t kVersion = 1;

  void put_f64(const std::string& name, const Shape& shape, std::span<const double> values);
  void put_tensor(const std::string& name, const Tensor& t) { put_f64(name, t.shape(), t.data()); }
  void put_i64(const std::string& name, std::int64_t value);
  void put_text(const std::string& name, const std::string& text);

  const ContainerEntry* find(const std::string& name) const;
  std::vector<double> get_f64(const std::string& name, const Shape* expected_shape = nullptr) const;
  std::int64_t get_i64(const std::string& name) const;
  std::string get_text(const std::string& name) const;

  const std::vector<ContainerEntry>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  static Container deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  void put(ContainerEntry entry);
  std::vector<ContainerEntry> entries_;
};

/// 64-bit FNV-1a; used for checkpoint and manifest fingerprints.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::uint64_t file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t value);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Little-endian f64 encoding shared by every binary artifact.
void append_f64_le(std::vector<std::uint8_t>& out, std::span<const double> values);
std::vector<double> decode_f64_le(std::span<const std::uint8_t> bytes);

}  // namespace dpti
