#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace pearl {

/// One named f32 tensor stored row-major.
struct TensorEntry {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;
  /// Set by the reader when the payload holds NaN or infinity.
  bool non_finite = false;

  std::uint64_t element_count() const;
};

/// Ordered collection of uniquely named tensors in the PRL1 layout:
///
///   "PRL1" | u32 version=1 | u32 entry_count |
///   per entry: u16 name_len, name bytes, u8 dtype (0=f32), u8 rank,
///              u64 extents[rank], f32 payload[prod(extents)]
///
/// All integers and floats are little-endian.
class TensorContainer {
 public:
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::uint8_t kDtypeF32 = 0;

  /// Appends an entry. Throws a format error on a duplicate name or when the
  /// payload length disagrees with the shape.
  void add(TensorEntry entry);
  void add(std::string name, std::vector<std::uint64_t> shape,
           std::vector<float> data);

  const std::vector<TensorEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const TensorEntry* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }
  /// Throws a load error naming the missing entry.
  const TensorEntry& at(std::string_view name) const;

  /// Names of entries whose payload carries non-finite values.
  std::vector<std::string> non_finite_entries() const;

  bool operator==(const TensorContainer& other) const;

 private:
  std::vector<TensorEntry> entries_;
};

TensorContainer read_container(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_container(const TensorContainer& container);

TensorContainer load_container(const std::filesystem::path& path);
void save_container(const TensorContainer& container,
                    const std::filesystem::path& path);

}  // namespace pearl
