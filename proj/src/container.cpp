#include "pearl/container.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "pearl/errors.hpp"

namespace pearl {

static_assert(std::numeric_limits<float>::is_iec559, "f32 payloads need IEEE-754");

namespace {

constexpr char kMagic[4] = {'P', 'R', 'L', '1'};

class ByteWriter {
 public:
  void raw(const void* src, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(src);
    out_.insert(out_.end(), p, p + n);
  }

  template <typename UInt>
  void uint(UInt value) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      out_.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
    }
  }

  void f32(float value) { uint(std::bit_cast<std::uint32_t>(value)); }

  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorKind::format, std::string("truncated container while reading ") +
                                  what + " at byte " + std::to_string(pos_));
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename UInt>
  UInt uint(const char* what) {
    auto s = take(sizeof(UInt), what);
    UInt value = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      value |= static_cast<UInt>(s[i]) << (8 * i);
    }
    return value;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint64_t checked_product(const std::vector<std::uint64_t>& shape,
                              const std::string& name) {
  std::uint64_t n = 1;
  for (auto extent : shape) {
    if (extent != 0 && n > std::numeric_limits<std::uint64_t>::max() / extent) {
      fail(ErrorKind::format, "entry '" + name + "': element count overflows");
    }
    n *= extent;
  }
  return n;
}

bool has_non_finite(const std::vector<float>& data) {
  return std::any_of(data.begin(), data.end(),
                     [](float v) { return !std::isfinite(v); });
}

}  // namespace

std::uint64_t TensorEntry::element_count() const {
  return checked_product(shape, name);
}

void TensorContainer::add(TensorEntry entry) {
  if (find(entry.name) != nullptr) {
    fail(ErrorKind::format, "duplicate entry name '" + entry.name + "'");
  }
  if (entry.shape.size() > std::numeric_limits<std::uint8_t>::max()) {
    fail(ErrorKind::format, "entry '" + entry.name + "': rank exceeds 255");
  }
  if (entry.name.size() > std::numeric_limits<std::uint16_t>::max()) {
    fail(ErrorKind::format, "entry name longer than 65535 bytes");
  }
  if (entry.element_count() != entry.data.size()) {
    fail(ErrorKind::format, "entry '" + entry.name + "': shape holds " +
                                std::to_string(entry.element_count()) +
                                " elements but payload has " +
                                std::to_string(entry.data.size()));
  }
  entry.non_finite = has_non_finite(entry.data);
  entries_.push_back(std::move(entry));
}

void TensorContainer::add(std::string name, std::vector<std::uint64_t> shape,
                          std::vector<float> data) {
  add(TensorEntry{std::move(name), std::move(shape), std::move(data)});
}

const TensorEntry* TensorContainer::find(std::string_view name) const {
  auto it = std::find_if(entries_.begin(), entries_.end(),
                         [&](const TensorEntry& e) { return e.name == name; });
  return it == entries_.end() ? nullptr : &*it;
}

const TensorEntry& TensorContainer::at(std::string_view name) const {
  const auto* entry = find(name);
  if (entry == nullptr) {
    fail(ErrorKind::load, "missing tensor entry '" + std::string(name) + "'");
  }
  return *entry;
}

std::vector<std::string> TensorContainer::non_finite_entries() const {
  std::vector<std::string> names;
  for (const auto& e : entries_) {
    if (e.non_finite) names.push_back(e.name);
  }
  return names;
}

bool TensorContainer::operator==(const TensorContainer& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.shape != b.shape || a.data.size() != b.data.size()) {
      return false;
    }
    // Bitwise so that NaN payloads compare equal to themselves.
    if (!a.data.empty() &&
        std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

std::vector<std::uint8_t> write_container(const TensorContainer& container) {
  ByteWriter w;
  w.raw(kMagic, sizeof(kMagic));
  w.uint<std::uint32_t>(TensorContainer::kVersion);
  if (container.size() > std::numeric_limits<std::uint32_t>::max()) {
    fail(ErrorKind::format, "too many entries for PRL1");
  }
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(container.size()));
  for (const auto& e : container.entries()) {
    if (has_non_finite(e.data)) {
      fail(ErrorKind::format,
           "entry '" + e.name + "' holds non-finite values; refusing to serialize");
    }
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.raw(e.name.data(), e.name.size());
    w.uint<std::uint8_t>(TensorContainer::kDtypeF32);
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto extent : e.shape) w.uint<std::uint64_t>(extent);
    for (float v : e.data) w.f32(v);
  }
  return w.take();
}

TensorContainer read_container(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic)) {
    fail(ErrorKind::format, "bad magic: not a PRL1 container");
  }
  const auto version = r.uint<std::uint32_t>("version");
  if (version != TensorContainer::kVersion) {
    fail(ErrorKind::format, "unsupported PRL1 version " + std::to_string(version));
  }
  const auto count = r.uint<std::uint32_t>("entry count");

  TensorContainer out;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorEntry e;
    const auto name_len = r.uint<std::uint16_t>("name length");
    auto name = r.take(name_len, "name");
    e.name.assign(name.begin(), name.end());
    const auto dtype = r.uint<std::uint8_t>("dtype");
    if (dtype != TensorContainer::kDtypeF32) {
      fail(ErrorKind::format, "entry '" + e.name + "': unknown dtype code " +
                                  std::to_string(dtype));
    }
    const auto rank = r.uint<std::uint8_t>("rank");
    e.shape.resize(rank);
    for (auto& extent : e.shape) extent = r.uint<std::uint64_t>("extent");
    const auto n = e.element_count();
    if (n > r.remaining() / sizeof(float)) {
      fail(ErrorKind::format, "entry '" + e.name + "': truncated payload (" +
                                  std::to_string(n) + " floats declared)");
    }
    e.data.resize(static_cast<std::size_t>(n));
    for (auto& v : e.data) v = std::bit_cast<float>(r.uint<std::uint32_t>("payload"));
    out.add(std::move(e));
  }
  if (r.remaining() != 0) {
    fail(ErrorKind::format, std::to_string(r.remaining()) +
                                " trailing bytes after last entry");
  }
  return out;
}

TensorContainer load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::load, "cannot open container " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return read_container(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

void save_container(const TensorContainer& container,
                    const std::filesystem::path& path) {
  const auto bytes = write_container(container);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::load, "cannot write container " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::load, "write failed for " + path.string());
}

}  // namespace pearl
