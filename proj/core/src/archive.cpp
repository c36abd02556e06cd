#include "afd/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace afd {

namespace {

template <typename T>
void put_le(std::vector<char>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const std::string& context) {
    need(sizeof(T), context);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t n, const std::string& context) {
    need(n, context);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const std::string& context) const {
    if (pos_ + n > bytes_.size()) throw ArchiveError("archive truncated while reading " + context);
  }
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_archive(const std::vector<NamedTensor>& tensors) {
  std::vector<char> out(std::begin(kArchiveMagic), std::end(kArchiveMagic));
  put_le<std::uint32_t>(out, kArchiveVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw ArchiveError("tensor name too long: " + name.substr(0, 32) + "...");
    if (t.rank() > 0xFF) throw ArchiveError("tensor rank too large: " + name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<char>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_archive(const std::vector<char>& bytes) {
  Reader r(bytes);
  const std::string magic = r.get_string(4, "magic");
  if (std::memcmp(magic.data(), kArchiveMagic, 4) != 0) throw ArchiveError("bad archive magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kArchiveVersion) {
    throw ArchiveError("unsupported archive version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string where = "tensor #" + std::to_string(k);
    const auto len = r.get<std::uint16_t>(where + " name length");
    std::string name = r.get_string(len, where + " name");
    const std::string ctx = "tensor '" + name + "'";
    const auto rank = r.get<std::uint8_t>(ctx + " rank");
    if (rank == 0) throw ArchiveError(ctx + " has rank 0");
    Shape shape;
    for (int i = 0; i < rank; ++i) {
      const auto d = r.get<std::uint32_t>(ctx + " dims");
      if (d == 0) throw ArchiveError(ctx + " has a zero dimension");
      shape.push_back(d);
    }
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = std::bit_cast<double>(r.get<std::uint64_t>(ctx + " values"));
    out.push_back({std::move(name), Tensor::from(shape, std::move(values))});
  }
  if (!r.at_end()) throw ArchiveError("trailing bytes after last tensor");
  return out;
}

void write_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_archive(tensors);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ArchiveError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ArchiveError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArchiveError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

}  // namespace afd
