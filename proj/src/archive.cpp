#include "mrigan/archive.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mrigan {

namespace {
constexpr char kMagic[8] = {'M', 'G', 'A', 'R', 'C', 'H', '0', '1'};

size_t dtype_size(const std::string& dtype) {
  if (dtype == "float64") return 8;
  if (dtype == "float32") return 4;
  throw std::runtime_error("unsupported archive dtype: " + dtype);
}
} // namespace

ArchiveWriter::ArchiveWriter(nlohmann::json header_meta) : meta_(std::move(header_meta)) {}

void ArchiveWriter::add(const std::string& name, const Tensor& t, const std::string& dtype) {
  dtype_size(dtype);
  entries_.push_back({name, dtype, t});
}

void ArchiveWriter::write(const std::string& path) const {
  nlohmann::json header = meta_;
  header["format_version"] = 1;
  header["endianness"] = "little";
  nlohmann::json arrays = nlohmann::json::array();
  size_t offset = 0;
  for (const auto& e : entries_) {
    nlohmann::json a;
    a["name"] = e.name;
    a["dtype"] = e.dtype;
    a["shape"] = e.data.shape();
    a["offset"] = offset;
    offset += dtype_size(e.dtype) * static_cast<size_t>(e.data.numel());
    arrays.push_back(std::move(a));
  }
  header["arrays"] = std::move(arrays);
  std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(kMagic, 8);
  uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& e : entries_) {
    if (e.dtype == "float64") {
      f.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(8 * e.data.numel()));
    } else {
      std::vector<float> buf(static_cast<size_t>(e.data.numel()));
      for (long i = 0; i < e.data.numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(e.data[i]);
      f.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(4 * e.data.numel()));
    }
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

ArchiveReader::ArchiveReader(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open archive: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not an archive file: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || hlen > (1ull << 30)) throw std::runtime_error("corrupt archive header: " + path);
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("truncated archive header: " + path);
  header_ = nlohmann::json::parse(hs, nullptr, false);
  if (header_.is_discarded()) throw std::runtime_error("malformed archive header JSON: " + path);
  payload_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  size_t need = 0;
  for (const auto& a : header_.at("arrays")) {
    Entry e;
    e.dtype = a.at("dtype").get<std::string>();
    e.shape = a.at("shape").get<std::vector<long>>();
    e.offset = a.at("offset").get<size_t>();
    std::string name = a.at("name").get<std::string>();
    size_t bytes = dtype_size(e.dtype) * static_cast<size_t>(shape_numel(e.shape));
    need = std::max(need, e.offset + bytes);
    order_.push_back(name);
    entries_[name] = std::move(e);
  }
  if (payload_.size() < need) throw std::runtime_error("truncated archive payload: " + path);
}

bool ArchiveReader::has(const std::string& name) const { return entries_.count(name) > 0; }

Tensor ArchiveReader::read(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::runtime_error("archive has no array named: " + name);
  const Entry& e = it->second;
  Tensor t(e.shape);
  const char* src = payload_.data() + e.offset;
  if (e.dtype == "float64") {
    std::memcpy(t.data(), src, static_cast<size_t>(8 * t.numel()));
  } else {
    const float* fs = reinterpret_cast<const float*>(src);
    for (long i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(fs[i]);
  }
  return t;
}

std::vector<std::string> ArchiveReader::names() const { return order_; }

} // namespace mrigan
