#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrigan/tensor.hpp"

namespace mrigan {

// Single-file checkpoint container: 8-byte magic, u64 little-endian header
// length, JSON header, then tightly packed little-endian array payloads in
// header order. Arrays are float32 or float64; float64 is used for training
// state so a resumed run continues bit-exactly, float32 for weight export.
class ArchiveWriter {
public:
  explicit ArchiveWriter(nlohmann::json header_meta = {});
  void add(const std::string& name, const Tensor& t, const std::string& dtype = "float64");
  void write(const std::string& path) const;

private:
  nlohmann::json meta_;
  struct Entry {
    std::string name;
    std::string dtype;
    Tensor data;
  };
  std::vector<Entry> entries_;
};

class ArchiveReader {
public:
  explicit ArchiveReader(const std::string& path);
  const nlohmann::json& header() const { return header_; }
  bool has(const std::string& name) const;
  Tensor read(const std::string& name) const;
  std::vector<std::string> names() const;

private:
  nlohmann::json header_;
  struct Entry {
    std::string dtype;
    std::vector<long> shape;
    size_t offset; // into payload_
  };
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
  std::vector<char> payload_;
};

} // namespace mrigan
