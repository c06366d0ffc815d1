#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "cdfnet/tensor.hpp"

namespace cdfnet {

// Tensor record ("CDFT"):
//   magic   "CDFT"                      4 bytes
//   version 0x01                        1 byte
//   dtype   0x01 real32 | 0x02 real64 | 0x03 uint32 labels
//   ndim    4 for tensors, 3 for label maps
//   extents ndim x little-endian uint32
//   payload row-major, little-endian
//
// Checkpoint file ("CDFC"):
//   magic   "CDFC"
//   version 0x01
//   count   little-endian uint32
//   entries count x { name_len uint32, UTF-8 name, embedded CDFT record }

enum class Dtype : std::uint8_t {
  kReal32 = 0x01,
  kReal64 = 0x02,
  kLabels = 0x03,
};

using LoadedRecord = std::variant<Tensor<float>, Tensor<double>, LabelMap>;

void write_tensor(const std::string& path, const Tensor<float>& t);
void write_tensor(const std::string& path, const Tensor<double>& t);
void write_label_map(const std::string& path, const LabelMap& m);

/// Parses any CDFT file; the alternative tells the caller what it held.
LoadedRecord read_record(const std::string& path);

/// Typed readers; a record of any other dtype raises FormatError.
template <typename T>
Tensor<T> read_tensor(const std::string& path);
LabelMap read_label_map(const std::string& path);

// Stream-level encoders, shared with the checkpoint writer.
void write_record(std::ostream& os, const Tensor<float>& t);
void write_record(std::ostream& os, const Tensor<double>& t);
void write_record(std::ostream& os, const LabelMap& m);

struct CheckpointEntry {
  std::string name;
  LoadedRecord value;
};

template <typename T>
void write_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, const Tensor<T>*>>& entries);

std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

/// FNV-1a 64-bit over a byte range; used for manifest content digests.
std::uint64_t fnv1a64(const void* bytes, std::size_t len);
std::uint64_t fnv1a64_file(const std::string& path);
std::string hex64(std::uint64_t v);

}  // namespace cdfnet
