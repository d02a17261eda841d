#pragma once

#include <string>
#include <vector>

#include "uniedit/tensor.hpp"

namespace uniedit {

/// One named entry of a tensor container file.
struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Binary tensor container:
///   magic "UNIE1" | uint64 LE header length | JSON header | payload
/// The header lists {name, shape, dtype:"f32", offset, checksum} per entry;
/// offsets are byte positions into the payload, non-overlapping and in
/// order. Payload is raw little-endian float32 data. Round trips are
/// bit-exact; checksums are verified on read.
void write_tensor_container(const std::string& path, const std::vector<NamedTensor>& entries);

std::vector<NamedTensor> read_tensor_container(const std::string& path);

/// First entry with this name; throws IoError if absent.
const Tensor& find_entry(const std::vector<NamedTensor>& entries, const std::string& name);

}  // namespace uniedit
