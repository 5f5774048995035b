#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "metanas/tensor.hpp"

namespace metanas {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Binary parameter container, little-endian throughout:
//
//   magic   "MNCK"            4 bytes
//   version u32               currently 1
//   count   u64               number of records
//   record: name_len u64, name bytes, rank u64, dims u64[rank],
//           data f64[prod(dims)]
//
// Records keep their insertion order; loading returns them in file order.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace metanas
