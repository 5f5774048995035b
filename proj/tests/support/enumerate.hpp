#pragma once

#include <vector>

#include "metanas/search_space.hpp"

namespace metanas::testing {

// Independent exhaustive enumeration of depth-L architectures by counting
// in mixed radix: 8 op choices per layer, one bit per (layer, predecessor)
// pair. Only practical for L <= 3.
inline std::vector<ArchitectureString> enumerate_architectures(std::size_t layers) {
    std::vector<ArchitectureString> all;
    std::vector<std::size_t> op_digits(layers, 0);
    std::size_t skip_bits = 0;
    for (std::size_t k = 0; k < layers; ++k) skip_bits += k;

    const std::size_t op_combos = [&] {
        std::size_t n = 1;
        for (std::size_t k = 0; k < layers; ++k) n *= kNumOps;
        return n;
    }();
    const std::size_t bit_combos = std::size_t{1} << skip_bits;

    for (std::size_t oc = 0; oc < op_combos; ++oc) {
        std::size_t rem = oc;
        for (std::size_t k = 0; k < layers; ++k) {
            op_digits[k] = rem % kNumOps;
            rem /= kNumOps;
        }
        for (std::size_t bc = 0; bc < bit_combos; ++bc) {
            ArchitectureString arch;
            arch.layers.resize(layers);
            std::size_t bit = 0;
            for (std::size_t k = 0; k < layers; ++k) {
                arch.layers[k].op = static_cast<OpId>(op_digits[k]);
                arch.layers[k].skips.resize(k);
                for (std::size_t j = 0; j < k; ++j)
                    arch.layers[k].skips[j] = (bc >> bit++) & 1u;
            }
            all.push_back(std::move(arch));
        }
    }
    return all;
}

}  // namespace metanas::testing
