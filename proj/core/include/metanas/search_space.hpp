#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "metanas/errors.hpp"

namespace metanas {

// Fixed operation menu. Order is part of the on-disk format.
enum class OpId : std::uint8_t {
    kConv3 = 0,
    kConv5 = 1,
    kConv7 = 2,
    kSep3 = 3,
    kSep5 = 4,
    kSep7 = 5,
    kAvgPool3 = 6,
    kMaxPool3 = 7,
};

constexpr std::size_t kNumOps = 8;

const std::array<std::string, kNumOps>& op_names();
const std::string& op_name(OpId op);
// kernel window size of the op (3/5/7; pooling windows are 3).
std::size_t op_kernel_size(OpId op);
bool op_is_separable(OpId op);
bool op_is_pool(OpId op);

// One controller decision sequence: per layer an operation plus one skip bit
// per earlier layer. Layer k (0-based) carries exactly k skip bits; bit j
// selects layer j as an extra input.
struct ArchLayer {
    OpId op = OpId::kConv3;
    std::vector<std::uint8_t> skips;
};

struct ArchitectureString {
    std::vector<ArchLayer> layers;

    std::size_t depth() const { return layers.size(); }
    bool operator==(const ArchitectureString& o) const;
};

// Throws ArchError when skip-vector lengths do not match layer positions or
// the architecture is empty.
void validate(const ArchitectureString& arch);

// Layer wiring decoded from an architecture string. Layer k always consumes
// its direct predecessor k-1 (layer 0 consumes the network input); set skip
// bits add earlier layers. Inputs are listed in ascending layer order and
// are concatenated along the channel axis. Layers never consumed by a later
// layer feed the terminal node.
struct DagLayer {
    OpId op = OpId::kConv3;
    std::vector<std::size_t> inputs;  // 0-based producing layers; empty for layer 0
    bool feeds_terminal = false;
};

struct DagSpec {
    std::vector<DagLayer> layers;
    std::vector<std::size_t> terminal_inputs;  // ascending
};

DagSpec decode(const ArchitectureString& arch);

// Number of distinct architecture strings of depth `layers`:
// 8^L * 2^(L(L-1)/2). Throws ConfigError when the count overflows 64 bits
// (L > 9) or L == 0.
std::uint64_t space_size(std::size_t layers);

// Text format, one token group per layer, groups joined by "; ":
//   conv3; conv5 skips=1; sep3 skips=01
// The skip bit string lists earlier layers left to right starting at layer
// 1 (1-based); layer 1 has no skips= field.
std::string serialize(const ArchitectureString& arch);
// Inverse of serialize. Throws ParseError carrying the 0-based index of the
// offending token.
ArchitectureString parse_architecture(const std::string& text);

}  // namespace metanas
