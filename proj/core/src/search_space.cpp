#include "metanas/search_space.hpp"

#include <algorithm>
#include <sstream>

namespace metanas {

const std::array<std::string, kNumOps>& op_names() {
    static const std::array<std::string, kNumOps> names = {
        "conv3", "conv5", "conv7", "sep3", "sep5", "sep7", "avgpool3", "maxpool3"};
    return names;
}

const std::string& op_name(OpId op) { return op_names()[static_cast<std::size_t>(op)]; }

std::size_t op_kernel_size(OpId op) {
    switch (op) {
        case OpId::kConv3:
        case OpId::kSep3:
            return 3;
        case OpId::kConv5:
        case OpId::kSep5:
            return 5;
        case OpId::kConv7:
        case OpId::kSep7:
            return 7;
        case OpId::kAvgPool3:
        case OpId::kMaxPool3:
            return 3;
    }
    return 3;
}

bool op_is_separable(OpId op) {
    return op == OpId::kSep3 || op == OpId::kSep5 || op == OpId::kSep7;
}

bool op_is_pool(OpId op) { return op == OpId::kAvgPool3 || op == OpId::kMaxPool3; }

bool ArchitectureString::operator==(const ArchitectureString& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i].op != o.layers[i].op || layers[i].skips != o.layers[i].skips) return false;
    return true;
}

void validate(const ArchitectureString& arch) {
    if (arch.layers.empty()) throw ArchError("architecture must have at least one layer");
    for (std::size_t k = 0; k < arch.layers.size(); ++k) {
        if (arch.layers[k].skips.size() != k)
            throw ArchError("layer " + std::to_string(k + 1) + " must carry " + std::to_string(k) +
                            " skip bits, has " + std::to_string(arch.layers[k].skips.size()));
        for (std::uint8_t b : arch.layers[k].skips)
            if (b > 1) throw ArchError("skip bits must be 0 or 1");
    }
}

DagSpec decode(const ArchitectureString& arch) {
    validate(arch);
    const std::size_t depth = arch.depth();
    DagSpec dag;
    dag.layers.resize(depth);
    std::vector<bool> consumed(depth, false);
    for (std::size_t k = 0; k < depth; ++k) {
        DagLayer& layer = dag.layers[k];
        layer.op = arch.layers[k].op;
        if (k > 0) {
            for (std::size_t j = 0; j < k; ++j)
                if (arch.layers[k].skips[j] || j + 1 == k) layer.inputs.push_back(j);
            for (std::size_t j : layer.inputs) consumed[j] = true;
        }
    }
    for (std::size_t k = 0; k < depth; ++k) {
        dag.layers[k].feeds_terminal = !consumed[k];
        if (!consumed[k]) dag.terminal_inputs.push_back(k);
    }
    return dag;
}

std::uint64_t space_size(std::size_t layers) {
    if (layers == 0) throw ConfigError("space_size: need at least one layer");
    const std::size_t exponent = 3 * layers + layers * (layers - 1) / 2;
    if (exponent > 63)
        throw ConfigError("space_size: 2^" + std::to_string(exponent) +
                          " architectures overflow 64 bits (layers > 9)");
    return std::uint64_t{1} << exponent;
}

std::string serialize(const ArchitectureString& arch) {
    validate(arch);
    std::ostringstream out;
    for (std::size_t k = 0; k < arch.layers.size(); ++k) {
        if (k) out << "; ";
        out << op_name(arch.layers[k].op);
        if (k > 0) {
            out << " skips=";
            for (std::uint8_t b : arch.layers[k].skips) out << (b ? '1' : '0');
        }
    }
    return out.str();
}

namespace {

int op_index(const std::string& token) {
    const auto& names = op_names();
    const auto it = std::find(names.begin(), names.end(), token);
    return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

}  // namespace

ArchitectureString parse_architecture(const std::string& text) {
    ArchitectureString arch;
    std::size_t token_index = 0;
    std::size_t pos = 0;
    std::size_t layer_index = 0;
    while (pos <= text.size()) {
        const std::size_t sep = std::min(text.find(';', pos), text.size());
        std::istringstream segment(text.substr(pos, sep - pos));
        std::vector<std::string> tokens;
        for (std::string tok; segment >> tok;) tokens.push_back(tok);
        pos = sep + 1;
        if (tokens.empty()) {
            if (sep == text.size()) break;
            continue;  // tolerate blank segments, e.g. a trailing ';'
        }
        ArchLayer layer;
        const int op = op_index(tokens[0]);
        if (op < 0) throw ParseError("unknown operation '" + tokens[0] + "'", token_index);
        layer.op = static_cast<OpId>(op);
        ++token_index;
        std::size_t t = 1;
        if (t < tokens.size() && tokens[t].rfind("skips=", 0) == 0) {
            const std::string bits = tokens[t].substr(6);
            for (char c : bits) {
                if (c != '0' && c != '1')
                    throw ParseError("skip bits must be 0/1, got '" + tokens[t] + "'", token_index);
                layer.skips.push_back(c == '1' ? 1 : 0);
            }
            ++token_index;
            ++t;
        }
        if (t < tokens.size())
            throw ParseError("unexpected token '" + tokens[t] + "'", token_index);
        if (layer.skips.size() != layer_index)
            throw ParseError("layer " + std::to_string(layer_index + 1) + " needs " +
                                 std::to_string(layer_index) + " skip bits, got " +
                                 std::to_string(layer.skips.size()),
                             token_index - (layer.skips.empty() ? 0 : 1));
        arch.layers.push_back(std::move(layer));
        ++layer_index;
        if (sep == text.size()) break;
    }
    validate(arch);  // throws on empty input
    return arch;
}

}  // namespace metanas
