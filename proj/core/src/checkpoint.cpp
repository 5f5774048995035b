#include "metanas/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "metanas/errors.hpp"

namespace metanas {

namespace {

constexpr char kMagic[4] = {'M', 'N', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_scalar(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_scalar(std::ifstream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw Error("checkpoint: truncated file " + path.string());
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint: cannot open " + path.string() + " for writing");
    out.write(kMagic, 4);
    write_scalar<std::uint32_t>(out, kVersion);
    write_scalar<std::uint64_t>(out, tensors.size());
    for (const NamedTensor& nt : tensors) {
        write_scalar<std::uint64_t>(out, nt.name.size());
        out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        write_scalar<std::uint64_t>(out, nt.tensor.rank());
        for (std::size_t d = 0; d < nt.tensor.rank(); ++d)
            write_scalar<std::uint64_t>(out, nt.tensor.dim(d));
        out.write(reinterpret_cast<const char*>(nt.tensor.data()),
                  static_cast<std::streamsize>(nt.tensor.size() * sizeof(double)));
    }
    if (!out) throw Error("checkpoint: write failed for " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw Error("checkpoint: bad magic in " + path.string());
    const auto version = read_scalar<std::uint32_t>(in, path);
    if (version != kVersion)
        throw Error("checkpoint: unsupported version " + std::to_string(version));
    const auto count = read_scalar<std::uint64_t>(in, path);
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_scalar<std::uint64_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        const auto rank = read_scalar<std::uint64_t>(in, path);
        std::vector<std::size_t> shape(rank);
        std::size_t total = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(read_scalar<std::uint64_t>(in, path));
            total *= d;
        }
        if (rank == 0) total = 0;
        std::vector<double> data(total);
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(total * sizeof(double)));
        if (!in) throw Error("checkpoint: truncated file " + path.string());
        tensors.push_back(NamedTensor{std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    return tensors;
}

}  // namespace metanas
