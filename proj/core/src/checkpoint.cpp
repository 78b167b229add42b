#include "demix/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace demix::ad {

namespace {

constexpr char kMagic[4] = {'D', 'M', 'X', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_u32(std::FILE* f, uint32_t v) {
    if (std::fwrite(&v, sizeof v, 1, f) != 1) throw std::runtime_error("checkpoint: write failed");
}

uint32_t read_u32(std::FILE* f) {
    uint32_t v = 0;
    if (std::fread(&v, sizeof v, 1, f) != 1)
        throw std::runtime_error("checkpoint: truncated file");
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const NamedTensors& params) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    if (std::fwrite(kMagic, 1, 4, f.get()) != 4)
        throw std::runtime_error("checkpoint: write failed");
    write_u32(f.get(), static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        write_u32(f.get(), static_cast<uint32_t>(name.size()));
        if (!name.empty() && std::fwrite(name.data(), 1, name.size(), f.get()) != name.size())
            throw std::runtime_error("checkpoint: write failed");
        write_u32(f.get(), static_cast<uint32_t>(t.shape().size()));
        for (int e : t.shape()) write_u32(f.get(), static_cast<uint32_t>(e));
        const auto& v = t.value();
        if (!v.empty() && std::fwrite(v.data(), sizeof(double), v.size(), f.get()) != v.size())
            throw std::runtime_error("checkpoint: write failed");
    }
}

NamedTensors load_checkpoint(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[4];
    if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic (not a DMX1 file): " + path);
    const uint32_t count = read_u32(f.get());
    NamedTensors out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_u32(f.get());
        if (name_len > (1u << 20)) throw std::runtime_error("checkpoint: corrupt name length");
        std::string name(name_len, '\0');
        if (name_len && std::fread(name.data(), 1, name_len, f.get()) != name_len)
            throw std::runtime_error("checkpoint: truncated file");
        const uint32_t rank = read_u32(f.get());
        if (rank > 8) throw std::runtime_error("checkpoint: corrupt rank");
        std::vector<int> shape(rank);
        for (auto& e : shape) e = static_cast<int>(read_u32(f.get()));
        const int64_t n = numel_of(shape);
        std::vector<double> data(static_cast<size_t>(n));
        if (n && std::fread(data.data(), sizeof(double), data.size(), f.get()) != data.size())
            throw std::runtime_error("checkpoint: truncated file");
        out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
    }
    return out;
}

} // namespace demix::ad
