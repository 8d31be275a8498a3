#include "wm/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "wm/rng.hpp"

namespace wm::ckpt {

namespace {

constexpr char kMagic[8] = {'W', 'M', 'C', 'K', '0', '0', '0', '1'};

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T take(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

const diff::Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return &t;
    return nullptr;
}

diff::Tensor Checkpoint::get(const std::string& name) const {
    const diff::Tensor* t = find(name);
    if (!t) throw std::runtime_error("checkpoint: missing array '" + name + "'");
    return *t;
}

void save(const std::string& path, const Checkpoint& c) {
    if (!c.manifest.contains("format_version"))
        throw std::invalid_argument("checkpoint: manifest lacks format_version");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, sizeof kMagic);
    std::string mf = c.manifest.dump();
    put<uint64_t>(os, mf.size());
    os.write(mf.data(), static_cast<std::streamsize>(mf.size()));
    put<uint32_t>(os, static_cast<uint32_t>(c.arrays.size()));
    for (const auto& [name, t] : c.arrays) {
        put<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint32_t>(os, static_cast<uint32_t>(t.shape().size()));
        for (int d : t.shape()) put<int64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
    Checkpoint c;
    auto mlen = take<uint64_t>(is);
    std::string mf(mlen, '\0');
    is.read(mf.data(), static_cast<std::streamsize>(mlen));
    if (!is) throw std::runtime_error("checkpoint: truncated manifest");
    c.manifest = nlohmann::json::parse(mf);
    int version = c.manifest.value("format_version", -1);
    if (version != kFormatVersion)
        throw std::runtime_error("checkpoint: unsupported format_version " + std::to_string(version));
    auto count = take<uint32_t>(is);
    for (uint32_t i = 0; i < count; ++i) {
        auto nlen = take<uint32_t>(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        auto ndim = take<uint32_t>(is);
        std::vector<int> shape;
        long long numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            auto v = take<int64_t>(is);
            shape.push_back(static_cast<int>(v));
            numel *= v;
        }
        std::vector<double> vals(static_cast<size_t>(numel));
        is.read(reinterpret_cast<char*>(vals.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated array '" + name + "'");
        c.arrays.emplace_back(name, diff::Tensor::from(shape, std::move(vals)));
    }
    return c;
}

uint64_t weights_checksum(const std::vector<std::pair<std::string, diff::Tensor>>& arrays) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : arrays) {
        h = fnv1a64(name, h);
        h = fnv1a64(t.data(), static_cast<size_t>(t.size()) * sizeof(double), h);
    }
    return h;
}

}  // namespace wm::ckpt
