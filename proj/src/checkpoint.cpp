#include "amt/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace amt {

namespace {
constexpr char kMagic[4] = {'A', 'M', 'T', '1'};
}

void Checkpoint::save(const std::string& path) const {
    nlohmann::json manifest;
    manifest["version"] = "AMT1";
    manifest["meta"] = meta;
    auto& list = manifest["tensors"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& r : records_) {
        list.push_back({{"name", r.name},
                        {"shape", r.shape},
                        {"dtype", r.dtype},
                        {"offset", offset},
                        {"bytes", r.bytes.size()}});
        offset += r.bytes.size();
    }
    const std::string m = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    out.write(kMagic, 4);
    const uint64_t mlen = m.size();
    out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out.write(m.data(), static_cast<std::streamsize>(m.size()));
    for (const auto& r : records_)
        out.write(reinterpret_cast<const char*>(r.bytes.data()),
                  static_cast<std::streamsize>(r.bytes.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: '" + path + "' is not an AMT1 file");
    uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string m(mlen, '\0');
    in.read(m.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw std::runtime_error("checkpoint: truncated manifest in '" + path + "'");

    nlohmann::json manifest = nlohmann::json::parse(m);
    if (manifest.value("version", "") != "AMT1")
        throw std::runtime_error("checkpoint: unsupported version in '" + path + "'");

    Checkpoint ckpt;
    ckpt.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& e : manifest["tensors"]) {
        Record r;
        r.name = e["name"].get<std::string>();
        r.shape = e["shape"].get<Shape>();
        r.dtype = e["dtype"].get<std::string>();
        r.bytes.resize(e["bytes"].get<size_t>());
        ckpt.records_.push_back(std::move(r));
    }
    for (auto& r : ckpt.records_) {
        in.read(reinterpret_cast<char*>(r.bytes.data()),
                static_cast<std::streamsize>(r.bytes.size()));
        if (!in)
            throw std::runtime_error("checkpoint: truncated data for tensor '" + r.name +
                                     "' in '" + path + "'");
        const auto want = static_cast<size_t>(numel(r.shape)) * (r.dtype == "f32" ? 4 : 8);
        if (want != r.bytes.size())
            throw std::runtime_error("checkpoint: size mismatch for tensor '" + r.name + "'");
    }
    return ckpt;
}

}  // namespace amt
