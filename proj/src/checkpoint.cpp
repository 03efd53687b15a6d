#include "pfm/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pfm {

namespace {

constexpr char kMagic[5] = {'P', 'F', 'M', 'T', '1'};

template <typename U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));  // little-endian host
    out.append(buf, sizeof(U));
}

template <typename U>
U take(std::ifstream& in) {
    U v;
    in.read(reinterpret_cast<char*>(&v), sizeof(U));
    if (!in) throw std::runtime_error("checkpoint truncated");
    return v;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void save_checkpoint(const std::string& file, const Checkpoint& ckpt) {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put<std::uint64_t>(out, ckpt.digest);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
    for (const auto& e : ckpt.entries) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.path.size()));
        out.append(e.path);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (i64 d : e.shape) put<std::int64_t>(out, d);
        const std::size_t bytes = e.data.size() * sizeof(float);
        const std::size_t at = out.size();
        out.resize(at + bytes);
        std::memcpy(out.data() + at, e.data.data(), bytes);
    }
    const std::string tmp = file + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + tmp + "' for writing");
        os.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!os) throw std::runtime_error("short write to '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), file.c_str()) != 0) {
        throw std::runtime_error("cannot rename '" + tmp + "' to '" + file + "'");
    }
}

Checkpoint load_checkpoint(const std::string& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint file missing: " + file);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kMagic, 5) != 0) {
        throw std::runtime_error("'" + file + "' is not a PFMT1 checkpoint");
    }
    Checkpoint ckpt;
    ckpt.digest = take<std::uint64_t>(in);
    const std::uint32_t count = take<std::uint32_t>(in);
    ckpt.entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const std::uint32_t plen = take<std::uint32_t>(in);
        e.path.resize(plen);
        in.read(e.path.data(), plen);
        const std::uint32_t rank = take<std::uint32_t>(in);
        i64 total = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            e.shape.push_back(take<std::int64_t>(in));
            total *= e.shape.back();
        }
        e.data.resize(static_cast<std::size_t>(total));
        in.read(reinterpret_cast<char*>(e.data.data()),
                static_cast<std::streamsize>(e.data.size() * sizeof(float)));
        if (!in) throw std::runtime_error("checkpoint truncated in entry '" + e.path + "'");
        ckpt.entries.push_back(std::move(e));
    }
    return ckpt;
}

}  // namespace pfm
