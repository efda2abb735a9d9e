#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dfd/errors.hpp"
#include "dfd/tensor.hpp"

namespace dfd {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw corruption_error("unexpected end of file");
    return v;
}
inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw corruption_error("unexpected end of file");
    return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
    put_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& is) {
    const std::uint64_t n = get_u64(is);
    std::string s(n, '\0');
    if (n && !is.read(s.data(), static_cast<std::streamsize>(n)))
        throw corruption_error("unexpected end of file in string");
    return s;
}

} // namespace io

/// Replaces `path` atomically with the bytes produced by `writer`.
template <typename Writer>
void atomic_write(const std::filesystem::path& path, Writer&& writer) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw error("cannot open " + tmp.string() + " for writing");
        writer(os);
        os.flush();
        if (!os) throw error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Raw tensor files. 16-byte header: magic (4 bytes), u32 version, u32 rank,
// u32 reserved; then `rank` u64 dims, then row-major f32 payload.
// ---------------------------------------------------------------------------

constexpr std::uint32_t kTensorFormatVersion = 1;

inline void write_tensor_stream(std::ostream& os, const Tensor& t, const char magic[4]) {
    os.write(magic, 4);
    io::put_u32(os, kTensorFormatVersion);
    io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    io::put_u32(os, 0u);
    for (auto d : t.dims) io::put_u64(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.ptr()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

inline Tensor read_tensor_stream(std::istream& is, const char magic[4], const std::string& what) {
    char m[4];
    if (!is.read(m, 4) || std::memcmp(m, magic, 4) != 0)
        throw corruption_error(what + ": bad magic");
    const std::uint32_t version = io::get_u32(is);
    if (version != kTensorFormatVersion)
        throw corruption_error(what + ": unsupported version " + std::to_string(version));
    const std::uint32_t rank = io::get_u32(is);
    if (rank > 8) throw corruption_error(what + ": implausible rank");
    io::get_u32(is); // reserved
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) d = static_cast<std::int64_t>(io::get_u64(is));
    Tensor t(dims);
    if (t.numel() &&
        !is.read(reinterpret_cast<char*>(t.ptr()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float))))
        throw corruption_error(what + ": truncated payload");
    return t;
}

inline void write_tensor_file(const std::filesystem::path& path, const Tensor& t,
                              const char magic[4]) {
    atomic_write(path, [&](std::ostream& os) { write_tensor_stream(os, t, magic); });
}

inline Tensor read_tensor_file(const std::filesystem::path& path, const char magic[4]) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw corruption_error("cannot open " + path.string());
    Tensor t = read_tensor_stream(is, magic, path.filename().string());
    return t;
}

// ---------------------------------------------------------------------------
// Named-blob archives (checkpoints, weight files). Magic "DFDC"; an embedded
// free-form text blob (the effective config) followed by named tensors.
// ---------------------------------------------------------------------------

struct BlobArchive {
    std::string text;
    std::vector<std::pair<std::string, Tensor>> blobs;

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : blobs)
            if (n == name) return t;
        throw corruption_error("archive: missing blob '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : blobs)
            if (n == name) return true;
        return false;
    }
    void add(const std::string& name, Tensor t) { blobs.emplace_back(name, std::move(t)); }
    void add_scalar(const std::string& name, double v) {
        Tensor t({1});
        t[0] = static_cast<float>(v);
        blobs.emplace_back(name, std::move(t));
    }
    double scalar(const std::string& name) const { return get(name)[0]; }
};

inline void write_archive(const std::filesystem::path& path, const BlobArchive& a) {
    atomic_write(path, [&](std::ostream& os) {
        os.write("DFDC", 4);
        io::put_u32(os, kTensorFormatVersion);
        io::put_string(os, a.text);
        io::put_u64(os, a.blobs.size());
        for (const auto& [name, t] : a.blobs) {
            io::put_string(os, name);
            write_tensor_stream(os, t, "DFDT");
        }
    });
}

inline BlobArchive read_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw corruption_error("cannot open " + path.string());
    char m[4];
    if (!is.read(m, 4) || std::memcmp(m, "DFDC", 4) != 0)
        throw corruption_error(path.string() + ": not a checkpoint archive");
    const std::uint32_t version = io::get_u32(is);
    if (version != kTensorFormatVersion)
        throw corruption_error(path.string() + ": unsupported archive version");
    BlobArchive a;
    a.text = io::get_string(is);
    const std::uint64_t n = io::get_u64(is);
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string name = io::get_string(is);
        Tensor t = read_tensor_stream(is, "DFDT", path.filename().string() + ":" + name);
        a.blobs.emplace_back(std::move(name), std::move(t));
    }
    return a;
}

// ---------------------------------------------------------------------------
// Line-oriented key=value files (manifests, configs).
// ---------------------------------------------------------------------------

using KvPairs = std::vector<std::pair<std::string, std::string>>;

inline std::string kv_to_string(const KvPairs& kv) {
    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    return os.str();
}

inline KvPairs kv_from_string(const std::string& text) {
    KvPairs kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw corruption_error("key=value line without '=': " + line);
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
}

inline void write_kv_file(const std::filesystem::path& path, const KvPairs& kv) {
    atomic_write(path, [&](std::ostream& os) { os << kv_to_string(kv); });
}

inline KvPairs read_kv_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw corruption_error("cannot open " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return kv_from_string(buf.str());
}

inline std::map<std::string, std::string> kv_map(const KvPairs& kv) {
    return {kv.begin(), kv.end()};
}

} // namespace dfd
