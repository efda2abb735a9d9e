#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dfd/rng.hpp"
#include "dfd/serialize.hpp"
#include "dfd/tensor.hpp"

using namespace dfd;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const char* tag) {
    const fs::path p = fs::temp_directory_path() / (std::string("dfd_core_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}
} // namespace

TEST_CASE("rng: fixed seed reproduces the sequence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng c(43);
    REQUIRE(Rng(42).next_u64() != c.next_u64());
}

TEST_CASE("rng: derive_seed gives distinct independent streams") {
    const auto s0 = derive_seed(7, 0), s1 = derive_seed(7, 1);
    REQUIRE(s0 != s1);
    REQUIRE(derive_seed(7, 0) == s0);
    REQUIRE(derive_seed(8, 0) != s0);
}

TEST_CASE("rng: uniform_int is inclusive and in range") {
    Rng r(1);
    bool saw_lo = false, saw_hi = false;
    for (int i = 0; i < 2000; ++i) {
        const int v = r.uniform_int(-2, 3);
        REQUIRE(v >= -2);
        REQUIRE(v <= 3);
        saw_lo |= v == -2;
        saw_hi |= v == 3;
    }
    REQUIRE(saw_lo);
    REQUIRE(saw_hi);
    REQUIRE_THROWS_AS(r.uniform_int(3, 2), parameter_error);
}

TEST_CASE("rng: grid draws land exactly on the inclusive grid") {
    Rng r(5);
    bool lo = false, hi = false;
    for (int i = 0; i < 4000; ++i) {
        const double v = r.grid(1.0, 5.0, 0.1);
        const double steps = (v - 1.0) / 0.1;
        REQUIRE(std::abs(steps - std::round(steps)) < 1e-9);
        REQUIRE(v >= 1.0 - 1e-12);
        REQUIRE(v <= 5.0 + 1e-12);
        lo |= std::abs(v - 1.0) < 1e-12;
        hi |= std::abs(v - 5.0) < 1e-12;
    }
    REQUIRE(lo);
    REQUIRE(hi);
}

TEST_CASE("rng: normal() is standard to Monte-Carlo accuracy") {
    Rng r(9);
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    REQUIRE(std::abs(mean) < 0.03);
    REQUIRE(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("tensor: shape bookkeeping and indexing") {
    Tensor t({2, 3, 4});
    REQUIRE(t.numel() == 24);
    t.at3(1, 2, 3) = 5.0f;
    REQUIRE(t[23] == 5.0f);
    const Tensor r = t.reshaped({4, 6});
    REQUIRE(r.dim(0) == 4);
    REQUIRE(r[23] == 5.0f);
    REQUIRE_THROWS_AS(t.reshaped({5, 5}), shape_error);
}

TEST_CASE("tensor: deterministic fills") {
    Rng a(3), b(3);
    Tensor x({8}), y({8});
    x.fill_normal(a, 2.0f, 1.0f);
    y.fill_normal(b, 2.0f, 1.0f);
    REQUIRE(x.data == y.data);
}

TEST_CASE("serialize: fnv1a64 known value and chaining") {
    REQUIRE(fnv1a64("abc", 3) == 0xe71fa2190541574bull);
    const std::uint64_t whole = fnv1a64("hello world", 11);
    const std::uint64_t chained = fnv1a64(" world", 6, fnv1a64("hello", 5));
    REQUIRE(whole == chained);
    REQUIRE(hex64(0xe71fa2190541574bull) == "e71fa2190541574b");
}

TEST_CASE("serialize: tensor file round trip is bitwise") {
    const fs::path dir = temp_dir("tensor");
    Tensor t({3, 5});
    Rng r(11);
    t.fill_normal(r);
    const fs::path p = dir / "t.bin";
    write_tensor_file(p, t, "DFDD");
    const Tensor back = read_tensor_file(p, "DFDD");
    REQUIRE(back.dims == t.dims);
    REQUIRE(back.data == t.data);
    REQUIRE_FALSE(fs::exists(p.string() + ".tmp"));
}

TEST_CASE("serialize: corrupted tensor files are rejected") {
    const fs::path dir = temp_dir("corrupt");
    Tensor t({4, 4});
    const fs::path p = dir / "t.bin";
    write_tensor_file(p, t, "DFDD");

    SECTION("wrong magic") {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXX", 4);
        f.close();
        REQUIRE_THROWS_AS(read_tensor_file(p, "DFDD"), corruption_error);
    }
    SECTION("truncated payload") {
        const auto size = fs::file_size(p);
        fs::resize_file(p, size - 8);
        REQUIRE_THROWS_AS(read_tensor_file(p, "DFDD"), corruption_error);
    }
}

TEST_CASE("serialize: blob archive round trip") {
    const fs::path dir = temp_dir("archive");
    BlobArchive a;
    a.text = "alpha=1\nbeta=two\n";
    Tensor t({2, 2});
    t[0] = 1;
    t[3] = -2;
    a.add("w", t);
    a.add_scalar("s", 3.5);
    const fs::path p = dir / "a.bin";
    write_archive(p, a);
    const BlobArchive back = read_archive(p);
    REQUIRE(back.text == a.text);
    REQUIRE(back.get("w").data == t.data);
    REQUIRE(back.scalar("s") == 3.5);
    REQUIRE(back.has("s"));
    REQUIRE_FALSE(back.has("missing"));
    REQUIRE_THROWS_AS(back.get("missing"), corruption_error);
}

TEST_CASE("serialize: key=value text round trip") {
    KvPairs kv;
    kv.emplace_back("resolution", "64");
    kv.emplace_back("name", "left_eye");
    const std::string text = kv_to_string(kv);
    const KvPairs back = kv_from_string(text);
    REQUIRE(back == kv);
    const fs::path dir = temp_dir("kv");
    write_kv_file(dir / "c.txt", kv);
    REQUIRE(read_kv_file(dir / "c.txt") == kv);
    REQUIRE(kv_map(kv).at("name") == "left_eye");
}

TEST_CASE("serialize: atomic_write replaces content without leftovers") {
    const fs::path dir = temp_dir("atomic");
    const fs::path p = dir / "f.txt";
    atomic_write(p, [](std::ostream& os) { os << "one"; });
    atomic_write(p, [](std::ostream& os) { os << "two"; });
    std::ifstream is(p);
    std::string content;
    is >> content;
    REQUIRE(content == "two");
    REQUIRE_FALSE(fs::exists(p.string() + ".tmp"));
}
