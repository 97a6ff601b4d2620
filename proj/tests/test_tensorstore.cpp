#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>
#include <thread>

#include "mergeforge/tensorstore.hpp"
#include "test_support.hpp"

using namespace mergeforge;
using namespace mergeforge::tensorstore;

namespace {

std::string to_bytes(const Checkpoint& c) {
    std::ostringstream out(std::ios::binary);
    write_checkpoint(c, out);
    return out.str();
}

Checkpoint from_bytes(const std::string& bytes) {
    std::istringstream in(bytes, std::ios::binary);
    return read_checkpoint(in);
}

std::string file_with_header(const std::string& header, const std::string& data) {
    std::string out;
    for (int i = 0; i < 8; ++i) out += char((header.size() >> (8 * i)) & 0xFF);
    return out + header + data;
}

Checkpoint random_checkpoint(std::mt19937_64& rng) {
    Checkpoint c;
    const int n_tensors = 1 + int(testsupport::uniform_index(rng, 8));
    for (int i = 0; i < n_tensors; ++i) {
        TensorRecord t;
        t.name = "tensor_" + std::to_string(i) + "_" + std::to_string(rng() % 1000);
        t.dtype = DType(rng() % 4);
        const int rank = int(testsupport::uniform_index(rng, 4));  // 0..3, [] is a scalar
        for (int d = 0; d < rank; ++d) t.shape.push_back(rng() % 5);  // dims may be 0
        t.data.resize(t.numel() * dtype_width(t.dtype));
        for (auto& b : t.data) b = std::uint8_t(rng());
        if (!c.has(t.name)) c.add(std::move(t));
    }
    if (rng() % 2) c.metadata["origin"] = "unit-test-" + std::to_string(rng() % 100);
    return c;
}

}  // namespace

TEST_CASE("hand-assembled minimal file decodes to the expected tensor") {
    std::string data(8, '\0');
    const float v1 = 1.0f, v2 = 2.0f;
    std::memcpy(data.data(), &v1, 4);
    std::memcpy(data.data() + 4, &v2, 4);
    const std::string file = file_with_header(
        R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})", data);

    const Checkpoint c = from_bytes(file);
    REQUIRE(c.tensors.size() == 1);
    const TensorRecord& t = c.tensors.at("a");
    CHECK(t.dtype == DType::F32);
    CHECK(t.shape == std::vector<std::uint64_t>{2});
    const auto values = decode_f64(t);
    CHECK(values == std::vector<double>{1.0, 2.0});
}

TEST_CASE("empty checkpoint writes only the prefix and an empty header") {
    const std::string bytes = to_bytes(Checkpoint{});
    CHECK(bytes.size() == 8 + 2);
    CHECK(bytes.substr(8) == "{}");
    CHECK(from_bytes(bytes) == Checkpoint{});
}

TEST_CASE("metadata round-trips") {
    Checkpoint c;
    c.metadata["recipe_sha"] = "abc";
    const Checkpoint back = from_bytes(to_bytes(c));
    CHECK(back.metadata.at("recipe_sha") == "abc");
}

TEST_CASE("round-trip is bit-exact over randomized checkpoints") {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 200; ++trial) {
        const Checkpoint c = random_checkpoint(rng);
        const std::string first = to_bytes(c);
        const Checkpoint back = from_bytes(first);
        CHECK(back == c);
        CHECK(to_bytes(back) == first);  // write is a pure function of the value
    }
}

TEST_CASE("file round-trip through disk") {
    std::mt19937_64 rng(7);
    const Checkpoint c = random_checkpoint(rng);
    const auto path = std::filesystem::temp_directory_path() / "mergeforge_test_rt.safetensors";
    write_checkpoint(c, path);
    CHECK(read_checkpoint(path) == c);
    std::filesystem::remove(path);
}

TEST_CASE("malformed files raise the specific errors") {
    SUBCASE("short length prefix") {
        std::istringstream in(std::string("\x01\x02", 2), std::ios::binary);
        CHECK_THROWS_AS(read_checkpoint(in), MalformedHeader);
    }
    SUBCASE("length prefix larger than file") {
        std::string file = file_with_header("{}", "");
        file[0] = 0x7F;  // claim a far bigger header
        CHECK_THROWS_AS(from_bytes(file), TruncatedData);
    }
    SUBCASE("unparseable header") {
        CHECK_THROWS_AS(from_bytes(file_with_header("{nope", "")), MalformedHeader);
    }
    SUBCASE("unknown dtype") {
        CHECK_THROWS_AS(from_bytes(file_with_header(
                            R"({"a":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}})", "x")),
                        UnknownDType);
    }
    SUBCASE("overlapping tensors") {
        const std::string header =
            R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},)"
            R"("b":{"dtype":"F32","shape":[1],"data_offsets":[2,6]}})";
        CHECK_THROWS_AS(from_bytes(file_with_header(header, std::string(6, '\0'))),
                        OverlappingTensors);
    }
    SUBCASE("gap in the data region") {
        const std::string header =
            R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},)"
            R"("b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}})";
        CHECK_THROWS_AS(from_bytes(file_with_header(header, std::string(12, '\0'))),
                        MalformedHeader);
    }
    SUBCASE("data region shorter than the offsets") {
        CHECK_THROWS_AS(from_bytes(file_with_header(
                            R"({"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})",
                            std::string(8, '\0'))),
                        TruncatedData);
    }
    SUBCASE("byte length inconsistent with the shape") {
        CHECK_THROWS_AS(from_bytes(file_with_header(
                            R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})",
                            std::string(8, '\0'))),
                        MalformedHeader);
    }
}

TEST_CASE("decode_f64 widens exactly") {
    std::uint16_t one_bf16 = 0x3F80;
    TensorRecord t;
    t.name = "x";
    t.dtype = DType::BF16;
    t.shape = {1};
    t.data.resize(2);
    std::memcpy(t.data.data(), &one_bf16, 2);
    CHECK(decode_f64(t) == std::vector<double>{1.0});

    std::uint16_t one_f16 = 0x3C00;
    t.dtype = DType::F16;
    std::memcpy(t.data.data(), &one_f16, 2);
    CHECK(decode_f64(t) == std::vector<double>{1.0});

    const double neg_zero[] = {-0.0};
    const TensorRecord z = tensor_from_values("z", DType::F32, {1}, neg_zero);
    const auto decoded = decode_f64(z);
    CHECK(decoded[0] == 0.0);
    CHECK(std::signbit(decoded[0]));
}

TEST_CASE("decode_f64 length follows the shape, including scalars and zeros") {
    const double scalar[] = {4.25};
    CHECK(decode_f64(tensor_from_values("s", DType::F64, {}, scalar)).size() == 1);
    CHECK(decode_f64(tensor_from_values("e", DType::F32, {0, 3}, {})).empty());
}

TEST_CASE("cast applies round-to-nearest-even and preserves representable values") {
    const double one[] = {1.0};
    const TensorRecord f32_one = tensor_from_values("x", DType::F32, {1}, one);
    const TensorRecord bf = cast(f32_one, DType::BF16);
    std::uint16_t bits;
    std::memcpy(&bits, bf.data.data(), 2);
    CHECK(bits == 0x3F80);

    const double three[] = {3.0};
    CHECK(decode_f64(cast(tensor_from_values("t", DType::F32, {1}, three), DType::BF16)) ==
          std::vector<double>{3.0});
}

TEST_CASE("cast to the same dtype is byte-identical") {
    std::mt19937_64 rng(11);
    TensorRecord t;
    t.name = "raw";
    t.dtype = DType::F16;
    t.shape = {64};
    t.data.resize(128);
    for (auto& b : t.data) b = std::uint8_t(rng());  // includes NaN patterns
    CHECK(cast(t, DType::F16) == t);
}

TEST_CASE("NaNs canonicalize on conversion") {
    const double nan[] = {std::nan("")};
    const TensorRecord t = tensor_from_values("n", DType::BF16, {1}, nan);
    std::uint16_t bits;
    std::memcpy(&bits, t.data.data(), 2);
    CHECK(bits == 0x7FC0);
}

TEST_CASE("distinct tensors decode safely from concurrent threads") {
    std::mt19937_64 rng(101);
    Checkpoint c = testsupport::toy_checkpoint(5, 1);
    std::vector<std::vector<double>> expected;
    std::vector<std::string> names;
    for (const auto& [name, t] : c.tensors) {
        names.push_back(name);
        expected.push_back(decode_f64(t));
    }
    std::vector<std::vector<double>> got(names.size());
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < names.size(); ++i)
        threads.emplace_back([&, i] { got[i] = decode_f64(c.tensors.at(names[i])); });
    for (auto& t : threads) t.join();
    CHECK(got == expected);
}
