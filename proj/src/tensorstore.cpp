#include "mergeforge/tensorstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace mergeforge::tensorstore {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::uint64_t kMaxNumel = std::uint64_t(1) << 48;

std::uint64_t checked_numel(const std::vector<std::uint64_t>& shape) {
    std::uint64_t n = 1;
    for (std::uint64_t d : shape) {
        if (d == 0) return 0;
        if (n > kMaxNumel / d) throw MalformedHeader("tensor shape overflows element count");
        n *= d;
    }
    return n;
}

std::uint16_t load_u16(const std::uint8_t* p) {
    std::uint16_t v;
    std::memcpy(&v, p, 2);
    return v;
}

}  // namespace

std::uint64_t TensorRecord::numel() const { return checked_numel(shape); }

void Checkpoint::add(TensorRecord t) {
    std::string key = t.name;
    tensors.insert_or_assign(std::move(key), std::move(t));
}

Checkpoint read_checkpoint(std::istream& in) {
    std::uint8_t prefix[8];
    in.read(reinterpret_cast<char*>(prefix), 8);
    if (in.gcount() != 8) throw MalformedHeader("missing 8-byte header length prefix");
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | prefix[i];
    if (header_len == 0) throw MalformedHeader("zero-length header");

    // chunked read so an absurd length prefix on a short file fails as
    // truncation without a matching allocation
    std::string header_text;
    std::uint64_t remaining = header_len;
    char chunk[1 << 16];
    while (remaining > 0) {
        const std::streamsize want =
            std::streamsize(std::min<std::uint64_t>(remaining, sizeof chunk));
        in.read(chunk, want);
        const std::streamsize got = in.gcount();
        header_text.append(chunk, std::size_t(got));
        if (got < want) throw TruncatedData("header length prefix larger than file");
        remaining -= std::uint64_t(got);
    }

    const ordered_json header = ordered_json::parse(header_text, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw MalformedHeader("header is not a JSON object");

    Checkpoint ckpt;
    struct Segment {
        std::uint64_t begin, end;
        std::string name;
    };
    std::vector<Segment> segments;

    for (const auto& [key, value] : header.items()) {
        if (key == "__metadata__") {
            if (!value.is_object()) throw MalformedHeader("__metadata__ is not an object");
            for (const auto& [mk, mv] : value.items()) {
                if (!mv.is_string()) throw MalformedHeader("__metadata__ values must be strings");
                ckpt.metadata[mk] = mv.get<std::string>();
            }
            continue;
        }
        if (!value.is_object()) throw MalformedHeader("tensor entry is not an object: " + key);

        TensorRecord t;
        t.name = key;

        auto dt = value.find("dtype");
        if (dt == value.end() || !dt->is_string())
            throw MalformedHeader("missing dtype for tensor: " + key);
        auto parsed = dtype_from_name(dt->get<std::string>());
        if (!parsed) throw UnknownDType("unknown dtype \"" + dt->get<std::string>() +
                                        "\" for tensor: " + key);
        t.dtype = *parsed;

        auto sh = value.find("shape");
        if (sh == value.end() || !sh->is_array())
            throw MalformedHeader("missing shape for tensor: " + key);
        for (const auto& dim : *sh) {
            if (!dim.is_number_unsigned())
                throw MalformedHeader("shape entries must be non-negative integers: " + key);
            t.shape.push_back(dim.get<std::uint64_t>());
        }

        auto off = value.find("data_offsets");
        if (off == value.end() || !off->is_array() || off->size() != 2 ||
            !(*off)[0].is_number_unsigned() || !(*off)[1].is_number_unsigned())
            throw MalformedHeader("bad data_offsets for tensor: " + key);
        const std::uint64_t begin = (*off)[0].get<std::uint64_t>();
        const std::uint64_t end = (*off)[1].get<std::uint64_t>();
        if (end < begin) throw MalformedHeader("data_offsets end before begin: " + key);
        if (end - begin != t.numel() * dtype_width(t.dtype))
            throw MalformedHeader("data_offsets length does not match shape: " + key);

        segments.push_back({begin, end, key});
        ckpt.add(std::move(t));
    }

    std::sort(segments.begin(), segments.end(), [](const Segment& a, const Segment& b) {
        return a.begin < b.begin || (a.begin == b.begin && a.end < b.end);
    });
    std::uint64_t cursor = 0;
    for (const Segment& s : segments) {
        if (s.begin < cursor)
            throw OverlappingTensors("tensor data overlaps previous segment: " + s.name);
        if (s.begin > cursor)
            throw MalformedHeader("gap in data region before tensor: " + s.name);
        cursor = s.end;
    }

    std::string buffer((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buffer.size() < cursor) throw TruncatedData("data region shorter than header claims");
    if (buffer.size() > cursor) throw MalformedHeader("unexpected trailing bytes after data region");

    for (const Segment& s : segments) {
        auto& t = ckpt.tensors.at(s.name);
        t.data.assign(buffer.begin() + std::ptrdiff_t(s.begin),
                      buffer.begin() + std::ptrdiff_t(s.end));
    }
    return ckpt;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open for reading: " + path.string());
    return read_checkpoint(in);
}

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
    ordered_json header = ordered_json::object();
    if (!ckpt.metadata.empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : ckpt.metadata) meta[k] = v;
        header["__metadata__"] = std::move(meta);
    }

    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        if (t.name != name)
            throw std::invalid_argument("tensor keyed under a different name: " + name);
        const std::uint64_t size = t.numel() * dtype_width(t.dtype);
        if (t.data.size() != size)
            throw std::invalid_argument("tensor byte length does not match shape: " + name);
        ordered_json entry;
        entry["dtype"] = dtype_name(t.dtype);
        entry["shape"] = t.shape;
        entry["data_offsets"] = {offset, offset + size};
        header[name] = std::move(entry);
        offset += size;
    }

    const std::string text = header.dump();
    std::uint8_t prefix[8];
    for (int i = 0; i < 8; ++i) prefix[i] = std::uint8_t((text.size() >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(prefix), 8);
    out.write(text.data(), std::streamsize(text.size()));
    for (const auto& [name, t] : ckpt.tensors)
        out.write(reinterpret_cast<const char*>(t.data.data()), std::streamsize(t.data.size()));
    if (!out) throw IoFailure("write failed");
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoFailure("cannot open for writing: " + tmp.string());
        write_checkpoint(ckpt, out);
        out.flush();
        if (!out) throw IoFailure("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoFailure("rename failed: " + path.string() + ": " + ec.message());
}

std::vector<double> decode_f64(const TensorRecord& t) {
    const std::uint64_t n = t.numel();
    if (t.data.size() != n * dtype_width(t.dtype))
        throw MalformedHeader("tensor byte length does not match shape: " + t.name);
    std::vector<double> out(n);
    const std::uint8_t* p = t.data.data();
    switch (t.dtype) {
        case DType::F64:
            std::memcpy(out.data(), p, n * 8);
            break;
        case DType::F32:
            for (std::uint64_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, p + i * 4, 4);
                out[i] = double(f);
            }
            break;
        case DType::F16:
            for (std::uint64_t i = 0; i < n; ++i) out[i] = double(f16_to_f32(load_u16(p + i * 2)));
            break;
        case DType::BF16:
            for (std::uint64_t i = 0; i < n; ++i) out[i] = double(bf16_to_f32(load_u16(p + i * 2)));
            break;
    }
    return out;
}

TensorRecord tensor_from_values(std::string name, DType dtype,
                                std::vector<std::uint64_t> shape,
                                std::span<const double> values) {
    TensorRecord t;
    t.name = std::move(name);
    t.dtype = dtype;
    t.shape = std::move(shape);
    if (checked_numel(t.shape) != values.size())
        throw std::invalid_argument("value count does not match shape: " + t.name);
    t.data.resize(values.size() * dtype_width(dtype));
    std::uint8_t* p = t.data.data();
    switch (dtype) {
        case DType::F64:
            std::memcpy(p, values.data(), values.size() * 8);
            break;
        case DType::F32:
            for (std::size_t i = 0; i < values.size(); ++i) {
                const float f = std::isnan(values[i])
                                    ? std::bit_cast<float>(std::uint32_t(0x7FC00000u))
                                    : float(values[i]);
                std::memcpy(p + i * 4, &f, 4);
            }
            break;
        case DType::F16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                const std::uint16_t h =
                    std::isnan(values[i]) ? std::uint16_t(0x7E00u) : f32_to_f16(float(values[i]));
                std::memcpy(p + i * 2, &h, 2);
            }
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                const std::uint16_t b =
                    std::isnan(values[i]) ? std::uint16_t(0x7FC0u) : f32_to_bf16(float(values[i]));
                std::memcpy(p + i * 2, &b, 2);
            }
            break;
    }
    return t;
}

TensorRecord cast(const TensorRecord& t, DType target) {
    if (target == t.dtype) return t;
    const std::vector<double> values = decode_f64(t);
    return tensor_from_values(t.name, target, t.shape, values);
}

}  // namespace mergeforge::tensorstore
