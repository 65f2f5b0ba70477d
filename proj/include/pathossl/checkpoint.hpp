#pragma once

// Binary checkpoint, little-endian:
//   "SSCK" u32 version=1
//   u32 tile_size, u32 block count, u32 widths[block count], u32 embed_dim
//   u32 tensor count, then per tensor: u32 rank, u32 dims[rank], f32 data
//   u8 has_adam; if set: u64 step, f64 lr, beta1, beta2, eps,
//       first moments then second moments, each encoded like the tensors
//   u8 has_trainer; if set: u32 batch_size, u64 seed

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "net.hpp"

namespace pathossl {

inline constexpr char kCheckpointMagic[4] = {'S', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainerMeta {
    std::uint32_t batch_size = 0;
    std::uint64_t seed = 0;

    bool operator==(const TrainerMeta&) const = default;
};

struct Checkpoint {
    NetParams<float> params;
    std::optional<AdamState> adam;
    std::optional<TrainerMeta> trainer;

    bool operator==(const Checkpoint&) const = default;
};

namespace detail {

class LeWriter {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class LeReader {
public:
    LeReader(std::vector<char> data, std::string name) : data_(std::move(data)), name_(std::move(name)) {}

    void bytes(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, data_.data() + pos_, n);
        pos_ += n;
    }
    template <typename U>
    U uint() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }
    float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
    bool at_end() const { return pos_ == data_.size(); }
    const std::string& name() const { return name_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) throw ParseError(name_ + ": truncated file");
    }

    std::vector<char> data_;
    std::string name_;
    std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

inline void write_tensor(LeWriter& w, const std::vector<std::uint32_t>& dims, const std::vector<float>& data) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) w.uint<std::uint32_t>(d);
    for (float v : data) w.f32(v);
}

inline Tensor<float> read_tensor(LeReader& r) {
    Tensor<float> t;
    const auto rank = r.uint<std::uint32_t>();
    if (rank > 8) throw ParseError(r.name() + ": implausible tensor rank");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        t.dims.push_back(r.uint<std::uint32_t>());
        n *= t.dims.back();
    }
    t.data.resize(n);
    for (auto& v : t.data) v = r.f32();
    return t;
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
    detail::LeWriter w;
    const auto& a = ck.params.arch;
    w.bytes(kCheckpointMagic, 4);
    w.uint<std::uint32_t>(kCheckpointVersion);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(a.tile_size));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(a.widths.size()));
    for (int width : a.widths) w.uint<std::uint32_t>(static_cast<std::uint32_t>(width));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(a.embed_dim));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(ck.params.tensors.size()));
    for (const auto& t : ck.params.tensors) detail::write_tensor(w, t.dims, t.data);

    w.uint<std::uint8_t>(ck.adam ? 1 : 0);
    if (ck.adam) {
        const auto& s = *ck.adam;
        w.uint<std::uint64_t>(s.step);
        w.f64(s.config.lr);
        w.f64(s.config.beta1);
        w.f64(s.config.beta2);
        w.f64(s.config.eps);
        for (std::size_t k = 0; k < ck.params.tensors.size(); ++k)
            detail::write_tensor(w, ck.params.tensors[k].dims, s.m.at(k));
        for (std::size_t k = 0; k < ck.params.tensors.size(); ++k)
            detail::write_tensor(w, ck.params.tensors[k].dims, s.v.at(k));
    }
    w.uint<std::uint8_t>(ck.trainer ? 1 : 0);
    if (ck.trainer) {
        w.uint<std::uint32_t>(ck.trainer->batch_size);
        w.uint<std::uint64_t>(ck.trainer->seed);
    }
    return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes, const std::string& name = "checkpoint") {
    detail::LeReader r(std::move(bytes), name);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw ParseError(name + ": not a checkpoint (bad magic)");
    if (const auto v = r.uint<std::uint32_t>(); v != kCheckpointVersion)
        throw ParseError(name + ": unsupported checkpoint version " + std::to_string(v));

    Architecture arch;
    arch.tile_size = static_cast<int>(r.uint<std::uint32_t>());
    if (r.uint<std::uint32_t>() != arch.widths.size()) throw ParseError(name + ": unsupported block count");
    for (auto& width : arch.widths) width = static_cast<int>(r.uint<std::uint32_t>());
    arch.embed_dim = static_cast<int>(r.uint<std::uint32_t>());

    Checkpoint ck;
    ck.params = NetParams<float>::zeros(arch);
    if (r.uint<std::uint32_t>() != ck.params.tensors.size()) throw ParseError(name + ": tensor count mismatch");
    for (auto& t : ck.params.tensors) {
        auto read = detail::read_tensor(r);
        if (read.dims != t.dims) throw ParseError(name + ": tensor shape does not match architecture");
        t = std::move(read);
    }
    if (r.uint<std::uint8_t>()) {
        AdamState s;
        s.step = r.uint<std::uint64_t>();
        s.config.lr = r.f64();
        s.config.beta1 = r.f64();
        s.config.beta2 = r.f64();
        s.config.eps = r.f64();
        for (std::size_t k = 0; k < ck.params.tensors.size(); ++k) s.m.push_back(detail::read_tensor(r).data);
        for (std::size_t k = 0; k < ck.params.tensors.size(); ++k) s.v.push_back(detail::read_tensor(r).data);
        for (std::size_t k = 0; k < ck.params.tensors.size(); ++k)
            if (s.m[k].size() != ck.params.tensors[k].data.size() || s.v[k].size() != ck.params.tensors[k].data.size())
                throw ParseError(name + ": optimizer state shape mismatch");
        ck.adam = std::move(s);
    }
    if (r.uint<std::uint8_t>()) {
        TrainerMeta m;
        m.batch_size = r.uint<std::uint32_t>();
        m.seed = r.uint<std::uint64_t>();
        ck.trainer = m;
    }
    if (!r.at_end()) throw ParseError(name + ": trailing bytes");
    return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path), path.string());
}

}  // namespace pathossl
