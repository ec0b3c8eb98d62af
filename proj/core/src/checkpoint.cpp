#include "mitl/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <vector>

namespace mitl {

namespace {

constexpr std::array<char, 8> kMagic = {'M', 'I', 'T', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kFormatVersion = 1;

uint32_t crc32(const uint8_t* data, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

struct Writer {
    std::vector<uint8_t> buf;
    void u8(uint8_t v) { buf.push_back(v); }
    void u16(uint16_t v) {
        for (int i = 0; i < 2; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
    void str(const std::string& s) {
        u16(static_cast<uint16_t>(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    }
};

struct Reader {
    const uint8_t* p;
    const uint8_t* end;
    const std::string& path;

    void need(size_t n) const {
        if (static_cast<size_t>(end - p) < n)
            throw Error(ErrorCode::CorruptFile, path + ": truncated checkpoint");
    }
    uint8_t u8() {
        need(1);
        return *p++;
    }
    uint16_t u16() {
        need(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(*p++) << (8 * i);
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(*p++) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(*p++) << (8 * i);
        return v;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str() {
        const uint16_t n = u16();
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
};

void write_tensor(Writer& w, const std::string& name, const Tensor& t) {
    w.str(name);
    w.i32(t.n);
    w.i32(t.c);
    w.i32(t.h);
    w.i32(t.w);
    for (size_t i = 0; i < t.size(); ++i) w.f32(t[i]);
}

} // namespace

void save_checkpoint(const MultiTaskNet& net, const std::string& path) {
    Writer w;
    const ModelConfig& cfg = net.config();
    w.u32(kFormatVersion);
    w.i32(cfg.input_size);
    w.i32(cfg.stem_channels);
    for (int c : cfg.stage_channels) w.i32(c);
    w.i32(cfg.blocks_per_stage);
    for (int c : cfg.cls_hidden) w.i32(c);
    w.u64(cfg.seed);
    w.u8(net.pruned() ? 1 : 0);

    uint32_t entries = 0;
    net.visit_params([&](const std::string&, const Tensor&) { ++entries; });
    net.visit_buffers([&](const std::string&, const Tensor&) { ++entries; });
    w.u32(entries);
    net.visit_params([&](const std::string& name, const Tensor& t) { write_tensor(w, name, t); });
    net.visit_buffers([&](const std::string& name, const Tensor& t) { write_tensor(w, name, t); });

    const uint32_t checksum = crc32(w.buf.data(), w.buf.size());
    w.u32(checksum);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open for writing: " + path);
    out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
    out.write(reinterpret_cast<const char*>(w.buf.data()),
              static_cast<std::streamsize>(w.buf.size()));
    out.flush();
    if (!out) throw Error(ErrorCode::IoError, "write failed: " + path);
}

MultiTaskNet load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, "cannot open checkpoint: " + path);
    std::vector<uint8_t> raw((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
    if (in.bad()) throw Error(ErrorCode::IoError, "read failed: " + path);

    if (raw.size() < kMagic.size() + 4 ||
        !std::equal(kMagic.begin(), kMagic.end(), reinterpret_cast<const char*>(raw.data())))
        throw Error(ErrorCode::CorruptFile, path + ": bad magic bytes");

    const size_t payload_len = raw.size() - kMagic.size() - 4;
    const uint8_t* payload = raw.data() + kMagic.size();
    uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
        stored |= static_cast<uint32_t>(raw[raw.size() - 4 + static_cast<size_t>(i)]) << (8 * i);
    if (crc32(payload, payload_len) != stored)
        throw Error(ErrorCode::CorruptFile, path + ": checksum mismatch");

    Reader r{payload, payload + payload_len, path};
    const uint32_t version = r.u32();
    if (version != kFormatVersion)
        throw Error(ErrorCode::VersionMismatch,
                    path + ": format version " + std::to_string(version) + ", expected " +
                        std::to_string(kFormatVersion));

    ModelConfig cfg;
    cfg.input_size = r.i32();
    cfg.stem_channels = r.i32();
    for (int& c : cfg.stage_channels) c = r.i32();
    cfg.blocks_per_stage = r.i32();
    for (int& c : cfg.cls_hidden) c = r.i32();
    cfg.seed = r.u64();
    const bool pruned = r.u8() != 0;

    MultiTaskNet net = MultiTaskNet::build(cfg);
    if (pruned) net.prune();

    const uint32_t entries = r.u32();
    std::map<std::string, Tensor> table;
    for (uint32_t e = 0; e < entries; ++e) {
        const std::string name = r.str();
        const int n = r.i32(), c = r.i32(), h = r.i32(), wd = r.i32();
        if (n < 0 || c < 0 || h < 0 || wd < 0)
            throw Error(ErrorCode::CorruptFile, path + ": negative dimension in " + name);
        Tensor t(n, c, h, wd);
        for (size_t i = 0; i < t.size(); ++i) t[i] = r.f32();
        if (!table.emplace(name, std::move(t)).second)
            throw Error(ErrorCode::CorruptFile, path + ": duplicate tensor " + name);
    }
    if (r.p != r.end) throw Error(ErrorCode::CorruptFile, path + ": trailing bytes");

    size_t used = 0;
    auto assign = [&](const std::string& name, Tensor& dst) {
        auto it = table.find(name);
        if (it == table.end())
            throw Error(ErrorCode::CorruptFile, path + ": missing tensor " + name);
        const Tensor& src = it->second;
        if (src.n != dst.n || src.c != dst.c || src.h != dst.h || src.w != dst.w)
            throw Error(ErrorCode::CorruptFile, path + ": shape mismatch for " + name + ": file " +
                                                    src.shape_str() + ", model " + dst.shape_str());
        dst = src;
        ++used;
    };
    net.visit_params(assign);
    net.visit_buffers(assign);
    if (used != table.size())
        throw Error(ErrorCode::CorruptFile, path + ": unexpected extra tensors");
    return net;
}

MultiTaskNet load_checkpoint(const std::string& path, const ModelConfig& expected) {
    MultiTaskNet net = load_checkpoint(path);
    if (!(net.config() == expected))
        throw Error(ErrorCode::VersionMismatch,
                    path + ": checkpoint config [" + net.config().to_string() +
                        "] differs from requested [" + expected.to_string() + "]");
    return net;
}

} // namespace mitl
