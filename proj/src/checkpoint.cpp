#include "bninvert/checkpoint.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace bninvert {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr char kMagic[4] = {'B', 'N', 'C', 'K'};

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_buffer(std::vector<std::uint8_t>& out, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_f32(out, v);
}

void put_layers(std::vector<std::uint8_t>& out, const std::vector<Layer>& layers) {
    put_u32(out, static_cast<std::uint32_t>(layers.size()));
    for (const auto& l : layers) {
        put_u8(out, static_cast<std::uint8_t>(l.kind));
        switch (l.kind) {
            case LayerKind::Conv:
                put_u32(out, static_cast<std::uint32_t>(l.stride));
                put_u32(out, static_cast<std::uint32_t>(l.padding));
                put_buffer(out, l.weight);
                put_buffer(out, l.bias);
                break;
            case LayerKind::Linear:
                put_buffer(out, l.weight);
                put_buffer(out, l.bias);
                break;
            case LayerKind::BatchNorm:
                put_f32(out, l.momentum);
                put_f32(out, l.eps);
                put_buffer(out, l.gamma);
                put_buffer(out, l.beta);
                put_buffer(out, l.running_mean);
                put_buffer(out, l.running_var);
                break;
            case LayerKind::MaxPool:
                put_u32(out, static_cast<std::uint32_t>(l.pool_size));
                break;
            case LayerKind::ReLU:
            case LayerKind::GlobalAvgPool:
                break;
            case LayerKind::Residual:
                put_layers(out, l.sub);
                break;
        }
    }
}

struct Reader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;

    [[noreturn]] void fail(const std::string& what) const {
        throw std::runtime_error("checkpoint: " + what + " at byte offset " +
                                 std::to_string(pos));
    }

    void need(std::size_t n) const {
        if (pos + n > bytes.size()) {
            throw std::runtime_error("checkpoint: truncated file, needed " + std::to_string(n) +
                                     " bytes at byte offset " + std::to_string(pos));
        }
    }

    std::uint8_t u8() {
        need(1);
        return bytes[pos++];
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                          (static_cast<std::uint32_t>(bytes[pos + 1]) << 8) |
                          (static_cast<std::uint32_t>(bytes[pos + 2]) << 16) |
                          (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
        pos += 4;
        return v;
    }

    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    Tensor buffer() {
        std::uint32_t rank = u32();
        if (rank == 0 || rank > 8) fail("bad buffer rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = u32();
        const std::size_t n = numel(shape);
        need(n * 4);
        std::vector<float> data(n);
        for (auto& v : data) v = f32();
        return Tensor::from_data(std::move(shape), std::move(data));
    }

    std::vector<Layer> layers(int depth) {
        if (depth > 4) fail("residual nesting too deep");
        std::uint32_t count = u32();
        if (count > 10000) fail("implausible layer count " + std::to_string(count));
        std::vector<Layer> out;
        out.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::size_t tag_pos = pos;
            std::uint8_t kind = u8();
            Layer l;
            switch (static_cast<LayerKind>(kind)) {
                case LayerKind::Conv:
                    l.kind = LayerKind::Conv;
                    l.stride = u32();
                    l.padding = u32();
                    l.weight = buffer();
                    l.bias = buffer();
                    break;
                case LayerKind::Linear:
                    l.kind = LayerKind::Linear;
                    l.weight = buffer();
                    l.bias = buffer();
                    break;
                case LayerKind::BatchNorm:
                    l.kind = LayerKind::BatchNorm;
                    l.momentum = f32();
                    l.eps = f32();
                    l.gamma = buffer();
                    l.beta = buffer();
                    l.running_mean = buffer();
                    l.running_var = buffer();
                    break;
                case LayerKind::ReLU:
                    l.kind = LayerKind::ReLU;
                    break;
                case LayerKind::MaxPool:
                    l.kind = LayerKind::MaxPool;
                    l.pool_size = u32();
                    break;
                case LayerKind::GlobalAvgPool:
                    l.kind = LayerKind::GlobalAvgPool;
                    break;
                case LayerKind::Residual:
                    l.kind = LayerKind::Residual;
                    l.sub = layers(depth + 1);
                    break;
                default:
                    throw std::runtime_error("checkpoint: unknown layer tag " +
                                             std::to_string(kind) + " at byte offset " +
                                             std::to_string(tag_pos));
            }
            out.push_back(std::move(l));
        }
        return out;
    }
};

}  // namespace

std::uint32_t crc32_of(const void* data, std::size_t len) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

std::vector<std::uint8_t> serialize_model(const Model& model) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    const std::size_t payload_start = out.size();
    put_u32(out, static_cast<std::uint32_t>(model.input_dims[0]));
    put_u32(out, static_cast<std::uint32_t>(model.input_dims[1]));
    put_u32(out, static_cast<std::uint32_t>(model.input_dims[2]));
    put_u32(out, static_cast<std::uint32_t>(model.class_count));
    put_layers(out, model.layers);
    const std::uint32_t crc = crc32_of(out.data() + payload_start, out.size() - payload_start);
    put_u32(out, crc);
    return out;
}

Model deserialize_model(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes};
    r.need(8);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic at byte offset 0");
    r.pos = 4;
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                                 " at byte offset 4");
    if (bytes.size() < 12) r.fail("truncated file");
    const std::size_t payload_start = 8;
    const std::size_t payload_end = bytes.size() - 4;
    const std::uint32_t stored_crc = static_cast<std::uint32_t>(bytes[payload_end]) |
                                     (static_cast<std::uint32_t>(bytes[payload_end + 1]) << 8) |
                                     (static_cast<std::uint32_t>(bytes[payload_end + 2]) << 16) |
                                     (static_cast<std::uint32_t>(bytes[payload_end + 3]) << 24);
    const std::uint32_t actual_crc =
        crc32_of(bytes.data() + payload_start, payload_end - payload_start);
    if (stored_crc != actual_crc)
        throw std::runtime_error("checkpoint: CRC32 mismatch at byte offset " +
                                 std::to_string(payload_end));
    Model m;
    m.input_dims[0] = r.u32();
    m.input_dims[1] = r.u32();
    m.input_dims[2] = r.u32();
    m.class_count = r.u32();
    m.layers = r.layers(0);
    if (r.pos != payload_end) r.fail("trailing bytes after layer list");
    return m;
}

void save_checkpoint(const Model& model, const std::string& path) {
    const auto bytes = serialize_model(model);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return deserialize_model(bytes);
}

std::string sha256_hex(const void* data, std::size_t len) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int digest_len = 0;
    if (EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256: digest computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(digest_len * 2);
    for (unsigned int i = 0; i < digest_len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string model_sha256(const Model& model) {
    const auto bytes = serialize_model(model);
    return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace bninvert
