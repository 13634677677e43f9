#include "sabone/bundle.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "sabone/error.hpp"

namespace sabone {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

int64_t TensorBlob::numel() const {
    int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string serialize_bundle(const ModelBundle& b) {
    json tensors = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : b.tensors) {
        if (t.numel() != static_cast<int64_t>(t.values.size()))
            throw shape_error("tensor '" + name + "' values do not match its shape");
        tensors[name] = {{"shape", t.shape}, {"dtype", "f32le"}, {"offset", offset}};
        offset += t.values.size() * sizeof(float);
    }
    const json manifest{{"tensors", tensors},
                        {"cfg", b.cfg},
                        {"stage", b.stage},
                        {"seed", b.seed},
                        {"provenance", b.provenance}};
    const std::string header = manifest.dump();
    std::string out(8, '\0');
    const uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) out[static_cast<size_t>(i)] = static_cast<char>((n >> (8 * i)) & 0xff);
    out.reserve(8 + header.size() + offset);
    out += header;
    for (const auto& [name, t] : b.tensors)
        out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
    return out;
}

ModelBundle deserialize_bundle(std::string_view bytes) {
    if (bytes.size() < 8) throw format_error("checkpoint shorter than its header length");
    uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<uint64_t>(static_cast<uint8_t>(bytes[static_cast<size_t>(i)])) << (8 * i);
    if (n > bytes.size() - 8) throw format_error("checkpoint header length exceeds file size");
    json manifest;
    try {
        manifest = json::parse(bytes.substr(8, n));
    } catch (const json::exception& e) {
        throw format_error(std::string("checkpoint manifest: ") + e.what());
    }
    const auto payload = bytes.substr(8 + n);
    ModelBundle b;
    try {
        b.cfg = manifest.value("cfg", json::object());
        b.stage = manifest.value("stage", "");
        b.seed = manifest.value("seed", uint64_t{0});
        b.provenance = manifest.value("provenance", json::object());
        for (const auto& [name, meta] : manifest.at("tensors").items()) {
            if (meta.value("dtype", "") != "f32le") throw format_error("tensor '" + name + "' is not f32le");
            TensorBlob t;
            t.shape = meta.at("shape").get<std::vector<int64_t>>();
            const auto offset = meta.at("offset").get<uint64_t>();
            const auto count = static_cast<uint64_t>(t.numel());
            if (offset + count * sizeof(float) > payload.size())
                throw format_error("tensor '" + name + "' payload out of bounds");
            t.values.resize(count);
            std::memcpy(t.values.data(), payload.data() + offset, count * sizeof(float));
            b.tensors.emplace(name, std::move(t));
        }
    } catch (const json::exception& e) {
        throw format_error(std::string("checkpoint manifest: ") + e.what());
    }
    return b;
}

void save_bundle(const ModelBundle& b, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto bytes = serialize_bundle(b);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace {
std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}
}  // namespace

ModelBundle load_bundle(const fs::path& path) { return deserialize_bundle(slurp(path)); }

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

std::string file_sha256(const fs::path& path) { return sha256_hex(slurp(path)); }

}  // namespace sabone
