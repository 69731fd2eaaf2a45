#include "lplm/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace lplm::core {

namespace {
constexpr char kMagic[4] = {'L', 'P', 'L', 'M'};
constexpr uint32_t kVersion = 1;

void put_u32_le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
uint32_t get_u32_le(const unsigned char* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}
uint64_t get_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

struct ManifestEntry {
    std::string name;
    std::vector<int> shape;
    uint64_t offset;
};

std::vector<ManifestEntry> read_manifest(std::ifstream& in, const std::string& path, uint64_t* payload_start) {
    unsigned char header[16];
    if (!in.read(reinterpret_cast<char*>(header), 16)) throw IoError("checkpoint too short: " + path);
    if (std::memcmp(header, kMagic, 4) != 0) throw IoError("bad checkpoint magic in " + path);
    const uint32_t version = get_u32_le(header + 4);
    if (version != kVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    }
    unsigned char lenbuf[8];
    if (!in.read(reinterpret_cast<char*>(lenbuf), 8)) throw IoError("truncated manifest length in " + path);
    const uint64_t mlen = get_u64_le(lenbuf);
    std::string mbytes(mlen, '\0');
    if (!in.read(mbytes.data(), static_cast<std::streamsize>(mlen))) throw IoError("truncated manifest in " + path);
    *payload_start = 16 + 8 + mlen;

    nlohmann::json j = nlohmann::json::parse(mbytes);
    std::vector<ManifestEntry> entries;
    for (const auto& e : j.at("params")) {
        ManifestEntry me;
        me.name = e.at("name").get<std::string>();
        me.shape = e.at("shape").get<std::vector<int>>();
        me.offset = e.at("offset").get<uint64_t>();
        entries.push_back(std::move(me));
    }
    return entries;
}
}  // namespace

void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, const Tensor*>>& items) {
    nlohmann::ordered_json manifest;
    manifest["params"] = nlohmann::ordered_json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : items) {
        t->check_finite("checkpoint parameter '" + name + "'");
        nlohmann::ordered_json e;
        e["name"] = name;
        e["shape"] = t->shape();
        e["offset"] = offset;
        manifest["params"].push_back(std::move(e));
        offset += static_cast<uint64_t>(t->size()) * sizeof(double);
    }
    const std::string mbytes = manifest.dump();

    std::string head;
    head.append(kMagic, 4);
    put_u32_le(head, kVersion);
    head.append(8, '\0');
    put_u64_le(head, mbytes.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
    for (const auto& [name, t] : items) {
        (void)name;
        out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
    if (!out) throw IoError("write failed for checkpoint: " + path);
}

void load_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor*>>& items) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    uint64_t payload_start = 0;
    const auto entries = read_manifest(in, path, &payload_start);

    for (const auto& [name, dst] : items) {
        const ManifestEntry* found = nullptr;
        for (const auto& e : entries) {
            if (e.name == name) {
                found = &e;
                break;
            }
        }
        if (!found) throw IoError("checkpoint " + path + " is missing parameter '" + name + "'");
        if (found->shape != dst->shape()) {
            throw IoError("checkpoint " + path + " parameter '" + name + "' has shape " +
                          shape_str(found->shape) + ", model expects " + shape_str(dst->shape()));
        }
        in.clear();
        in.seekg(static_cast<std::streamoff>(payload_start + found->offset));
        if (!in.read(reinterpret_cast<char*>(dst->data()), static_cast<std::streamsize>(dst->size() * sizeof(double)))) {
            throw IoError("truncated payload for '" + name + "' in " + path);
        }
    }
}

std::vector<std::string> checkpoint_names(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    uint64_t payload_start = 0;
    const auto entries = read_manifest(in, path, &payload_start);
    std::vector<std::string> names;
    names.reserve(entries.size());
    for (const auto& e : entries) names.push_back(e.name);
    return names;
}

}  // namespace lplm::core
