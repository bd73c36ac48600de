#include "vitkd/serialize.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace vitkd {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written as native little-endian f32");

namespace fs = std::filesystem;

uint64_t fnv1a64(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

uint64_t file_fnv1a64(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open file for hashing: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

const Tensor& Checkpoint::at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw ConfigError("checkpoint has no tensor named '" + name + "'");
    return *t;
}

static std::string blob_name_for(const fs::path& manifest) {
    fs::path p = manifest.filename();
    p.replace_extension(".bin");
    return p.string();
}

void save_checkpoint(const std::string& manifest_path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     const nlohmann::json& config) {
    const fs::path mpath(manifest_path);
    if (mpath.has_parent_path()) fs::create_directories(mpath.parent_path());
    const std::string blob_name = blob_name_for(mpath);
    const fs::path bpath = mpath.has_parent_path() ? mpath.parent_path() / blob_name : fs::path(blob_name);

    nlohmann::json entries = nlohmann::json::array();
    int64_t offset = 0;
    std::ofstream blob(bpath, std::ios::binary | std::ios::trunc);
    if (!blob) throw ConfigError("cannot write blob file: " + bpath.string());
    for (const auto& [name, t] : tensors) {
        if (!t.defined()) throw ContractError("save_checkpoint: undefined tensor '" + name + "'");
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["offset"] = offset;
        entries.push_back(std::move(e));
        const auto& v = t.data();
        blob.write(reinterpret_cast<const char*>(v.data()),
                   static_cast<std::streamsize>(v.size() * sizeof(float)));
        offset += static_cast<int64_t>(v.size() * sizeof(float));
    }
    blob.close();
    if (!blob) throw ConfigError("failed writing blob file: " + bpath.string());

    nlohmann::json manifest;
    manifest["format"] = "vitkd-checkpoint-v1";
    manifest["blob"] = blob_name;
    manifest["blob_bytes"] = offset;
    manifest["tensors"] = std::move(entries);
    manifest["config"] = config;

    std::ofstream out(mpath, std::ios::trunc);
    if (!out) throw ConfigError("cannot write manifest: " + manifest_path);
    out << manifest.dump(2) << "\n";
    out.close();
    if (!out) throw ConfigError("failed writing manifest: " + manifest_path);
}

Checkpoint load_checkpoint(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw ConfigError("cannot open checkpoint manifest: " + manifest_path);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed checkpoint manifest " + manifest_path + ": " + e.what());
    }
    if (manifest.value("format", "") != "vitkd-checkpoint-v1")
        throw ConfigError("unrecognized checkpoint format in " + manifest_path);

    const fs::path mpath(manifest_path);
    const fs::path bpath = mpath.has_parent_path()
                               ? mpath.parent_path() / manifest.at("blob").get<std::string>()
                               : fs::path(manifest.at("blob").get<std::string>());
    std::ifstream blob(bpath, std::ios::binary);
    if (!blob) throw ConfigError("cannot open checkpoint blob: " + bpath.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
    const auto expect = manifest.at("blob_bytes").get<int64_t>();
    if (static_cast<int64_t>(bytes.size()) != expect)
        throw ConfigError("checkpoint blob " + bpath.string() + " has " + std::to_string(bytes.size()) +
                          " bytes, manifest says " + std::to_string(expect));

    Checkpoint ck;
    ck.config = manifest.value("config", nlohmann::json::object());
    for (const auto& e : manifest.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        const Shape shape = e.at("shape").get<Shape>();
        const int64_t offset = e.at("offset").get<int64_t>();
        const int64_t count = shape_numel(shape);
        const int64_t nbytes = count * static_cast<int64_t>(sizeof(float));
        if (offset < 0 || offset + nbytes > static_cast<int64_t>(bytes.size()))
            throw ConfigError("tensor '" + name + "' extends past end of blob in " + manifest_path);
        std::vector<float> data(static_cast<size_t>(count));
        std::memcpy(data.data(), bytes.data() + offset, static_cast<size_t>(nbytes));
        ck.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
    }
    return ck;
}

uint64_t checkpoint_blob_hash(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw ConfigError("cannot open checkpoint manifest: " + manifest_path);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed checkpoint manifest " + manifest_path + ": " + e.what());
    }
    if (!manifest.contains("blob"))
        throw ConfigError("checkpoint manifest " + manifest_path + " has no blob entry");
    const fs::path mpath(manifest_path);
    const fs::path bpath = mpath.has_parent_path()
                               ? mpath.parent_path() / manifest.at("blob").get<std::string>()
                               : fs::path(manifest.at("blob").get<std::string>());
    return file_fnv1a64(bpath.string());
}

}  // namespace vitkd
