#include "fold2seq/params.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "fold2seq/common.hpp"

namespace fold2seq::tc {

using nlohmann::json;

ParamTensor& ParamStore::add(const std::string& name, Tensor init, bool trainable) {
    if (index_.count(name)) throw DataError("duplicate parameter name: " + name);
    auto p = std::make_unique<ParamTensor>();
    p->name = name;
    p->grad = Tensor(init.shape);
    p->value = std::move(init);
    p->trainable = trainable;
    list_.push_back(std::move(p));
    index_[name] = list_.size() - 1;
    return *list_.back();
}

ParamTensor& ParamStore::at(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown parameter: " + name);
    return *list_[it->second];
}

const ParamTensor& ParamStore::at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown parameter: " + name);
    return *list_[it->second];
}

std::vector<ParamTensor*> ParamStore::all() {
    std::vector<ParamTensor*> out;
    out.reserve(list_.size());
    for (auto& p : list_) out.push_back(p.get());
    return out;
}

std::vector<const ParamTensor*> ParamStore::all() const {
    std::vector<const ParamTensor*> out;
    out.reserve(list_.size());
    for (const auto& p : list_) out.push_back(p.get());
    return out;
}

void ParamStore::zero_grads() {
    for (auto& p : list_) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
}

size_t ParamStore::parameter_count() const {
    size_t n = 0;
    for (const auto& p : list_)
        if (p->trainable) n += p->value.size();
    return n;
}

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::map<std::string, std::string>& meta) {
    json index;
    index["meta"] = meta;
    json tensors = json::object();
    uint64_t offset = 0;
    const auto params = store.all();
    for (const auto* p : params) {
        tensors[p->name] = json{{"shape", p->value.shape},
                                {"dtype", "f64"},
                                {"offset", offset},
                                {"trainable", p->trainable}};
        offset += p->value.size() * sizeof(double);
    }
    index["tensors"] = tensors;
    const std::string index_str = index.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint file for writing: " + path);
    char header[16] = {};
    std::memcpy(header, "F2SCKPT\0", 8);
    const uint32_t version = kCheckpointFormatVersion;
    const uint32_t json_len = static_cast<uint32_t>(index_str.size());
    std::memcpy(header + 8, &version, 4);
    std::memcpy(header + 12, &json_len, 4);
    out.write(header, 16);
    out.write(index_str.data(), static_cast<std::streamsize>(index_str.size()));
    for (const auto* p : params)
        out.write(reinterpret_cast<const char*>(p->value.v.data()),
                  static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    if (!out) throw DataError("failed writing checkpoint: " + path);
}

namespace {

json read_index(std::ifstream& in, const std::string& path) {
    char header[16];
    in.read(header, 16);
    if (!in || std::memcmp(header, "F2SCKPT\0", 8) != 0)
        throw DataError("bad checkpoint magic in " + path);
    uint32_t version = 0, json_len = 0;
    std::memcpy(&version, header + 8, 4);
    std::memcpy(&json_len, header + 12, 4);
    if (version != kCheckpointFormatVersion)
        throw DataError("unsupported checkpoint version in " + path);
    std::string index_str(json_len, '\0');
    in.read(index_str.data(), json_len);
    if (!in) throw DataError("truncated checkpoint index in " + path);
    try {
        return json::parse(index_str);
    } catch (const json::exception& e) {
        throw DataError("malformed checkpoint index in " + path + ": " + e.what());
    }
}

}  // namespace

std::map<std::string, std::string> load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint file: " + path);
    const json index = read_index(in, path);
    const std::streampos payload_start = in.tellg();

    const auto& tensors = index.at("tensors");
    auto params = store.all();
    if (tensors.size() != params.size())
        throw DataError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model has " +
                        std::to_string(params.size()));
    for (auto* p : params) {
        if (!tensors.contains(p->name)) throw DataError("checkpoint missing tensor: " + p->name);
        const auto& entry = tensors.at(p->name);
        const auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != p->value.shape)
            throw DataError("checkpoint shape mismatch for " + p->name);
        if (entry.at("dtype").get<std::string>() != "f64")
            throw DataError("unsupported dtype for " + p->name);
        const uint64_t offset = entry.at("offset").get<uint64_t>();
        in.seekg(payload_start + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(p->value.v.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (!in) throw DataError("truncated checkpoint payload for " + p->name);
    }
    std::map<std::string, std::string> meta;
    if (index.contains("meta")) meta = index.at("meta").get<std::map<std::string, std::string>>();
    return meta;
}

std::map<std::string, std::string> read_checkpoint_meta(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint file: " + path);
    const json index = read_index(in, path);
    std::map<std::string, std::string> meta;
    if (index.contains("meta")) meta = index.at("meta").get<std::map<std::string, std::string>>();
    return meta;
}

}  // namespace fold2seq::tc
