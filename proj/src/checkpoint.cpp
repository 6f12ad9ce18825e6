#include "emofuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian float64");

namespace emofuse::diff {

using nlohmann::json;

void save_parameters(const std::string& stem, const std::vector<Parameter*>& params,
                     const json& config) {
    std::ofstream bin(stem + ".bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot write " + stem + ".bin");

    json entries = json::array();
    std::uint64_t offset = 0;
    for (const Parameter* p : params) {
        const auto& v = p->tensor.data();
        bin.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(Scalar)));
        entries.push_back({{"name", p->name},
                           {"shape", p->tensor.shape()},
                           {"offset", offset}});
        offset += v.size() * sizeof(Scalar);
    }
    if (!bin) throw std::runtime_error("write failed on " + stem + ".bin");
    bin.close();

    json manifest = {{"format", "emofuse-params-v1"},
                     {"dtype", "float64-le"},
                     {"total_bytes", offset},
                     {"params", entries},
                     {"config", config}};
    std::ofstream mf(stem + ".json", std::ios::trunc);
    if (!mf) throw std::runtime_error("cannot write " + stem + ".json");
    mf << manifest.dump(2) << '\n';
}

namespace {

json read_manifest(const std::string& stem) {
    std::ifstream mf(stem + ".json");
    if (!mf) throw std::runtime_error("cannot open " + stem + ".json");
    json manifest = json::parse(mf);
    if (manifest.value("format", "") != "emofuse-params-v1")
        throw std::runtime_error(stem + ".json: unknown manifest format");
    return manifest;
}

}  // namespace

json load_manifest_config(const std::string& stem) {
    return read_manifest(stem).value("config", json::object());
}

void load_parameters(const std::string& stem, const std::vector<Parameter*>& params) {
    json manifest = read_manifest(stem);

    struct Entry {
        Shape shape;
        std::uint64_t offset;
    };
    std::map<std::string, Entry> index;
    for (const auto& e : manifest.at("params")) {
        index[e.at("name").get<std::string>()] =
            Entry{e.at("shape").get<Shape>(), e.at("offset").get<std::uint64_t>()};
    }
    if (index.size() != params.size())
        throw std::runtime_error("manifest lists " + std::to_string(index.size()) +
                                 " parameters, model has " + std::to_string(params.size()));

    std::ifstream bin(stem + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + stem + ".bin");

    for (Parameter* p : params) {
        auto it = index.find(p->name);
        if (it == index.end())
            throw std::runtime_error("parameter '" + p->name + "' missing from manifest");
        if (it->second.shape != p->tensor.shape())
            throw std::runtime_error("parameter '" + p->name + "' shape mismatch: manifest " +
                                     shape_str(it->second.shape) + " vs model " +
                                     shape_str(p->tensor.shape()));
        auto& v = p->tensor.mutable_data();
        bin.seekg(static_cast<std::streamoff>(it->second.offset));
        bin.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(Scalar)));
        if (!bin) throw std::runtime_error("short read for parameter '" + p->name + "'");
    }
}

}  // namespace emofuse::diff
