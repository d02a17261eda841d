#include "uniedit/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace uniedit {

namespace {

constexpr char kMagic[5] = {'U', 'N', 'I', 'E', '1'};

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// write to <path>.tmp then rename so readers never see partial files
void atomic_write(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp + " -> " + path + " failed: " + ec.message());
}

}  // namespace

void write_tensor_container(const std::string& path, const std::vector<NamedTensor>& entries) {
    std::set<std::string> seen;
    nlohmann::json header;
    header["entries"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& e : entries) {
        if (e.name.empty()) throw IoError("container entry with empty name");
        if (!seen.insert(e.name).second) throw IoError("duplicate container entry: " + e.name);
        nlohmann::json j;
        j["name"] = e.name;
        j["shape"] = e.tensor.shape();
        j["dtype"] = "f32";
        j["offset"] = offset;
        j["checksum"] = hex64(checksum(e.tensor));
        header["entries"].push_back(std::move(j));
        offset += static_cast<uint64_t>(e.tensor.numel()) * sizeof(float);
    }
    const std::string header_str = header.dump();

    std::string bytes;
    bytes.reserve(sizeof(kMagic) + 8 + header_str.size() + offset);
    bytes.append(kMagic, sizeof(kMagic));
    const uint64_t hlen = header_str.size();
    bytes.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    bytes.append(header_str);
    for (const auto& e : entries) {
        bytes.append(reinterpret_cast<const char*>(e.tensor.data()),
                     static_cast<size_t>(e.tensor.numel()) * sizeof(float));
    }
    atomic_write(path, bytes);
}

std::vector<NamedTensor> read_tensor_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();

    if (bytes.size() < sizeof(kMagic) + 8 ||
        std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IoError(path + " is not a tensor container (bad magic)");
    }
    uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + sizeof(kMagic), sizeof(hlen));
    const size_t payload_start = sizeof(kMagic) + 8 + hlen;
    if (payload_start > bytes.size()) throw IoError(path + ": truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(sizeof(kMagic) + 8, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": malformed header: " + e.what());
    }

    std::vector<NamedTensor> entries;
    uint64_t expected_offset = 0;
    for (const auto& j : header.at("entries")) {
        NamedTensor e;
        e.name = j.at("name").get<std::string>();
        const auto shape = j.at("shape").get<std::vector<int64_t>>();
        if (j.at("dtype").get<std::string>() != "f32") {
            throw IoError(path + ": entry " + e.name + " has unsupported dtype");
        }
        const uint64_t off = j.at("offset").get<uint64_t>();
        if (off != expected_offset) {
            throw IoError(path + ": entry " + e.name + " offset " + std::to_string(off) +
                          " overlaps or leaves a gap (expected " +
                          std::to_string(expected_offset) + ")");
        }
        int64_t numel = 1;
        for (int64_t d : shape) numel *= d;
        const uint64_t nbytes = static_cast<uint64_t>(numel) * sizeof(float);
        if (payload_start + off + nbytes > bytes.size()) {
            throw IoError(path + ": entry " + e.name + " runs past end of file");
        }
        std::vector<float> data(static_cast<size_t>(numel));
        std::memcpy(data.data(), bytes.data() + payload_start + off, nbytes);
        e.tensor = Tensor::from_data(shape, std::move(data));
        if (j.contains("checksum") &&
            j.at("checksum").get<std::string>() != hex64(checksum(e.tensor))) {
            throw IoError(path + ": entry " + e.name + " failed checksum verification");
        }
        expected_offset = off + nbytes;
        entries.push_back(std::move(e));
    }
    return entries;
}

const Tensor& find_entry(const std::vector<NamedTensor>& entries, const std::string& name) {
    for (const auto& e : entries) {
        if (e.name == name) return e.tensor;
    }
    throw IoError("container has no entry named " + name);
}

}  // namespace uniedit
