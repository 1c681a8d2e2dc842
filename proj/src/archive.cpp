#include "anonydiff/archive.hpp"

#include "anonydiff/hashing.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace anonydiff {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "archive payloads assume a little-endian host");

namespace {

template <class T>
std::string payload(const Tensor<T>& t) {
    return std::string(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(T));
}

template <class T>
Tensor<T> from_payload(const std::string& bytes, Shape s, const std::string& name) {
    if (bytes.size() != s.size() * sizeof(T))
        throw ArchiveError("entry '" + name + "' payload size does not match shape " + s.str());
    Tensor<T> t(s);
    std::memcpy(t.data.data(), bytes.data(), bytes.size());
    return t;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArchiveError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_bytes(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArchiveError("write failed: " + path.string());
}

}  // namespace

std::vector<std::string> TensorArchive::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

std::string TensorArchive::dtype(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArchiveError("archive has no entry '" + name + "'");
    return std::holds_alternative<Tensor<float>>(it->second) ? "fp32" : "fp64";
}

void TensorArchive::check_name(const std::string& name) {
    if (name.empty() || name.find('/') != std::string::npos || name.find("..") != std::string::npos ||
        name == "MANIFEST.json")
        throw ArchiveError("invalid archive entry name '" + name + "'");
}

void TensorArchive::save(const fs::path& dir) const {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ArchiveError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [name, entry] : entries_) {
        const std::string bytes = std::visit([](const auto& t) { return payload(t); }, entry);
        const Shape s = std::visit([](const auto& t) { return t.shape; }, entry);
        const std::string file = name + ".bin";
        write_bytes(dir / file, bytes);
        entries.push_back({{"name", name},
                           {"dtype", dtype(name)},
                           {"shape", {s.c, s.n, s.h, s.w}},
                           {"file", file},
                           {"sha256", sha256_hex(bytes)}});
    }
    nlohmann::json manifest{{"format", "anonydiff-archive-v1"},
                            {"creator", kVersion},
                            {"config_hash", config_hash},
                            {"metadata", metadata_},
                            {"entries", entries}};
    write_text_file(dir / "MANIFEST.json", manifest.dump(1) + "\n");
}

TensorArchive TensorArchive::load(const fs::path& dir) {
    const fs::path mpath = dir / "MANIFEST.json";
    if (!fs::exists(mpath)) throw ArchiveError("missing archive manifest " + mpath.string());
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_text_file(mpath));
    } catch (const nlohmann::json::exception& e) {
        throw ArchiveError("malformed archive manifest " + mpath.string() + ": " + e.what());
    }
    if (m.value("format", "") != "anonydiff-archive-v1")
        throw ArchiveError("unsupported archive format in " + mpath.string());
    TensorArchive a;
    a.config_hash = m.value("config_hash", "");
    a.metadata_ = m.value("metadata", nlohmann::json::object());
    for (const auto& e : m.at("entries")) {
        const std::string name = e.at("name");
        check_name(name);
        const auto dims = e.at("shape").get<std::vector<int>>();
        if (dims.size() != 4) throw ArchiveError("entry '" + name + "' has a non-4D shape");
        const Shape s{dims[0], dims[1], dims[2], dims[3]};
        const std::string bytes = read_bytes(dir / e.at("file").get<std::string>());
        if (sha256_hex(bytes) != e.at("sha256").get<std::string>())
            throw ArchiveError("hash mismatch for archive entry '" + name + "' in " + dir.string());
        const std::string dt = e.at("dtype");
        if (dt == "fp32")
            a.entries_[name] = from_payload<float>(bytes, s, name);
        else if (dt == "fp64")
            a.entries_[name] = from_payload<double>(bytes, s, name);
        else
            throw ArchiveError("entry '" + name + "' has unknown dtype " + dt);
    }
    return a;
}

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    write_bytes(tmp, text);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string file_sha256(const fs::path& path) {
    const std::string bytes = read_bytes(path);
    return sha256_hex(bytes);
}

}  // namespace anonydiff
