#pragma once

#include "anonydiff/image.hpp"
#include "anonydiff/tensor.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace anonydiff {

inline constexpr const char* kVersion = "anonydiff 0.1.0";

struct ArchiveError : IoError {
    using IoError::IoError;
};

/// Named fp32/fp64 tensors persisted as one file per entry plus MANIFEST.json
/// listing dtype, shape and SHA-256 of every payload. The manifest is written
/// last; load() verifies every hash.
class TensorArchive {
public:
    using Entry = std::variant<Tensor<float>, Tensor<double>>;

    template <class T>
    void put(const std::string& name, Tensor<T> t) {
        static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
        check_name(name);
        entries_[name] = std::move(t);
    }

    bool contains(const std::string& name) const { return entries_.count(name) > 0; }
    std::vector<std::string> names() const;
    std::string dtype(const std::string& name) const;

    /// Returns the entry converted to T (exact when the stored dtype is T).
    template <class T>
    Tensor<T> get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ArchiveError("archive has no entry '" + name + "'");
        return std::visit([](const auto& t) { return t.template cast<T>(); }, it->second);
    }

    nlohmann::json& metadata() { return metadata_; }
    const nlohmann::json& metadata() const { return metadata_; }
    std::string config_hash;

    void save(const std::filesystem::path& dir) const;
    static TensorArchive load(const std::filesystem::path& dir);

private:
    static void check_name(const std::string& name);

    std::map<std::string, Entry> entries_;
    nlohmann::json metadata_ = nlohmann::json::object();
};

/// Writes `text` to `path` atomically enough for our purposes (temp file + rename).
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace anonydiff
