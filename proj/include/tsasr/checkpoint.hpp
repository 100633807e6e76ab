#pragma once

// Named-tensor storage and the on-disk checkpoint format.
//
// Checkpoint format v1 (little-endian):
//   line 1: "TSASR-CKPT v1\n"
//   line 2: one-line JSON metadata blob + "\n"
//   u64 record count, then per record:
//     u32 name length, name bytes, u32 ndim, i64 dims[ndim], f64 values[numel]

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsasr/tensor.hpp"

namespace tsasr {

class ParamStore {
  public:
    Tensor& add(const std::string& name, Tensor value) {
        require(index_.find(name) == index_.end(), "ParamStore: duplicate name " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(value));
        return items_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        require(it != index_.end(), "ParamStore: unknown name " + name);
        return items_[it->second].second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "ParamStore: unknown name " + name);
        return items_[it->second].second;
    }

    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    size_t size() const { return items_.size(); }

    int64_t total_values() const {
        int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

  private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::map<std::string, size_t> index_;
};

namespace detail {
template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ParseError("checkpoint: truncated file");
    return v;
}
}  // namespace detail

inline constexpr const char* kCheckpointMagic = "TSASR-CKPT v1";

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& records,
                            const nlohmann::json& meta = nlohmann::json::object()) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "cannot open for writing: " + path);
    os << kCheckpointMagic << "\n";
    os << meta.dump() << "\n";
    detail::write_pod<uint64_t>(os, records.size());
    for (const auto& [name, t] : records) {
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::write_pod<int64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    require(os.good(), "write failed: " + path);
}

struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> records;

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : records)
            if (n == name) return t;
        throw ParseError("checkpoint: missing record " + name);
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : records)
            if (n == name) return true;
        return false;
    }
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot open: " + path);
    std::string magic, meta_line;
    std::getline(is, magic);
    if (magic != kCheckpointMagic) throw ParseError("checkpoint: bad magic in " + path);
    std::getline(is, meta_line);
    Checkpoint ck;
    try {
        ck.meta = nlohmann::json::parse(meta_line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: bad metadata: ") + e.what());
    }
    const uint64_t n = detail::read_pod<uint64_t>(is);
    for (uint64_t r = 0; r < n; ++r) {
        const uint32_t name_len = detail::read_pod<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t ndim = detail::read_pod<uint32_t>(is);
        std::vector<int> shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(detail::read_pod<int64_t>(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!is) throw ParseError("checkpoint: truncated record " + name);
        ck.records.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

inline void save_params(const std::string& path, const ParamStore& params,
                        const nlohmann::json& meta = nlohmann::json::object()) {
    save_checkpoint(path, params.items(), meta);
}

inline ParamStore load_params(const std::string& path, nlohmann::json* meta_out = nullptr) {
    Checkpoint ck = load_checkpoint(path);
    if (meta_out != nullptr) *meta_out = ck.meta;
    ParamStore store;
    for (auto& [name, t] : ck.records) store.add(name, std::move(t));
    return store;
}

}  // namespace tsasr
