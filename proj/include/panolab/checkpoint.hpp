#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "panolab/autodiff.hpp"
#include "panolab/common.hpp"
#include "panolab/rng.hpp"

namespace panolab {

/// Ordered (by name) collection of named parameters. The map ordering drives
/// the deterministic checkpoint layout.
class ParamStore {
public:
    ad::Param& add(const std::string& name, ad::Shape shape, std::vector<double> value) {
        auto [it, inserted] = params_.emplace(name, ad::Param(name, std::move(shape), std::move(value)));
        if (!inserted) throw ValueError("duplicate parameter name: " + name);
        return it->second;
    }

    /// Seeded init: values ~ N(0, stddev^2) from a stream derived from the
    /// parameter name, so layout changes never reshuffle other params.
    ad::Param& add_normal(const std::string& name, ad::Shape shape, const Rng& rng, double stddev) {
        Rng r = rng.child(name);
        return add(name, shape, r.normal_vec(ad::numel(shape), 0.0, stddev));
    }

    ad::Param& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValueError("unknown parameter: " + name);
        return it->second;
    }

    const ad::Param& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValueError("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    void zero_grads() {
        for (auto& [_, p] : params_) p.zero_grad();
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [_, p] : params_) n += p.value.size();
        return n;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t count() const { return params_.size(); }

private:
    std::map<std::string, ad::Param> params_;
};

namespace checkpoint {

constexpr char kMagic[4] = {'P', 'G', 'P', 'P'};
constexpr std::uint32_t kVersion = 1;

/// Blob stream: magic "PGPP", u32 version, then per parameter in sorted name
/// order: u32 name length, name bytes, u32 rank, u32 dims[], f64 LE data.
inline void write(std::ostream& os, const ParamStore& store) {
    os.write(kMagic, 4);
    io::write_u32(os, kVersion);
    for (const auto& [name, p] : store) {
        io::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_u32(os, static_cast<std::uint32_t>(p.shape.size()));
        for (int d : p.shape) io::write_u32(os, static_cast<std::uint32_t>(d));
        for (double v : p.value) io::write_f64(os, v);
    }
}

inline ParamStore read(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kMagic, 4))
        throw FormatError("not a PGPP checkpoint (bad magic)");
    const std::uint32_t version = io::read_u32(is);
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    ParamStore store;
    while (true) {
        int c = is.peek();
        if (c == std::char_traits<char>::eof()) break;
        const std::uint32_t name_len = io::read_u32(is);
        if (name_len == 0 || name_len > 4096) throw FormatError("implausible parameter name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw FormatError("truncated checkpoint (name)");
        const std::uint32_t rank = io::read_u32(is);
        if (rank > 8) throw FormatError("implausible parameter rank");
        ad::Shape shape(rank);
        for (auto& d : shape) {
            d = static_cast<int>(io::read_u32(is));
            if (d <= 0) throw FormatError("non-positive dimension in checkpoint");
        }
        std::vector<double> data(ad::numel(shape));
        for (auto& v : data) v = io::read_f64(is);
        if (!is) throw FormatError("truncated checkpoint (data): " + name);
        store.add(name, std::move(shape), std::move(data));
    }
    return store;
}

/// Atomic-ish file write: temp file in the same directory, then rename.
inline void save_file(const std::string& path, const ParamStore& store) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot open for write: " + tmp.string());
        write(os, store);
        if (!os) throw FormatError("write failed: " + tmp.string());
    }
    fs::rename(tmp, target);
}

inline ParamStore load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path);
    return read(is);
}

inline std::string to_bytes(const ParamStore& store) {
    std::ostringstream os(std::ios::binary);
    write(os, store);
    return os.str();
}

} // namespace checkpoint
} // namespace panolab
