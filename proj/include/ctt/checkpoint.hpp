#pragma once

// Parameter checkpoint container: a flat name -> (shape, float64 data) map
// with a versioned header. Little-endian throughout; layout documented in the
// README. Also used for feature fixtures in tests.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctt/tensor.hpp"

namespace ctt {

struct CheckpointEntry {
    Shape shape;
    std::vector<double> data;
};

using Checkpoint = std::map<std::string, CheckpointEntry>;

namespace detail {

constexpr char kCkptMagic[8] = {'C', 'T', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCkptVersion = 1;

template <class T>
void write_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) {
        buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    }
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    std::uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    }
    return static_cast<T>(v);
}

inline void write_f64_le(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    write_le<std::uint64_t>(os, bits);
}

inline double read_f64_le(std::istream& is) {
    const std::uint64_t bits = read_le<std::uint64_t>(is);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    os.write(detail::kCkptMagic, 8);
    detail::write_le<std::uint32_t>(os, detail::kCkptVersion);
    detail::write_le<std::uint32_t>(os, std::uint32_t(ckpt.size()));
    for (const auto& [name, entry] : ckpt) {
        detail::write_le<std::uint32_t>(os, std::uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        detail::write_le<std::uint32_t>(os, std::uint32_t(entry.shape.size()));
        for (long d : entry.shape) detail::write_le<std::uint64_t>(os, std::uint64_t(d));
        detail::write_le<std::uint64_t>(os, std::uint64_t(entry.data.size()));
        for (double v : entry.data) detail::write_f64_le(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != detail::kCkptVersion) {
        throw std::runtime_error("checkpoint: unsupported version " +
                                 std::to_string(version) + " in " + path);
    }
    const auto n_entries = detail::read_le<std::uint32_t>(is);
    Checkpoint ckpt;
    for (std::uint32_t e = 0; e < n_entries; ++e) {
        const auto name_len = detail::read_le<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rank = detail::read_le<std::uint32_t>(is);
        CheckpointEntry entry;
        long numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const long d = long(detail::read_le<std::uint64_t>(is));
            entry.shape.push_back(d);
            numel *= d;
        }
        const auto count = detail::read_le<std::uint64_t>(is);
        if (long(count) != numel) {
            throw std::runtime_error("checkpoint: entry '" + name +
                                     "' data length does not match shape");
        }
        entry.data.resize(count);
        for (auto& v : entry.data) v = detail::read_f64_le(is);
        if (!is) throw std::runtime_error("checkpoint: truncated file: " + path);
        ckpt.emplace(std::move(name), std::move(entry));
    }
    return ckpt;
}

// Named parameter registry. Ordered map keeps optimizer iteration and
// checkpoint layout deterministic. Non-trainable arrays (running statistics)
// live here too with requires_grad=false.
class ParamStore {
  public:
    Tensor add(const std::string& name, const Shape& shape, bool trainable = true) {
        if (params_.count(name)) {
            throw std::logic_error("ParamStore: duplicate parameter '" + name + "'");
        }
        Tensor t = Tensor::zeros(shape, trainable);
        params_.emplace(name, t);
        return t;
    }

    Tensor get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) {
            throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
        }
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    const std::map<std::string, Tensor>& all() const { return params_; }

    long total_trainable() const {
        long n = 0;
        for (const auto& [name, t] : params_) {
            if (t.requires_grad()) n += t.numel();
        }
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) {
            if (t.requires_grad()) {
                Tensor tt = t;
                tt.grad().assign(size_t(t.numel()), 0.0);
            }
        }
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ckpt;
        for (const auto& [name, t] : params_) {
            ckpt[name] = CheckpointEntry{t.shape(), t.data()};
        }
        return ckpt;
    }

    void load(const Checkpoint& ckpt) {
        for (auto& [name, t] : params_) {
            auto it = ckpt.find(name);
            if (it == ckpt.end()) {
                throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
            }
            if (it->second.shape != t.shape()) {
                throw std::runtime_error("checkpoint: shape mismatch for '" + name +
                                         "': file " + shape_str(it->second.shape) +
                                         " vs model " + shape_str(t.shape()));
            }
            Tensor tt = t;
            tt.data() = it->second.data;
        }
    }

  private:
    std::map<std::string, Tensor> params_;
};

}  // namespace ctt
