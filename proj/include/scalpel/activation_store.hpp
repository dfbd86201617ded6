#pragma once

// Binary activation tensors ("SCLP" container), per-head slicing, dataset manifests and the
// JSON/hash helpers shared by every artifact writer.
//
// Tensor file layout (all little-endian):
//   bytes 0..3   magic "SCLP"
//   u32          version (= 1)
//   u64 x 4      B, L, N_h, d
//   f32 x B*L*N_h*d   row-major payload

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "scalpel/common.hpp"

static_assert(std::endian::native == std::endian::little, "SCLP files assume a little-endian host");

namespace scalpel {

using Json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::array<char, 4> kMagic = {'S', 'C', 'L', 'P'};

enum class Manifold { trusted, halluc_image, halluc_object };

inline std::string to_string(Manifold m) {
    switch (m) {
        case Manifold::trusted: return "trusted";
        case Manifold::halluc_image: return "halluc_image";
        case Manifold::halluc_object: return "halluc_object";
    }
    return "?";
}

inline Manifold manifold_from_string(const std::string& s) {
    if (s == "trusted") return Manifold::trusted;
    if (s == "halluc_image") return Manifold::halluc_image;
    if (s == "halluc_object") return Manifold::halluc_object;
    throw ValidationError("unknown manifold label '" + s + "'");
}

/// Perturbation level of a hallucinated manifold.
enum class Level { image, object };

inline std::string to_string(Level l) { return l == Level::image ? "image" : "object"; }

inline Level level_from_string(const std::string& s) {
    if (s == "image") return Level::image;
    if (s == "object") return Level::object;
    throw ValidationError("unknown level '" + s + "'");
}

inline Manifold manifold_of(Level l) { return l == Level::image ? Manifold::halluc_image : Manifold::halluc_object; }

struct TensorDims {
    std::size_t samples = 0;  // B
    std::size_t layers = 0;   // L
    std::size_t heads = 0;    // N_h
    std::size_t dim = 0;      // d

    std::size_t count() const { return samples * layers * heads * dim; }
    friend bool operator==(const TensorDims&, const TensorDims&) = default;
};

/// B x L x N_h x d activations, stored as f32 row-major. Values are read out as doubles.
class ActivationTensor {
public:
    ActivationTensor() = default;

    ActivationTensor(TensorDims dims, std::vector<float> data, Manifold label = Manifold::trusted)
        : dims_(dims), data_(std::move(data)), label_(label) {
        validate();
    }

    /// Zero-filled tensor of the given shape.
    static ActivationTensor zeros(TensorDims dims, Manifold label = Manifold::trusted) {
        require(dims.samples > 0 && dims.layers > 0 && dims.heads > 0 && dims.dim > 0, "empty dimension");
        return ActivationTensor(dims, std::vector<float>(dims.count(), 0.0f), label);
    }

    const TensorDims& dims() const { return dims_; }
    Manifold label() const { return label_; }
    void set_label(Manifold m) { label_ = m; }
    const std::vector<float>& data() const { return data_; }

    std::size_t offset(std::size_t b, std::size_t l, std::size_t n) const {
        return ((b * dims_.layers + l) * dims_.heads + n) * dims_.dim;
    }

    float at(std::size_t b, std::size_t l, std::size_t n, std::size_t k) const { return data_[offset(b, l, n) + k]; }

    /// Stores a d-vector (rounded to f32) at (b, l, n).
    void set_vector(std::size_t b, std::size_t l, std::size_t n, const Eigen::Ref<const Vector>& v) {
        require(static_cast<std::size_t>(v.size()) == dims_.dim, "vector length does not match head dimension");
        require(v.allFinite(), "non-finite payload");
        const std::size_t o = offset(b, l, n);
        for (std::size_t k = 0; k < dims_.dim; ++k) data_[o + k] = static_cast<float>(v(static_cast<Index>(k)));
    }

    void validate() const {
        require(dims_.samples > 0 && dims_.layers > 0 && dims_.heads > 0 && dims_.dim > 0, "empty dimension");
        require(data_.size() == dims_.count(), "payload length does not match dims");
        for (float x : data_) require(std::isfinite(x), "non-finite payload");
    }

    /// Row-stack of tensors with identical (L, N_h, d).
    static ActivationTensor concat(const std::vector<const ActivationTensor*>& parts) {
        require(!parts.empty(), "nothing to concatenate");
        TensorDims dims = parts.front()->dims();
        dims.samples = 0;
        std::vector<float> data;
        for (const auto* p : parts) {
            const auto& pd = p->dims();
            require(pd.layers == dims.layers && pd.heads == dims.heads && pd.dim == dims.dim,
                    "tensor shapes differ");
            dims.samples += pd.samples;
            data.insert(data.end(), p->data().begin(), p->data().end());
        }
        return ActivationTensor(dims, std::move(data), parts.front()->label());
    }

    friend bool operator==(const ActivationTensor& a, const ActivationTensor& b) {
        return a.dims_ == b.dims_ &&
               std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
    }

private:
    TensorDims dims_;
    std::vector<float> data_;
    Manifold label_ = Manifold::trusted;
};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool get(std::istream& is, T& v) {
    return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

}  // namespace detail

inline void write_tensor(const ActivationTensor& t, const std::filesystem::path& path) {
    const auto& d = t.dims();
    if (d.samples == 0 || d.layers == 0 || d.heads == 0 || d.dim == 0) throw ValidationError("empty dimension");
    for (float x : t.data())
        if (!std::isfinite(x)) throw ValidationError("non-finite payload");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot open '" + path.string() + "' for writing");
    os.write(kMagic.data(), kMagic.size());
    detail::put<std::uint32_t>(os, kTensorVersion);
    for (std::uint64_t v : {d.samples, d.layers, d.heads, d.dim}) detail::put<std::uint64_t>(os, v);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(float)));
    if (!os) throw RuntimeError("write failed for '" + path.string() + "'");
}

inline ActivationTensor read_tensor(const std::filesystem::path& path, Manifold label = Manifold::trusted) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open '" + path.string() + "'");
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kMagic)
        throw ValidationError("not an activation file: " + path.string());
    std::uint32_t version = 0;
    if (!detail::get(is, version) || version != kTensorVersion)
        throw ValidationError("unsupported activation file version: " + path.string());
    std::array<std::uint64_t, 4> raw{};
    for (auto& v : raw)
        if (!detail::get(is, v)) throw ValidationError("truncated payload: " + path.string());
    TensorDims dims{raw[0], raw[1], raw[2], raw[3]};
    if (dims.count() == 0) throw ValidationError("empty dimension");
    const auto header = static_cast<std::uintmax_t>(4 + 4 + 8 * 4);
    const auto expected = header + dims.count() * sizeof(float);
    if (std::filesystem::file_size(path) != expected) throw ValidationError("truncated payload: " + path.string());
    std::vector<float> data(dims.count());
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float))))
        throw ValidationError("truncated payload: " + path.string());
    return ActivationTensor(dims, std::move(data), label);
}

/// B x d matrix of one head's activations: row b = t[b, layer, head, :].
inline Matrix slice_head(const ActivationTensor& t, std::size_t layer, std::size_t head) {
    const auto& d = t.dims();
    if (layer >= d.layers || head >= d.heads) throw ValidationError("head index out of range");
    Matrix out(static_cast<Index>(d.samples), static_cast<Index>(d.dim));
    for (std::size_t b = 0; b < d.samples; ++b) {
        const std::size_t o = t.offset(b, layer, head);
        for (std::size_t k = 0; k < d.dim; ++k) out(static_cast<Index>(b), static_cast<Index>(k)) = t.data()[o + k];
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Hashing and JSON helpers

inline std::string sha256_hex(const std::string& bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw RuntimeError("sha256 failed");
    std::ostringstream os;
    for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

/// Canonical artifact text: sorted keys, 2-space indent, shortest round-trip doubles.
inline std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot open '" + path.string() + "' for writing");
    os << text;
    if (!os) throw RuntimeError("write failed for '" + path.string() + "'");
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, dump_json(j)); }

inline Json read_json(const std::filesystem::path& path) {
    try {
        return Json::parse(read_file_bytes(path));
    } catch (const Json::parse_error& e) {
        throw ValidationError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

inline void check_schema(const Json& j, const std::string& what) {
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kSchemaVersion)
        throw ValidationError(what + ": unsupported or missing schema_version");
}

inline Json to_json(const Vector& v) {
    Json a = Json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline Json to_json(const Matrix& m) {
    Json a = Json::array();
    for (Index r = 0; r < m.rows(); ++r) {
        Json row = Json::array();
        for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        a.push_back(std::move(row));
    }
    return a;
}

inline Vector vector_from_json(const Json& j) {
    Vector v(static_cast<Index>(j.size()));
    for (Index i = 0; i < v.size(); ++i) v(i) = j.at(static_cast<std::size_t>(i)).get<double>();
    return v;
}

inline Matrix matrix_from_json(const Json& j) {
    const auto rows = static_cast<Index>(j.size());
    const auto cols = rows == 0 ? Index{0} : static_cast<Index>(j.at(0).size());
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        const auto& row = j.at(static_cast<std::size_t>(r));
        if (static_cast<Index>(row.size()) != cols) throw ValidationError("ragged matrix in JSON");
        for (Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
    return m;
}

// ---------------------------------------------------------------------------------------------
// Dataset manifest

struct DatasetManifest {
    std::map<Manifold, std::filesystem::path> tensors;  // relative to the manifest directory
    std::map<Manifold, std::vector<int>> labels;        // per row: 0 factual, 1 hallucinated
    std::uint64_t seed = 0;
    int schema_version = kSchemaVersion;

    Json to_json() const {
        Json t = Json::object();
        Json l = Json::object();
        for (const auto& [m, p] : tensors) t[to_string(m)] = p.generic_string();
        for (const auto& [m, v] : labels) l[to_string(m)] = v;
        return Json{{"schema_version", schema_version}, {"tensors", t}, {"labels", l}, {"seed", seed}};
    }

    static DatasetManifest from_json(const Json& j) {
        check_schema(j, "dataset manifest");
        DatasetManifest m;
        for (const auto& [k, v] : j.at("tensors").items()) m.tensors[manifold_from_string(k)] = v.get<std::string>();
        for (const auto& [k, v] : j.at("labels").items()) m.labels[manifold_from_string(k)] = v.get<std::vector<int>>();
        m.seed = j.at("seed").get<std::uint64_t>();
        return m;
    }

    /// Loads every referenced tensor, checking headers and that label counts match B.
    std::map<Manifold, ActivationTensor> load(const std::filesystem::path& dir) const {
        std::map<Manifold, ActivationTensor> out;
        for (const auto& [m, rel] : tensors) {
            const auto path = dir / rel;
            if (!std::filesystem::exists(path)) throw ValidationError("manifest references missing file " + path.string());
            auto t = read_tensor(path, m);
            const auto it = labels.find(m);
            if (it != labels.end() && it->second.size() != t.dims().samples)
                throw ValidationError("label vector length differs from tensor sample count for " + to_string(m));
            out.emplace(m, std::move(t));
        }
        return out;
    }
};

}  // namespace scalpel
