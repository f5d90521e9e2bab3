#pragma once

// On-disk formats.
//
//   descriptor bank  "KPB1" | u32 version=1 | u32 dim | u64 count | count*dim f32, LE, row-major
//   feature maps     "KPF1" | u32 version=1 | u32 c | u32 h | u32 w | u64 count | f64 payload, LE
//   manifest, model state, run config, reports: JSON
//
// Every writer goes through a temp file and a rename.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kappa_sphere/evaluation.hpp"
#include "kappa_sphere/synth.hpp"
#include "kappa_sphere/trainer.hpp"

namespace kappa_sphere {

using Json = nlohmann::ordered_json;

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr double kBankRejectTolerance = 1e-3;

// ---------------------------------------------------------------------------
// files

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string read_text(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return {bytes.begin(), bytes.end()};
}

/// Writes to a sibling temp file, then renames over `path`.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

namespace detail {

class ByteWriter {
public:
    void bytes(const char* p, std::size_t n) { buf_.append(p, n); }

    template <typename T>
    void le(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        std::array<unsigned char, sizeof(T)> raw{};
        std::memcpy(raw.data(), &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
        buf_.append(reinterpret_cast<const char*>(raw.data()), raw.size());
    }

    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& data) : data_(data) {}

    void expect_magic(const char* magic) {
        need(4, "magic");
        if (std::memcmp(data_.data() + pos_, magic, 4) != 0) {
            throw FormatError(std::string("bad magic, expected ") + magic, at());
        }
        pos_ += 4;
    }

    template <typename T>
    T le(const char* what) {
        need(sizeof(T), what);
        std::array<unsigned char, sizeof(T)> raw{};
        std::memcpy(raw.data(), data_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
        T v;
        std::memcpy(&v, raw.data(), sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::size_t pos() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    std::string at() const { return "byte " + std::to_string(pos_); }

private:
    void need(std::size_t n, const char* what) {
        if (remaining() < n) throw FormatError(std::string("truncated ") + what, at());
    }

    const std::vector<std::uint8_t>& data_;
    std::size_t pos_ = 0;
};

/// float32 image of a unit row that loads back to itself: normalizing the widened floats
/// and narrowing again reproduces the same floats.
inline std::vector<float> canonical_float_row(const Vector& row) {
    std::vector<float> f(static_cast<std::size_t>(row.size()));
    Vector x = row;
    for (int iter = 0; iter < 8; ++iter) {
        for (Eigen::Index i = 0; i < x.size(); ++i) f[static_cast<std::size_t>(i)] = static_cast<float>(x(i));
        Vector widened(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) widened(i) = f[static_cast<std::size_t>(i)];
        const double n = widened.norm();
        if (!(n > 0.0)) break;
        const Vector next = widened / n;
        bool fixed = true;
        for (Eigen::Index i = 0; i < x.size(); ++i) fixed = fixed && static_cast<float>(next(i)) == f[static_cast<std::size_t>(i)];
        if (fixed) break;
        x = next;
    }
    return f;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// descriptor bank

inline std::string encode_bank(const Matrix& descriptors) {
    detail::ByteWriter w;
    w.bytes("KPB1", 4);
    w.le<std::uint32_t>(kFormatVersion);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(descriptors.cols()));
    w.le<std::uint64_t>(static_cast<std::uint64_t>(descriptors.rows()));
    for (Eigen::Index r = 0; r < descriptors.rows(); ++r) {
        for (float v : detail::canonical_float_row(descriptors.row(r).transpose())) w.le<float>(v);
    }
    return w.take();
}

/// Rows deviating from unit norm by more than 1e-3 are rejected; all others are brought
/// to unit norm in double precision.
inline Matrix decode_bank(const std::vector<std::uint8_t>& data) {
    detail::ByteReader r(data);
    r.expect_magic("KPB1");
    const std::size_t version_at = r.pos();
    const auto version = r.le<std::uint32_t>("version");
    if (version != kFormatVersion) {
        throw FormatError("unsupported bank version " + std::to_string(version), "byte " + std::to_string(version_at));
    }
    const auto dim = r.le<std::uint32_t>("dim");
    const auto count = r.le<std::uint64_t>("count");
    if (dim == 0) throw FormatError("bank dimension is zero", "byte 8");
    const std::uint64_t payload = count * dim * 4ULL;
    if (r.remaining() != payload) {
        throw FormatError("payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                              std::to_string(payload),
                          r.at());
    }
    Matrix m(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::size_t row_at = r.pos();
        for (std::uint32_t j = 0; j < dim; ++j) {
            const float v = r.le<float>("payload");
            if (!std::isfinite(v)) throw FormatError("non-finite descriptor value", "byte " + std::to_string(r.pos() - 4));
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
        }
        const double n = m.row(static_cast<Eigen::Index>(i)).norm();
        if (std::abs(n - 1.0) > kBankRejectTolerance) {
            throw FormatError("row " + std::to_string(i) + " has norm " + std::to_string(n), "byte " + std::to_string(row_at));
        }
        m.row(static_cast<Eigen::Index>(i)) /= n;
    }
    return m;
}

inline void write_bank(const std::filesystem::path& path, const Matrix& descriptors) {
    atomic_write(path, encode_bank(descriptors));
}

inline Matrix read_bank(const std::filesystem::path& path) { return decode_bank(read_file(path)); }

// ---------------------------------------------------------------------------
// feature maps

inline std::string encode_features(const std::vector<FeatureMap>& maps) {
    detail::ByteWriter w;
    w.bytes("KPF1", 4);
    w.le<std::uint32_t>(kFormatVersion);
    const FeatureMap shape = maps.empty() ? FeatureMap(1, 1, 1) : maps.front();
    w.le<std::uint32_t>(static_cast<std::uint32_t>(shape.channels()));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(shape.height()));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(shape.width()));
    w.le<std::uint64_t>(maps.size());
    for (const auto& fm : maps) {
        if (fm.channels() != shape.channels() || fm.height() != shape.height() || fm.width() != shape.width()) {
            throw DomainError("feature maps differ in shape");
        }
        for (int c = 0; c < fm.channels(); ++c)
            for (int s = 0; s < fm.spatial(); ++s) w.le<double>(fm(c, s));
    }
    return w.take();
}

inline std::vector<FeatureMap> decode_features(const std::vector<std::uint8_t>& data) {
    detail::ByteReader r(data);
    r.expect_magic("KPF1");
    const auto version = r.le<std::uint32_t>("version");
    if (version != kFormatVersion) throw FormatError("unsupported feature version " + std::to_string(version), "byte 4");
    const auto c = r.le<std::uint32_t>("channels");
    const auto h = r.le<std::uint32_t>("height");
    const auto wd = r.le<std::uint32_t>("width");
    const auto count = r.le<std::uint64_t>("count");
    if (c == 0 || h == 0 || wd == 0) throw FormatError("feature shape has a zero extent", "byte 8");
    const std::uint64_t payload = count * c * h * wd * 8ULL;
    if (r.remaining() != payload) throw FormatError("feature payload length does not match header", r.at());
    std::vector<FeatureMap> out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        FeatureMap fm(static_cast<int>(c), static_cast<int>(h), static_cast<int>(wd));
        for (int ch = 0; ch < fm.channels(); ++ch)
            for (int s = 0; s < fm.spatial(); ++s) {
                const double v = r.le<double>("payload");
                if (!std::isfinite(v)) throw FormatError("non-finite feature value", "byte " + std::to_string(r.pos() - 8));
                fm(ch, s) = v;
            }
        out.push_back(std::move(fm));
    }
    return out;
}

inline void write_features(const std::filesystem::path& path, const std::vector<FeatureMap>& maps) {
    atomic_write(path, encode_features(maps));
}

inline std::vector<FeatureMap> read_features(const std::filesystem::path& path) {
    return decode_features(read_file(path));
}

// ---------------------------------------------------------------------------
// strict JSON access

namespace detail {

inline std::string child_path(const std::string& parent, const std::string& key) { return parent + "." + key; }
inline std::string index_path(const std::string& parent, std::size_t i) {
    return parent + "[" + std::to_string(i) + "]";
}

inline Json parse_json(const std::string& text, const std::string& what) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw FormatError(what + ": " + e.what(), "byte " + std::to_string(e.byte));
    }
}

/// Object view that tracks its JSON path and rejects keys nobody asked about.
class JsonObject {
public:
    JsonObject(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw FormatError("expected an object", path_);
    }

    void allow_only(std::initializer_list<const char*> keys) const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            const bool known = std::any_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; });
            if (!known) throw FormatError("unknown key '" + it.key() + "'", child_path(path_, it.key()));
        }
    }

    bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }
    const Json& at(const char* key) const {
        if (!j_.contains(key)) throw FormatError("missing key", child_path(path_, key));
        return j_.at(key);
    }
    std::string path(const char* key) const { return child_path(path_, key); }

    double number(const char* key) const {
        const Json& v = at(key);
        if (!v.is_number()) throw FormatError("expected a number", path(key));
        return v.get<double>();
    }
    std::int64_t integer(const char* key) const {
        const Json& v = at(key);
        if (!v.is_number_integer()) throw FormatError("expected an integer", path(key));
        return v.get<std::int64_t>();
    }
    bool boolean(const char* key) const {
        const Json& v = at(key);
        if (!v.is_boolean()) throw FormatError("expected a boolean", path(key));
        return v.get<bool>();
    }
    std::string string(const char* key) const {
        const Json& v = at(key);
        if (!v.is_string()) throw FormatError("expected a string", path(key));
        return v.get<std::string>();
    }
    JsonObject object(const char* key) const { return JsonObject(at(key), path(key)); }

    void read(const char* key, double& out) const {
        if (has(key)) out = number(key);
    }
    void read(const char* key, int& out) const {
        if (has(key)) out = static_cast<int>(integer(key));
    }
    void read(const char* key, bool& out) const {
        if (has(key)) out = boolean(key);
    }

    /// Applies `parse` to a string value, reporting its failure at the key's path.
    template <typename T, typename Parse>
    void read_enum(const char* key, T& out, Parse parse) const {
        if (!has(key)) return;
        try {
            out = parse(string(key));
        } catch (const DomainError& e) {
            throw FormatError(e.what(), path(key));
        }
    }

private:
    const Json& j_;
    std::string path_;
};

inline std::vector<double> number_array(const Json& j, const std::string& path) {
    if (!j.is_array()) throw FormatError("expected an array", path);
    std::vector<double> out;
    out.reserve(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw FormatError("expected a number", index_path(path, i));
        out.push_back(j[i].get<double>());
    }
    return out;
}

inline Json vector_json(const Vector& v) {
    Json a = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline Vector json_vector(const Json& j, const std::string& path) {
    const auto vals = number_array(j, path);
    return Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

/// Row-major nested arrays.
inline Json matrix_json(const Matrix& m) {
    Json rows = Json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vector_json(m.row(r).transpose()));
    return rows;
}

inline Matrix json_matrix(const Json& j, const std::string& path) {
    if (!j.is_array()) throw FormatError("expected an array of rows", path);
    Matrix m;
    for (std::size_t r = 0; r < j.size(); ++r) {
        const Vector row = json_vector(j[r], index_path(path, r));
        if (r == 0) m.resize(static_cast<Eigen::Index>(j.size()), row.size());
        if (row.size() != m.cols()) throw FormatError("ragged matrix row", index_path(path, r));
        m.row(static_cast<Eigen::Index>(r)) = row.transpose();
    }
    return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// manifest

struct Manifest {
    std::vector<ImageId> ids;
    std::vector<int> labels;
    std::optional<std::vector<Pose>> poses;
    std::optional<std::vector<double>> true_kappa;
    std::optional<std::vector<double>> kappas;
    std::vector<Split> split;

    std::size_t size() const noexcept { return ids.size(); }
};

inline Json manifest_json(const Manifest& m) {
    Json j;
    j["ids"] = m.ids;
    j["labels"] = m.labels;
    if (m.poses) {
        Json p = Json::array();
        for (const auto& pose : *m.poses) p.push_back(Json::array({pose.x, pose.y}));
        j["poses"] = p;
    } else {
        j["poses"] = nullptr;
    }
    j["true_kappa"] = m.true_kappa ? Json(*m.true_kappa) : Json(nullptr);
    j["kappas"] = m.kappas ? Json(*m.kappas) : Json(nullptr);
    Json s = Json::array();
    for (Split sp : m.split) s.push_back(to_string(sp));
    j["split"] = s;
    return j;
}

inline Manifest manifest_from_json(const Json& j) {
    const detail::JsonObject o(j, "$");
    o.allow_only({"ids", "labels", "poses", "true_kappa", "kappas", "split"});
    Manifest m;
    const Json& ids = o.at("ids");
    if (!ids.is_array()) throw FormatError("expected an array", o.path("ids"));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!ids[i].is_number_integer()) throw FormatError("expected an integer id", detail::index_path(o.path("ids"), i));
        m.ids.push_back(ids[i].get<ImageId>());
    }
    const std::size_t n = m.ids.size();
    auto check_len = [&](std::size_t len, const char* key) {
        if (len != n) throw FormatError("length " + std::to_string(len) + " differs from ids (" + std::to_string(n) + ")", o.path(key));
    };
    const Json& labels = o.at("labels");
    if (!labels.is_array()) throw FormatError("expected an array", o.path("labels"));
    check_len(labels.size(), "labels");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!labels[i].is_number_integer()) throw FormatError("expected an integer label", detail::index_path(o.path("labels"), i));
        m.labels.push_back(labels[i].get<int>());
    }
    if (o.has("poses")) {
        const Json& poses = o.at("poses");
        if (!poses.is_array()) throw FormatError("expected an array", o.path("poses"));
        check_len(poses.size(), "poses");
        m.poses.emplace();
        for (std::size_t i = 0; i < poses.size(); ++i) {
            const auto xy = detail::number_array(poses[i], detail::index_path(o.path("poses"), i));
            if (xy.size() != 2) throw FormatError("pose must be [x, y]", detail::index_path(o.path("poses"), i));
            m.poses->push_back({xy[0], xy[1]});
        }
    }
    if (o.has("true_kappa")) {
        m.true_kappa = detail::number_array(o.at("true_kappa"), o.path("true_kappa"));
        check_len(m.true_kappa->size(), "true_kappa");
    }
    if (o.has("kappas")) {
        m.kappas = detail::number_array(o.at("kappas"), o.path("kappas"));
        check_len(m.kappas->size(), "kappas");
    }
    const Json& split = o.at("split");
    if (!split.is_array()) throw FormatError("expected an array", o.path("split"));
    check_len(split.size(), "split");
    for (std::size_t i = 0; i < split.size(); ++i) {
        const std::string at = detail::index_path(o.path("split"), i);
        if (!split[i].is_string()) throw FormatError("expected a split name", at);
        try {
            m.split.push_back(split_from_string(split[i].get<std::string>()));
        } catch (const DomainError& e) {
            throw FormatError(e.what(), at);
        }
    }
    return m;
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
    atomic_write(path, manifest_json(m).dump(2) + "\n");
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    return manifest_from_json(detail::parse_json(read_text(path), path.string()));
}

/// Bank + manifest + feature maps as stored on disk.
struct StoredDataset {
    Matrix descriptors;
    Manifest manifest;
    std::vector<FeatureMap> features;  ///< empty when no feature file exists

    void validate() const {
        if (static_cast<std::size_t>(descriptors.rows()) != manifest.size()) {
            throw FormatError("bank holds " + std::to_string(descriptors.rows()) + " rows, manifest lists " +
                                  std::to_string(manifest.size()),
                              "$.ids");
        }
        if (!features.empty() && features.size() != manifest.size()) {
            throw FormatError("feature file count differs from manifest", "byte 20");
        }
    }

    std::vector<std::size_t> rows(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < manifest.split.size(); ++i)
            if (manifest.split[i] == s) out.push_back(i);
        return out;
    }

    DescriptorBank bank(Split s) const {
        const auto r = rows(s);
        DescriptorBank b;
        b.descriptors.resize(static_cast<Eigen::Index>(r.size()), descriptors.cols());
        if (manifest.poses) b.poses.emplace();
        if (manifest.true_kappa) b.true_kappa.emplace();
        if (manifest.kappas) b.kappas.emplace();
        for (std::size_t k = 0; k < r.size(); ++k) {
            const std::size_t i = r[k];
            b.descriptors.row(static_cast<Eigen::Index>(k)) = descriptors.row(static_cast<Eigen::Index>(i));
            b.ids.push_back(manifest.ids[i]);
            b.labels.push_back(manifest.labels[i]);
            if (b.poses) b.poses->push_back((*manifest.poses)[i]);
            if (b.true_kappa) b.true_kappa->push_back((*manifest.true_kappa)[i]);
            if (b.kappas) b.kappas->push_back((*manifest.kappas)[i]);
        }
        return b;
    }

    std::vector<FeatureMap> features_of(Split s) const {
        std::vector<FeatureMap> out;
        if (features.empty()) return out;
        for (std::size_t i : rows(s)) out.push_back(features[i]);
        return out;
    }
};

inline StoredDataset stored_from_synth(const SynthDataset& ds) {
    StoredDataset s;
    s.descriptors = ds.bank.descriptors;
    s.manifest.ids = ds.bank.ids;
    s.manifest.labels = ds.bank.labels;
    s.manifest.poses = ds.bank.poses;
    s.manifest.true_kappa = ds.bank.true_kappa;
    s.manifest.split = ds.split;
    s.features = ds.features;
    return s;
}

struct DatasetPaths {
    std::filesystem::path bank;
    std::filesystem::path manifest;
    std::filesystem::path features;
    std::filesystem::path prototypes;

    static DatasetPaths in(const std::filesystem::path& dir) {
        return {dir / "bank.kpb", dir / "manifest.json", dir / "features.kpf", dir / "prototypes.kpb"};
    }
};

inline void write_dataset(const DatasetPaths& paths, const StoredDataset& ds) {
    ds.validate();
    write_bank(paths.bank, ds.descriptors);
    write_manifest(paths.manifest, ds.manifest);
    if (!ds.features.empty()) write_features(paths.features, ds.features);
}

inline StoredDataset read_dataset(const DatasetPaths& paths) {
    StoredDataset ds;
    ds.descriptors = read_bank(paths.bank);
    ds.manifest = read_manifest(paths.manifest);
    if (std::filesystem::exists(paths.features)) ds.features = read_features(paths.features);
    ds.validate();
    return ds;
}

/// Prototypes are stored as a bank with one row per class.
inline void write_prototypes(const std::filesystem::path& path, const PrototypeSet& p) {
    write_bank(path, p.weights().transpose());
}

inline PrototypeSet read_prototypes(const std::filesystem::path& path) {
    return PrototypeSet::from_matrix(read_bank(path).transpose());
}

// ---------------------------------------------------------------------------
// run configuration

struct HeadConfig {
    HeadVariant variant = HeadVariant::Aggregation;
    int hidden = 64;
};

inline HeadVariant head_variant_from_string(const std::string& s) {
    if (s == "aggregation") return HeadVariant::Aggregation;
    if (s == "linear") return HeadVariant::LinearOnly;
    throw DomainError("unknown head variant '" + s + "'");
}

inline std::string head_variant_name(HeadVariant v) { return v == HeadVariant::Aggregation ? "aggregation" : "linear"; }

struct RunConfig {
    std::uint64_t seed = 0;
    SceneConfig scene = SceneConfig::desk_default();
    TrainConfig train;
    LmclConfig lmcl;
    HeadConfig head;
    EvalOptions eval;

    /// Propagates the run seed into the scene and trainer.
    void apply_seed(std::uint64_t s) {
        seed = s;
        scene.seed = s;
        train.seed = s;
    }

    void validate() const {
        scene.validate();
        train.validate();
        lmcl.validate();
        eval.validate();
        if (head.hidden < 1) throw DomainError("head hidden width must be positive");
    }
};

inline Json config_json(const RunConfig& c) {
    Json j;
    j["seed"] = c.seed;
    Json s;
    s["num_classes"] = c.scene.num_classes;
    s["images_per_class"] = c.scene.images_per_class;
    s["descriptor_dim"] = c.scene.descriptor_dim;
    s["kappa_min"] = c.scene.kappa_min;
    s["kappa_max"] = c.scene.kappa_max;
    s["pose_spacing"] = c.scene.pose_spacing;
    s["pose_jitter"] = c.scene.pose_jitter;
    s["aliasing_rate"] = c.scene.aliasing_rate;
    s["feature_shape"] = Json::array({c.scene.feature_channels, c.scene.feature_height, c.scene.feature_width});
    s["noise_std"] = c.scene.noise_std;
    s["split_fractions"] = c.scene.split_fractions;
    s["gt_threshold"] = c.scene.gt_threshold;
    j["scene"] = s;
    Json t;
    t["mode"] = to_string(c.train.mode);
    t["lambda"] = c.train.lambda;
    t["lr"] = c.train.lr;
    t["encoder_lr"] = c.train.encoder_lr;
    t["batch_size"] = c.train.batch_size;
    t["patience"] = c.train.patience;
    t["max_epochs"] = c.train.max_epochs;
    t["anchor_mode"] = to_string(c.train.anchor_mode);
    t["samples_per_class"] = c.train.samples_per_class;
    t["centroid_includes_query"] = c.train.centroid_includes_query;
    t["include_vmf"] = c.train.include_vmf;
    t["validation_fraction"] = c.train.validation_fraction;
    j["train"] = t;
    j["lmcl"] = {{"scale", c.lmcl.scale}, {"margin", c.lmcl.margin}};
    j["head"] = {{"variant", head_variant_name(c.head.variant)}, {"hidden", c.head.hidden}};
    Json e;
    e["ks"] = c.eval.ks;
    Json methods = Json::array();
    for (Method m : c.eval.methods) methods.push_back(to_string(m));
    e["methods"] = methods;
    e["num_bins"] = c.eval.num_bins;
    e["binning"] = to_string(c.eval.strategy);
    e["clamp"] = c.eval.clamp ? to_string(*c.eval.clamp) : "auto";
    e["sue_k"] = c.eval.sue_k;
    j["eval"] = e;
    return j;
}

inline RunConfig config_from_json(const Json& j) {
    RunConfig c;
    const detail::JsonObject root(j, "$");
    root.allow_only({"seed", "scene", "train", "lmcl", "head", "eval"});
    if (root.has("scene")) {
        const auto s = root.object("scene");
        s.allow_only({"num_classes", "images_per_class", "descriptor_dim", "kappa_min", "kappa_max", "pose_spacing",
                      "pose_jitter", "aliasing_rate", "feature_shape", "noise_std", "split_fractions", "gt_threshold"});
        s.read("num_classes", c.scene.num_classes);
        s.read("images_per_class", c.scene.images_per_class);
        s.read("descriptor_dim", c.scene.descriptor_dim);
        s.read("kappa_min", c.scene.kappa_min);
        s.read("kappa_max", c.scene.kappa_max);
        s.read("pose_spacing", c.scene.pose_spacing);
        s.read("pose_jitter", c.scene.pose_jitter);
        s.read("aliasing_rate", c.scene.aliasing_rate);
        s.read("noise_std", c.scene.noise_std);
        s.read("gt_threshold", c.scene.gt_threshold);
        if (s.has("feature_shape")) {
            const auto v = detail::number_array(s.at("feature_shape"), s.path("feature_shape"));
            if (v.size() != 3) throw FormatError("feature_shape must be [c, h, w]", s.path("feature_shape"));
            c.scene.feature_channels = static_cast<int>(v[0]);
            c.scene.feature_height = static_cast<int>(v[1]);
            c.scene.feature_width = static_cast<int>(v[2]);
        }
        if (s.has("split_fractions")) {
            const auto v = detail::number_array(s.at("split_fractions"), s.path("split_fractions"));
            if (v.size() != 3) throw FormatError("split_fractions must have three entries", s.path("split_fractions"));
            c.scene.split_fractions = {v[0], v[1], v[2]};
        }
    }
    if (root.has("train")) {
        const auto t = root.object("train");
        t.allow_only({"mode", "lambda", "lr", "encoder_lr", "batch_size", "patience", "max_epochs", "anchor_mode",
                      "samples_per_class", "centroid_includes_query", "include_vmf", "validation_fraction"});
        t.read_enum("mode", c.train.mode, train_mode_from_string);
        t.read("lambda", c.train.lambda);
        t.read("lr", c.train.lr);
        t.read("encoder_lr", c.train.encoder_lr);
        t.read("batch_size", c.train.batch_size);
        t.read("patience", c.train.patience);
        t.read("max_epochs", c.train.max_epochs);
        t.read_enum("anchor_mode", c.train.anchor_mode, anchor_mode_from_string);
        t.read("samples_per_class", c.train.samples_per_class);
        t.read("centroid_includes_query", c.train.centroid_includes_query);
        t.read("include_vmf", c.train.include_vmf);
        t.read("validation_fraction", c.train.validation_fraction);
    }
    if (root.has("lmcl")) {
        const auto l = root.object("lmcl");
        l.allow_only({"scale", "margin"});
        l.read("scale", c.lmcl.scale);
        l.read("margin", c.lmcl.margin);
    }
    if (root.has("head")) {
        const auto h = root.object("head");
        h.allow_only({"variant", "hidden"});
        h.read_enum("variant", c.head.variant, head_variant_from_string);
        h.read("hidden", c.head.hidden);
    }
    if (root.has("eval")) {
        const auto e = root.object("eval");
        e.allow_only({"ks", "methods", "num_bins", "binning", "clamp", "sue_k"});
        if (e.has("ks")) {
            c.eval.ks.clear();
            const Json& ks = e.at("ks");
            if (!ks.is_array()) throw FormatError("expected an array", e.path("ks"));
            for (std::size_t i = 0; i < ks.size(); ++i) {
                if (!ks[i].is_number_unsigned() || ks[i].get<std::uint64_t>() == 0) {
                    throw FormatError("K must be a positive integer", detail::index_path(e.path("ks"), i));
                }
                c.eval.ks.push_back(ks[i].get<std::size_t>());
            }
        }
        if (e.has("methods")) {
            c.eval.methods.clear();
            const Json& ms = e.at("methods");
            if (!ms.is_array()) throw FormatError("expected an array", e.path("methods"));
            for (std::size_t i = 0; i < ms.size(); ++i) {
                const std::string at = detail::index_path(e.path("methods"), i);
                if (!ms[i].is_string()) throw FormatError("expected a method name", at);
                try {
                    c.eval.methods.push_back(method_from_string(ms[i].get<std::string>()));
                } catch (const DomainError& err) {
                    throw FormatError(err.what(), at);
                }
            }
        }
        e.read("num_bins", c.eval.num_bins);
        e.read_enum("binning", c.eval.strategy, binning_from_string);
        if (e.has("clamp")) {
            const std::string v = e.string("clamp");
            if (v == "auto") {
                c.eval.clamp.reset();
            } else {
                try {
                    c.eval.clamp = clamp_from_string(v);
                } catch (const DomainError& err) {
                    throw FormatError(err.what(), e.path("clamp"));
                }
            }
        }
        if (e.has("sue_k")) c.eval.sue_k = static_cast<std::size_t>(e.integer("sue_k"));
    }
    if (root.has("seed")) {
        const Json& s = root.at("seed");
        if (!s.is_number_unsigned()) throw FormatError("seed must be a non-negative integer", "$.seed");
        c.apply_seed(s.get<std::uint64_t>());
    }
    try {
        c.validate();
    } catch (const DomainError& e) {
        throw FormatError(e.what(), "$");
    }
    return c;
}

inline RunConfig read_config(const std::filesystem::path& path) {
    return config_from_json(detail::parse_json(read_text(path), path.string()));
}

// ---------------------------------------------------------------------------
// model state

struct ModelState {
    std::optional<LinearEncoder> encoder;
    std::optional<PrototypeSet> prototypes;
    HeadParams head;
    bool head_outputs_variance = false;  ///< GNLL-trained head: output is sigma^2, not kappa
    AdamState head_optimizer;
    std::optional<AdamState> encoder_optimizer;
    std::optional<AdamState> prototype_optimizer;
};

namespace detail {

inline Json adam_json(const AdamState& s) {
    return {{"m", vector_json(s.m)}, {"v", vector_json(s.v)}, {"step", s.step}};
}

inline AdamState json_adam(const Json& j, const std::string& path) {
    const JsonObject o(j, path);
    o.allow_only({"m", "v", "step"});
    AdamState s;
    s.m = json_vector(o.at("m"), o.path("m"));
    s.v = json_vector(o.at("v"), o.path("v"));
    s.step = o.integer("step");
    if (s.m.size() != s.v.size()) throw FormatError("optimizer moments differ in length", o.path("v"));
    return s;
}

}  // namespace detail

inline Json model_json(const ModelState& m) {
    Json j;
    j["format"] = "kappa-sphere-model";
    j["version"] = kFormatVersion;
    Json h;
    h["variant"] = head_variant_name(m.head.variant);
    h["output"] = m.head_outputs_variance ? "sigma_sq" : "kappa";
    h["shape"] = Json::array({m.head.channels, m.head.height, m.head.width});
    h["gem_p"] = m.head.gem_p;
    h["train_gem_p"] = m.head.train_gem_p;
    h["proj_weights"] = detail::matrix_json(m.head.proj_weights);
    h["kappa_weights"] = detail::vector_json(m.head.kappa_weights);
    h["kappa_bias"] = m.head.kappa_bias;
    j["head"] = h;
    j["encoder"] = m.encoder ? detail::matrix_json(m.encoder->weights()) : Json(nullptr);
    j["prototypes"] = m.prototypes ? detail::matrix_json(m.prototypes->weights().transpose()) : Json(nullptr);
    Json opt;
    opt["head"] = detail::adam_json(m.head_optimizer);
    opt["encoder"] = m.encoder_optimizer ? detail::adam_json(*m.encoder_optimizer) : Json(nullptr);
    opt["prototypes"] = m.prototype_optimizer ? detail::adam_json(*m.prototype_optimizer) : Json(nullptr);
    j["optimizer"] = opt;
    return j;
}

inline ModelState model_from_json(const Json& j) {
    const detail::JsonObject o(j, "$");
    o.allow_only({"format", "version", "head", "encoder", "prototypes", "optimizer"});
    if (o.string("format") != "kappa-sphere-model") throw FormatError("not a model state file", "$.format");
    if (o.integer("version") != kFormatVersion) throw FormatError("unsupported model version", "$.version");
    ModelState m;
    const auto h = o.object("head");
    h.allow_only({"variant", "output", "shape", "gem_p", "train_gem_p", "proj_weights", "kappa_weights", "kappa_bias"});
    h.read_enum("variant", m.head.variant, head_variant_from_string);
    const std::string output = h.string("output");
    if (output != "kappa" && output != "sigma_sq") throw FormatError("output must be kappa or sigma_sq", h.path("output"));
    m.head_outputs_variance = output == "sigma_sq";
    const auto shape = detail::number_array(h.at("shape"), h.path("shape"));
    if (shape.size() != 3) throw FormatError("shape must be [c, h, w]", h.path("shape"));
    m.head.channels = static_cast<int>(shape[0]);
    m.head.height = static_cast<int>(shape[1]);
    m.head.width = static_cast<int>(shape[2]);
    m.head.gem_p = h.number("gem_p");
    m.head.train_gem_p = h.boolean("train_gem_p");
    const Json& proj = h.at("proj_weights");
    if (proj.is_array() && !proj.empty()) m.head.proj_weights = detail::json_matrix(proj, h.path("proj_weights"));
    m.head.kappa_weights = detail::json_vector(h.at("kappa_weights"), h.path("kappa_weights"));
    m.head.kappa_bias = h.number("kappa_bias");
    try {
        m.head.validate();
    } catch (const DomainError& e) {
        throw FormatError(e.what(), "$.head");
    }
    if (o.has("encoder")) m.encoder = LinearEncoder(detail::json_matrix(o.at("encoder"), "$.encoder"));
    if (o.has("prototypes")) {
        try {
            m.prototypes = PrototypeSet::from_matrix(detail::json_matrix(o.at("prototypes"), "$.prototypes").transpose());
        } catch (const DomainError& e) {
            throw FormatError(e.what(), "$.prototypes");
        }
    }
    const auto opt = o.object("optimizer");
    opt.allow_only({"head", "encoder", "prototypes"});
    m.head_optimizer = detail::json_adam(opt.at("head"), opt.path("head"));
    if (opt.has("encoder")) m.encoder_optimizer = detail::json_adam(opt.at("encoder"), opt.path("encoder"));
    if (opt.has("prototypes")) m.prototype_optimizer = detail::json_adam(opt.at("prototypes"), opt.path("prototypes"));
    return m;
}

inline void write_model(const std::filesystem::path& path, const ModelState& m) {
    atomic_write(path, model_json(m).dump(1) + "\n");
}

inline ModelState read_model(const std::filesystem::path& path) {
    return model_from_json(detail::parse_json(read_text(path), path.string()));
}

// ---------------------------------------------------------------------------
// reports

inline constexpr const char* kReportSchema = "kappa-sphere-report";

inline Json calibration_json(const CalibrationReport& r) {
    Json j;
    j["k"] = r.k;
    j["ece"] = r.ece;
    j["total"] = r.total;
    j["num_bins"] = r.num_bins;
    j["binning"] = to_string(r.strategy);
    j["clamp"] = to_string(r.clamp);
    j["clamp_low"] = r.clamp_low;
    j["clamp_high"] = r.clamp_high;
    j["degenerate"] = r.degenerate;
    Json bins = Json::array();
    for (const auto& b : r.bins) {
        bins.push_back({{"index", b.index}, {"count", b.count}, {"observed", b.observed}, {"expected", b.expected}});
    }
    j["bins"] = bins;
    return j;
}

inline Json report_json(const EvalReport& rep, const std::string& command, const RunConfig& cfg,
                        const std::string& ground_truth) {
    Json j;
    j["schema"] = kReportSchema;
    j["version"] = kFormatVersion;
    j["command"] = command;
    j["seed"] = cfg.seed;
    j["config"] = config_json(cfg);
    j["level"] = rep.level;
    j["ground_truth"] = ground_truth;
    j["num_queries"] = rep.num_queries;
    j["num_references"] = rep.num_references;
    Json recall = Json::array();
    for (std::size_t i = 0; i < rep.ks.size(); ++i) recall.push_back({{"k", rep.ks[i]}, {"recall", rep.recall[i]}});
    j["recall"] = recall;
    Json methods = Json::array();
    for (const auto& m : rep.methods) {
        Json mj;
        mj["method"] = to_string(m.method);
        mj["unsupported"] = m.unsupported ? Json(*m.unsupported) : Json(nullptr);
        Json per_k = Json::array();
        for (const auto& cr : m.per_k) per_k.push_back(calibration_json(cr));
        mj["per_k"] = per_k;
        methods.push_back(mj);
    }
    j["methods"] = methods;
    return j;
}

inline CalibrationReport calibration_from_json(const Json& j, const std::string& path, const std::string& method,
                                               const std::string& level) {
    const detail::JsonObject o(j, path);
    o.allow_only({"k", "ece", "total", "num_bins", "binning", "clamp", "clamp_low", "clamp_high", "degenerate", "bins"});
    CalibrationReport r;
    r.method = method;
    r.level = level;
    r.k = static_cast<std::size_t>(o.integer("k"));
    r.ece = o.number("ece");
    r.total = static_cast<std::size_t>(o.integer("total"));
    r.num_bins = static_cast<int>(o.integer("num_bins"));
    o.read_enum("binning", r.strategy, binning_from_string);
    o.read_enum("clamp", r.clamp, clamp_from_string);
    r.clamp_low = o.number("clamp_low");
    r.clamp_high = o.number("clamp_high");
    r.degenerate = static_cast<std::size_t>(o.integer("degenerate"));
    const Json& bins = o.at("bins");
    if (!bins.is_array()) throw FormatError("expected an array", o.path("bins"));
    for (std::size_t i = 0; i < bins.size(); ++i) {
        const detail::JsonObject b(bins[i], detail::index_path(o.path("bins"), i));
        b.allow_only({"index", "count", "observed", "expected"});
        r.bins.push_back({static_cast<int>(b.integer("index")), static_cast<std::size_t>(b.integer("count")),
                          b.number("observed"), b.number("expected")});
    }
    return r;
}

/// Inverse of report_json for the report proper; the embedded config is checked, not returned.
inline EvalReport report_from_json(const Json& j) {
    const detail::JsonObject o(j, "$");
    o.allow_only({"schema", "version", "command", "seed", "config", "level", "ground_truth", "num_queries",
                  "num_references", "recall", "methods"});
    if (o.string("schema") != kReportSchema) throw FormatError("not a report file", "$.schema");
    if (o.integer("version") != kFormatVersion) throw FormatError("unsupported report version", "$.version");
    config_from_json(o.at("config"));
    EvalReport rep;
    rep.level = o.string("level");
    rep.num_queries = static_cast<std::size_t>(o.integer("num_queries"));
    rep.num_references = static_cast<std::size_t>(o.integer("num_references"));
    const Json& recall = o.at("recall");
    if (!recall.is_array()) throw FormatError("expected an array", "$.recall");
    for (std::size_t i = 0; i < recall.size(); ++i) {
        const detail::JsonObject r(recall[i], detail::index_path("$.recall", i));
        r.allow_only({"k", "recall"});
        rep.ks.push_back(static_cast<std::size_t>(r.integer("k")));
        rep.recall.push_back(r.number("recall"));
    }
    const Json& methods = o.at("methods");
    if (!methods.is_array()) throw FormatError("expected an array", "$.methods");
    for (std::size_t i = 0; i < methods.size(); ++i) {
        const std::string at = detail::index_path("$.methods", i);
        const detail::JsonObject m(methods[i], at);
        m.allow_only({"method", "unsupported", "per_k"});
        MethodReport mr;
        m.read_enum("method", mr.method, method_from_string);
        if (m.has("unsupported")) mr.unsupported = m.string("unsupported");
        const Json& per_k = m.at("per_k");
        if (!per_k.is_array()) throw FormatError("expected an array", m.path("per_k"));
        for (std::size_t k = 0; k < per_k.size(); ++k) {
            mr.per_k.push_back(calibration_from_json(per_k[k], detail::index_path(m.path("per_k"), k),
                                                     to_string(mr.method), rep.level));
        }
        rep.methods.push_back(std::move(mr));
    }
    return rep;
}

inline EvalReport read_report(const std::filesystem::path& path) {
    return report_from_json(detail::parse_json(read_text(path), path.string()));
}

/// One row per (method, K, bin).
inline std::string bins_csv(const EvalReport& rep) {
    std::ostringstream os;
    os.precision(17);
    os << "level,method,k,bin,count,observed,expected\n";
    for (const auto& m : rep.methods) {
        for (const auto& cr : m.per_k) {
            for (const auto& b : cr.bins) {
                os << rep.level << ',' << to_string(m.method) << ',' << cr.k << ',' << b.index << ',' << b.count << ','
                   << b.observed << ',' << b.expected << '\n';
            }
        }
    }
    return os.str();
}

/// Plain-text table: Recall@K then ECE@K per method.
inline std::string report_table(const EvalReport& rep) {
    std::ostringstream os;
    char buf[64];
    os << "level: " << rep.level << "  queries: " << rep.num_queries << "  references: " << rep.num_references << '\n';
    os << "method        ";
    for (std::size_t k : rep.ks) {
        std::snprintf(buf, sizeof buf, "   K=%-4zu", k);
        os << buf;
    }
    os << "\nrecall        ";
    for (double r : rep.recall) {
        std::snprintf(buf, sizeof buf, " %8.4f", r);
        os << buf;
    }
    os << '\n';
    for (const auto& m : rep.methods) {
        std::snprintf(buf, sizeof buf, "%-14s", to_string(m.method).c_str());
        os << buf;
        if (m.unsupported) {
            os << " unsupported: " << *m.unsupported << '\n';
            continue;
        }
        for (const auto& cr : m.per_k) {
            std::snprintf(buf, sizeof buf, " %8.4f", cr.ece);
            os << buf;
        }
        os << '\n';
    }
    return os.str();
}

/// Reliability diagram: observed rate per bin as bars against the expected levels.
inline std::string reliability_svg(const CalibrationReport& r, const std::string& title) {
    const double w = 420.0;
    const double h = 320.0;
    const double left = 50.0;
    const double top = 30.0;
    const double plot_w = 340.0;
    const double plot_h = 240.0;
    std::ostringstream os;
    os.precision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << left << "\" y=\"18\">" << title << " (K=" << r.k << ", ECE=" << r.ece << ")</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << plot_w << "\" height=\"" << plot_h
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    const double bw = plot_w / std::max(1, r.num_bins);
    for (const auto& b : r.bins) {
        const double x = left + (b.index - 1) * bw;
        const double bar = b.observed * plot_h;
        if (b.count > 0) {
            os << "<rect x=\"" << x + 2 << "\" y=\"" << top + plot_h - bar << "\" width=\"" << bw - 4 << "\" height=\""
               << bar << "\" fill=\"steelblue\"/>\n";
        }
        const double ey = top + plot_h - b.expected * plot_h;
        os << "<line x1=\"" << x << "\" y1=\"" << ey << "\" x2=\"" << x + bw << "\" y2=\"" << ey
           << "\" stroke=\"crimson\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << x + bw / 2 - 4 << "\" y=\"" << top + plot_h + 14 << "\">" << b.index << "</text>\n";
    }
    os << "<text x=\"" << left << "\" y=\"" << h - 10 << "\">bin (1 = most certain); bars observed, lines expected</text>\n";
    os << "</svg>\n";
    return os.str();
}

}  // namespace kappa_sphere
