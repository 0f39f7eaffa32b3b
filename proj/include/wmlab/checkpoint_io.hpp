#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wmlab/error.hpp"
#include "wmlab/model.hpp"
#include "wmlab/watermark_set.hpp"

namespace wmlab {

// A checkpoint file: model plus, optionally, the owner's watermark key set.
struct Bundle {
    Checkpoint model;
    std::optional<WatermarkSet> watermarks;
};

namespace detail {

// All multi-byte fields are little-endian on disk regardless of host order,
// so files round-trip bit-exactly across platforms.

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw IoError("checkpoint: write failed");
}

inline void put_u8(std::ostream& os, std::uint8_t v) { put_bytes(os, &v, 1); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_i32(std::ostream& os, std::int32_t v) { put_u32(os, static_cast<std::uint32_t>(v)); }

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_blob(std::ostream& os, const std::string& s) {
    put_u64(os, s.size());
    if (!s.empty()) put_bytes(os, s.data(), s.size());
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
        throw TruncationError(detail::cat("checkpoint: file ends inside ", what));
    }
}

inline std::uint8_t get_u8(std::istream& is, const char* what) {
    std::uint8_t v = 0;
    get_bytes(is, &v, 1, what);
    return v;
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint8_t b[4];
    get_bytes(is, b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
    const std::uint64_t lo = get_u32(is, what);
    const std::uint64_t hi = get_u32(is, what);
    return lo | (hi << 32);
}

inline std::int32_t get_i32(std::istream& is, const char* what) {
    return static_cast<std::int32_t>(get_u32(is, what));
}

inline double get_f64(std::istream& is, const char* what) {
    return std::bit_cast<double>(get_u64(is, what));
}

inline std::string get_blob(std::istream& is, const char* what) {
    const std::uint64_t n = get_u64(is, what);
    if (n > (1ull << 32)) throw FormatError(detail::cat("checkpoint: unreasonable ", what, " length ", n));
    std::string s(static_cast<std::size_t>(n), '\0');
    if (n) get_bytes(is, s.data(), static_cast<std::size_t>(n), what);
    return s;
}

} // namespace detail

inline constexpr char kCheckpointMagic[4] = {'W', 'M', 'F', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_bundle(const Bundle& bundle, const std::string& path) {
    bundle.model.spec.validate();
    if (bundle.model.params.size() != ParamVector(make_layout(bundle.model.spec)).size()) {
        throw ShapeError("save_bundle: parameter vector does not match the model spec");
    }
    for (double v : bundle.model.params.values()) {
        if (!std::isfinite(v)) throw NumericError("save_bundle: non-finite parameter");
    }
    if (bundle.watermarks) bundle.watermarks->validate();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(detail::cat("save_bundle: cannot open '", path, "' for writing"));

    detail::put_bytes(os, kCheckpointMagic, 4);
    detail::put_u32(os, kCheckpointVersion);

    nlohmann::json spec_json = {{"model", bundle.model.spec.to_json()}};
    if (bundle.model.ew_temperature) {
        spec_json["ew_temperature"] = *bundle.model.ew_temperature;
    } else {
        spec_json["ew_temperature"] = nullptr;
    }
    detail::put_blob(os, spec_json.dump());

    detail::put_u64(os, bundle.model.params.size());
    for (double v : bundle.model.params.values()) detail::put_f64(os, v);

    detail::put_blob(os, nlohmann::json(bundle.model.metadata).dump());

    detail::put_u8(os, bundle.watermarks ? 1 : 0);
    if (bundle.watermarks) {
        const WatermarkSet& wm = *bundle.watermarks;
        detail::put_u32(os, static_cast<std::uint32_t>(wm.scheme));
        detail::put_u32(os, static_cast<std::uint32_t>(wm.samples.rank()));
        for (int i = 0; i < wm.samples.rank(); ++i) detail::put_u32(os, static_cast<std::uint32_t>(wm.samples.dim(i)));
        for (double v : wm.samples.values()) detail::put_f64(os, v);
        for (int label : wm.assigned_labels) detail::put_i32(os, label);
        detail::put_u8(os, wm.provenance.empty() ? 0 : 1);
        for (const auto& p : wm.provenance) {
            detail::put_i32(os, p.source_index);
            detail::put_i32(os, p.true_label);
            detail::put_u8(os, p.true_adversary ? 1 : 0);
        }
        detail::put_u32(os, static_cast<std::uint32_t>(wm.num_classes));
    }
    os.flush();
    if (!os) throw IoError(detail::cat("save_bundle: write to '", path, "' failed"));
}

inline Bundle load_bundle(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(detail::cat("load_bundle: cannot open '", path, "'"));

    char magic[4];
    detail::get_bytes(is, magic, 4, "magic");
    if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
        throw BadMagicError(detail::cat("load_bundle: bad magic in '", path, "'"));
    }
    const std::uint32_t version = detail::get_u32(is, "version");
    if (version != kCheckpointVersion) {
        throw VersionError(detail::cat("load_bundle: unsupported version ", version));
    }

    Bundle bundle;
    nlohmann::json spec_json;
    try {
        spec_json = nlohmann::json::parse(detail::get_blob(is, "spec json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(detail::cat("load_bundle: spec block is not valid JSON: ", e.what()));
    }
    bundle.model.spec = ModelSpec::from_json(spec_json.at("model"));
    if (spec_json.contains("ew_temperature") && !spec_json["ew_temperature"].is_null()) {
        bundle.model.ew_temperature = spec_json["ew_temperature"].get<double>();
    }

    bundle.model.params = ParamVector(make_layout(bundle.model.spec));
    const std::uint64_t declared = detail::get_u64(is, "param count");
    if (declared != bundle.model.params.size()) {
        throw FormatError(detail::cat("load_bundle: file declares ", declared, " parameters, model spec expects ",
                                      bundle.model.params.size()));
    }
    for (std::size_t i = 0; i < bundle.model.params.size(); ++i) {
        bundle.model.params[i] = detail::get_f64(is, "parameters");
    }

    try {
        const nlohmann::json meta = nlohmann::json::parse(detail::get_blob(is, "metadata json"));
        bundle.model.metadata = meta.get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(detail::cat("load_bundle: metadata block is not a string map: ", e.what()));
    }

    const std::uint8_t wm_flag = detail::get_u8(is, "watermark flag");
    if (wm_flag > 1) throw FormatError("load_bundle: watermark flag must be 0 or 1");
    if (wm_flag) {
        WatermarkSet wm;
        const std::uint32_t scheme = detail::get_u32(is, "watermark scheme");
        if (scheme > 3) throw FormatError(detail::cat("load_bundle: bad watermark scheme tag ", scheme));
        wm.scheme = static_cast<WatermarkScheme>(scheme);
        const std::uint32_t rank = detail::get_u32(is, "watermark rank");
        if (rank != 4) throw FormatError(detail::cat("load_bundle: watermark samples must be rank 4, got ", rank));
        std::vector<int> shape(rank);
        std::size_t count = 1;
        for (auto& d : shape) {
            d = static_cast<int>(detail::get_u32(is, "watermark shape"));
            if (d <= 0 || d > (1 << 24)) throw FormatError("load_bundle: bad watermark dim");
            count *= static_cast<std::size_t>(d);
        }
        std::vector<double> data(count);
        for (auto& v : data) v = detail::get_f64(is, "watermark samples");
        wm.samples = Tensor(shape, std::move(data));
        wm.assigned_labels.resize(static_cast<std::size_t>(shape[0]));
        for (auto& label : wm.assigned_labels) label = detail::get_i32(is, "watermark labels");
        const std::uint8_t prov_flag = detail::get_u8(is, "provenance flag");
        if (prov_flag > 1) throw FormatError("load_bundle: provenance flag must be 0 or 1");
        if (prov_flag) {
            wm.provenance.resize(static_cast<std::size_t>(shape[0]));
            for (auto& p : wm.provenance) {
                p.source_index = detail::get_i32(is, "provenance");
                p.true_label = detail::get_i32(is, "provenance");
                p.true_adversary = detail::get_u8(is, "provenance") != 0;
            }
        }
        wm.num_classes = static_cast<int>(detail::get_u32(is, "watermark classes"));
        wm.validate();
        bundle.watermarks = std::move(wm);
    }
    return bundle;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    save_bundle(Bundle{ck, std::nullopt}, path);
}

inline Checkpoint load_checkpoint(const std::string& path) { return load_bundle(path).model; }

} // namespace wmlab
