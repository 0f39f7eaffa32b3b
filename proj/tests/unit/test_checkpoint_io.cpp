#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "wmlab/checkpoint_io.hpp"
#include "wmlab/model.hpp"

using namespace wmlab;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("wmlab_ckpt_test_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const char* name) const { return (path / name).string(); }
};

ModelSpec small_spec() {
    ModelSpec s;
    s.kind = ModelKind::Mlp;
    s.input = {1, 4, 4};
    s.hidden = {6};
    s.num_classes = 3;
    return s;
}

Checkpoint make_model(std::uint64_t seed) {
    RngState rng(seed);
    Checkpoint ck = init_model(small_spec(), rng);
    ck.metadata["role"] = "unit-test";
    ck.metadata["seed"] = std::to_string(seed);
    return ck;
}

WatermarkSet make_keys() {
    WatermarkSet wm;
    wm.scheme = WatermarkScheme::Ood;
    RngState rng(5);
    wm.samples = Tensor({4, 1, 4, 4});
    for (std::size_t i = 0; i < wm.samples.size(); ++i) wm.samples[i] = rng.uniform01();
    wm.assigned_labels = {2, 0, 1, 1};
    wm.provenance = {{10, 2, false}, {11, 0, false}, {12, 1, false}, {13, 1, false}};
    wm.num_classes = 3;
    return wm;
}

} // namespace

TEST_CASE("checkpoint round trip is bit exact", "[checkpoint_io]") {
    TempDir tmp;
    Checkpoint ck = make_model(7);
    // exercise awkward doubles: denormal-ish, negative zero, exact halves
    ck.params[0] = -0.0;
    ck.params[1] = 1e-308;
    ck.params[2] = 0.5;

    save_checkpoint(ck, tmp.file("m.wm"));
    Checkpoint back = load_checkpoint(tmp.file("m.wm"));

    REQUIRE(back.spec.to_json() == ck.spec.to_json());
    REQUIRE(back.params.values() == ck.params.values());
    REQUIRE(std::signbit(back.params[0]));
    REQUIRE(back.metadata == ck.metadata);
    REQUIRE_FALSE(back.ew_temperature.has_value());
}

TEST_CASE("ew temperature survives the round trip", "[checkpoint_io]") {
    TempDir tmp;
    Checkpoint ck = make_model(7);
    ck.ew_temperature = 2.0;
    save_checkpoint(ck, tmp.file("ew.wm"));
    Checkpoint back = load_checkpoint(tmp.file("ew.wm"));
    REQUIRE(back.ew_temperature.has_value());
    REQUIRE(*back.ew_temperature == 2.0);
}

TEST_CASE("bundle carries the watermark section", "[checkpoint_io]") {
    TempDir tmp;
    Bundle b{make_model(9), make_keys()};
    save_bundle(b, tmp.file("b.wm"));
    Bundle back = load_bundle(tmp.file("b.wm"));

    REQUIRE(back.watermarks.has_value());
    const WatermarkSet& wm = *back.watermarks;
    REQUIRE(wm.scheme == WatermarkScheme::Ood);
    REQUIRE(wm.samples.shape() == b.watermarks->samples.shape());
    REQUIRE(wm.samples.values() == b.watermarks->samples.values());
    REQUIRE(wm.assigned_labels == b.watermarks->assigned_labels);
    REQUIRE(wm.num_classes == 3);
    REQUIRE(wm.provenance.size() == 4);
    REQUIRE(wm.provenance[2].source_index == 12);
    REQUIRE(wm.provenance[2].true_label == 1);
    REQUIRE_FALSE(wm.provenance[2].true_adversary);

    // load_checkpoint on the same file drops the keys
    Checkpoint only = load_checkpoint(tmp.file("b.wm"));
    REQUIRE(only.params.values() == b.model.params.values());
}

TEST_CASE("empty provenance round trips as empty", "[checkpoint_io]") {
    TempDir tmp;
    WatermarkSet wm = make_keys();
    wm.provenance.clear();
    Bundle b{make_model(9), wm};
    save_bundle(b, tmp.file("np.wm"));
    Bundle back = load_bundle(tmp.file("np.wm"));
    REQUIRE(back.watermarks->provenance.empty());
}

TEST_CASE("loader rejects corrupt checkpoint files", "[checkpoint_io]") {
    TempDir tmp;
    save_checkpoint(make_model(3), tmp.file("good.wm"));

    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_checkpoint(tmp.file("absent.wm")), IoError);
    }
    SECTION("bad magic") {
        std::fstream f(tmp.file("good.wm"), std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXX", 4);
        f.close();
        REQUIRE_THROWS_AS(load_checkpoint(tmp.file("good.wm")), BadMagicError);
    }
    SECTION("unsupported version") {
        std::fstream f(tmp.file("good.wm"), std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        const char v2[4] = {2, 0, 0, 0}; // little-endian 2
        f.write(v2, 4);
        f.close();
        REQUIRE_THROWS_AS(load_checkpoint(tmp.file("good.wm")), VersionError);
    }
    SECTION("truncated parameter block") {
        auto size = std::filesystem::file_size(tmp.file("good.wm"));
        std::filesystem::resize_file(tmp.file("good.wm"), size - 30);
        REQUIRE_THROWS_AS(load_checkpoint(tmp.file("good.wm")), TruncationError);
    }
    SECTION("empty file") {
        std::ofstream(tmp.file("empty.wm"), std::ios::binary).close();
        REQUIRE_THROWS_AS(load_checkpoint(tmp.file("empty.wm")), TruncationError);
    }
    SECTION("spec block is not json") {
        // overwrite the first byte of the spec blob (offset 4+4+8 = 16)
        std::fstream f(tmp.file("good.wm"), std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(16);
        f.put('\x01');
        f.close();
        REQUIRE_THROWS_AS(load_checkpoint(tmp.file("good.wm")), FormatError);
    }
}

TEST_CASE("save refuses models that do not match their spec", "[checkpoint_io]") {
    TempDir tmp;
    Checkpoint ck = make_model(3);

    SECTION("non-finite parameter") {
        ck.params[5] = std::numeric_limits<double>::infinity();
        REQUIRE_THROWS_AS(save_checkpoint(ck, tmp.file("x.wm")), NumericError);
    }
    SECTION("invalid watermark section") {
        WatermarkSet wm = make_keys();
        wm.assigned_labels[0] = 99;
        REQUIRE_THROWS_AS(save_bundle(Bundle{ck, wm}, tmp.file("x.wm")), ValueError);
    }
    SECTION("unwritable path") {
        REQUIRE_THROWS_AS(save_checkpoint(ck, (tmp.path / "no_dir" / "x.wm").string()), IoError);
    }
}
