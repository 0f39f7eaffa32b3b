#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "wmlab/harness.hpp"

using namespace wmlab;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("wmlab_harness_test_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const char* name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

CellResult make_cell(const char* scheme, const char* method, double fraction, std::uint64_t seed, double test,
                     double wm, bool owned, double seconds = 0.5) {
    CellResult c;
    c.key = {scheme, method, fraction, seed, -1, -1};
    c.ok = true;
    c.test_acc = test;
    c.wm_acc = wm;
    c.gamma = 0.3;
    c.owned = owned;
    c.baseline_test_acc = 0.9;
    c.seconds = seconds;
    EpochStats st;
    st.epoch = 0;
    st.lr = 0.3;
    st.train_acc = 0.8;
    c.history.push_back(st);
    return c;
}

} // namespace

TEST_CASE("experiment config round trips through json", "[harness]") {
    ExperimentConfig def;
    const nlohmann::json j = def.to_json();
    ExperimentConfig back = ExperimentConfig::from_json(j);
    REQUIRE(back.to_json() == j);

    // defaults follow the documented schema
    REQUIRE(j.at("data").at("num_classes") == 4);
    REQUIRE(j.at("data").at("image") == nlohmann::json::array({1, 8, 8}));
    REQUIRE(j.at("watermark").at("scheme") == "pattern");
    REQUIRE(j.at("removal").at("method") == "basic");
    REQUIRE(j.at("removal").at("schedule_kind") == "step_decay");
    REQUIRE(j.at("sweep").at("cell_budget_seconds") == 120.0);
    REQUIRE(j.at("verify").at("margin") == 0.05);
}

TEST_CASE("partial configs inherit defaults", "[harness]") {
    nlohmann::json user = {{"data", {{"num_classes", 3}}}, {"model", {{"num_classes", 3}}}};
    ExperimentConfig cfg = ExperimentConfig::from_json(user);
    REQUIRE(cfg.data.num_classes == 3);
    REQUIRE(cfg.model.num_classes == 3);
    REQUIRE(cfg.data.train_per_class == ExperimentConfig{}.data.train_per_class);
    REQUIRE(cfg.embed.lr == ExperimentConfig{}.embed.lr);
}

TEST_CASE("unknown config keys are named in the error", "[harness]") {
    nlohmann::json user = {{"data", {{"num_classse", 3}}}};
    REQUIRE_THROWS_WITH(ExperimentConfig::from_json(user),
                        Catch::Matchers::ContainsSubstring("data.num_classse"));
    nlohmann::json top = {{"dta", nlohmann::json::object()}};
    REQUIRE_THROWS_WITH(ExperimentConfig::from_json(top), Catch::Matchers::ContainsSubstring("dta"));
    nlohmann::json deep = {{"removal", {{"schedle", "constant"}}}};
    REQUIRE_THROWS_AS(ExperimentConfig::from_json(deep), ConfigError);
}

TEST_CASE("config type mismatches are rejected", "[harness]") {
    nlohmann::json user = {{"data", {{"num_classes", "four"}}}};
    REQUIRE_THROWS_AS(ExperimentConfig::from_json(user), ConfigError);
    nlohmann::json arr = {{"data", {{"image", 8}}}};
    REQUIRE_THROWS_AS(ExperimentConfig::from_json(arr), ConfigError);
}

TEST_CASE("config validation catches inconsistent settings", "[harness]") {
    SECTION("class count mismatch") {
        nlohmann::json user = {{"data", {{"num_classes", 5}}}};
        REQUIRE_THROWS_WITH(ExperimentConfig::from_json(user),
                            Catch::Matchers::ContainsSubstring("num_classes"));
    }
    SECTION("unknown scheme") {
        nlohmann::json user = {{"watermark", {{"scheme", "banner"}}}};
        REQUIRE_THROWS_AS(ExperimentConfig::from_json(user), ValueError);
    }
    SECTION("unknown removal method") {
        nlohmann::json user = {{"removal", {{"method", "zap"}}}};
        REQUIRE_THROWS_WITH(ExperimentConfig::from_json(user), Catch::Matchers::ContainsSubstring("zap"));
    }
    SECTION("gamma at or above one") {
        nlohmann::json user = {{"verify", {{"gamma", 1.0}}}};
        REQUIRE_THROWS_AS(ExperimentConfig::from_json(user), ConfigError);
    }
    SECTION("bad sweep fraction") {
        nlohmann::json user = {{"sweep", {{"fractions", {0.2, 1.5}}}}};
        REQUIRE_THROWS_AS(ExperimentConfig::from_json(user), ConfigError);
    }
    SECTION("empty seeds") {
        nlohmann::json user = {{"sweep", {{"seeds", nlohmann::json::array()}}}};
        REQUIRE_THROWS_AS(ExperimentConfig::from_json(user), ConfigError);
    }
    SECTION("non-positive budget") {
        nlohmann::json user = {{"sweep", {{"cell_budget_seconds", 0.0}}}};
        REQUIRE_THROWS_AS(ExperimentConfig::from_json(user), ConfigError);
    }
}

TEST_CASE("overrides follow dotted paths with schema checking", "[harness]") {
    nlohmann::json cfg = nlohmann::json::object();
    apply_override(cfg, "removal.epochs=5");
    REQUIRE(cfg.at("removal").at("epochs") == 5);

    apply_override(cfg, "watermark.scheme=ood");
    REQUIRE(cfg.at("watermark").at("scheme") == "ood"); // bare word falls back to string

    apply_override(cfg, "sweep.fractions=[0.1,0.9]");
    REQUIRE(cfg.at("sweep").at("fractions") == nlohmann::json::array({0.1, 0.9}));

    apply_override(cfg, "verify.gamma=0.45");
    REQUIRE(cfg.at("verify").at("gamma") == 0.45);

    REQUIRE_THROWS_AS(apply_override(cfg, "no_equals_sign"), ConfigError);
    REQUIRE_THROWS_WITH(apply_override(cfg, "removal.epocsh=5"), Catch::Matchers::ContainsSubstring("removal.epocsh"));
    REQUIRE_THROWS_AS(apply_override(cfg, "nonsense.path=1"), ConfigError);

    // the overridden config still parses
    ExperimentConfig parsed = ExperimentConfig::from_json(cfg);
    REQUIRE(parsed.removal.epochs == 5);
    REQUIRE(parsed.watermark.scheme == WatermarkScheme::Ood);
}

TEST_CASE("derived rng streams separate schemes and seeds", "[harness]") {
    RngState a = derived_rng(11, WatermarkScheme::Pattern, 1);
    RngState b = derived_rng(11, WatermarkScheme::Pattern, 1);
    RngState c = derived_rng(11, WatermarkScheme::Ood, 1);
    RngState d = derived_rng(11, WatermarkScheme::Pattern, 2);
    const std::uint64_t va = a.next_u64();
    REQUIRE(va == b.next_u64());
    REQUIRE(va != c.next_u64());
    REQUIRE(va != d.next_u64());
}

TEST_CASE("cell removal config resolves per-method settings", "[harness]") {
    ExperimentConfig cfg;

    SECTION("basic: no pool, no penalty, derived period") {
        RemovalConfig rc = cell_removal_config(cfg, "basic", WatermarkScheme::Pattern, 1, 1200, 10000);
        REQUIRE(rc.lambda == 0.0);
        REQUIRE(rc.unlabeled_per_batch == 0);
        REQUIRE(rc.schedule.initial == defaults::kRemovalInitialLr);
        // 12 steps/epoch * 20 epochs = 240 steps; 240 / 15 = 16
        REQUIRE(rc.schedule.period == 16);
        REQUIRE(rc.mode == TuneMode::Ftal);
    }
    SECTION("the reparameterized family resolves its own initial rate") {
        RemovalConfig rc = cell_removal_config(cfg, "basic", WatermarkScheme::Ew, 1, 1200, 10000);
        REQUIRE(rc.schedule.initial == defaults::kRemovalInitialLrEw);
        cfg.removal.initial = 0.05; // an explicit rate still wins
        RemovalConfig rc2 = cell_removal_config(cfg, "basic", WatermarkScheme::Ew, 1, 1200, 10000);
        REQUIRE(rc2.schedule.initial == 0.05);
    }
    SECTION("ewc gets the per-scheme default lambda") {
        RemovalConfig rc = cell_removal_config(cfg, "ewc", WatermarkScheme::Ood, 1, 1200, 10000);
        REQUIRE(rc.lambda == defaults::lambda_for(WatermarkScheme::Ood));
        REQUIRE(rc.unlabeled_per_batch == 0);
    }
    SECTION("explicit lambda wins") {
        cfg.removal.lambda = 7.5;
        RemovalConfig rc = cell_removal_config(cfg, "ewc", WatermarkScheme::Ood, 1, 1200, 10000);
        REQUIRE(rc.lambda == 7.5);
    }
    SECTION("au pulls pool rows into every batch") {
        RemovalConfig rc = cell_removal_config(cfg, "au", WatermarkScheme::Pattern, 1, 1200, 10000);
        REQUIRE(rc.unlabeled_per_batch == cfg.removal.unlabeled_per_batch);
        REQUIRE(rc.lambda == 0.0);
    }
    SECTION("ewc_au combines both") {
        RemovalConfig rc = cell_removal_config(cfg, "ewc_au", WatermarkScheme::Ew, 1, 1200, 10000);
        REQUIRE(rc.lambda == defaults::lambda_for(WatermarkScheme::Ew));
        REQUIRE(rc.unlabeled_per_batch == cfg.removal.unlabeled_per_batch);
    }
    SECTION("fresh-model methods force full tuning mode") {
        cfg.removal.mode = "rtal";
        RemovalConfig rc = cell_removal_config(cfg, "fs", WatermarkScheme::Pattern, 1, 1200, 10000);
        REQUIRE(rc.mode == TuneMode::Ftal);
        RemovalConfig rc2 = cell_removal_config(cfg, "basic", WatermarkScheme::Pattern, 1, 1200, 10000);
        REQUIRE(rc2.mode == TuneMode::Rtal);
    }
    SECTION("distill switches the label mode") {
        RemovalConfig rc = cell_removal_config(cfg, "distill", WatermarkScheme::Pattern, 1, 1200, 10000);
        REQUIRE(rc.label_mode == LabelMode::Distill);
        REQUIRE(rc.unlabeled_per_batch > 0);
    }
    SECTION("explicit period and initial win") {
        cfg.removal.period = 7;
        cfg.removal.initial = 0.11;
        RemovalConfig rc = cell_removal_config(cfg, "basic", WatermarkScheme::Pattern, 1, 1200, 10000);
        REQUIRE(rc.schedule.period == 7);
        REQUIRE(rc.schedule.initial == 0.11);
    }
    SECTION("pool-only cells derive the period from pool batches") {
        RemovalConfig rc = cell_removal_config(cfg, "au", WatermarkScheme::Pattern, 1, 0, 1000);
        // 10 steps/epoch * 20 epochs = 200 steps; 200 / 15 = 13
        REQUIRE(rc.schedule.period == 13);
    }
    SECTION("seeds separate methods and schemes deterministically") {
        RemovalConfig a = cell_removal_config(cfg, "basic", WatermarkScheme::Pattern, 1, 1200, 0);
        RemovalConfig b = cell_removal_config(cfg, "basic", WatermarkScheme::Pattern, 1, 1200, 0);
        RemovalConfig c = cell_removal_config(cfg, "ewc", WatermarkScheme::Pattern, 1, 1200, 0);
        RemovalConfig d = cell_removal_config(cfg, "basic", WatermarkScheme::Ood, 1, 1200, 0);
        REQUIRE(a.seed == b.seed);
        REQUIRE(a.seed != c.seed);
        REQUIRE(a.seed != d.seed);
    }
}

TEST_CASE("format_double emits shortest round-trip decimals", "[harness]") {
    REQUIRE(format_double(0.5) == "0.5");
    REQUIRE(format_double(0.25) == "0.25");
    REQUIRE(format_double(1.0) == "1");
    REQUIRE(format_double(0.0) == "0");
    REQUIRE(format_double(std::numeric_limits<double>::quiet_NaN()) == "nan");
    for (double v : {0.1, 1.0 / 3.0, 0.875, 123.456, 1e-9}) {
        REQUIRE(std::stod(format_double(v)) == v);
    }
}

TEST_CASE("raw csv is sorted, complete-cells-only, and byte deterministic", "[harness]") {
    TempDir tmp;
    SweepResult r;
    r.cells.push_back(make_cell("pattern", "basic", 0.8, 2, 0.7, 0.4, true));
    r.cells.push_back(make_cell("pattern", "basic", 0.8, 1, 0.5, 0.2, false));
    CellResult failed = make_cell("ood", "basic", 0.8, 1, 0, 0, false);
    failed.ok = false;
    failed.error = "boom";
    r.cells.push_back(failed);

    write_raw_csv(r, tmp.file("raw.csv"));
    const std::string content = slurp(tmp.file("raw.csv"));
    const std::string want =
        "scheme,method,fraction,seed,m_fisher,pool_size,test_acc,wm_acc,gamma,owned\n"
        "pattern,basic,0.8,1,-1,-1,0.5,0.2,0.3,0\n"
        "pattern,basic,0.8,2,-1,-1,0.7,0.4,0.3,1\n";
    REQUIRE(content == want);

    // reversing the cell order must not change a byte
    std::swap(r.cells[0], r.cells[1]);
    write_raw_csv(r, tmp.file("raw2.csv"));
    REQUIRE(slurp(tmp.file("raw2.csv")) == want);

    // timing keeps every cell including failures
    write_timing_csv(r, tmp.file("timing.csv"));
    const std::string timing = slurp(tmp.file("timing.csv"));
    REQUIRE(timing.find("scheme,method,fraction,seed,m_fisher,pool_size,seconds,ok") == 0);
    REQUIRE(timing.find("ood,basic,0.8,1,-1,-1,0.5,0") != std::string::npos);
}

TEST_CASE("aggregate csv reports recomputable statistics", "[harness]") {
    TempDir tmp;
    SweepResult r;
    r.cells.push_back(make_cell("pattern", "basic", 0.8, 1, 0.5, 0.2, false));
    r.cells.push_back(make_cell("pattern", "basic", 0.8, 2, 0.75, 0.4, true));
    write_aggregate_csv(r, tmp.file("agg.csv"));

    std::ifstream is(tmp.file("agg.csv"));
    std::string header, row;
    std::getline(is, header);
    REQUIRE(header == "scheme,method,fraction,m_fisher,pool_size,n,test_mean,test_std,wm_mean,wm_std,owned_rate");
    std::getline(is, row);
    std::vector<std::string> fields;
    std::istringstream rs(row);
    std::string f;
    while (std::getline(rs, f, ',')) fields.push_back(f);
    REQUIRE(fields.size() == 11);
    REQUIRE(fields[0] == "pattern");
    REQUIRE(fields[5] == "2");
    REQUIRE(std::stod(fields[6]) == Catch::Approx(0.625).margin(1e-12));
    // sample std over {0.5, 0.75}
    REQUIRE(std::stod(fields[7]) == Catch::Approx(std::sqrt(2 * 0.125 * 0.125)).margin(1e-12));
    REQUIRE(std::stod(fields[8]) == Catch::Approx(0.3).margin(1e-12));
    REQUIRE(std::stod(fields[10]) == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("report json tracks gammas, failures, skips and budget violations", "[harness]") {
    ExperimentConfig cfg;
    cfg.sweep.cell_budget_seconds = 1.0;

    SweepResult r;
    r.config_echo = cfg.to_json();
    r.gamma["pattern"][1] = 0.31;
    r.cells.push_back(make_cell("pattern", "basic", 0.8, 1, 0.7, 0.4, true, 0.5));
    r.cells.push_back(make_cell("pattern", "ewc", 0.8, 1, 0.7, 0.4, true, 2.5)); // over budget
    CellResult failed = make_cell("pattern", "au", 0.8, 1, 0, 0, false);
    failed.ok = false;
    failed.error = "pool too small";
    r.cells.push_back(failed);
    r.skipped.push_back({{"pattern", "fs", 0.0, 1, -1, -1}, "no labeled data"});
    r.total_seconds = 3.5;

    const nlohmann::json j = build_report_json(r, cfg);
    REQUIRE(j.at("gamma").at("pattern").at("1") == 0.31);
    REQUIRE(j.at("cells").size() == 3);
    REQUIRE(j.at("cells")[2].at("ok") == false);
    REQUIRE(j.at("cells")[2].at("error") == "pool too small");
    REQUIRE(j.at("cells")[0].at("history").size() == 1);
    REQUIRE(j.at("skipped").size() == 1);
    REQUIRE(j.at("skipped")[0].at("reason") == "no labeled data");
    REQUIRE(j.at("budget_violations").size() == 1);
    REQUIRE(j.at("budget_violations")[0].at("method") == "ewc");
    REQUIRE(j.at("total_seconds") == 3.5);
}

TEST_CASE("markdown summary renders a table per scheme", "[harness]") {
    ExperimentConfig cfg;
    SweepResult r;
    r.config_echo = cfg.to_json();
    r.cells.push_back(make_cell("pattern", "basic", 0.2, 1, 0.6, 0.3, false));
    r.cells.push_back(make_cell("pattern", "basic", 0.8, 1, 0.8, 0.1, false));
    r.cells.push_back(make_cell("ood", "ewc", 0.8, 1, 0.75, 0.9, true));

    const std::string md = render_markdown(build_report_json(r, cfg));
    REQUIRE(md.find("## scheme: pattern") != std::string::npos);
    REQUIRE(md.find("## scheme: ood") != std::string::npos);
    REQUIRE(md.find("| basic |") != std::string::npos);
    REQUIRE(md.find("| ewc |") != std::string::npos);
    REQUIRE(md.find("0.2") != std::string::npos);

    REQUIRE_THROWS_AS(render_markdown(nlohmann::json::object()), FormatError);
}

TEST_CASE("emit_sweep_outputs writes the artifact set and counts violations", "[harness]") {
    TempDir tmp;
    ExperimentConfig cfg;
    cfg.sweep.cell_budget_seconds = 1.0;
    SweepResult r;
    r.config_echo = cfg.to_json();
    r.cells.push_back(make_cell("pattern", "basic", 0.8, 1, 0.7, 0.4, true, 3.0));

    const std::string dir = (tmp.path / "out").string();
    const int violations = emit_sweep_outputs(r, cfg, dir);
    REQUIRE(violations == 1);
    for (const char* name : {"raw.csv", "aggregate.csv", "timing.csv", "report.json", "summary.md"}) {
        REQUIRE(std::filesystem::exists(std::filesystem::path(dir) / name));
    }

    SweepResult empty;
    REQUIRE_THROWS_AS(emit_sweep_outputs(empty, cfg, dir), ValueError);
}

TEST_CASE("pool subsets draw a seeded sample of the pool", "[harness]") {
    auto spec = SyntheticSpec::make(3, 1, 4, 4, 0.1, 17);
    RngState rng(4);
    Dataset pool = gen_synthetic(spec, 20, rng); // 60 rows
    Dataset s1 = detail::pool_subset(pool, 10, 7);
    Dataset s2 = detail::pool_subset(pool, 10, 7);
    Dataset s3 = detail::pool_subset(pool, 10, 8);
    REQUIRE(s1.size() == 10);
    REQUIRE(s1.images.values() == s2.images.values());
    REQUIRE(s1.images.values() != s3.images.values());
}
