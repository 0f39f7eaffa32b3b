#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "wmlab/wmlab.hpp"

using namespace wmlab;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("wmlab_pipeline_test_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Desk-size experiment: small images, one hidden layer, seconds per cell.
ExperimentConfig micro_config() {
    ExperimentConfig cfg;
    cfg.data.num_classes = 3;
    cfg.data.image = {1, 4, 4};
    cfg.data.noise_sigma = 0.12;
    cfg.data.train_per_class = 100;
    cfg.data.test_per_class = 30;
    cfg.data.pool_size = 240;
    cfg.data.shift = {0.3, 1, 99};
    cfg.model.kind = ModelKind::Mlp;
    cfg.model.input = {1, 4, 4};
    cfg.model.hidden = {16};
    cfg.model.num_classes = 3;
    cfg.watermark.key_count = 12;
    cfg.embed.batch_size = 30;
    cfg.embed.min_epochs = 8;
    cfg.embed.max_epochs = 120;
    cfg.embed.wm_every = 4;
    cfg.removal.epochs = 5;
    cfg.removal.batch_size = 30;
    cfg.removal.fisher_samples = 100;
    cfg.removal.unlabeled_per_batch = 10;
    cfg.verify.calibration_models = 4;
    cfg.sweep.schemes = {"pattern"};
    cfg.sweep.methods = {"basic"};
    cfg.sweep.fractions = {0.8};
    cfg.sweep.seeds = {1, 2};
    return cfg;
}

} // namespace

TEST_CASE("micro sweep runs every cell and emits a consistent artifact set", "[pipeline]") {
    TempDir tmp;
    ExperimentConfig cfg = micro_config();
    cfg.validate();

    SweepResult r = run_sweep(cfg);
    REQUIRE(r.cells.size() == 2); // 1 scheme * 1 method * 1 fraction * 2 seeds
    REQUIRE(r.skipped.empty());
    for (const CellResult& c : r.cells) {
        INFO(c.key.scheme << "/" << c.key.method << " seed " << c.key.seed << ": " << c.error);
        REQUIRE(c.ok);
        REQUIRE(c.test_acc >= 0.0);
        REQUIRE(c.test_acc <= 1.0);
        REQUIRE(c.wm_acc >= 0.0);
        REQUIRE(c.wm_acc <= 1.0);
        REQUIRE(c.baseline_test_acc > 0.8); // the embedding kept task accuracy
        REQUIRE(c.owned == (c.wm_acc > c.gamma));
        REQUIRE(c.history.size() == 5);
        REQUIRE(c.gamma == r.gamma.at("pattern").at(c.key.seed));
    }

    const std::string dir = (tmp.path / "out").string();
    const int violations = emit_sweep_outputs(r, cfg, dir);
    REQUIRE(violations == 0);

    const std::string raw = slurp(dir + "/raw.csv");
    REQUIRE(raw.find("scheme,method,fraction,seed,m_fisher,pool_size,test_acc,wm_acc,gamma,owned") == 0);
    REQUIRE(std::count(raw.begin(), raw.end(), '\n') == 3); // header + 2 cells

    const nlohmann::json report = nlohmann::json::parse(slurp(dir + "/report.json"));
    REQUIRE(report.at("cells").size() == 2);
    REQUIRE(report.at("config").at("data").at("num_classes") == 3);
    REQUIRE(report.at("budget_violations").empty());

    const std::string md = slurp(dir + "/summary.md");
    REQUIRE(md.find("## scheme: pattern") != std::string::npos);
    REQUIRE(md.find("| basic |") != std::string::npos);
}

TEST_CASE("identical configurations produce byte-identical raw results", "[pipeline]") {
    TempDir tmp;
    ExperimentConfig cfg = micro_config();

    SweepResult r1 = run_sweep(cfg);
    SweepResult r2 = run_sweep(cfg);
    REQUIRE(r1.gamma == r2.gamma);

    const std::string d1 = (tmp.path / "a").string();
    const std::string d2 = (tmp.path / "b").string();
    emit_sweep_outputs(r1, cfg, d1);
    emit_sweep_outputs(r2, cfg, d2);
    REQUIRE(slurp(d1 + "/raw.csv") == slurp(d2 + "/raw.csv"));
    REQUIRE(slurp(d1 + "/aggregate.csv") == slurp(d2 + "/aggregate.csv"));
    REQUIRE(slurp(d1 + "/summary.md") == slurp(d2 + "/summary.md"));
}

TEST_CASE("fraction zero runs pool methods and skips labeled-only methods", "[pipeline]") {
    ExperimentConfig cfg = micro_config();
    cfg.sweep.methods = {"basic", "au"};
    cfg.sweep.fractions = {0.0};
    cfg.sweep.seeds = {1};

    SweepResult r = run_sweep(cfg);
    REQUIRE(r.skipped.size() == 1);
    REQUIRE(r.skipped[0].first.method == "basic");
    REQUIRE(r.skipped[0].second.find("fraction is 0") != std::string::npos);
    REQUIRE(r.cells.size() == 1);
    REQUIRE(r.cells[0].key.method == "au");
    INFO(r.cells[0].error);
    REQUIRE(r.cells[0].ok);
}

TEST_CASE("pool methods are skipped outright when the pool is disabled", "[pipeline]") {
    ExperimentConfig cfg = micro_config();
    cfg.data.pool_size = 0;
    cfg.sweep.methods = {"au"};
    cfg.sweep.seeds = {1};
    // the ood scheme needs the pool too; stay with pattern
    SweepResult r = run_sweep(cfg);
    REQUIRE(r.cells.empty());
    REQUIRE(r.skipped.size() == 1);
    REQUIRE(r.skipped[0].second.find("needs a pool") != std::string::npos);
}

TEST_CASE("pool size grid treats zero as labeled-only tuning", "[pipeline]") {
    ExperimentConfig cfg = micro_config();
    cfg.sweep.methods = {"au"};
    cfg.sweep.seeds = {1};
    cfg.sweep.pool_sizes = {0, 240};

    SweepResult r = run_sweep(cfg);
    REQUIRE(r.cells.size() == 2);
    for (const CellResult& c : r.cells) {
        INFO("pool_size " << c.key.pool_size << ": " << c.error);
        REQUIRE(c.ok);
    }
    REQUIRE(r.cells[0].key.pool_size + r.cells[1].key.pool_size == 240);
}

TEST_CASE("fisher sample grid fans out the ewc method", "[pipeline]") {
    ExperimentConfig cfg = micro_config();
    cfg.sweep.methods = {"ewc"};
    cfg.sweep.seeds = {1};
    cfg.sweep.m_values = {20, 100};

    SweepResult r = run_sweep(cfg);
    REQUIRE(r.cells.size() == 2);
    std::vector<int> ms;
    for (const CellResult& c : r.cells) {
        INFO("m " << c.key.m_fisher << ": " << c.error);
        REQUIRE(c.ok);
        ms.push_back(c.key.m_fisher);
    }
    std::sort(ms.begin(), ms.end());
    REQUIRE(ms == std::vector<int>{20, 100});
}

TEST_CASE("budget violations are counted and reported", "[pipeline]") {
    TempDir tmp;
    ExperimentConfig cfg = micro_config();
    cfg.sweep.seeds = {1};
    cfg.sweep.cell_budget_seconds = 1e-9;

    SweepResult r = run_sweep(cfg);
    REQUIRE(r.cells.size() == 1);
    REQUIRE(r.cells[0].ok); // the cell still completes; the violation is reported, not fatal

    const std::string dir = (tmp.path / "out").string();
    const int violations = emit_sweep_outputs(r, cfg, dir);
    REQUIRE(violations == 1);
    const nlohmann::json report = nlohmann::json::parse(slurp(dir + "/report.json"));
    REQUIRE(report.at("budget_violations").size() == 1);
}

TEST_CASE("embedded models verify as owned and clean models do not", "[pipeline]") {
    ExperimentConfig cfg = micro_config();
    SweepAssets assets = prepare_assets(cfg);

    EmbeddedModel em = embed_for(cfg, assets, WatermarkScheme::Pattern, 1);
    REQUIRE(key_accuracy(em.model, em.wm) == 1.0);

    // clean models trained on the same data, different seeds
    std::vector<Checkpoint> clean;
    const TrainOptions opts{cfg.embed.min_epochs, cfg.embed.batch_size, cfg.embed.lr};
    for (std::uint64_t i = 0; i < 4; ++i) {
        RngState r = RngState(cfg.verify.seed).fork(0x9A00 + i);
        clean.push_back(pretrain_model(cfg.model, assets.train, opts, r));
    }
    GammaCalibration cal = calibrate_gamma_over(em.wm, clean, cfg.verify.margin);

    VerificationReport own = verify_ownership(em.model, em.wm, VerifyConfig{cal.gamma}, &assets.test);
    REQUIRE(own.owned);
    REQUIRE(own.watermark_acc == 1.0);

    for (const Checkpoint& c : clean) {
        VerificationReport rep = verify_ownership(c, em.wm, VerifyConfig{cal.gamma});
        REQUIRE_FALSE(rep.owned);
    }
}

TEST_CASE("attacker slices never contain watermark holdout rows", "[pipeline]") {
    ExperimentConfig cfg = micro_config();
    SweepAssets assets = prepare_assets(cfg);

    std::optional<Dataset> slice = attacker_slice(cfg, assets.train, 0.5, 3);
    REQUIRE(slice.has_value());
    // fraction of the body (train minus key holdout)
    const int body = assets.train.size() - cfg.watermark.key_count;
    REQUIRE(slice->size() == static_cast<int>(std::floor(0.5 * body)));

    REQUIRE_FALSE(attacker_slice(cfg, assets.train, 0.0, 3).has_value());
}
