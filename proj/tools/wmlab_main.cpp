// Command-line front end: the embed -> attack -> verify pipeline and the
// experiment sweep, driven by a JSON config with dotted-path overrides.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wmlab/wmlab.hpp"

namespace {

using nlohmann::json;

// Config resolution: defaults <- config file <- --set overrides.
struct ConfigArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out; // output directory or file, meaning per subcommand
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file; defaults apply for missing keys")
        ->check(CLI::ExistingFile);
    cmd->add_option("--set", args.overrides, "override a config key, e.g. --set removal.epochs=30 (repeatable)");
}

wmlab::ExperimentConfig resolve_config(const ConfigArgs& args) {
    json user = json::object();
    if (!args.config_path.empty()) {
        std::ifstream is(args.config_path);
        if (!is) throw wmlab::IoError("cannot open config '" + args.config_path + "'");
        user = json::parse(is, nullptr, true);
        if (!user.is_object()) throw wmlab::ConfigError("config file must hold a JSON object");
        // surface unknown keys before overrides are applied on top
        wmlab::detail::check_config_keys(user, wmlab::ExperimentConfig{}.to_json(), "");
    }
    for (const std::string& assignment : args.overrides) {
        wmlab::apply_override(user, assignment);
    }
    return wmlab::ExperimentConfig::from_json(user);
}

// Output directory: --out beats $WMLAB_OUT beats config.output_dir.
std::string resolve_out_dir(const wmlab::ExperimentConfig& cfg, const std::string& cli_out) {
    if (!cli_out.empty()) return cli_out;
    if (const char* env = std::getenv("WMLAB_OUT"); env && *env) return env;
    return cfg.output_dir;
}

std::string ensure_dir(const std::string& dir) {
    std::filesystem::create_directories(dir);
    return dir;
}

void write_json_file(const json& j, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw wmlab::IoError("cannot open '" + path + "'");
    os << j.dump(2) << '\n';
}

double resolve_gamma(const wmlab::ExperimentConfig& cfg, wmlab::WatermarkScheme scheme) {
    return cfg.verify.gamma >= 0.0 ? cfg.verify.gamma : wmlab::defaults::gamma_for(scheme);
}

int cmd_make_data(const ConfigArgs& args) {
    const wmlab::ExperimentConfig cfg = resolve_config(args);
    const wmlab::SweepAssets assets = wmlab::prepare_assets(cfg);
    const std::string dir = ensure_dir(resolve_out_dir(cfg, args.out));
    wmlab::save_idx(assets.train, dir + "/train-images.idx", dir + "/train-labels.idx");
    wmlab::save_idx(assets.test, dir + "/test-images.idx", dir + "/test-labels.idx");
    json j{{"train_rows", assets.train.size()}, {"test_rows", assets.test.size()}, {"dir", dir}};
    if (assets.pool) {
        wmlab::save_idx(*assets.pool, dir + "/pool-images.idx", dir + "/pool-labels.idx");
        j["pool_rows"] = assets.pool->size();
    }
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_pretrain(const ConfigArgs& args) {
    const wmlab::ExperimentConfig cfg = resolve_config(args);
    const wmlab::SweepAssets assets = wmlab::prepare_assets(cfg);
    const wmlab::TrainOptions opts{.epochs = cfg.embed.min_epochs, .batch_size = cfg.embed.batch_size,
                                   .lr = cfg.embed.lr};
    wmlab::RngState rng(cfg.embed.seed);
    wmlab::Checkpoint model = wmlab::pretrain_model(cfg.model, assets.train, opts, rng);
    const double test_acc = wmlab::test_accuracy(model, assets.test);
    model.metadata["test_accuracy"] = wmlab::format_double(test_acc);
    const std::string dir = ensure_dir(resolve_out_dir(cfg, args.out));
    const std::string path = dir + "/pretrained.wm";
    wmlab::save_checkpoint(model, path);
    std::cout << json{{"path", path}, {"test_acc", test_acc}, {"epochs", opts.epochs}}.dump(2) << '\n';
    return 0;
}

int cmd_embed(const ConfigArgs& args) {
    const wmlab::ExperimentConfig cfg = resolve_config(args);
    const wmlab::SweepAssets assets = wmlab::prepare_assets(cfg);
    const wmlab::EmbeddedModel em = wmlab::embed_for(cfg, assets, cfg.watermark.scheme, cfg.embed.seed);
    const std::string dir = ensure_dir(resolve_out_dir(cfg, args.out));
    const std::string path = dir + "/embedded-" + wmlab::to_string(cfg.watermark.scheme) + ".wm";
    wmlab::save_bundle({em.model, em.wm}, path);
    json j{{"path", path}, {"scheme", wmlab::to_string(cfg.watermark.scheme)}, {"test_acc", em.test_acc}};
    for (const auto& [k, v] : em.model.metadata) j["metadata"][k] = v;
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_remove(const ConfigArgs& args, const std::string& model_path, std::string method) {
    const wmlab::ExperimentConfig cfg = resolve_config(args);
    if (method.empty()) method = cfg.removal.method;
    const wmlab::SweepAssets assets = wmlab::prepare_assets(cfg);
    const wmlab::Bundle bundle = wmlab::load_bundle(model_path);
    if (!bundle.watermarks) {
        throw wmlab::ConfigError("remove: '" + model_path + "' carries no key set; embed first");
    }
    wmlab::EmbeddedModel em;
    em.model = bundle.model;
    em.wm = *bundle.watermarks;
    em.test_acc = wmlab::test_accuracy(bundle.model, assets.test);

    wmlab::CellKey key{wmlab::to_string(em.wm.scheme), method, cfg.removal.fraction, cfg.removal.seed, -1, -1};
    const double gamma = resolve_gamma(cfg, em.wm.scheme);
    wmlab::CellResult cell = wmlab::run_cell(cfg, assets, em, key, gamma, /*keep_model=*/true);
    if (!cell.ok) throw wmlab::Error("remove failed: " + cell.error);

    // the attacked model is the attacker's artifact: no key set inside
    const std::string dir = ensure_dir(resolve_out_dir(cfg, args.out));
    const std::string out_path = dir + "/removed-" + method + ".wm";
    wmlab::save_checkpoint(*cell.model, out_path);

    json cell_json = wmlab::cell_to_json(cell);
    cell_json["input"] = model_path;
    cell_json["output"] = out_path;
    cell_json["baseline_test_acc"] = em.test_acc;
    write_json_file(cell_json, dir + "/removal-history.json");
    std::cout << cell_json.dump(2) << '\n';
    return 0;
}

int cmd_verify(const ConfigArgs& args, const std::string& model_path, const std::string& keys_path,
               const std::string& donor_path) {
    const wmlab::ExperimentConfig cfg = resolve_config(args);
    const wmlab::Bundle suspect = wmlab::load_bundle(model_path);
    const wmlab::Bundle keys = keys_path.empty() ? suspect : wmlab::load_bundle(keys_path);
    if (!keys.watermarks) {
        throw wmlab::ConfigError("verify: no key set in '" + (keys_path.empty() ? model_path : keys_path) + "'");
    }
    std::optional<wmlab::Checkpoint> donor;
    if (!donor_path.empty()) {
        donor = wmlab::load_bundle(donor_path).model;
    } else if (suspect.model.spec.num_classes != keys.watermarks->num_classes) {
        donor = keys.model; // the owner's embedded model doubles as head donor
    }

    const wmlab::SweepAssets assets = wmlab::prepare_assets(cfg);
    wmlab::VerifyConfig vc{resolve_gamma(cfg, keys.watermarks->scheme)};
    const wmlab::VerificationReport rep =
        wmlab::verify_ownership(suspect.model, *keys.watermarks, vc, &assets.test, donor ? &*donor : nullptr);
    const std::string dir = ensure_dir(resolve_out_dir(cfg, args.out));
    write_json_file(rep.to_json(), dir + "/verify-report.json");
    std::cout << rep.to_json().dump(2) << '\n';
    return 0;
}

int cmd_calibrate_gamma(const ConfigArgs& args, const std::string& keys_path) {
    const wmlab::ExperimentConfig cfg = resolve_config(args);
    const wmlab::Bundle keys = wmlab::load_bundle(keys_path);
    if (!keys.watermarks) throw wmlab::ConfigError("calibrate-gamma: no key set in '" + keys_path + "'");
    const wmlab::SweepAssets assets = wmlab::prepare_assets(cfg);
    const wmlab::TrainOptions opts{.epochs = cfg.embed.min_epochs, .batch_size = cfg.embed.batch_size,
                                   .lr = cfg.embed.lr};
    wmlab::RngState rng(cfg.verify.seed);
    const wmlab::GammaCalibration cal = wmlab::calibrate_gamma(*keys.watermarks, cfg.model, assets.train,
                                                               cfg.verify.calibration_models, opts, rng,
                                                               cfg.verify.margin);
    json j{{"gamma", cal.gamma},
           {"margin", cal.margin},
           {"max_clean", cal.max_clean()},
           {"clean_accuracies", cal.clean_accuracies},
           {"scheme", wmlab::to_string(keys.watermarks->scheme)}};
    const std::string dir = ensure_dir(resolve_out_dir(cfg, args.out));
    write_json_file(j, dir + "/gamma.json");
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_calibrate_epsilon(const ConfigArgs& args, double target, double tol) {
    const wmlab::ExperimentConfig cfg = resolve_config(args);
    const wmlab::SweepAssets assets = wmlab::prepare_assets(cfg);
    const wmlab::TrainOptions opts{.epochs = cfg.embed.min_epochs, .batch_size = cfg.embed.batch_size,
                                   .lr = cfg.embed.lr};
    wmlab::RngState rng(cfg.watermark.key_seed);
    const wmlab::EpsilonCalibration cal = wmlab::calibrate_epsilon(cfg.model, assets.train, opts, rng, target, tol);
    json j{{"epsilon", cal.epsilon}, {"clean_accuracy", cal.clean_accuracy}, {"iterations", cal.iterations}};
    const std::string dir = ensure_dir(resolve_out_dir(cfg, args.out));
    write_json_file(j, dir + "/epsilon.json");
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_lr_sweep(const ConfigArgs& args, const std::string& model_path, int levels, int epochs_per_level,
                 double lr0) {
    const wmlab::ExperimentConfig cfg = resolve_config(args);
    const wmlab::Bundle bundle = wmlab::load_bundle(model_path);
    if (!bundle.watermarks) throw wmlab::ConfigError("lr-sweep: no key set in '" + model_path + "'");
    const wmlab::SweepAssets assets = wmlab::prepare_assets(cfg);
    const std::optional<wmlab::Dataset> labeled =
        wmlab::attacker_slice(cfg, assets.train, cfg.removal.fraction, cfg.removal.seed);
    if (!labeled) throw wmlab::ConfigError("lr-sweep: removal.fraction must be positive");

    const wmlab::Checkpoint folded = wmlab::fold_exponential_weighting(bundle.model);
    wmlab::EvalContext eval{&assets.test, &*bundle.watermarks, &folded};
    const std::vector<wmlab::LrSweepRow> rows = wmlab::lr_sweep_diagnostic(
        folded, *labeled, levels, epochs_per_level, lr0, cfg.removal.batch_size, cfg.removal.seed, eval);

    const std::string dir = ensure_dir(resolve_out_dir(cfg, args.out));
    const std::string path = dir + "/lr-sweep.csv";
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw wmlab::IoError("cannot open '" + path + "'");
    os << "level,epoch,lr,train_acc,test_acc,wm_acc\n";
    for (const auto& r : rows) {
        os << r.level << ',' << r.epoch << ',' << wmlab::format_double(r.lr) << ','
           << wmlab::format_double(r.train_acc) << ',' << wmlab::format_double(r.test_acc) << ','
           << wmlab::format_double(r.wm_acc) << '\n';
    }
    std::cout << json{{"path", path},
                      {"levels", levels},
                      {"final_lr", rows.back().lr},
                      {"final_train_acc", rows.back().train_acc},
                      {"final_wm_acc", rows.back().wm_acc}}
                     .dump(2)
              << '\n';
    return 0;
}

int cmd_sweep(const ConfigArgs& args) {
    const wmlab::ExperimentConfig cfg = resolve_config(args);
    const wmlab::SweepResult result = wmlab::run_sweep(cfg);
    const std::string dir = resolve_out_dir(cfg, args.out);
    const int violations = wmlab::emit_sweep_outputs(result, cfg, dir);
    int failures = 0;
    for (const auto& c : result.cells)
        if (!c.ok) ++failures;
    std::cout << json{{"dir", dir},
                      {"cells", result.cells.size()},
                      {"skipped", result.skipped.size()},
                      {"failed", failures},
                      {"budget_violations", violations},
                      {"total_seconds", result.total_seconds}}
                     .dump(2)
              << '\n';
    if (violations > 0) {
        std::cerr << "error: " << violations << " cell(s) exceeded the per-cell budget of "
                  << cfg.sweep.cell_budget_seconds << " s; see " << dir << "/report.json budget_violations\n";
        return 4;
    }
    if (failures > 0) {
        std::cerr << "warning: " << failures << " cell(s) failed; see " << dir << "/report.json\n";
    }
    return 0;
}

int cmd_report(const std::string& in_path, const std::string& out_path) {
    std::string path = in_path;
    if (std::filesystem::is_directory(path)) path += "/report.json";
    std::ifstream is(path);
    if (!is) throw wmlab::IoError("cannot open '" + path + "'");
    const json report = json::parse(is);
    const std::string md = wmlab::render_markdown(report);
    if (!out_path.empty()) {
        std::ofstream os(out_path, std::ios::trunc);
        if (!os) throw wmlab::IoError("cannot open '" + out_path + "'");
        os << md;
    }
    std::cout << md;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"watermark embedding, removal, and verification laboratory"};
    app.require_subcommand(1);

    ConfigArgs args;
    std::string model_path, keys_path, donor_path, method, report_in;
    int levels = 11, epochs_per_level = 25;
    double lr0 = 2.5e-4, eps_target = 0.5, eps_tol = 0.08;

    auto* make_data = app.add_subcommand("make-data", "write the synthetic datasets as IDX files");
    add_config_flags(make_data, args);
    make_data->add_option("--out", args.out, "output directory");

    auto* pretrain = app.add_subcommand("pretrain", "train a watermark-free model");
    add_config_flags(pretrain, args);
    pretrain->add_option("--out", args.out, "output directory");

    auto* embed = app.add_subcommand("embed", "train a model with the configured watermark");
    add_config_flags(embed, args);
    embed->add_option("--out", args.out, "output directory");

    auto* remove = app.add_subcommand("remove", "attack an embedded model");
    add_config_flags(remove, args);
    remove->add_option("--model", model_path, "embedded bundle to attack")->required()->check(CLI::ExistingFile);
    remove->add_option("--method", method, "basic | ewc | au | ewc_au | distill | fs | fs_au | prune | fine_prune");
    remove->add_option("--out", args.out, "output directory");

    auto* verify = app.add_subcommand("verify", "decide ownership of a suspect model");
    add_config_flags(verify, args);
    verify->add_option("--model", model_path, "suspect checkpoint or bundle")->required()->check(CLI::ExistingFile);
    verify->add_option("--keys", keys_path, "bundle holding the key set (defaults to --model)")
        ->check(CLI::ExistingFile);
    verify->add_option("--donor", donor_path, "head donor when class counts differ")->check(CLI::ExistingFile);
    verify->add_option("--out", args.out, "output directory");

    auto* cal_gamma = app.add_subcommand("calibrate-gamma", "derive the decision threshold from clean models");
    add_config_flags(cal_gamma, args);
    cal_gamma->add_option("--keys", keys_path, "bundle holding the key set")->required()->check(CLI::ExistingFile);
    cal_gamma->add_option("--out", args.out, "output directory");

    auto* cal_eps = app.add_subcommand("calibrate-epsilon", "size adversarial perturbations for ~50% transfer");
    add_config_flags(cal_eps, args);
    cal_eps->add_option("--target", eps_target, "target clean-model key accuracy");
    cal_eps->add_option("--tol", eps_tol, "acceptable |accuracy - target|");
    cal_eps->add_option("--out", args.out, "output directory");

    auto* lr_sweep = app.add_subcommand("lr-sweep", "fine-tune with a doubling rate and log the collapse");
    add_config_flags(lr_sweep, args);
    lr_sweep->add_option("--model", model_path, "embedded bundle")->required()->check(CLI::ExistingFile);
    lr_sweep->add_option("--levels", levels, "number of rate levels");
    lr_sweep->add_option("--epochs-per-level", epochs_per_level, "epochs at each rate");
    lr_sweep->add_option("--lr0", lr0, "rate of the first level");
    lr_sweep->add_option("--out", args.out, "output directory");

    auto* sweep = app.add_subcommand("sweep", "run the scheme x method x fraction x seed grid");
    add_config_flags(sweep, args);
    sweep->add_option("--out", args.out, "output directory");

    auto* report = app.add_subcommand("report", "render a sweep report.json as markdown");
    report->add_option("--in", report_in, "report.json file or sweep output directory")->required();
    report->add_option("--out", args.out, "markdown output file (stdout otherwise)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(make_data)) return cmd_make_data(args);
        if (app.got_subcommand(pretrain)) return cmd_pretrain(args);
        if (app.got_subcommand(embed)) return cmd_embed(args);
        if (app.got_subcommand(remove)) return cmd_remove(args, model_path, method);
        if (app.got_subcommand(verify)) return cmd_verify(args, model_path, keys_path, donor_path);
        if (app.got_subcommand(cal_gamma)) return cmd_calibrate_gamma(args, keys_path);
        if (app.got_subcommand(cal_eps)) return cmd_calibrate_epsilon(args, eps_target, eps_tol);
        if (app.got_subcommand(lr_sweep)) return cmd_lr_sweep(args, model_path, levels, epochs_per_level, lr0);
        if (app.got_subcommand(sweep)) return cmd_sweep(args);
        if (app.got_subcommand(report)) return cmd_report(report_in, args.out);
    } catch (const wmlab::ConfigError& e) {
        std::cerr << "error: " << json{{"kind", "config"}, {"message", e.what()}}.dump() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << json{{"kind", "runtime"}, {"message", e.what()}}.dump() << '\n';
        return 3;
    }
    return 2;
}
