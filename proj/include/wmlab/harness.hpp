#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wmlab/checkpoint_io.hpp"
#include "wmlab/dataset.hpp"
#include "wmlab/defaults.hpp"
#include "wmlab/error.hpp"
#include "wmlab/removal.hpp"
#include "wmlab/verify.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab {

// ---- experiment configuration ----

struct DataConfig {
    int num_classes = 4;
    std::vector<int> image = {1, 8, 8};
    double noise_sigma = 0.2;
    std::uint64_t center_seed = 17;
    // The exponential-weighting scheme relabels key_count training rows in
    // place, and each such row costs roughly its 1/N share of accuracy, so
    // the training set must dwarf the key set for embedding to stay cheap.
    int train_per_class = 4000;
    int test_per_class = 500;
    std::uint64_t data_seed = 11;
    ShiftSpec shift = {0.35, 8, 99}; // distractor count = 2 * num_classes
    int pool_size = 10000;
    std::uint64_t pool_seed = 5;
    std::string idx_images; // optional external training data
    std::string idx_labels;
};

struct WatermarkConfig {
    WatermarkScheme scheme = WatermarkScheme::Pattern;
    int key_count = 100;
    double pattern_alpha = 1.0;
    int pattern_block = 3;
    int target_label = 0;
    // The scheme's standard setting; the published checkpoint records it so
    // verification always evaluates the model through the reparameterization.
    double ew_temperature = 2.0;
    double adv_epsilon = defaults::kAdvEpsilon;
    std::uint64_t key_seed = 1001;
};

struct EmbedConfig {
    double lr = 0.1;
    int batch_size = 100;
    int min_epochs = 30;
    // Generous cap: pattern/ood/adv embeddings converge within ~60 epochs,
    // but memorizing in-distribution keys (the ew scheme) takes ~450.
    int max_epochs = 900;
    int wm_every = 10;
    double confidence_min = 0.85;
    std::uint64_t seed = 2;

    [[nodiscard]] EmbedOptions options() const {
        EmbedOptions opt;
        opt.train = {.epochs = 0, .batch_size = batch_size, .lr = lr};
        opt.min_epochs = min_epochs;
        opt.max_epochs = max_epochs;
        opt.wm_every = wm_every;
        opt.confidence_min = confidence_min;
        return opt;
    }
};

struct RemovalSection {
    std::string method = "basic";
    std::string mode = "ftal";
    std::string schedule_kind = "step_decay";
    double initial = 0.0; // 0 -> defaults::kRemovalInitialLr
    double factor = defaults::kRemovalDecayFactor;
    int period = 0; // 0 -> run split into kDecayPeriodsPerRun periods
    int epochs = 20;
    int batch_size = 100;
    double lambda = -1.0; // <0 -> per-scheme default when a method needs it
    int fisher_samples = 1000;
    int unlabeled_per_batch = 50;
    std::string label_mode = "hard_pseudo";
    double distill_temperature = 1.0;
    // 0.25 keeps fine-pruning sound for every scheme at desk scale: at 0.5
    // the reparameterized scheme's pruned model re-memorizes part of its key
    // set during the tuning tail.
    double prune_rate = 0.25;
    double fraction = 0.8;
    std::uint64_t seed = 3;
};

struct VerifySection {
    double gamma = -1.0; // <0 -> calibrate (sweep) or per-scheme default (verify)
    double margin = 0.05;
    int calibration_models = 10;
    std::uint64_t seed = 4;
};

struct SweepSection {
    std::vector<std::string> schemes = {"pattern", "ood", "ew", "adv"};
    std::vector<std::string> methods = {"basic", "ewc", "au"};
    std::vector<double> fractions = {0.2, 0.8};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::vector<int> m_values;   // optional fisher-sample grid (method ewc)
    std::vector<int> pool_sizes; // optional pool-size grid (method au)
    int parallel = 1;
    double cell_budget_seconds = 120.0; // per-cell wall clock; violations fail the sweep loudly
};

struct ExperimentConfig {
    DataConfig data;
    ModelSpec model;
    WatermarkConfig watermark;
    EmbedConfig embed;
    RemovalSection removal;
    VerifySection verify;
    SweepSection sweep;
    std::string output_dir = "out";

    ExperimentConfig() {
        model.kind = ModelKind::Mlp;
        model.input = {1, 8, 8};
        model.hidden = {32, 32};
        model.num_classes = 4;
    }

    [[nodiscard]] nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    void validate() const;
};

inline nlohmann::json ExperimentConfig::to_json() const {
    return nlohmann::json{
        {"data",
         {{"num_classes", data.num_classes},
          {"image", data.image},
          {"noise_sigma", data.noise_sigma},
          {"center_seed", data.center_seed},
          {"train_per_class", data.train_per_class},
          {"test_per_class", data.test_per_class},
          {"data_seed", data.data_seed},
          {"shift_offset", data.shift.offset},
          {"shift_distractors", data.shift.distractors},
          {"shift_direction_seed", data.shift.direction_seed},
          {"pool_size", data.pool_size},
          {"pool_seed", data.pool_seed},
          {"idx_images", data.idx_images},
          {"idx_labels", data.idx_labels}}},
        {"model", model.to_json()},
        {"watermark",
         {{"scheme", to_string(watermark.scheme)},
          {"key_count", watermark.key_count},
          {"pattern_alpha", watermark.pattern_alpha},
          {"pattern_block", watermark.pattern_block},
          {"target_label", watermark.target_label},
          {"ew_temperature", watermark.ew_temperature},
          {"adv_epsilon", watermark.adv_epsilon},
          {"key_seed", watermark.key_seed}}},
        {"embed",
         {{"lr", embed.lr},
          {"batch_size", embed.batch_size},
          {"min_epochs", embed.min_epochs},
          {"max_epochs", embed.max_epochs},
          {"wm_every", embed.wm_every},
          {"confidence_min", embed.confidence_min},
          {"seed", embed.seed}}},
        {"removal",
         {{"method", removal.method},
          {"mode", removal.mode},
          {"schedule_kind", removal.schedule_kind},
          {"initial", removal.initial},
          {"factor", removal.factor},
          {"period", removal.period},
          {"epochs", removal.epochs},
          {"batch_size", removal.batch_size},
          {"lambda", removal.lambda},
          {"fisher_samples", removal.fisher_samples},
          {"unlabeled_per_batch", removal.unlabeled_per_batch},
          {"label_mode", removal.label_mode},
          {"distill_temperature", removal.distill_temperature},
          {"prune_rate", removal.prune_rate},
          {"fraction", removal.fraction},
          {"seed", removal.seed}}},
        {"verify",
         {{"gamma", verify.gamma},
          {"margin", verify.margin},
          {"calibration_models", verify.calibration_models},
          {"seed", verify.seed}}},
        {"sweep",
         {{"schemes", sweep.schemes},
          {"methods", sweep.methods},
          {"fractions", sweep.fractions},
          {"seeds", sweep.seeds},
          {"m_values", sweep.m_values},
          {"pool_sizes", sweep.pool_sizes},
          {"parallel", sweep.parallel},
          {"cell_budget_seconds", sweep.cell_budget_seconds}}},
        {"output_dir", output_dir}};
}

namespace detail {

// Every key the user supplies must exist in the default-config skeleton with
// the same JSON type; objects are checked recursively.
inline void check_config_keys(const nlohmann::json& user, const nlohmann::json& schema, const std::string& path) {
    for (const auto& [key, value] : user.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        if (!schema.contains(key)) throw ConfigError(detail::cat("config: unknown key '", here, "'"));
        const nlohmann::json& ref = schema.at(key);
        if (ref.is_object()) {
            if (!value.is_object()) throw ConfigError(detail::cat("config: '", here, "' must be an object"));
            check_config_keys(value, ref, here);
        } else if (ref.is_array() && !value.is_array()) {
            throw ConfigError(detail::cat("config: '", here, "' must be an array"));
        } else if (ref.is_string() && !value.is_string()) {
            throw ConfigError(detail::cat("config: '", here, "' must be a string"));
        } else if (ref.is_boolean() && !value.is_boolean()) {
            throw ConfigError(detail::cat("config: '", here, "' must be a boolean"));
        } else if (ref.is_number() && !value.is_number()) {
            throw ConfigError(detail::cat("config: '", here, "' must be a number"));
        }
    }
}

inline void merge_config(nlohmann::json& base, const nlohmann::json& user) {
    for (const auto& [key, value] : user.items()) {
        if (value.is_object() && base[key].is_object()) {
            merge_config(base[key], value);
        } else {
            base[key] = value;
        }
    }
}

} // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& user) {
    if (!user.is_object()) throw ConfigError("config: top level must be a JSON object");
    nlohmann::json base = ExperimentConfig{}.to_json();
    detail::check_config_keys(user, base, "");
    detail::merge_config(base, user);

    ExperimentConfig c;
    const auto& d = base.at("data");
    c.data.num_classes = d.at("num_classes").get<int>();
    c.data.image = d.at("image").get<std::vector<int>>();
    c.data.noise_sigma = d.at("noise_sigma").get<double>();
    c.data.center_seed = d.at("center_seed").get<std::uint64_t>();
    c.data.train_per_class = d.at("train_per_class").get<int>();
    c.data.test_per_class = d.at("test_per_class").get<int>();
    c.data.data_seed = d.at("data_seed").get<std::uint64_t>();
    c.data.shift.offset = d.at("shift_offset").get<double>();
    c.data.shift.distractors = d.at("shift_distractors").get<int>();
    c.data.shift.direction_seed = d.at("shift_direction_seed").get<std::uint64_t>();
    c.data.pool_size = d.at("pool_size").get<int>();
    c.data.pool_seed = d.at("pool_seed").get<std::uint64_t>();
    c.data.idx_images = d.at("idx_images").get<std::string>();
    c.data.idx_labels = d.at("idx_labels").get<std::string>();

    c.model = ModelSpec::from_json(base.at("model"));

    const auto& w = base.at("watermark");
    c.watermark.scheme = watermark_scheme_from_string(w.at("scheme").get<std::string>());
    c.watermark.key_count = w.at("key_count").get<int>();
    c.watermark.pattern_alpha = w.at("pattern_alpha").get<double>();
    c.watermark.pattern_block = w.at("pattern_block").get<int>();
    c.watermark.target_label = w.at("target_label").get<int>();
    c.watermark.ew_temperature = w.at("ew_temperature").get<double>();
    c.watermark.adv_epsilon = w.at("adv_epsilon").get<double>();
    c.watermark.key_seed = w.at("key_seed").get<std::uint64_t>();

    const auto& e = base.at("embed");
    c.embed.lr = e.at("lr").get<double>();
    c.embed.batch_size = e.at("batch_size").get<int>();
    c.embed.min_epochs = e.at("min_epochs").get<int>();
    c.embed.max_epochs = e.at("max_epochs").get<int>();
    c.embed.wm_every = e.at("wm_every").get<int>();
    c.embed.confidence_min = e.at("confidence_min").get<double>();
    c.embed.seed = e.at("seed").get<std::uint64_t>();

    const auto& r = base.at("removal");
    c.removal.method = r.at("method").get<std::string>();
    c.removal.mode = r.at("mode").get<std::string>();
    c.removal.schedule_kind = r.at("schedule_kind").get<std::string>();
    c.removal.initial = r.at("initial").get<double>();
    c.removal.factor = r.at("factor").get<double>();
    c.removal.period = r.at("period").get<int>();
    c.removal.epochs = r.at("epochs").get<int>();
    c.removal.batch_size = r.at("batch_size").get<int>();
    c.removal.lambda = r.at("lambda").get<double>();
    c.removal.fisher_samples = r.at("fisher_samples").get<int>();
    c.removal.unlabeled_per_batch = r.at("unlabeled_per_batch").get<int>();
    c.removal.label_mode = r.at("label_mode").get<std::string>();
    c.removal.distill_temperature = r.at("distill_temperature").get<double>();
    c.removal.prune_rate = r.at("prune_rate").get<double>();
    c.removal.fraction = r.at("fraction").get<double>();
    c.removal.seed = r.at("seed").get<std::uint64_t>();

    const auto& v = base.at("verify");
    c.verify.gamma = v.at("gamma").get<double>();
    c.verify.margin = v.at("margin").get<double>();
    c.verify.calibration_models = v.at("calibration_models").get<int>();
    c.verify.seed = v.at("seed").get<std::uint64_t>();

    const auto& s = base.at("sweep");
    c.sweep.schemes = s.at("schemes").get<std::vector<std::string>>();
    c.sweep.methods = s.at("methods").get<std::vector<std::string>>();
    c.sweep.fractions = s.at("fractions").get<std::vector<double>>();
    c.sweep.seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
    c.sweep.m_values = s.at("m_values").get<std::vector<int>>();
    c.sweep.pool_sizes = s.at("pool_sizes").get<std::vector<int>>();
    c.sweep.parallel = s.at("parallel").get<int>();
    c.sweep.cell_budget_seconds = s.at("cell_budget_seconds").get<double>();

    c.output_dir = base.at("output_dir").get<std::string>();
    c.validate();
    return c;
}

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> methods = {"basic", "ewc",   "au",    "ewc_au",    "distill",
                                                     "fs",    "fs_au", "prune", "fine_prune"};
    return methods;
}

inline void ExperimentConfig::validate() const {
    model.validate();
    if (data.num_classes < 2) throw ConfigError("config: data.num_classes must be >= 2");
    if (data.image.size() != 3) throw ConfigError("config: data.image must be [C,H,W]");
    if (data.train_per_class < 1 || data.test_per_class < 1) throw ConfigError("config: per-class counts must be >= 1");
    if (data.noise_sigma < 0.0) throw ConfigError("config: negative noise sigma");
    if (data.pool_size < 0) throw ConfigError("config: negative pool size");
    if (data.idx_images.empty() != data.idx_labels.empty()) {
        throw ConfigError("config: idx_images and idx_labels must be set together");
    }
    if (model.num_classes != data.num_classes) {
        throw ConfigError(detail::cat("config: model.num_classes (", model.num_classes, ") != data.num_classes (",
                                      data.num_classes, ")"));
    }
    if (watermark.key_count < 1) throw ConfigError("config: watermark.key_count must be >= 1");
    if (watermark.target_label < 0 || watermark.target_label >= data.num_classes) {
        throw ConfigError("config: watermark.target_label outside the class range");
    }
    if (!(watermark.pattern_alpha > 0.0 && watermark.pattern_alpha <= 1.0)) {
        throw ConfigError("config: watermark.pattern_alpha outside (0,1]");
    }
    if (!(watermark.ew_temperature > 0.0)) throw ConfigError("config: watermark.ew_temperature must be positive");
    if (watermark.adv_epsilon < 0.0) throw ConfigError("config: negative watermark.adv_epsilon");
    if (embed.lr <= 0.0 || embed.batch_size < 1) throw ConfigError("config: bad embed settings");
    if (std::find(known_methods().begin(), known_methods().end(), removal.method) == known_methods().end()) {
        throw ConfigError(detail::cat("config: unknown removal.method '", removal.method, "'"));
    }
    tune_mode_from_string(removal.mode);
    schedule_kind_from_string(removal.schedule_kind);
    label_mode_from_string(removal.label_mode);
    if (removal.initial < 0.0) throw ConfigError("config: removal.initial must be >= 0 (0 selects the default)");
    if (removal.period < 0) throw ConfigError("config: removal.period must be >= 0 (0 derives it from the run length)");
    if (removal.epochs < 1 || removal.batch_size < 1) throw ConfigError("config: bad removal epochs/batch");
    if (removal.fisher_samples < 1) throw ConfigError("config: removal.fisher_samples must be >= 1");
    if (removal.unlabeled_per_batch < 0) throw ConfigError("config: negative removal.unlabeled_per_batch");
    if (!(removal.prune_rate >= 0.0 && removal.prune_rate <= 1.0)) throw ConfigError("config: removal.prune_rate outside [0,1]");
    if (!(removal.fraction >= 0.0 && removal.fraction <= 1.0)) throw ConfigError("config: removal.fraction outside [0,1]");
    if (verify.gamma >= 1.0) throw ConfigError("config: verify.gamma must be below 1");
    if (!(verify.margin > 0.0 && verify.margin < 1.0)) throw ConfigError("config: verify.margin outside (0,1)");
    if (verify.calibration_models < 1) throw ConfigError("config: verify.calibration_models must be >= 1");
    for (const auto& s : sweep.schemes) watermark_scheme_from_string(s);
    for (const auto& m : sweep.methods) {
        if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end()) {
            throw ConfigError(detail::cat("config: unknown method '", m, "'"));
        }
    }
    for (double f : sweep.fractions) {
        if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("config: sweep fraction outside [0,1]");
    }
    if (sweep.seeds.empty()) throw ConfigError("config: sweep.seeds must not be empty");
    if (sweep.parallel < 1) throw ConfigError("config: sweep.parallel must be >= 1");
    if (!(sweep.cell_budget_seconds > 0.0)) throw ConfigError("config: sweep.cell_budget_seconds must be positive");
}

// Applies `path.to.key=value` onto a config JSON; the path must already
// exist.  The value is parsed as JSON when possible, else taken as a string.
inline void apply_override(nlohmann::json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError(detail::cat("override '", assignment, "' is not key=value"));
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json schema = ExperimentConfig{}.to_json();

    std::vector<std::string> parts;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        parts.push_back(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    nlohmann::json* ref = &schema;
    nlohmann::json* node = &config;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!ref->contains(parts[i])) throw ConfigError(detail::cat("override: unknown key '", path, "'"));
        ref = &ref->at(parts[i]);
        if (i + 1 < parts.size()) {
            if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) (*node)[parts[i]] = nlohmann::json::object();
            node = &(*node)[parts[i]];
        } else {
            nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
            if (value.is_discarded()) value = raw;
            (*node)[parts[i]] = value;
        }
    }
}

// ---- derived experiment assets ----

struct SweepAssets {
    SyntheticSpec sspec;
    Dataset train;
    Dataset test;
    std::optional<Dataset> pool;
    // Independent shifted-domain draw reserved for OOD key generation.  The
    // attacker's unlabeled pool must not contain the owner's key images:
    // pseudo-labeling a pool that includes the keys would teach the key
    // labels right back to the student.
    std::optional<Dataset> key_source;
    std::vector<Checkpoint> calibration_models; // trained lazily for gamma
};

inline RngState derived_rng(std::uint64_t base_seed, WatermarkScheme scheme, std::uint64_t seed) {
    return RngState(base_seed).fork((static_cast<std::uint64_t>(scheme) << 32) ^ (seed * 0x9E37u + 1));
}

// Owner-side data: training set, held-out test set, and the shifted-domain
// unlabeled pool.
inline SweepAssets prepare_assets(const ExperimentConfig& cfg) {
    SweepAssets a;
    if (!cfg.data.idx_images.empty()) {
        Dataset loaded = load_idx(cfg.data.idx_images, cfg.data.idx_labels);
        if (loaded.num_classes > cfg.data.num_classes) {
            throw ConfigError(detail::cat("config: idx data has ", loaded.num_classes, " classes, config says ",
                                          cfg.data.num_classes));
        }
        loaded.num_classes = cfg.data.num_classes;
        a.train = std::move(loaded);
        // a held-out slice becomes the test set: last 20% of rows
        const int n = a.train.size();
        const int test_n = std::max(1, n / 5);
        std::vector<int> test_idx(static_cast<std::size_t>(test_n));
        std::iota(test_idx.begin(), test_idx.end(), n - test_n);
        std::vector<int> train_idx(static_cast<std::size_t>(n - test_n));
        std::iota(train_idx.begin(), train_idx.end(), 0);
        a.test = a.train.subset(test_idx);
        a.train = a.train.subset(train_idx);
    }
    a.sspec = SyntheticSpec::make(cfg.data.num_classes, cfg.data.image[0], cfg.data.image[1], cfg.data.image[2],
                                  cfg.data.noise_sigma, cfg.data.center_seed);
    if (cfg.data.idx_images.empty()) {
        RngState train_rng = RngState(cfg.data.data_seed).fork(0x7121);
        RngState test_rng = RngState(cfg.data.data_seed).fork(0x7122);
        a.train = gen_synthetic(a.sspec, cfg.data.train_per_class, train_rng);
        a.test = gen_synthetic(a.sspec, cfg.data.test_per_class, test_rng);
    }
    if (cfg.data.pool_size > 0) {
        RngState pool_rng = RngState(cfg.data.pool_seed).fork(0x7123);
        a.pool = gen_shifted_domain(a.sspec, cfg.data.shift, cfg.data.pool_size, pool_rng);
        RngState key_src_rng = RngState(cfg.data.pool_seed).fork(0x7124);
        a.key_source = gen_shifted_domain(a.sspec, cfg.data.shift, cfg.data.pool_size, key_src_rng);
    }
    return a;
}

struct EmbeddedModel {
    Checkpoint model;
    WatermarkSet wm;
    double test_acc = 0.0; // the owner-side reference accuracy
};

// Builds and embeds the key set for one (scheme, seed).
inline EmbeddedModel embed_for(const ExperimentConfig& cfg, const SweepAssets& assets, WatermarkScheme scheme,
                               std::uint64_t seed) {
    RngState key_rng = derived_rng(cfg.watermark.key_seed, scheme, seed);
    RngState embed_rng = derived_rng(cfg.embed.seed, scheme, seed);
    const EmbedOptions opt = cfg.embed.options();
    EmbeddedModel out;
    switch (scheme) {
    case WatermarkScheme::Pattern: {
        PatternKey key = PatternKey::checkerboard(cfg.data.image[0], cfg.data.image[1], cfg.data.image[2],
                                                  cfg.watermark.pattern_block, cfg.watermark.pattern_alpha,
                                                  cfg.watermark.target_label);
        out.wm = gen_pattern_watermarks(assets.train, key, cfg.watermark.key_count, key_rng);
        out.model = embed_joint(cfg.model, assets.train, out.wm, opt, embed_rng);
        break;
    }
    case WatermarkScheme::Ood: {
        if (!assets.key_source) throw ConfigError("config: the ood scheme needs a pool (data.pool_size > 0)");
        out.wm = gen_ood_watermarks(*assets.key_source, cfg.watermark.key_count, cfg.data.num_classes, key_rng);
        out.model = embed_joint(cfg.model, assets.train, out.wm, opt, embed_rng);
        break;
    }
    case WatermarkScheme::Ew: {
        out.wm = gen_ew_watermarks(assets.train, cfg.watermark.key_count, key_rng);
        out.model = embed_ew(cfg.model, assets.train, out.wm, EWConfig{cfg.watermark.ew_temperature}, opt, embed_rng);
        break;
    }
    case WatermarkScheme::Adv: {
        EmbedAdvResult r = embed_adv(cfg.model, assets.train, AdvConfig{cfg.watermark.adv_epsilon, 200},
                                     cfg.watermark.key_count, opt, embed_rng);
        out.model = std::move(r.model);
        out.wm = std::move(r.watermarks);
        break;
    }
    }
    out.model.metadata["embed_seed"] = std::to_string(seed);
    out.test_acc = test_accuracy(out.model, assets.test);
    return out;
}

// The attacker's labeled slice for one (fraction, seed); nullopt at
// fraction 0.  The tail `key_count` rows are always held out so key-source
// rows never reach the attacker with honest labels.
inline std::optional<Dataset> attacker_slice(const ExperimentConfig& cfg, const Dataset& train, double fraction,
                                             std::uint64_t seed) {
    if (fraction <= 0.0) return std::nullopt;
    SplitPlan plan;
    plan.adversary_fraction = fraction;
    plan.holdout_for_watermarks = std::min(cfg.watermark.key_count, train.size() - 1);
    plan.test_count = 0;
    plan.seed = RngState(cfg.removal.seed).fork(seed * 2 + 1).next_u64();
    const Split sp = split(train, plan);
    return train.subset(sp.adversary_labeled);
}

// Effective tuning-attack configuration for one cell.
inline RemovalConfig cell_removal_config(const ExperimentConfig& cfg, const std::string& method,
                                         WatermarkScheme scheme, std::uint64_t seed, int labeled_rows,
                                         int pool_rows) {
    RemovalConfig rc;
    rc.mode = tune_mode_from_string(cfg.removal.mode);
    rc.schedule.kind = schedule_kind_from_string(cfg.removal.schedule_kind);
    rc.schedule.initial = cfg.removal.initial > 0.0 ? cfg.removal.initial : defaults::initial_lr_for(scheme);
    rc.schedule.factor = cfg.removal.factor;
    rc.epochs = cfg.removal.epochs;
    rc.batch_size = cfg.removal.batch_size;
    rc.label_mode = method == "distill" ? LabelMode::Distill : label_mode_from_string(cfg.removal.label_mode);
    if (method == "fs" || method == "fs_au") rc.mode = TuneMode::Ftal; // a fresh model has no head to reinit
    rc.distill_temperature = cfg.removal.distill_temperature;
    rc.seed = RngState(cfg.removal.seed)
                  .fork((static_cast<std::uint64_t>(scheme) << 40) ^ (std::hash<std::string>{}(method) << 8) ^ seed)
                  .next_u64();

    const bool uses_pool = method == "au" || method == "ewc_au" || method == "fs_au" || method == "distill";
    const bool uses_penalty = method == "ewc" || method == "ewc_au";
    rc.unlabeled_per_batch = uses_pool ? cfg.removal.unlabeled_per_batch : 0;
    rc.lambda = uses_penalty ? (cfg.removal.lambda >= 0.0 ? cfg.removal.lambda : defaults::lambda_for(scheme)) : 0.0;

    // derive the decay period from the planned run length when left at 0
    if (rc.schedule.kind == ScheduleKind::StepDecay) {
        if (cfg.removal.period > 0) {
            rc.schedule.period = cfg.removal.period;
        } else {
            const int steps_per_epoch = labeled_rows >= rc.batch_size ? labeled_rows / rc.batch_size
                                                                      : std::max(1, pool_rows / rc.batch_size);
            const long total = static_cast<long>(steps_per_epoch) * rc.epochs;
            rc.schedule.period = static_cast<int>(std::max<long>(1, total / defaults::kDecayPeriodsPerRun));
        }
    } else if (cfg.removal.period > 0) {
        rc.schedule.period = cfg.removal.period;
    } else {
        rc.schedule.period = 1;
    }
    return rc;
}

// ---- sweep execution ----

struct CellKey {
    std::string scheme;
    std::string method;
    double fraction = 0.0;
    std::uint64_t seed = 0;
    int m_fisher = -1;   // fisher-sample count when swept, else -1
    int pool_size = -1;  // pool subset size when swept, else -1
};

struct CellResult {
    CellKey key;
    bool ok = false;
    std::string error;
    double test_acc = 0.0;
    double wm_acc = 0.0;
    double gamma = 0.0;
    bool owned = false;
    double baseline_test_acc = 0.0; // the watermarked model's test accuracy
    double seconds = 0.0;
    std::vector<EpochStats> history;
    std::optional<Checkpoint> model; // the attacked model, kept on request
};

struct SweepResult {
    nlohmann::json config_echo;
    std::map<std::string, std::map<std::uint64_t, double>> gamma; // scheme -> seed -> threshold
    std::vector<CellResult> cells;
    std::vector<std::pair<CellKey, std::string>> skipped;
    double total_seconds = 0.0;
};

namespace detail {

inline bool method_needs_labeled(const std::string& method) {
    return method == "basic" || method == "ewc" || method == "fs" || method == "prune" || method == "fine_prune";
}

inline bool method_needs_pool(const std::string& method) {
    return method == "au" || method == "ewc_au" || method == "fs_au" || method == "distill";
}

// First `n` rows of the pool (its blocks interleave domains evenly only
// across the whole set, so subsetting uses a seeded shuffle).
inline Dataset pool_subset(const Dataset& pool, int n, std::uint64_t seed) {
    RngState rng = RngState(seed).fork(0x9001);
    std::vector<int> idx = shuffled_indices(pool.size(), rng);
    idx.resize(static_cast<std::size_t>(n));
    std::sort(idx.begin(), idx.end());
    return pool.subset(idx);
}

} // namespace detail

// Runs one cell of the grid against a prepared embedded model.
inline CellResult run_cell(const ExperimentConfig& cfg, const SweepAssets& assets, const EmbeddedModel& em,
                           const CellKey& key, double gamma, bool keep_model = false) {
    CellResult out;
    out.key = key;
    out.gamma = gamma;
    out.baseline_test_acc = em.test_acc;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        const WatermarkScheme scheme = watermark_scheme_from_string(key.scheme);
        std::optional<Dataset> labeled = attacker_slice(cfg, assets.train, key.fraction, key.seed);
        if (!labeled && detail::method_needs_labeled(key.method)) {
            throw ValueError(detail::cat("method '", key.method, "' needs labeled data; fraction is 0"));
        }
        // pool_size 0 in the grid degrades a pool method to labeled-only
        // tuning, the natural zero point of the pool-size sweep
        std::optional<Dataset> pool;
        if (detail::method_needs_pool(key.method) && key.pool_size != 0) {
            if (!assets.pool) throw ValueError("method needs a pool but data.pool_size is 0");
            if (key.pool_size > 0 && key.pool_size < assets.pool->size()) {
                pool = detail::pool_subset(*assets.pool, key.pool_size, cfg.data.pool_seed ^ key.seed);
            } else {
                pool = *assets.pool;
            }
        }

        RemovalConfig rc = cell_removal_config(cfg, key.method, scheme, key.seed, labeled ? labeled->size() : 0,
                                               pool ? pool->size() : 0);
        if (key.pool_size == 0) rc.unlabeled_per_batch = 0;
        const int fisher_m = key.m_fisher > 0 ? key.m_fisher : cfg.removal.fisher_samples;

        const Checkpoint folded = fold_exponential_weighting(em.model);
        EvalContext eval{&assets.test, &em.wm, &folded};

        AttackResult attack;
        if (key.method == "basic" || key.method == "au" || key.method == "distill") {
            attack = refit_finetune(folded, labeled ? &*labeled : nullptr, pool ? &*pool : nullptr, rc, nullptr,
                                    nullptr, eval);
        } else if (key.method == "ewc" || key.method == "ewc_au") {
            RngState frng = RngState(rc.seed).fork(0xF15E);
            const Dataset& fisher_data = labeled ? *labeled : *pool;
            FisherDiagonal fd = normalize_clip_fisher(estimate_fisher(folded, fisher_data, fisher_m, frng),
                                                      rc.lambda, rc.schedule.initial);
            attack = refit_finetune(folded, labeled ? &*labeled : nullptr, pool ? &*pool : nullptr, rc, &folded, &fd,
                                    eval);
        } else if (key.method == "fs" || key.method == "fs_au") {
            attack = train_from_scratch(cfg.model, labeled ? &*labeled : nullptr, pool ? &*pool : nullptr, &folded,
                                        rc, eval);
        } else if (key.method == "prune") {
            Checkpoint pruned = prune_by_activation(folded, cfg.removal.prune_rate, *labeled);
            EpochStats st;
            st.epoch = 0;
            st.lr = 0.0;
            st.train_acc = dataset_accuracy(pruned, *labeled);
            st.test_acc = test_accuracy(pruned, assets.test);
            st.wm_acc = watermark_accuracy(pruned, em.wm, &folded);
            attack.model = std::move(pruned);
            attack.history.push_back(st);
            attack.config = {{"attack", "prune"}, {"prune_rate", cfg.removal.prune_rate}};
        } else if (key.method == "fine_prune") {
            attack = fine_prune(folded, cfg.removal.prune_rate, *labeled, pool ? &*pool : nullptr, rc, eval);
        } else {
            throw ValueError(detail::cat("unknown method '", key.method, "'"));
        }

        out.history = attack.history;
        out.test_acc = attack.final_stats().test_acc;
        out.wm_acc = attack.final_stats().wm_acc;
        out.owned = out.wm_acc > gamma;
        if (keep_model) out.model = std::move(attack.model);
        out.ok = true;
    } catch (const std::exception& e) {
        out.ok = false;
        out.error = e.what();
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// The full grid: schemes x seeds (one embedding each) x fractions x methods,
// plus optional fisher-sample and pool-size grids.  Cells that cannot run
// (no labeled data at fraction 0, say) are recorded as skipped.  gamma per
// (scheme, seed) comes from verify.gamma when set, else from clean models
// trained once and shared.
inline SweepResult run_sweep(const ExperimentConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    SweepResult result;
    result.config_echo = cfg.to_json();
    SweepAssets assets = prepare_assets(cfg);

    // clean models for threshold calibration, shared across all key sets
    std::vector<Checkpoint> calibration;
    if (cfg.verify.gamma < 0.0) {
        const TrainOptions opts{.epochs = cfg.embed.min_epochs, .batch_size = cfg.embed.batch_size, .lr = cfg.embed.lr};
        for (int i = 0; i < cfg.verify.calibration_models; ++i) {
            RngState r = RngState(cfg.verify.seed).fork(0x9A00 + static_cast<std::uint64_t>(i));
            calibration.push_back(pretrain_model(cfg.model, assets.train, opts, r));
        }
    }

    // embeddings, one per (scheme, seed), reused by every cell
    std::map<std::pair<std::string, std::uint64_t>, EmbeddedModel> embedded;
    auto embed_one = [&](const std::string& scheme_name, std::uint64_t seed) {
        return embed_for(cfg, assets, watermark_scheme_from_string(scheme_name), seed);
    };
    if (cfg.sweep.parallel > 1) {
        std::vector<std::pair<std::pair<std::string, std::uint64_t>, std::future<EmbeddedModel>>> jobs;
        for (const auto& scheme_name : cfg.sweep.schemes) {
            for (std::uint64_t seed : cfg.sweep.seeds) {
                jobs.emplace_back(std::make_pair(scheme_name, seed),
                                  std::async(std::launch::async, embed_one, scheme_name, seed));
            }
        }
        for (auto& [k, fut] : jobs) embedded.emplace(k, fut.get());
    } else {
        for (const auto& scheme_name : cfg.sweep.schemes) {
            for (std::uint64_t seed : cfg.sweep.seeds) {
                embedded.emplace(std::make_pair(scheme_name, seed), embed_one(scheme_name, seed));
            }
        }
    }

    for (const auto& [k, em] : embedded) {
        double g;
        if (cfg.verify.gamma >= 0.0) {
            g = cfg.verify.gamma;
        } else {
            g = calibrate_gamma_over(em.wm, calibration, cfg.verify.margin).gamma;
        }
        result.gamma[k.first][k.second] = g;
    }

    // the cell grid, in canonical order
    std::vector<CellKey> keys;
    for (const auto& scheme_name : cfg.sweep.schemes) {
        for (const auto& method : cfg.sweep.methods) {
            for (double fraction : cfg.sweep.fractions) {
                for (std::uint64_t seed : cfg.sweep.seeds) {
                    CellKey key{scheme_name, method, fraction, seed, -1, -1};
                    if (method == "ewc" && !cfg.sweep.m_values.empty()) {
                        for (int m : cfg.sweep.m_values) {
                            key.m_fisher = m;
                            keys.push_back(key);
                        }
                    } else if (method == "au" && !cfg.sweep.pool_sizes.empty()) {
                        for (int p : cfg.sweep.pool_sizes) {
                            key.pool_size = p;
                            keys.push_back(key);
                        }
                    } else {
                        keys.push_back(key);
                    }
                }
            }
        }
    }

    // drop combinations that cannot run before spending time on them
    std::vector<CellKey> runnable;
    for (const auto& key : keys) {
        if (key.fraction <= 0.0 && detail::method_needs_labeled(key.method)) {
            result.skipped.emplace_back(key, "needs labeled data; fraction is 0");
        } else if (key.fraction <= 0.0 && key.pool_size == 0) {
            result.skipped.emplace_back(key, "no labeled data and the pool is disabled");
        } else if (detail::method_needs_pool(key.method) && key.pool_size != 0 && !assets.pool) {
            result.skipped.emplace_back(key, "needs a pool; data.pool_size is 0");
        } else {
            runnable.push_back(key);
        }
    }

    auto run_one = [&](const CellKey& key) {
        const EmbeddedModel& em = embedded.at({key.scheme, key.seed});
        return run_cell(cfg, assets, em, key, result.gamma.at(key.scheme).at(key.seed));
    };
    if (cfg.sweep.parallel > 1) {
        std::vector<std::future<CellResult>> futures;
        futures.reserve(runnable.size());
        std::size_t next = 0;
        std::vector<CellResult> done;
        while (next < runnable.size() || !futures.empty()) {
            while (next < runnable.size() && static_cast<int>(futures.size()) < cfg.sweep.parallel) {
                futures.push_back(std::async(std::launch::async, run_one, runnable[next]));
                ++next;
            }
            done.push_back(futures.front().get());
            futures.erase(futures.begin());
        }
        result.cells = std::move(done);
    } else {
        for (const auto& key : runnable) result.cells.push_back(run_one(key));
    }

    result.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

// ---- serialization of sweep outputs ----

// Shortest round-trip decimal form; locale-independent.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string cell_sort_token(const CellKey& k) {
    return detail::cat(k.scheme, "|", k.method, "|", format_double(k.fraction), "|", k.seed, "|", k.m_fisher, "|",
                       k.pool_size);
}

// raw.csv: one row per completed cell.  Every column is a pure function of
// the configuration and seeds, so identical configurations produce
// byte-identical files (wall-clock time lives in timing.csv).
inline void write_raw_csv(const SweepResult& r, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError(detail::cat("cannot open '", path, "'"));
    os << "scheme,method,fraction,seed,m_fisher,pool_size,test_acc,wm_acc,gamma,owned\n";
    std::vector<const CellResult*> rows;
    for (const auto& c : r.cells)
        if (c.ok) rows.push_back(&c);
    std::sort(rows.begin(), rows.end(), [](const CellResult* a, const CellResult* b) {
        return cell_sort_token(a->key) < cell_sort_token(b->key);
    });
    for (const CellResult* c : rows) {
        os << c->key.scheme << ',' << c->key.method << ',' << format_double(c->key.fraction) << ',' << c->key.seed
           << ',' << c->key.m_fisher << ',' << c->key.pool_size << ',' << format_double(c->test_acc) << ','
           << format_double(c->wm_acc) << ',' << format_double(c->gamma) << ',' << (c->owned ? 1 : 0) << '\n';
    }
}

inline void write_timing_csv(const SweepResult& r, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError(detail::cat("cannot open '", path, "'"));
    os << "scheme,method,fraction,seed,m_fisher,pool_size,seconds,ok\n";
    for (const auto& c : r.cells) {
        os << c.key.scheme << ',' << c.key.method << ',' << format_double(c.key.fraction) << ',' << c.key.seed << ','
           << c.key.m_fisher << ',' << c.key.pool_size << ',' << format_double(c.seconds) << ',' << (c.ok ? 1 : 0)
           << '\n';
    }
}

// aggregate.csv: per (scheme, method, fraction, m, pool) mean and sample
// standard deviation over seeds.
inline void write_aggregate_csv(const SweepResult& r, const std::string& path) {
    struct Acc {
        std::vector<double> test, wm;
        int owned = 0;
    };
    std::map<std::string, std::pair<CellKey, Acc>> groups;
    for (const auto& c : r.cells) {
        if (!c.ok) continue;
        CellKey g = c.key;
        g.seed = 0;
        auto& slot = groups[cell_sort_token(g)];
        slot.first = g;
        slot.second.test.push_back(c.test_acc);
        slot.second.wm.push_back(c.wm_acc);
        slot.second.owned += c.owned ? 1 : 0;
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    auto stddev = [&](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        const double m = mean(v);
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size() - 1));
    };
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError(detail::cat("cannot open '", path, "'"));
    os << "scheme,method,fraction,m_fisher,pool_size,n,test_mean,test_std,wm_mean,wm_std,owned_rate\n";
    for (const auto& [token, g] : groups) {
        const auto& [key, acc] = g;
        os << key.scheme << ',' << key.method << ',' << format_double(key.fraction) << ',' << key.m_fisher << ','
           << key.pool_size << ',' << acc.test.size() << ',' << format_double(mean(acc.test)) << ','
           << format_double(stddev(acc.test)) << ',' << format_double(mean(acc.wm)) << ','
           << format_double(stddev(acc.wm)) << ',' << format_double(static_cast<double>(acc.owned) / acc.test.size())
           << '\n';
    }
}

inline nlohmann::json cell_to_json(const CellResult& c) {
    nlohmann::json j{{"scheme", c.key.scheme},     {"method", c.key.method}, {"fraction", c.key.fraction},
                     {"seed", c.key.seed},         {"m_fisher", c.key.m_fisher}, {"pool_size", c.key.pool_size},
                     {"ok", c.ok},                 {"seconds", c.seconds}};
    if (c.ok) {
        j["test_acc"] = c.test_acc;
        j["wm_acc"] = c.wm_acc;
        j["gamma"] = c.gamma;
        j["owned"] = c.owned;
        j["baseline_test_acc"] = c.baseline_test_acc;
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& st : c.history) {
            nlohmann::json h{{"epoch", st.epoch}, {"lr", st.lr}, {"train_acc", st.train_acc}};
            if (!std::isnan(st.test_acc)) h["test_acc"] = st.test_acc;
            if (!std::isnan(st.wm_acc)) h["wm_acc"] = st.wm_acc;
            hist.push_back(std::move(h));
        }
        j["history"] = std::move(hist);
    } else {
        j["error"] = c.error;
    }
    return j;
}

inline nlohmann::json build_report_json(const SweepResult& r, const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["config"] = r.config_echo;
    nlohmann::json gammas = nlohmann::json::object();
    for (const auto& [scheme, per_seed] : r.gamma) {
        for (const auto& [seed, g] : per_seed) gammas[scheme][std::to_string(seed)] = g;
    }
    j["gamma"] = std::move(gammas);
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : r.cells) cells.push_back(cell_to_json(c));
    j["cells"] = std::move(cells);
    nlohmann::json skipped = nlohmann::json::array();
    for (const auto& [key, reason] : r.skipped) {
        skipped.push_back({{"scheme", key.scheme},
                           {"method", key.method},
                           {"fraction", key.fraction},
                           {"seed", key.seed},
                           {"reason", reason}});
    }
    j["skipped"] = std::move(skipped);
    nlohmann::json violations = nlohmann::json::array();
    for (const auto& c : r.cells) {
        if (c.seconds > cfg.sweep.cell_budget_seconds) {
            violations.push_back({{"scheme", c.key.scheme},
                                  {"method", c.key.method},
                                  {"fraction", c.key.fraction},
                                  {"seed", c.key.seed},
                                  {"seconds", c.seconds},
                                  {"budget", cfg.sweep.cell_budget_seconds}});
        }
    }
    j["budget_violations"] = std::move(violations);
    j["total_seconds"] = r.total_seconds;
    return j;
}

inline void write_report_json(const SweepResult& r, const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError(detail::cat("cannot open '", path, "'"));
    os << build_report_json(r, cfg).dump(2) << '\n';
}

// Markdown summary grouped like the result tables: one block per scheme,
// methods as rows, fractions as columns, "test / wm" cells.  Takes the
// report.json structure so saved reports can be re-rendered.
inline std::string render_markdown(const nlohmann::json& report) {
    struct Cell {
        std::vector<double> test, wm;
    };
    std::map<std::string, std::map<std::string, std::map<double, Cell>>> grid;
    if (!report.contains("cells") || !report.at("cells").is_array()) {
        throw FormatError("render_markdown: report has no 'cells' array");
    }
    for (const auto& c : report.at("cells")) {
        if (!c.value("ok", false) || c.value("m_fisher", -1) > 0 || c.value("pool_size", -1) > 0) continue;
        auto& slot = grid[c.at("scheme").get<std::string>()][c.at("method").get<std::string>()]
                         [c.at("fraction").get<double>()];
        slot.test.push_back(c.at("test_acc").get<double>());
        slot.wm.push_back(c.at("wm_acc").get<double>());
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    std::ostringstream os;
    os << "# sweep summary\n";
    os.precision(4);
    for (const auto& [scheme, methods] : grid) {
        std::vector<double> fractions;
        for (const auto& [_, cells] : methods)
            for (const auto& [f, __] : cells)
                if (std::find(fractions.begin(), fractions.end(), f) == fractions.end()) fractions.push_back(f);
        std::sort(fractions.begin(), fractions.end());
        os << "\n## scheme: " << scheme << "\n\ncells are `test acc / key acc`, means over seeds\n\n| method |";
        for (double f : fractions) os << " " << f << " |";
        os << "\n|---|";
        for (std::size_t i = 0; i < fractions.size(); ++i) os << "---|";
        os << "\n";
        for (const auto& [method, cells] : methods) {
            os << "| " << method << " |";
            for (double f : fractions) {
                const auto it = cells.find(f);
                if (it == cells.end()) {
                    os << " - |";
                } else {
                    os << " " << std::fixed << mean(it->second.test) << " / " << mean(it->second.wm) << " |";
                }
            }
            os << "\n";
        }
    }
    return os.str();
}

// Writes the complete artifact set for a sweep.  Returns the number of
// budget violations (callers surface those loudly).
inline int emit_sweep_outputs(const SweepResult& r, const ExperimentConfig& cfg, const std::string& dir) {
    if (r.cells.empty() && r.skipped.empty()) throw ValueError("emit_sweep_outputs: empty grid, nothing to write");
    std::filesystem::create_directories(dir);
    write_raw_csv(r, dir + "/raw.csv");
    write_aggregate_csv(r, dir + "/aggregate.csv");
    write_timing_csv(r, dir + "/timing.csv");
    const nlohmann::json report = build_report_json(r, cfg);
    {
        std::ofstream os(dir + "/report.json", std::ios::trunc);
        if (!os) throw IoError(detail::cat("cannot open '", dir, "/report.json'"));
        os << report.dump(2) << '\n';
    }
    std::ofstream md(dir + "/summary.md", std::ios::trunc);
    md << render_markdown(report);
    int violations = 0;
    for (const auto& c : r.cells)
        if (c.seconds > cfg.sweep.cell_budget_seconds) ++violations;
    return violations;
}

} // namespace wmlab
