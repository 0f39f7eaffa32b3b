#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wmlab/dataset.hpp"
#include "wmlab/error.hpp"
#include "wmlab/model.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/train.hpp"
#include "wmlab/verify.hpp"

namespace wmlab {

// ---- learning-rate schedules ----

enum class ScheduleKind {
    Constant,
    StepDecay,          // initial * factor^(step / period)
    DoublingDiagnostic, // initial * 2^(epoch / period); sweeps upward to find the damaging rate
    FractionDecay,      // step decay whose period is a tenth of the whole run
};

inline std::string to_string(ScheduleKind k) {
    switch (k) {
    case ScheduleKind::Constant: return "constant";
    case ScheduleKind::StepDecay: return "step_decay";
    case ScheduleKind::DoublingDiagnostic: return "doubling_diagnostic";
    case ScheduleKind::FractionDecay: return "fraction_decay";
    }
    throw ValueError("bad ScheduleKind");
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "constant") return ScheduleKind::Constant;
    if (s == "step_decay") return ScheduleKind::StepDecay;
    if (s == "doubling_diagnostic") return ScheduleKind::DoublingDiagnostic;
    if (s == "fraction_decay") return ScheduleKind::FractionDecay;
    throw ValueError(detail::cat("unknown schedule kind '", s, "'"));
}

struct LRSchedule {
    ScheduleKind kind = ScheduleKind::StepDecay;
    double initial = 0.3;
    double factor = 0.9; // decay multiplier per period (fixed 2.0 for doubling_diagnostic)
    int period = 30;     // steps (step_decay) or epochs (doubling_diagnostic); ignored by fraction_decay

    void validate() const {
        if (!(initial > 0.0)) throw ValueError(detail::cat("LRSchedule: initial rate ", initial, " must be positive"));
        if (kind == ScheduleKind::StepDecay || kind == ScheduleKind::FractionDecay) {
            if (!(factor > 0.0 && factor <= 1.0)) {
                throw ValueError(detail::cat("LRSchedule: decay factor ", factor, " outside (0,1]"));
            }
        }
        if ((kind == ScheduleKind::StepDecay || kind == ScheduleKind::DoublingDiagnostic) && period < 1) {
            throw ValueError("LRSchedule: period must be >= 1");
        }
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"kind", to_string(kind)}, {"initial", initial}, {"factor", factor}, {"period", period}};
    }
};

// Rate for one step.  `step` counts batches from 0 across the whole run,
// `epoch` counts epochs from 0, and `total_steps` is the planned length of
// the run (used only by fraction_decay, whose decay period is a tenth of the
// run, at least 1).
inline double schedule_lr(const LRSchedule& s, long step, int epoch, long total_steps) {
    s.validate();
    switch (s.kind) {
    case ScheduleKind::Constant:
        return s.initial;
    case ScheduleKind::StepDecay:
        return s.initial * std::pow(s.factor, static_cast<double>(step / s.period));
    case ScheduleKind::DoublingDiagnostic:
        return s.initial * std::pow(2.0, static_cast<double>(epoch / s.period));
    case ScheduleKind::FractionDecay: {
        if (total_steps < 1) throw ValueError("schedule_lr: fraction_decay needs the planned step count");
        const long period = std::max<long>(1, total_steps / 10);
        return s.initial * std::pow(s.factor, static_cast<double>(step / period));
    }
    }
    throw ValueError("bad ScheduleKind");
}

// ---- elastic penalty ingredients ----

struct FisherDiagonal {
    std::vector<double> values;
    int sample_count = 0;
    bool normalized_clipped = false;
};

// Diagonal curvature estimate at the model's current parameters: the mean
// squared log-likelihood gradient over M single-sample draws (with
// replacement).  Labels are sampled from the model's own predictive
// distribution unless `use_dataset_labels` is set.
inline FisherDiagonal estimate_fisher(const Checkpoint& model, const Dataset& data, int m_samples, RngState& rng,
                                      bool use_dataset_labels = false) {
    if (m_samples < 1) throw ValueError("estimate_fisher: need at least one sample");
    if (data.size() < 1) throw ValueError("estimate_fisher: empty dataset");
    FisherDiagonal fd;
    fd.values.assign(model.params.size(), 0.0);
    fd.sample_count = m_samples;
    const int C = model.spec.num_classes;
    std::vector<int> one(1);
    for (int t = 0; t < m_samples; ++t) {
        one[0] = static_cast<int>(rng.below(static_cast<std::uint64_t>(data.size())));
        const Tensor xb = gather_rows(data.images, one, 0, 1);
        ModelPass pass = forward_pass(model, xb);
        int y;
        if (use_dataset_labels) {
            y = data.labels[static_cast<std::size_t>(one[0])];
        } else {
            const Tensor probs = softmax_temperature(pass.tape.value(pass.logits), 1.0);
            const double u = rng.uniform01();
            double cum = 0.0;
            y = C - 1;
            for (int c = 0; c < C; ++c) {
                cum += probs[static_cast<std::size_t>(c)];
                if (u < cum) {
                    y = c;
                    break;
                }
            }
        }
        const std::vector<int> label = {y};
        const int loss = pass.tape.cross_entropy(pass.logits, label);
        pass.tape.backward(loss);
        const std::vector<double> g = gather_param_grads(pass, model.params);
        for (std::size_t i = 0; i < g.size(); ++i) fd.values[i] += g[i] * g[i];
    }
    for (double& v : fd.values) v /= m_samples;
    return fd;
}

// Scales the diagonal to max 1 and clips every entry at 1/(lambda*lr).  The
// clip keeps the effective per-parameter pull of the penalty below the
// learning step itself, which is what keeps high-lambda runs stable.
inline FisherDiagonal normalize_clip_fisher(const FisherDiagonal& fd, double lambda, double lr) {
    if (!(lambda > 0.0)) throw ValueError("normalize_clip_fisher: lambda must be positive");
    if (!(lr > 0.0)) throw ValueError("normalize_clip_fisher: lr must be positive");
    FisherDiagonal out = fd;
    double peak = 0.0;
    for (double v : fd.values) {
        if (!(v >= 0.0)) throw ValueError("normalize_clip_fisher: negative fisher entry");
        peak = std::max(peak, v);
    }
    const double cap = 1.0 / (lambda * lr);
    if (peak > 0.0) {
        for (double& v : out.values) v = std::min(v / peak, cap);
    }
    out.normalized_clipped = true;
    return out;
}

// (lambda/2) * sum_i F_i (theta_i - anchor_i)^2, as a plain number.
inline double ewc_penalty(const ParamVector& params, const ParamVector& anchor, const FisherDiagonal& fd,
                          double lambda) {
    if (params.size() != anchor.size() || params.size() != fd.values.size()) {
        throw ShapeError("ewc_penalty: params, anchor and fisher must have equal length");
    }
    if (lambda < 0.0) throw ValueError("ewc_penalty: negative lambda");
    double total = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double d = params[i] - anchor[i];
        total += fd.values[i] * d * d;
    }
    return 0.5 * lambda * total;
}

// ---- unlabeled-pool annotation ----

inline std::vector<int> pseudo_label(const Checkpoint& model, const Dataset& pool) {
    return predict(model, pool.images);
}

// Soft targets: softmax of the annotating model's logits at the given
// temperature, one row per pool image.
inline Tensor distill_labels(const Checkpoint& model, const Dataset& pool, double temperature, int chunk = 512) {
    if (!(temperature > 0.0)) throw ValueError("distill_labels: temperature must be positive");
    const int n = pool.size();
    const int C = model.spec.num_classes;
    Tensor out({n, C});
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int at = 0; at < n; at += chunk) {
        const int count = std::min(chunk, n - at);
        const Tensor probs = softmax_temperature(logits_of(model, gather_rows(pool.images, order, at, count)),
                                                 temperature);
        std::copy(probs.data(), probs.data() + probs.size(),
                  out.data() + static_cast<std::size_t>(at) * static_cast<std::size_t>(C));
    }
    return out;
}

// ---- the tuning attack ----

enum class TuneMode { Ftal, Rtal };
enum class LabelMode { HardPseudo, Distill };

inline std::string to_string(TuneMode m) { return m == TuneMode::Ftal ? "ftal" : "rtal"; }
inline std::string to_string(LabelMode m) { return m == LabelMode::HardPseudo ? "hard_pseudo" : "distill"; }

inline TuneMode tune_mode_from_string(const std::string& s) {
    if (s == "ftal") return TuneMode::Ftal;
    if (s == "rtal") return TuneMode::Rtal;
    throw ValueError(detail::cat("unknown tune mode '", s, "'"));
}

inline LabelMode label_mode_from_string(const std::string& s) {
    if (s == "hard_pseudo") return LabelMode::HardPseudo;
    if (s == "distill") return LabelMode::Distill;
    throw ValueError(detail::cat("unknown label mode '", s, "'"));
}

struct RemovalConfig {
    TuneMode mode = TuneMode::Ftal;
    LRSchedule schedule;
    int epochs = 20;
    int batch_size = 100;
    double lambda = 0.0;          // elastic penalty strength; 0 disables
    int unlabeled_per_batch = 0;  // pool samples appended to every labeled batch
    LabelMode label_mode = LabelMode::HardPseudo;
    double distill_temperature = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        schedule.validate();
        if (epochs < 1) throw ValueError("RemovalConfig: epochs must be >= 1");
        if (batch_size < 1) throw ValueError("RemovalConfig: batch_size must be >= 1");
        if (lambda < 0.0) throw ValueError("RemovalConfig: negative lambda");
        if (unlabeled_per_batch < 0) throw ValueError("RemovalConfig: negative unlabeled_per_batch");
        if (!(distill_temperature > 0.0)) throw ValueError("RemovalConfig: distill temperature must be positive");
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"mode", to_string(mode)},
                {"schedule", schedule.to_json()},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"lambda", lambda},
                {"unlabeled_per_batch", unlabeled_per_batch},
                {"label_mode", to_string(label_mode)},
                {"distill_temperature", distill_temperature},
                {"seed", seed}};
    }
};

// Optional measurements taken after every epoch.
struct EvalContext {
    const Dataset* test = nullptr;
    const WatermarkSet* wm = nullptr;
    const Checkpoint* head_donor = nullptr; // for suspects whose class count differs from the key set
};

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;        // rate of the epoch's first step
    double train_acc = 0.0; // on the attacker's tuning data
    double test_acc = std::numeric_limits<double>::quiet_NaN();
    double wm_acc = std::numeric_limits<double>::quiet_NaN();
};

struct AttackResult {
    Checkpoint model;
    std::vector<EpochStats> history;
    nlohmann::json config;

    [[nodiscard]] const EpochStats& final_stats() const {
        if (history.empty()) throw Error("AttackResult: empty history");
        return history.back();
    }
};

// Salts for the independent rng streams inside an attack; tests that
// replicate an attack loop must derive the same streams.
inline constexpr std::uint64_t kAttackShuffleSalt = 0x5F01;
inline constexpr std::uint64_t kAttackPoolSalt = 0x5F02;
inline constexpr std::uint64_t kAttackReinitSalt = 0x5F03;
inline constexpr std::uint64_t kAttackInitSalt = 0x5F04;

namespace detail {

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    std::vector<int> shape = a.shape();
    shape[0] += b.dim(0);
    Tensor out(shape);
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

// Cycling without-replacement sampler over pool indices.
class PoolCursor {
public:
    PoolCursor(int n, RngState rng) : n_(n), rng_(std::move(rng)) {}

    std::vector<int> take(int count) {
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(count));
        while (count > 0) {
            if (at_ == static_cast<int>(order_.size())) {
                order_ = shuffled_indices(n_, rng_);
                at_ = 0;
            }
            const int grab = std::min(count, static_cast<int>(order_.size()) - at_);
            out.insert(out.end(), order_.begin() + at_, order_.begin() + at_ + grab);
            at_ += grab;
            count -= grab;
        }
        return out;
    }

private:
    int n_;
    RngState rng_;
    std::vector<int> order_;
    int at_ = 0;
};

struct LoopInputs {
    const Dataset* labeled = nullptr;
    const Dataset* pool = nullptr;
    const std::vector<int>* pool_hard = nullptr; // always present when pool is used
    const Tensor* pool_soft = nullptr;           // present in distill mode
    const EwcTerms* ewc = nullptr;
};

// The shared fine-tuning loop: fixed-size batches of labeled data (trailing
// partial batch dropped), optionally padded with pool samples; when there is
// no labeled data at all, whole batches come from the pool.
inline AttackResult tuning_loop(Checkpoint model, const LoopInputs& in, const RemovalConfig& cfg,
                                const EvalContext& eval, RngState& loop_rng, RngState pool_rng,
                                nlohmann::json config_echo) {
    const int n_lab = in.labeled ? in.labeled->size() : 0;
    const int lab_steps = n_lab / cfg.batch_size;
    const bool pool_only = lab_steps == 0;
    if (pool_only && !in.pool) {
        throw ValueError(detail::cat("tuning loop: ", n_lab, " labeled rows make no full batch of ", cfg.batch_size,
                                     " and no pool was given"));
    }
    const int pool_per_batch = pool_only ? cfg.batch_size : cfg.unlabeled_per_batch;
    if (pool_per_batch > 0) {
        if (!in.pool || !in.pool_hard) throw ValueError("tuning loop: pool samples requested but no pool provided");
        if (in.pool->size() < pool_per_batch) {
            throw ValueError(detail::cat("tuning loop: pool of ", in.pool->size(), " rows cannot fill ",
                                         pool_per_batch, " slots per batch"));
        }
    }
    const int steps_per_epoch = pool_only ? in.pool->size() / cfg.batch_size : lab_steps;
    if (steps_per_epoch == 0) throw ValueError("tuning loop: pool smaller than one batch");
    const long total_steps = static_cast<long>(steps_per_epoch) * cfg.epochs;
    const bool soft_mode = cfg.label_mode == LabelMode::Distill && pool_per_batch > 0;
    const int C = model.spec.num_classes;

    AttackResult result;
    result.config = std::move(config_echo);
    PoolCursor cursor(in.pool ? in.pool->size() : 1, std::move(pool_rng));

    long global = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double epoch_lr = schedule_lr(cfg.schedule, global, epoch, total_steps);
        std::vector<int> order;
        if (!pool_only) order = shuffled_indices(n_lab, loop_rng);
        for (int s = 0; s < steps_per_epoch; ++s) {
            const double lr = schedule_lr(cfg.schedule, global, epoch, total_steps);
            Tensor xb;
            std::vector<int> yb;
            std::vector<int> pool_rows;
            if (pool_only) {
                pool_rows = cursor.take(cfg.batch_size);
                xb = gather_rows(in.pool->images, pool_rows, 0, cfg.batch_size);
            } else {
                xb = gather_rows(in.labeled->images, order, s * cfg.batch_size, cfg.batch_size);
                yb = gather_labels(in.labeled->labels, order, s * cfg.batch_size, cfg.batch_size);
                if (pool_per_batch > 0) {
                    pool_rows = cursor.take(pool_per_batch);
                    xb = concat_rows(xb, gather_rows(in.pool->images, pool_rows, 0, pool_per_batch));
                }
            }
            if (soft_mode) {
                Tensor targets({xb.dim(0), C});
                for (std::size_t r = 0; r < yb.size(); ++r) {
                    targets[r * static_cast<std::size_t>(C) + static_cast<std::size_t>(yb[r])] = 1.0;
                }
                for (std::size_t r = 0; r < pool_rows.size(); ++r) {
                    const std::size_t dst = (yb.size() + r) * static_cast<std::size_t>(C);
                    const std::size_t src = static_cast<std::size_t>(pool_rows[r]) * static_cast<std::size_t>(C);
                    for (int c = 0; c < C; ++c) targets[dst + c] = (*in.pool_soft)[src + c];
                }
                sgd_batch_step(model, xb, nullptr, &targets, lr, in.ewc);
            } else {
                for (int row : pool_rows) yb.push_back((*in.pool_hard)[static_cast<std::size_t>(row)]);
                sgd_batch_step(model, xb, &yb, nullptr, lr, in.ewc);
            }
            ++global;
        }
        EpochStats st;
        st.epoch = epoch;
        st.lr = epoch_lr;
        st.train_acc = pool_only ? accuracy(model, in.pool->images, *in.pool_hard)
                                 : dataset_accuracy(model, *in.labeled);
        if (eval.test) st.test_acc = test_accuracy(model, *eval.test);
        if (eval.wm) st.wm_acc = watermark_accuracy(model, *eval.wm, eval.head_donor);
        result.history.push_back(st);
    }
    result.model = std::move(model);
    return result;
}

} // namespace detail

// Watermark removal by fine-tuning.  The suspect model is folded to its
// effective weights, optionally gets a fresh output layer (rtal), then is
// tuned on the attacker's labeled data under the given schedule - optionally
// with the elastic penalty toward `anchor` weighted by a normalized+clipped
// fisher diagonal, and optionally with pool samples annotated by the
// original model (hard argmax or distilled probabilities).  With lambda = 0
// and no pool this reduces bit-exactly to plain fine-tuning.
inline AttackResult refit_finetune(const Checkpoint& wm_model, const Dataset* labeled, const Dataset* pool,
                                   const RemovalConfig& cfg, const Checkpoint* anchor = nullptr,
                                   const FisherDiagonal* fisher = nullptr, const EvalContext& eval = {}) {
    cfg.validate();
    if (!labeled && !pool) throw ValueError("refit_finetune: need labeled data or a pool");
    if (cfg.lambda > 0.0) {
        if (!anchor || !fisher) throw ValueError("refit_finetune: lambda > 0 needs an anchor and a fisher diagonal");
        if (!fisher->normalized_clipped) {
            throw ValueError("refit_finetune: fisher diagonal must go through normalize_clip_fisher first");
        }
    }

    Checkpoint working = fold_exponential_weighting(wm_model);
    const Checkpoint labeler = working; // annotates the pool; frozen before any reinit
    if (cfg.lambda > 0.0 &&
        (anchor->params.size() != working.params.size() || fisher->values.size() != working.params.size())) {
        throw ShapeError("refit_finetune: anchor/fisher length does not match the model");
    }

    RngState base(cfg.seed);
    RngState loop_rng = base.fork(kAttackShuffleSalt);
    RngState pool_rng = base.fork(kAttackPoolSalt);
    if (cfg.mode == TuneMode::Rtal) {
        RngState reinit_rng = base.fork(kAttackReinitSalt);
        working = reinit_output_layer(working, reinit_rng);
    }

    std::vector<int> pool_hard;
    Tensor pool_soft;
    detail::LoopInputs in;
    in.labeled = labeled && labeled->size() > 0 ? labeled : nullptr;
    in.pool = pool;
    if (pool) {
        pool_hard = pseudo_label(labeler, *pool);
        in.pool_hard = &pool_hard;
        if (cfg.label_mode == LabelMode::Distill) {
            pool_soft = distill_labels(labeler, *pool, cfg.distill_temperature);
            in.pool_soft = &pool_soft;
        }
    }
    EwcTerms ewc;
    if (cfg.lambda > 0.0) {
        ewc.anchor = &anchor->params;
        ewc.fisher = &fisher->values;
        ewc.lambda = cfg.lambda;
        in.ewc = &ewc;
    }

    nlohmann::json echo = cfg.to_json();
    echo["attack"] = "refit";
    echo["folded_ew"] = wm_model.ew_temperature.has_value();
    return detail::tuning_loop(std::move(working), in, cfg, eval, loop_rng, std::move(pool_rng), std::move(echo));
}

// The from-scratch baseline: a fresh model trained on the attacker's data;
// the suspect model appears only as the pool annotator.
inline AttackResult train_from_scratch(const ModelSpec& spec, const Dataset* labeled, const Dataset* pool,
                                       const Checkpoint* labeler, const RemovalConfig& cfg,
                                       const EvalContext& eval = {}) {
    cfg.validate();
    if (cfg.lambda > 0.0) throw ValueError("train_from_scratch: the elastic penalty needs an anchor; lambda must be 0");
    if (cfg.mode == TuneMode::Rtal) throw ValueError("train_from_scratch: rtal is meaningless for a fresh model");
    if (!labeled && !pool) throw ValueError("train_from_scratch: need labeled data or a pool");
    if (pool && !labeler) throw ValueError("train_from_scratch: pool annotation needs a labeler model");

    RngState base(cfg.seed);
    RngState init_rng = base.fork(kAttackInitSalt);
    RngState loop_rng = base.fork(kAttackShuffleSalt);
    RngState pool_rng = base.fork(kAttackPoolSalt);
    Checkpoint working = init_model(spec, init_rng);

    std::vector<int> pool_hard;
    Tensor pool_soft;
    detail::LoopInputs in;
    in.labeled = labeled && labeled->size() > 0 ? labeled : nullptr;
    in.pool = pool;
    if (pool) {
        const Checkpoint annotator = fold_exponential_weighting(*labeler);
        pool_hard = pseudo_label(annotator, *pool);
        in.pool_hard = &pool_hard;
        if (cfg.label_mode == LabelMode::Distill) {
            pool_soft = distill_labels(annotator, *pool, cfg.distill_temperature);
            in.pool_soft = &pool_soft;
        }
    }

    nlohmann::json echo = cfg.to_json();
    echo["attack"] = "from_scratch";
    return detail::tuning_loop(std::move(working), in, cfg, eval, loop_rng, std::move(pool_rng), std::move(echo));
}

// ---- pruning ----

// Zeroes the `rate` fraction of units in the last hidden block (channels of
// the last conv block, or units of the last hidden dense layer) with the
// smallest mean |activation| over the probe set: their incoming weights and
// bias and their outgoing weights all become zero.  rate 0 returns the model
// bitwise unchanged.
inline Checkpoint prune_by_activation(const Checkpoint& model, double rate, const Dataset& probe) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ValueError(detail::cat("prune_by_activation: rate ", rate, " outside [0,1]"));
    if (rate == 0.0) return model;
    Checkpoint out = fold_exponential_weighting(model);
    const ModelSpec& spec = out.spec;
    const bool conv = spec.kind == ModelKind::TinyConv;
    if (!conv && spec.hidden.empty()) {
        throw ValueError("prune_by_activation: model has no hidden layer to prune");
    }
    const int block = conv ? static_cast<int>(spec.channels.size()) - 1 : static_cast<int>(spec.hidden.size()) - 1;
    const int units = conv ? spec.channels.back() : spec.hidden.back();

    // mean |activation| per unit over the probe set
    std::vector<double> mean(static_cast<std::size_t>(units), 0.0);
    std::vector<int> order(static_cast<std::size_t>(probe.size()));
    std::iota(order.begin(), order.end(), 0);
    const int chunk = 256;
    for (int at = 0; at < probe.size(); at += chunk) {
        const int count = std::min(chunk, probe.size() - at);
        ModelPass pass = forward_pass(out, gather_rows(probe.images, order, at, count),
                                      {.param_grads = false, .input_grad = false});
        const Tensor& act = pass.tape.value(pass.block_outputs.at(static_cast<std::size_t>(block)));
        if (conv) {
            const int ph = act.dim(2), pw = act.dim(3);
            for (int b = 0; b < count; ++b)
                for (int u = 0; u < units; ++u)
                    for (int y = 0; y < ph; ++y)
                        for (int x = 0; x < pw; ++x)
                            mean[static_cast<std::size_t>(u)] += std::abs(
                                act[((static_cast<std::size_t>(b) * units + u) * ph + y) * pw + x]);
        } else {
            for (int b = 0; b < count; ++b)
                for (int u = 0; u < units; ++u)
                    mean[static_cast<std::size_t>(u)] += std::abs(act[static_cast<std::size_t>(b) * units + u]);
        }
    }
    // constant normalization is irrelevant to the ranking; skip it

    std::vector<int> by_mean(static_cast<std::size_t>(units));
    std::iota(by_mean.begin(), by_mean.end(), 0);
    std::stable_sort(by_mean.begin(), by_mean.end(), [&](int a, int b) {
        return mean[static_cast<std::size_t>(a)] < mean[static_cast<std::size_t>(b)];
    });
    const int n_prune = static_cast<int>(std::floor(rate * units));

    const int w_in = out.params.find(block, "w");
    const int b_in = out.params.find(block, "b");
    const int w_out = out.params.find(block + 1, "w");
    if (w_in < 0 || w_out < 0) throw Error("prune_by_activation: layout is missing expected entries");
    auto win = out.params.slice(w_in);
    auto wout = out.params.slice(w_out);
    const auto& win_shape = out.params.entry(w_in).shape;
    const auto& wout_shape = out.params.entry(w_out).shape;

    for (int r = 0; r < n_prune; ++r) {
        const int u = by_mean[static_cast<std::size_t>(r)];
        if (conv) {
            // incoming: kernel slab [u, :, :, :] and bias
            const std::size_t slab = static_cast<std::size_t>(win_shape[1]) * win_shape[2] * win_shape[3];
            for (std::size_t i = 0; i < slab; ++i) win[static_cast<std::size_t>(u) * slab + i] = 0.0;
            // outgoing: head rows covering this channel's spatial positions
            const std::size_t spatial = static_cast<std::size_t>(wout_shape[0]) / static_cast<std::size_t>(units);
            const std::size_t width = static_cast<std::size_t>(wout_shape[1]);
            for (std::size_t p = 0; p < spatial; ++p) {
                const std::size_t row = static_cast<std::size_t>(u) * spatial + p;
                for (std::size_t c = 0; c < width; ++c) wout[row * width + c] = 0.0;
            }
        } else {
            // incoming: column u of [in, units] and bias
            const std::size_t cols = static_cast<std::size_t>(win_shape[1]);
            for (int i = 0; i < win_shape[0]; ++i) win[static_cast<std::size_t>(i) * cols + static_cast<std::size_t>(u)] = 0.0;
            // outgoing: row u of [units, next]
            const std::size_t width = static_cast<std::size_t>(wout_shape[1]);
            for (std::size_t c = 0; c < width; ++c) wout[static_cast<std::size_t>(u) * width + c] = 0.0;
        }
        if (b_in >= 0) out.params.slice(b_in)[static_cast<std::size_t>(u)] = 0.0;
    }
    out.metadata["pruned_units"] = std::to_string(n_prune);
    out.metadata["prune_rate"] = std::to_string(rate);
    return out;
}

// Prune, then fine-tune on the attacker's labeled data (the probe for
// activation ranking is that same data).  The penalty-free variant of the
// tuning attack; lambda must be 0.
inline AttackResult fine_prune(const Checkpoint& wm_model, double rate, const Dataset& labeled, const Dataset* pool,
                               const RemovalConfig& cfg, const EvalContext& eval = {}) {
    if (cfg.lambda > 0.0) throw ValueError("fine_prune: the elastic penalty is not part of this attack; lambda must be 0");
    const Checkpoint pruned = prune_by_activation(wm_model, rate, labeled);
    AttackResult result = refit_finetune(pruned, &labeled, pool, cfg, nullptr, nullptr, eval);
    result.config["attack"] = "fine_prune";
    result.config["prune_rate"] = rate;
    return result;
}

// ---- transfer ----

struct TransferConfig {
    int new_num_classes = 0; // 0 -> task_b.num_classes
    TrainOptions stage1 = {.epochs = 15, .batch_size = 100, .lr = 0.02};
    int fisher_samples = 2000;
    bool fisher_dataset_labels = false;
    RemovalConfig tune; // stage-3 settings; mode must be ftal

    void validate() const {
        tune.validate();
        if (tune.mode != TuneMode::Ftal) throw ValueError("TransferConfig: transfer tunes all layers after the head swap");
        if (stage1.epochs < 1) throw ValueError("TransferConfig: stage1 epochs must be >= 1");
        if (fisher_samples < 1 && tune.lambda > 0.0) throw ValueError("TransferConfig: fisher_samples must be >= 1");
    }
};

struct TransferResult {
    Checkpoint adapted;  // after the low-rate head adaptation stage
    AttackResult attack; // after the full tuning stage
    FisherDiagonal fisher;
};

// Transfers the suspect model to a new task: replace the output layer for
// the new class count, adapt briefly at a low constant rate, then run the
// tuning attack on the new task's data with the elastic penalty anchored at
// the adapted model.  Watermark retention of the result is measured through
// the original model's output layer (set eval.head_donor).
inline TransferResult transfer_refit(const Checkpoint& wm_model, const Dataset& task_b, const Dataset* pool,
                                     const TransferConfig& tc, const EvalContext& eval = {}) {
    tc.validate();
    const int classes = tc.new_num_classes > 0 ? tc.new_num_classes : task_b.num_classes;
    if (classes < task_b.num_classes) throw ValueError("transfer_refit: head too small for the task's labels");

    RngState base(tc.tune.seed);
    RngState head_rng = base.fork(kAttackReinitSalt);
    RngState stage1_rng = base.fork(0x7A51);
    RngState fisher_rng = base.fork(0x7A52);

    TransferResult out;
    Checkpoint folded = fold_exponential_weighting(wm_model);
    out.adapted = reinit_output_layer(folded, head_rng, classes);
    train_basic(out.adapted, task_b, tc.stage1, stage1_rng);

    const Checkpoint* anchor = nullptr;
    const FisherDiagonal* fisher = nullptr;
    if (tc.tune.lambda > 0.0) {
        out.fisher = normalize_clip_fisher(
            estimate_fisher(out.adapted, task_b, tc.fisher_samples, fisher_rng, tc.fisher_dataset_labels),
            tc.tune.lambda, tc.tune.schedule.initial);
        anchor = &out.adapted;
        fisher = &out.fisher;
    }
    out.attack = refit_finetune(out.adapted, &task_b, pool, tc.tune, anchor, fisher, eval);
    out.attack.config["attack"] = "transfer_refit";
    out.attack.config["new_num_classes"] = classes;
    return out;
}

// ---- the rising-rate diagnostic ----

struct LrSweepRow {
    int level = 0;
    int epoch = 0;
    double lr = 0.0;
    double train_acc = 0.0;
    double test_acc = std::numeric_limits<double>::quiet_NaN();
    double wm_acc = std::numeric_limits<double>::quiet_NaN();
};

// Fine-tunes with a rate that doubles every `epochs_per_level` epochs,
// starting tiny.  Early levels leave the watermark intact; once the rate is
// large enough to disturb training accuracy, watermark accuracy collapses.
// Returns one row per epoch, levels * epochs_per_level in total.
inline std::vector<LrSweepRow> lr_sweep_diagnostic(const Checkpoint& wm_model, const Dataset& labeled, int levels,
                                                   int epochs_per_level, double lr0, int batch_size,
                                                   std::uint64_t seed, const EvalContext& eval) {
    if (levels < 1 || epochs_per_level < 1) throw ValueError("lr_sweep_diagnostic: levels and epochs_per_level must be >= 1");
    RemovalConfig cfg;
    cfg.mode = TuneMode::Ftal;
    cfg.schedule = {ScheduleKind::DoublingDiagnostic, lr0, 2.0, epochs_per_level};
    cfg.epochs = levels * epochs_per_level;
    cfg.batch_size = batch_size;
    cfg.seed = seed;
    const AttackResult run = refit_finetune(wm_model, &labeled, nullptr, cfg, nullptr, nullptr, eval);
    std::vector<LrSweepRow> rows;
    rows.reserve(run.history.size());
    for (const EpochStats& st : run.history) {
        LrSweepRow r;
        r.level = st.epoch / epochs_per_level;
        r.epoch = st.epoch;
        r.lr = st.lr;
        r.train_acc = st.train_acc;
        r.test_acc = st.test_acc;
        r.wm_acc = st.wm_acc;
        rows.push_back(r);
    }
    return rows;
}

} // namespace wmlab
