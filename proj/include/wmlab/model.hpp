#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wmlab/autograd.hpp"
#include "wmlab/error.hpp"
#include "wmlab/param_vector.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

enum class ModelKind { Mlp, TinyConv };

inline std::string to_string(ModelKind k) { return k == ModelKind::Mlp ? "mlp" : "tinyconv"; }

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "mlp") return ModelKind::Mlp;
    if (s == "tinyconv") return ModelKind::TinyConv;
    throw ValueError(detail::cat("unknown model kind '", s, "'"));
}

// Architecture description.  Mlp flattens the input and applies dense+relu
// blocks sized by `hidden`, then a dense output layer.  TinyConv applies
// 3x3/pad-1 conv + relu + 2x2 maxpool blocks sized by `channels`, then a
// dense output layer.  `bias = false` builds every layer without bias terms
// (useful for models whose gradients must vanish on all-zero input).
struct ModelSpec {
    ModelKind kind = ModelKind::Mlp;
    std::vector<int> input = {1, 8, 8}; // input dims, [C,H,W] for conv
    std::vector<int> hidden = {32, 32};
    std::vector<int> channels = {8, 16};
    int num_classes = 2;
    bool bias = true;

    [[nodiscard]] int input_count() const {
        int n = 1;
        for (int d : input) n *= d;
        return n;
    }

    void validate() const {
        if (num_classes < 2) throw ValueError(detail::cat("ModelSpec: num_classes must be >= 2, got ", num_classes));
        if (input.empty()) throw ValueError("ModelSpec: empty input dims");
        for (int d : input)
            if (d <= 0) throw ValueError("ModelSpec: non-positive input dim");
        if (kind == ModelKind::Mlp) {
            for (int h : hidden)
                if (h < 1) throw ValueError("ModelSpec: hidden widths must be >= 1");
        } else {
            if (input.size() != 3) throw ValueError("ModelSpec: conv input must be [C,H,W]");
            if (channels.empty()) throw ValueError("ModelSpec: conv model needs at least one channel count");
            for (int c : channels)
                if (c < 1) throw ValueError("ModelSpec: channel counts must be >= 1");
            int h = input[1], w = input[2];
            for (std::size_t i = 0; i < channels.size(); ++i) {
                if (h % 2 != 0 || w % 2 != 0) {
                    throw ValueError(detail::cat("ModelSpec: spatial dims ", h, "x", w,
                                                 " not divisible by 2 at conv block ", i));
                }
                h /= 2;
                w /= 2;
            }
        }
    }

    // Number of layers with parameters (output layer included).
    [[nodiscard]] int layer_count() const {
        return kind == ModelKind::Mlp ? static_cast<int>(hidden.size()) + 1 : static_cast<int>(channels.size()) + 1;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return nlohmann::json{{"kind", to_string(kind)}, {"input", input},   {"hidden", hidden},
                              {"channels", channels},    {"num_classes", num_classes}, {"bias", bias}};
    }

    static ModelSpec from_json(const nlohmann::json& j) {
        ModelSpec s;
        for (const auto& [key, _] : j.items()) {
            if (key != "kind" && key != "input" && key != "hidden" && key != "channels" &&
                key != "num_classes" && key != "bias") {
                throw ValueError(detail::cat("ModelSpec: unknown key '", key, "'"));
            }
        }
        s.kind = model_kind_from_string(j.at("kind").get<std::string>());
        s.input = j.at("input").get<std::vector<int>>();
        s.hidden = j.at("hidden").get<std::vector<int>>();
        s.channels = j.at("channels").get<std::vector<int>>();
        s.num_classes = j.at("num_classes").get<int>();
        s.bias = j.at("bias").get<bool>();
        s.validate();
        return s;
    }

    bool operator==(const ModelSpec&) const = default;
};

// Parameter layout in layer order; weights before biases within a layer.
inline std::vector<LayoutEntry> make_layout(const ModelSpec& spec) {
    spec.validate();
    std::vector<LayoutEntry> layout;
    auto add = [&](int layer, const std::string& name, std::vector<int> shape) {
        LayoutEntry e;
        e.layer = layer;
        e.name = name;
        e.shape = std::move(shape);
        layout.push_back(std::move(e));
    };
    if (spec.kind == ModelKind::Mlp) {
        int in = spec.input_count();
        for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
            add(static_cast<int>(i), "w", {in, spec.hidden[i]});
            if (spec.bias) add(static_cast<int>(i), "b", {spec.hidden[i]});
            in = spec.hidden[i];
        }
        const int out_layer = static_cast<int>(spec.hidden.size());
        add(out_layer, "w", {in, spec.num_classes});
        if (spec.bias) add(out_layer, "b", {spec.num_classes});
    } else {
        int ic = spec.input[0], h = spec.input[1], w = spec.input[2];
        for (std::size_t i = 0; i < spec.channels.size(); ++i) {
            add(static_cast<int>(i), "w", {spec.channels[i], ic, 3, 3});
            if (spec.bias) add(static_cast<int>(i), "b", {spec.channels[i]});
            ic = spec.channels[i];
            h /= 2;
            w /= 2;
        }
        const int out_layer = static_cast<int>(spec.channels.size());
        add(out_layer, "w", {ic * h * w, spec.num_classes});
        if (spec.bias) add(out_layer, "b", {spec.num_classes});
    }
    return layout;
}

// Scaled uniform fan-in initialization: weights U(-1/sqrt(fan_in),
// +1/sqrt(fan_in)), biases zero.  Draw order is layout order, row-major
// within each tensor, so a given rng stream always produces the same
// parameter vector.
inline ParamVector init_params(const ModelSpec& spec, RngState& rng) {
    ParamVector params(make_layout(spec));
    for (int i = 0; i < params.entries(); ++i) {
        const LayoutEntry& e = params.entry(i);
        if (e.name != "w") continue;
        const int fan_in = e.shape.size() == 2 ? e.shape[0]                              // [I,O]
                                               : e.shape[1] * e.shape[2] * e.shape[3];   // [OC,IC,KH,KW]
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        auto s = params.slice(i);
        for (double& v : s) v = rng.uniform(-bound, bound);
    }
    return params;
}

// A model checkpoint: architecture, flat parameters, an optional exponential
// weighting temperature (set only while the reparameterization is active),
// and free-form string metadata.
struct Checkpoint {
    ModelSpec spec;
    ParamVector params;
    std::optional<double> ew_temperature;
    std::map<std::string, std::string> metadata;
};

inline Checkpoint init_model(const ModelSpec& spec, RngState& rng) {
    Checkpoint ck;
    ck.spec = spec;
    ck.params = init_params(spec, rng);
    return ck;
}

struct EWConfig {
    double temperature = 2.0;

    void validate() const {
        if (!(temperature > 0.0))
            throw ValueError(detail::cat("EWConfig: temperature must be positive, got ", temperature));
    }
};

// Largest |theta| per layer; weights and biases of a layer share one max.
inline std::vector<double> layer_absmax(const ParamVector& params, int layer_count) {
    std::vector<double> m(static_cast<std::size_t>(layer_count), 0.0);
    for (int i = 0; i < params.entries(); ++i) {
        const LayoutEntry& e = params.entry(i);
        double& cur = m[static_cast<std::size_t>(e.layer)];
        for (double v : params.slice(i)) cur = std::max(cur, std::abs(v));
    }
    return m;
}

// theta_i -> theta_i * exp(|theta_i| * T) / exp(max_j |theta_j| * T), per
// layer.  Sign-preserving, order-preserving in |theta|, and the layer's max
// element is a fixed point.
inline ParamVector apply_exponential_weighting(const ParamVector& params, const EWConfig& cfg, int layer_count) {
    cfg.validate();
    const std::vector<double> maxes = layer_absmax(params, layer_count);
    ParamVector out = params;
    for (int i = 0; i < out.entries(); ++i) {
        const LayoutEntry& e = out.entry(i);
        const double m = maxes[static_cast<std::size_t>(e.layer)];
        auto s = out.slice(i);
        for (double& v : s) v *= std::exp((std::abs(v) - m) * cfg.temperature);
    }
    return out;
}

// Replaces the reparameterized checkpoint by its effective weights.  The
// result evaluates identically and carries no ew_temperature.
inline Checkpoint fold_exponential_weighting(const Checkpoint& ck) {
    if (!ck.ew_temperature) return ck;
    Checkpoint out = ck;
    out.params = apply_exponential_weighting(ck.params, EWConfig{*ck.ew_temperature}, ck.spec.layer_count());
    out.ew_temperature.reset();
    return out;
}

// One recorded forward pass.  Keep the pass alive to run backward and read
// gradients; `param_leaves[i]` is the tape leaf for layout entry i.
struct ModelPass {
    Tape tape;
    std::vector<int> param_leaves;
    std::vector<int> block_outputs; // post-relu (mlp) / post-pool (conv) node per hidden block
    int input = -1;
    int logits = -1;
};

struct ForwardOptions {
    bool param_grads = true;
    bool input_grad = false;
};

// Builds the graph for a batch.  The batch is [B, input...]; an Mlp also
// accepts the pre-flattened [B, input_count].  If the checkpoint carries an
// ew_temperature, every parameter leaf is wrapped in the exponential
// weighting node, so gradients flow to the raw parameters through the
// reparameterization.
inline ModelPass forward_pass(const Checkpoint& ck, const Tensor& batch, const ForwardOptions& opt = {}) {
    ck.spec.validate();
    if (ck.ew_temperature && !(*ck.ew_temperature > 0.0)) throw ValueError("forward_pass: non-positive ew_temperature");
    if (batch.rank() < 2) throw ShapeError(detail::cat("forward_pass: batch must have a leading batch dim, got ",
                                                       Tensor::shape_string(batch.shape())));
    const int B = batch.dim(0);
    std::vector<int> expect = {B};
    for (int d : ck.spec.input) expect.push_back(d);
    const bool exact = batch.shape() == expect;
    const bool flat_ok = ck.spec.kind == ModelKind::Mlp && batch.rank() == 2 && batch.dim(1) == ck.spec.input_count();
    if (!exact && !flat_ok) {
        throw ShapeError(detail::cat("forward_pass: batch ", Tensor::shape_string(batch.shape()),
                                     " does not match model input ", Tensor::shape_string(expect)));
    }

    ModelPass pass;
    Tape& t = pass.tape;
    pass.input = t.leaf(batch, opt.input_grad);

    // Parameter leaves, optionally wrapped by exponential weighting.
    std::vector<int> effective(static_cast<std::size_t>(ck.params.entries()));
    std::vector<double> maxes;
    if (ck.ew_temperature) maxes = layer_absmax(ck.params, ck.spec.layer_count());
    pass.param_leaves.resize(static_cast<std::size_t>(ck.params.entries()));
    for (int i = 0; i < ck.params.entries(); ++i) {
        const int leaf = t.leaf(ck.params.unflatten(i), opt.param_grads);
        pass.param_leaves[static_cast<std::size_t>(i)] = leaf;
        if (ck.ew_temperature) {
            const double m = maxes[static_cast<std::size_t>(ck.params.entry(i).layer)];
            effective[static_cast<std::size_t>(i)] = t.ew_scale(leaf, *ck.ew_temperature, m);
        } else {
            effective[static_cast<std::size_t>(i)] = leaf;
        }
    }
    auto entry_node = [&](int layer, const char* name) {
        const int i = ck.params.find(layer, name);
        return i >= 0 ? effective[static_cast<std::size_t>(i)] : -1;
    };

    int cur = pass.input;
    if (ck.spec.kind == ModelKind::Mlp) {
        if (!flat_ok || batch.rank() != 2) cur = t.reshape(cur, {B, ck.spec.input_count()});
        const int layers = ck.spec.layer_count();
        for (int l = 0; l < layers; ++l) {
            cur = t.linear(cur, entry_node(l, "w"), entry_node(l, "b"));
            if (l + 1 < layers) {
                cur = t.relu(cur);
                pass.block_outputs.push_back(cur);
            }
        }
    } else {
        const int blocks = static_cast<int>(ck.spec.channels.size());
        for (int l = 0; l < blocks; ++l) {
            cur = t.conv2d(cur, entry_node(l, "w"), entry_node(l, "b"), 1);
            cur = t.relu(cur);
            cur = t.maxpool2(cur);
            pass.block_outputs.push_back(cur);
        }
        const Tensor& v = t.value(cur);
        cur = t.reshape(cur, {B, v.dim(1) * v.dim(2) * v.dim(3)});
        cur = t.linear(cur, entry_node(blocks, "w"), entry_node(blocks, "b"));
    }
    pass.logits = cur;
    return pass;
}

// Logits without keeping the tape.
inline Tensor logits_of(const Checkpoint& ck, const Tensor& batch) {
    ModelPass pass = forward_pass(ck, batch, {.param_grads = false, .input_grad = false});
    return pass.tape.value(pass.logits);
}

// Flat parameter gradient aligned with ck.params; entries that received no
// gradient contribute zeros.
inline std::vector<double> gather_param_grads(const ModelPass& pass, const ParamVector& params) {
    std::vector<double> g(params.size(), 0.0);
    for (int i = 0; i < params.entries(); ++i) {
        const int leaf = pass.param_leaves[static_cast<std::size_t>(i)];
        if (!pass.tape.has_gradient(leaf)) continue;
        const Tensor& t = pass.tape.gradient(leaf);
        const LayoutEntry& e = params.entry(i);
        for (std::size_t k = 0; k < e.count; ++k) g[e.offset + k] = t[k];
    }
    return g;
}

// Fresh fan-in init for the output layer only; everything else is copied
// bit-exactly.  Optionally changes the class count (the layout is rebuilt).
// Requires a plain checkpoint: fold exponential weighting first.
inline Checkpoint reinit_output_layer(const Checkpoint& ck, RngState& rng,
                                      std::optional<int> new_num_classes = std::nullopt) {
    if (ck.ew_temperature) {
        throw ValueError("reinit_output_layer: fold exponential weighting before replacing the output layer");
    }
    ModelSpec spec = ck.spec;
    if (new_num_classes) spec.num_classes = *new_num_classes;
    spec.validate();
    Checkpoint out;
    out.spec = spec;
    out.params = ParamVector(make_layout(spec));
    out.metadata = ck.metadata;
    const int out_layer = spec.layer_count() - 1;
    for (int i = 0; i < out.params.entries(); ++i) {
        const LayoutEntry& e = out.params.entry(i);
        if (e.layer != out_layer) {
            const int src = ck.params.find(e.layer, e.name);
            if (src < 0 || ck.params.entry(src).shape != e.shape) {
                throw ShapeError(detail::cat("reinit_output_layer: trunk entry ", e.layer, ":", e.name,
                                             " missing or mismatched"));
            }
            out.params.set_entry(i, ck.params.unflatten(src));
        } else if (e.name == "w") {
            const int fan_in = e.shape[0];
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            auto s = out.params.slice(i);
            for (double& v : s) v = rng.uniform(-bound, bound);
        }
        // output bias stays zero
    }
    return out;
}

} // namespace wmlab
