#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wmlab/error.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

// Reverse-mode tape over dense f64 tensors.
//
// Usage: append nodes (values are computed eagerly during construction),
// call backward() exactly once on a scalar node, then read gradient(id).
// Node ids are indices into the tape, so construction order is already a
// topological order and backward is a single reverse sweep.
//
// Gradient conventions fixed here and relied on by tests:
//  - relu passes gradient only where the input is strictly positive,
//  - maxpool ties resolve to the first element in row-major scan order,
//  - both cross-entropy ops average over the batch,
//  - ew_scale treats the layer max as a constant: d(s_i*x_i)/dx_i =
//    s_i * (1 + T*|x_i|).
//
// Every forward value is checked for NaN/Inf as it is produced.
class Tape {
public:
    enum class Op {
        Leaf,
        Linear,
        Conv2d,
        Relu,
        MaxPool2,
        Reshape,
        EwScale,
        CrossEntropyHard,
        CrossEntropySoft,
        QuadPenalty,
        AddScalars,
    };

    struct Node {
        Op op = Op::Leaf;
        int in0 = -1;
        int in1 = -1;
        int in2 = -1;
        std::vector<int> extra_in;   // AddScalars terms beyond in0
        Tensor val;
        Tensor grad;                 // allocated during backward, may stay empty
        bool needs_grad = false;
        std::vector<int> iaux;       // pool argmax indices, hard labels
        std::vector<double> daux;    // ew scales, softmax probs, fisher diag
        std::vector<double> daux2;   // soft targets, penalty anchor
        double c0 = 0.0;             // ew temperature, penalty coefficient
        int pad = 0;                 // conv padding
    };

    [[nodiscard]] int size() const { return static_cast<int>(nodes_.size()); }

    [[nodiscard]] const Tensor& value(int id) const { return node(id).val; }

    // Valid only after backward(); empty-tensor error if no gradient flowed.
    [[nodiscard]] const Tensor& gradient(int id) const {
        if (!ran_backward_) throw Error("gradient: backward has not run");
        const Node& n = node(id);
        if (n.grad.empty()) throw Error(detail::cat("gradient: node ", id, " received no gradient"));
        return n.grad;
    }

    [[nodiscard]] bool has_gradient(int id) const { return ran_backward_ && !node(id).grad.empty(); }

    int leaf(Tensor v, bool needs_grad = false) {
        v.check_finite("leaf");
        Node n;
        n.op = Op::Leaf;
        n.val = std::move(v);
        n.needs_grad = needs_grad;
        return push(std::move(n));
    }

    // y[b,o] = sum_i x[b,i] * w[i,o] (+ b[o]).  Pass bias = -1 to omit.
    int linear(int x, int w, int bias) {
        const Tensor& xv = value_checked(x, "linear input");
        const Tensor& wv = value_checked(w, "linear weight");
        require(xv.rank() == 2, detail::cat("linear: input must be [B,I], got ", Tensor::shape_string(xv.shape())));
        require(wv.rank() == 2, detail::cat("linear: weight must be [I,O], got ", Tensor::shape_string(wv.shape())));
        require(xv.dim(1) == wv.dim(0), detail::cat("linear: input width ", xv.dim(1),
                                                    " != weight height ", wv.dim(0)));
        const int B = xv.dim(0), I = xv.dim(1), O = wv.dim(1);
        Node n;
        n.op = Op::Linear;
        n.in0 = x;
        n.in1 = w;
        n.in2 = bias;
        n.needs_grad = node(x).needs_grad || node(w).needs_grad;
        Tensor y({B, O});
        if (bias >= 0) {
            const Tensor& bv = value_checked(bias, "linear bias");
            require(bv.rank() == 1 && bv.dim(0) == O, detail::cat("linear: bias must be [", O, "]"));
            n.needs_grad = n.needs_grad || node(bias).needs_grad;
            for (int b = 0; b < B; ++b)
                for (int o = 0; o < O; ++o) y[idx2(b, o, O)] = bv[static_cast<std::size_t>(o)];
        }
        for (int b = 0; b < B; ++b) {
            for (int i = 0; i < I; ++i) {
                const double xi = xv[idx2(b, i, I)];
                for (int o = 0; o < O; ++o) y[idx2(b, o, O)] += xi * wv[idx2(i, o, O)];
            }
        }
        y.check_finite("linear");
        n.val = std::move(y);
        return push(std::move(n));
    }

    // Stride-1 2d convolution with zero padding.  kernel is [OC,IC,KH,KW].
    int conv2d(int x, int kernel, int bias, int pad) {
        const Tensor& xv = value_checked(x, "conv2d input");
        const Tensor& kv = value_checked(kernel, "conv2d kernel");
        require(xv.rank() == 4, detail::cat("conv2d: input must be [B,C,H,W], got ", Tensor::shape_string(xv.shape())));
        require(kv.rank() == 4, detail::cat("conv2d: kernel must be [OC,IC,KH,KW], got ",
                                            Tensor::shape_string(kv.shape())));
        require(pad >= 0, "conv2d: negative padding");
        require(kv.dim(1) == xv.dim(1), detail::cat("conv2d: kernel expects ", kv.dim(1), " input channels, input has ",
                                                    xv.dim(1)));
        const int B = xv.dim(0), IC = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        const int OC = kv.dim(0), KH = kv.dim(2), KW = kv.dim(3);
        const int OH = H + 2 * pad - KH + 1;
        const int OW = W + 2 * pad - KW + 1;
        require(OH >= 1 && OW >= 1, detail::cat("conv2d: kernel ", KH, "x", KW, " too large for padded input"));
        Node n;
        n.op = Op::Conv2d;
        n.in0 = x;
        n.in1 = kernel;
        n.in2 = bias;
        n.pad = pad;
        n.needs_grad = node(x).needs_grad || node(kernel).needs_grad;
        Tensor y({B, OC, OH, OW});
        const double* bv = nullptr;
        if (bias >= 0) {
            const Tensor& bt = value_checked(bias, "conv2d bias");
            require(bt.rank() == 1 && bt.dim(0) == OC, detail::cat("conv2d: bias must be [", OC, "]"));
            n.needs_grad = n.needs_grad || node(bias).needs_grad;
            bv = bt.data();
        }
        for (int b = 0; b < B; ++b) {
            for (int oc = 0; oc < OC; ++oc) {
                for (int oy = 0; oy < OH; ++oy) {
                    for (int ox = 0; ox < OW; ++ox) {
                        double acc = bv ? bv[oc] : 0.0;
                        for (int ic = 0; ic < IC; ++ic) {
                            for (int ky = 0; ky < KH; ++ky) {
                                const int iy = oy + ky - pad;
                                if (iy < 0 || iy >= H) continue;
                                for (int kx = 0; kx < KW; ++kx) {
                                    const int ix = ox + kx - pad;
                                    if (ix < 0 || ix >= W) continue;
                                    acc += xv[idx4(b, ic, iy, ix, IC, H, W)] * kv[idx4(oc, ic, ky, kx, IC, KH, KW)];
                                }
                            }
                        }
                        y[idx4(b, oc, oy, ox, OC, OH, OW)] = acc;
                    }
                }
            }
        }
        y.check_finite("conv2d");
        n.val = std::move(y);
        return push(std::move(n));
    }

    int relu(int x) {
        const Tensor& xv = value_checked(x, "relu input");
        Node n;
        n.op = Op::Relu;
        n.in0 = x;
        n.needs_grad = node(x).needs_grad;
        Tensor y(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
        n.val = std::move(y);
        return push(std::move(n));
    }

    // 2x2 max pooling with stride 2; H and W must be even.
    int maxpool2(int x) {
        const Tensor& xv = value_checked(x, "maxpool2 input");
        require(xv.rank() == 4, detail::cat("maxpool2: input must be [B,C,H,W], got ",
                                            Tensor::shape_string(xv.shape())));
        const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        require(H % 2 == 0 && W % 2 == 0, detail::cat("maxpool2: H=", H, " W=", W, " must be even"));
        const int OH = H / 2, OW = W / 2;
        Node n;
        n.op = Op::MaxPool2;
        n.in0 = x;
        n.needs_grad = node(x).needs_grad;
        Tensor y({B, C, OH, OW});
        n.iaux.resize(y.size());
        for (int b = 0; b < B; ++b) {
            for (int c = 0; c < C; ++c) {
                for (int oy = 0; oy < OH; ++oy) {
                    for (int ox = 0; ox < OW; ++ox) {
                        int best = -1;
                        double bestv = 0.0;
                        for (int dy = 0; dy < 2; ++dy) {
                            for (int dx = 0; dx < 2; ++dx) {
                                const int i = static_cast<int>(idx4(b, c, 2 * oy + dy, 2 * ox + dx, C, H, W));
                                if (best < 0 || xv[static_cast<std::size_t>(i)] > bestv) {
                                    best = i;
                                    bestv = xv[static_cast<std::size_t>(i)];
                                }
                            }
                        }
                        const std::size_t oi = idx4(b, c, oy, ox, C, OH, OW);
                        y[oi] = bestv;
                        n.iaux[oi] = best;
                    }
                }
            }
        }
        n.val = std::move(y);
        return push(std::move(n));
    }

    int reshape(int x, std::vector<int> shape) {
        const Tensor& xv = value_checked(x, "reshape input");
        Node n;
        n.op = Op::Reshape;
        n.in0 = x;
        n.needs_grad = node(x).needs_grad;
        n.val = xv.reshaped(std::move(shape));
        return push(std::move(n));
    }

    // Exponential weighting of one layer: y_i = s_i * x_i with
    // s_i = exp((|x_i| - m) * T) and m the layer's max |x| passed in by the
    // caller and treated as a constant.  s_i <= 1, so the forward is stable.
    int ew_scale(int x, double temperature, double layer_absmax) {
        const Tensor& xv = value_checked(x, "ew_scale input");
        require(temperature > 0.0, detail::cat("ew_scale: temperature must be positive, got ", temperature));
        require(layer_absmax >= 0.0, "ew_scale: negative layer max");
        Node n;
        n.op = Op::EwScale;
        n.in0 = x;
        n.c0 = temperature;
        n.needs_grad = node(x).needs_grad;
        Tensor y(xv.shape());
        n.daux.resize(xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double s = std::exp((std::abs(xv[i]) - layer_absmax) * temperature);
            n.daux[i] = s;
            y[i] = s * xv[i];
        }
        y.check_finite("ew_scale");
        n.val = std::move(y);
        return push(std::move(n));
    }

    // Mean cross-entropy against integer labels, computed via a shifted
    // log-sum-exp so saturated logits stay finite.
    int cross_entropy(int logits, const std::vector<int>& labels) {
        const Tensor& zv = value_checked(logits, "cross_entropy logits");
        require(zv.rank() == 2, detail::cat("cross_entropy: logits must be [B,C], got ",
                                            Tensor::shape_string(zv.shape())));
        const int B = zv.dim(0), C = zv.dim(1);
        require(static_cast<int>(labels.size()) == B,
                detail::cat("cross_entropy: ", labels.size(), " labels for batch of ", B));
        for (int b = 0; b < B; ++b) {
            require(labels[static_cast<std::size_t>(b)] >= 0 && labels[static_cast<std::size_t>(b)] < C,
                    detail::cat("cross_entropy: label ", labels[static_cast<std::size_t>(b)], " at row ", b,
                                " outside [0,", C, ")"));
        }
        Node n;
        n.op = Op::CrossEntropyHard;
        n.in0 = logits;
        n.needs_grad = node(logits).needs_grad;
        n.iaux = labels;
        n.daux.resize(zv.size());
        double total = 0.0;
        for (int b = 0; b < B; ++b) {
            const double lse = row_lse(zv, b, C, n.daux);
            total += lse - zv[idx2(b, labels[static_cast<std::size_t>(b)], C)];
        }
        Tensor y({1});
        y[0] = total / B;
        y.check_finite("cross_entropy");
        n.val = std::move(y);
        return push(std::move(n));
    }

    // Mean cross-entropy against per-row probability targets.  Each target
    // row must be non-negative and sum to 1 within 1e-6.
    int cross_entropy_soft(int logits, const Tensor& targets) {
        const Tensor& zv = value_checked(logits, "cross_entropy_soft logits");
        require(zv.rank() == 2, detail::cat("cross_entropy_soft: logits must be [B,C], got ",
                                            Tensor::shape_string(zv.shape())));
        require(targets.same_shape(zv), detail::cat("cross_entropy_soft: targets ",
                                                    Tensor::shape_string(targets.shape()), " != logits ",
                                                    Tensor::shape_string(zv.shape())));
        targets.check_finite("cross_entropy_soft targets");
        const int B = zv.dim(0), C = zv.dim(1);
        for (int b = 0; b < B; ++b) {
            double sum = 0.0;
            for (int c = 0; c < C; ++c) {
                const double t = targets[idx2(b, c, C)];
                require(t >= 0.0, detail::cat("cross_entropy_soft: negative target at row ", b));
                sum += t;
            }
            require(std::abs(sum - 1.0) <= 1e-6,
                    detail::cat("cross_entropy_soft: target row ", b, " sums to ", sum));
        }
        Node n;
        n.op = Op::CrossEntropySoft;
        n.in0 = logits;
        n.needs_grad = node(logits).needs_grad;
        n.daux.resize(zv.size());
        n.daux2 = targets.values();
        double total = 0.0;
        for (int b = 0; b < B; ++b) {
            const double lse = row_lse(zv, b, C, n.daux);
            for (int c = 0; c < C; ++c) {
                const double t = targets[idx2(b, c, C)];
                if (t > 0.0) total += t * (lse - zv[idx2(b, c, C)]);
            }
        }
        Tensor y({1});
        y[0] = total / B;
        y.check_finite("cross_entropy_soft");
        n.val = std::move(y);
        return push(std::move(n));
    }

    // coef * sum_i fisher_i * (x_i - anchor_i)^2, as one scalar node.
    int quad_penalty(int x, std::span<const double> fisher, std::span<const double> anchor, double coef) {
        const Tensor& xv = value_checked(x, "quad_penalty input");
        require(fisher.size() == xv.size(), detail::cat("quad_penalty: fisher length ", fisher.size(),
                                                        " != input size ", xv.size()));
        require(anchor.size() == xv.size(), detail::cat("quad_penalty: anchor length ", anchor.size(),
                                                        " != input size ", xv.size()));
        require(std::isfinite(coef) && coef >= 0.0, "quad_penalty: coefficient must be finite and >= 0");
        Node n;
        n.op = Op::QuadPenalty;
        n.in0 = x;
        n.c0 = coef;
        n.needs_grad = node(x).needs_grad;
        n.daux.assign(fisher.begin(), fisher.end());
        n.daux2.assign(anchor.begin(), anchor.end());
        double total = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double d = xv[i] - anchor[i];
            total += fisher[i] * d * d;
        }
        Tensor y({1});
        y[0] = coef * total;
        y.check_finite("quad_penalty");
        n.val = std::move(y);
        return push(std::move(n));
    }

    // Sum of scalar nodes.
    int add_scalars(const std::vector<int>& terms) {
        require(!terms.empty(), "add_scalars: no terms");
        Node n;
        n.op = Op::AddScalars;
        double total = 0.0;
        for (std::size_t i = 0; i < terms.size(); ++i) {
            const Tensor& tv = value_checked(terms[i], "add_scalars term");
            require(tv.size() == 1, detail::cat("add_scalars: term ", i, " is not scalar"));
            total += tv[0];
            n.needs_grad = n.needs_grad || node(terms[i]).needs_grad;
            if (i == 0) {
                n.in0 = terms[i];
            } else {
                n.extra_in.push_back(terms[i]);
            }
        }
        Tensor y({1});
        y[0] = total;
        y.check_finite("add_scalars");
        n.val = std::move(y);
        return push(std::move(n));
    }

    // Single reverse sweep from a scalar loss node.  A tape can be walked
    // backward once; a second call is an error because gradients would
    // otherwise double-accumulate silently.
    void backward(int loss) {
        if (ran_backward_) throw Error("backward: tape already consumed");
        Node& ln = node_mut(loss);
        if (ln.val.size() != 1) {
            throw ShapeError(detail::cat("backward: loss node has shape ",
                                         Tensor::shape_string(ln.val.shape()), ", expected scalar"));
        }
        ran_backward_ = true;
        if (!ln.needs_grad) return; // loss independent of all tracked leaves
        touch_grad(loss)[0] = 1.0;
        for (int id = loss; id >= 0; --id) {
            Node& n = node_mut(id);
            if (n.grad.empty() || !n.needs_grad) continue;
            propagate(n);
        }
        for (auto& n : nodes_) {
            if (!n.grad.empty()) n.grad.check_finite("backward");
        }
    }

private:
    [[nodiscard]] const Node& node(int id) const {
        if (id < 0 || id >= size()) throw ValueError(detail::cat("tape: node id ", id, " out of range"));
        return nodes_[static_cast<std::size_t>(id)];
    }

    Node& node_mut(int id) { return const_cast<Node&>(node(id)); }

    const Tensor& value_checked(int id, const char* what) const {
        const Node& n = node(id);
        if (n.val.empty()) throw Error(detail::cat(what, ": node ", id, " has no value"));
        return n.val;
    }

    int push(Node&& n) {
        nodes_.push_back(std::move(n));
        return size() - 1;
    }

    static void require(bool cond, const std::string& msg) {
        if (!cond) throw ShapeError(msg);
    }

    static std::size_t idx2(int a, int b, int nb) {
        return static_cast<std::size_t>(a) * static_cast<std::size_t>(nb) + static_cast<std::size_t>(b);
    }

    static std::size_t idx4(int a, int b, int c, int d, int nb, int nc, int nd) {
        return ((static_cast<std::size_t>(a) * nb + b) * static_cast<std::size_t>(nc) + c) *
                   static_cast<std::size_t>(nd) +
               static_cast<std::size_t>(d);
    }

    // Shifted log-sum-exp of one logit row; also writes softmax probabilities
    // for that row into probs.
    static double row_lse(const Tensor& z, int b, int C, std::vector<double>& probs) {
        double m = z[idx2(b, 0, C)];
        for (int c = 1; c < C; ++c) m = std::max(m, z[idx2(b, c, C)]);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) sum += std::exp(z[idx2(b, c, C)] - m);
        const double lse = m + std::log(sum);
        for (int c = 0; c < C; ++c) probs[idx2(b, c, C)] = std::exp(z[idx2(b, c, C)] - lse);
        return lse;
    }

    Tensor& touch_grad(int id) {
        Node& n = node_mut(id);
        if (n.grad.empty()) n.grad = Tensor::zeros(n.val.shape());
        return n.grad;
    }

    // Adds upstream gradient of node n into its inputs.
    void propagate(Node& n) {
        switch (n.op) {
        case Op::Leaf:
            return;
        case Op::Linear: {
            const Tensor& x = nodes_[static_cast<std::size_t>(n.in0)].val;
            const Tensor& w = nodes_[static_cast<std::size_t>(n.in1)].val;
            const int B = x.dim(0), I = x.dim(1), O = w.dim(1);
            const Tensor& dy = n.grad;
            if (nodes_[static_cast<std::size_t>(n.in0)].needs_grad) {
                Tensor& dx = touch_grad(n.in0);
                for (int b = 0; b < B; ++b)
                    for (int i = 0; i < I; ++i) {
                        double acc = 0.0;
                        for (int o = 0; o < O; ++o) acc += dy[idx2(b, o, O)] * w[idx2(i, o, O)];
                        dx[idx2(b, i, I)] += acc;
                    }
            }
            if (nodes_[static_cast<std::size_t>(n.in1)].needs_grad) {
                Tensor& dw = touch_grad(n.in1);
                for (int b = 0; b < B; ++b)
                    for (int i = 0; i < I; ++i) {
                        const double xi = x[idx2(b, i, I)];
                        for (int o = 0; o < O; ++o) dw[idx2(i, o, O)] += xi * dy[idx2(b, o, O)];
                    }
            }
            if (n.in2 >= 0 && nodes_[static_cast<std::size_t>(n.in2)].needs_grad) {
                Tensor& db = touch_grad(n.in2);
                for (int b = 0; b < B; ++b)
                    for (int o = 0; o < O; ++o) db[static_cast<std::size_t>(o)] += dy[idx2(b, o, O)];
            }
            return;
        }
        case Op::Conv2d: {
            const Tensor& x = nodes_[static_cast<std::size_t>(n.in0)].val;
            const Tensor& k = nodes_[static_cast<std::size_t>(n.in1)].val;
            const int B = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
            const int OC = k.dim(0), KH = k.dim(2), KW = k.dim(3);
            const int OH = n.val.dim(2), OW = n.val.dim(3);
            const int pad = n.pad;
            const Tensor& dy = n.grad;
            const bool want_dx = nodes_[static_cast<std::size_t>(n.in0)].needs_grad;
            const bool want_dk = nodes_[static_cast<std::size_t>(n.in1)].needs_grad;
            Tensor* dx = want_dx ? &touch_grad(n.in0) : nullptr;
            Tensor* dk = want_dk ? &touch_grad(n.in1) : nullptr;
            for (int b = 0; b < B; ++b) {
                for (int oc = 0; oc < OC; ++oc) {
                    for (int oy = 0; oy < OH; ++oy) {
                        for (int ox = 0; ox < OW; ++ox) {
                            const double g = dy[idx4(b, oc, oy, ox, OC, OH, OW)];
                            if (g == 0.0) continue;
                            for (int ic = 0; ic < IC; ++ic) {
                                for (int ky = 0; ky < KH; ++ky) {
                                    const int iy = oy + ky - pad;
                                    if (iy < 0 || iy >= H) continue;
                                    for (int kx = 0; kx < KW; ++kx) {
                                        const int ix = ox + kx - pad;
                                        if (ix < 0 || ix >= W) continue;
                                        const std::size_t xi = idx4(b, ic, iy, ix, IC, H, W);
                                        const std::size_t ki = idx4(oc, ic, ky, kx, IC, KH, KW);
                                        if (dx) (*dx)[xi] += g * k[ki];
                                        if (dk) (*dk)[ki] += g * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (n.in2 >= 0 && nodes_[static_cast<std::size_t>(n.in2)].needs_grad) {
                Tensor& db = touch_grad(n.in2);
                for (int b = 0; b < B; ++b)
                    for (int oc = 0; oc < OC; ++oc)
                        for (int oy = 0; oy < OH; ++oy)
                            for (int ox = 0; ox < OW; ++ox)
                                db[static_cast<std::size_t>(oc)] += dy[idx4(b, oc, oy, ox, OC, OH, OW)];
            }
            return;
        }
        case Op::Relu: {
            if (!nodes_[static_cast<std::size_t>(n.in0)].needs_grad) return;
            const Tensor& x = nodes_[static_cast<std::size_t>(n.in0)].val;
            Tensor& dx = touch_grad(n.in0);
            for (std::size_t i = 0; i < x.size(); ++i)
                if (x[i] > 0.0) dx[i] += n.grad[i];
            return;
        }
        case Op::MaxPool2: {
            if (!nodes_[static_cast<std::size_t>(n.in0)].needs_grad) return;
            Tensor& dx = touch_grad(n.in0);
            for (std::size_t i = 0; i < n.iaux.size(); ++i)
                dx[static_cast<std::size_t>(n.iaux[i])] += n.grad[i];
            return;
        }
        case Op::Reshape: {
            if (!nodes_[static_cast<std::size_t>(n.in0)].needs_grad) return;
            Tensor& dx = touch_grad(n.in0);
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[i];
            return;
        }
        case Op::EwScale: {
            if (!nodes_[static_cast<std::size_t>(n.in0)].needs_grad) return;
            const Tensor& x = nodes_[static_cast<std::size_t>(n.in0)].val;
            Tensor& dx = touch_grad(n.in0);
            for (std::size_t i = 0; i < x.size(); ++i)
                dx[i] += n.grad[i] * n.daux[i] * (1.0 + n.c0 * std::abs(x[i]));
            return;
        }
        case Op::CrossEntropyHard: {
            if (!nodes_[static_cast<std::size_t>(n.in0)].needs_grad) return;
            const Tensor& z = nodes_[static_cast<std::size_t>(n.in0)].val;
            const int B = z.dim(0), C = z.dim(1);
            const double up = n.grad[0] / B;
            Tensor& dz = touch_grad(n.in0);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const double onehot = (c == n.iaux[static_cast<std::size_t>(b)]) ? 1.0 : 0.0;
                    dz[idx2(b, c, C)] += up * (n.daux[idx2(b, c, C)] - onehot);
                }
            return;
        }
        case Op::CrossEntropySoft: {
            if (!nodes_[static_cast<std::size_t>(n.in0)].needs_grad) return;
            const Tensor& z = nodes_[static_cast<std::size_t>(n.in0)].val;
            const int B = z.dim(0), C = z.dim(1);
            const double up = n.grad[0] / B;
            Tensor& dz = touch_grad(n.in0);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    dz[idx2(b, c, C)] += up * (n.daux[idx2(b, c, C)] - n.daux2[idx2(b, c, C)]);
            return;
        }
        case Op::QuadPenalty: {
            if (!nodes_[static_cast<std::size_t>(n.in0)].needs_grad) return;
            const Tensor& x = nodes_[static_cast<std::size_t>(n.in0)].val;
            const double up = n.grad[0];
            Tensor& dx = touch_grad(n.in0);
            for (std::size_t i = 0; i < x.size(); ++i)
                dx[i] += up * 2.0 * n.c0 * n.daux[i] * (x[i] - n.daux2[i]);
            return;
        }
        case Op::AddScalars: {
            auto feed = [&](int id) {
                if (id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad) touch_grad(id)[0] += n.grad[0];
            };
            feed(n.in0);
            for (int id : n.extra_in) feed(id);
            return;
        }
        }
    }

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

// Softmax with temperature, stabilized by max subtraction.  Accepts [C] or
// [B,C]; returns the same shape.
inline Tensor softmax_temperature(const Tensor& logits, double temperature) {
    if (temperature <= 0.0) throw ValueError(detail::cat("softmax_temperature: T must be positive, got ", temperature));
    if (logits.rank() != 1 && logits.rank() != 2) {
        throw ShapeError(detail::cat("softmax_temperature: expected [C] or [B,C], got ",
                                     Tensor::shape_string(logits.shape())));
    }
    logits.check_finite("softmax_temperature logits");
    const int B = logits.rank() == 2 ? logits.dim(0) : 1;
    const int C = logits.rank() == 2 ? logits.dim(1) : logits.dim(0);
    Tensor out(logits.shape());
    for (int b = 0; b < B; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * static_cast<std::size_t>(C);
        double m = logits[base];
        for (int c = 1; c < C; ++c) m = std::max(m, logits[base + static_cast<std::size_t>(c)]);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) {
            const double e = std::exp((logits[base + static_cast<std::size_t>(c)] - m) / temperature);
            out[base + static_cast<std::size_t>(c)] = e;
            sum += e;
        }
        for (int c = 0; c < C; ++c) out[base + static_cast<std::size_t>(c)] /= sum;
    }
    return out;
}

// Central-difference gradient oracle: g_i ~= (f(x + h e_i) - f(x - h e_i)) / 2h.
// Used by tests to check the tape; O(n) loss evaluations per parameter pair.
inline std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> point, double h) {
    if (!(h > 0.0)) throw ValueError("finite_diff_grad: step must be positive");
    std::vector<double> grad(point.size(), 0.0);
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double saved = point[i];
        point[i] = saved + h;
        const double fp = f(point);
        point[i] = saved - h;
        const double fm = f(point);
        point[i] = saved;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

} // namespace wmlab
