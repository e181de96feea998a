#include "istar/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "istar/rng.hpp"

namespace istar::tensor {

namespace {

thread_local bool g_grad_enabled = true;

void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void check_same_shape(const Ptr& a, const Ptr& b, const char* op) {
    if (a->shape != b->shape) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

bool track(const Ptr& a) { return g_grad_enabled && a->requires_grad; }
bool track(const Ptr& a, const Ptr& b) { return g_grad_enabled && (a->requires_grad || b->requires_grad); }

Ptr make_node(std::vector<int> shape, std::vector<double> values, bool req, const char* op) {
    Ptr t = std::make_shared<Tensor>(std::move(shape), std::move(values), req);
    t->op = op;
    return t;
}

}  // namespace

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> s, std::vector<double> v, bool req)
    : shape(std::move(s)), values(std::move(v)), requires_grad(req) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw std::invalid_argument("tensor: values length does not match shape");
    }
    if (requires_grad) grad.assign(values.size(), 0.0);
}

double Tensor::scalar() const {
    if (!is_scalar()) throw std::invalid_argument("tensor: scalar() on non-scalar");
    return values[0];
}

void Tensor::accumulate_grad(const double* g, std::int64_t n) {
    if (!requires_grad) return;
    if (n != numel()) throw std::invalid_argument("tensor: gradient size mismatch");
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    for (std::int64_t i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] += g[i];
    grad_live = true;
}

void Tensor::zero_grad() {
    if (!requires_grad) return;
    std::fill(grad.begin(), grad.end(), 0.0);
    grad_live = false;
}

Ptr constant(std::vector<int> shape, double value) {
    auto n = shape_numel(shape);
    return make_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                     false, "constant");
}

Ptr zeros(std::vector<int> shape) { return constant(std::move(shape), 0.0); }
Ptr ones(std::vector<int> shape) { return constant(std::move(shape), 1.0); }

Ptr from_values(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    return make_node(std::move(shape), std::move(values), requires_grad, "leaf");
}

Ptr scalar_tensor(double value) { return from_values({1}, {value}, false); }

Ptr uniform(std::vector<int> shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad) {
    auto n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = lo + (hi - lo) * rng::uniform_real(rng);
    return make_node(std::move(shape), std::move(v), requires_grad, "uniform");
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// --- elementwise -------------------------------------------------------------

Ptr add(const Ptr& a, const Ptr& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->values[i] + b->values[i];
    Ptr out = make_node(a->shape, std::move(v), track(a, b), "add");
    if (out->requires_grad) {
        out->parents = {a, b};
        out->backward_fn = [](Tensor& self) {
            self.parents[0]->accumulate_grad(self.grad.data(), self.numel());
            self.parents[1]->accumulate_grad(self.grad.data(), self.numel());
        };
    }
    return out;
}

Ptr sub(const Ptr& a, const Ptr& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->values[i] - b->values[i];
    Ptr out = make_node(a->shape, std::move(v), track(a, b), "sub");
    if (out->requires_grad) {
        out->parents = {a, b};
        out->backward_fn = [](Tensor& self) {
            self.parents[0]->accumulate_grad(self.grad.data(), self.numel());
            std::vector<double> gneg(self.grad.size());
            for (std::size_t i = 0; i < gneg.size(); ++i) gneg[i] = -self.grad[i];
            self.parents[1]->accumulate_grad(gneg.data(), self.numel());
        };
    }
    return out;
}

Ptr mul(const Ptr& a, const Ptr& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->values[i] * b->values[i];
    Ptr out = make_node(a->shape, std::move(v), track(a, b), "mul");
    if (out->requires_grad) {
        out->parents = {a, b};
        out->backward_fn = [](Tensor& self) {
            const auto& av = self.parents[0]->values;
            const auto& bv = self.parents[1]->values;
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * bv[i];
            self.parents[0]->accumulate_grad(g.data(), self.numel());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * av[i];
            self.parents[1]->accumulate_grad(g.data(), self.numel());
        };
    }
    return out;
}

Ptr neg(const Ptr& a) { return scale(a, -1.0); }

Ptr scale(const Ptr& a, double c) {
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->values[i] * c;
    Ptr out = make_node(a->shape, std::move(v), track(a), "scale");
    if (out->requires_grad) {
        out->parents = {a};
        out->backward_fn = [c](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * c;
            self.parents[0]->accumulate_grad(g.data(), self.numel());
        };
    }
    return out;
}

Ptr add_scalar(const Ptr& a, double c) {
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->values[i] + c;
    Ptr out = make_node(a->shape, std::move(v), track(a), "add_scalar");
    if (out->requires_grad) {
        out->parents = {a};
        out->backward_fn = [](Tensor& self) {
            self.parents[0]->accumulate_grad(self.grad.data(), self.numel());
        };
    }
    return out;
}

// --- affine -------------------------------------------------------------------

Ptr affine(const Ptr& input, const Ptr& weight, const Ptr& bias) {
    check(input->shape.size() == 2, "affine: input must be rank 2");
    check(weight->shape.size() == 2, "affine: weight must be rank 2");
    check(bias->shape.size() == 1, "affine: bias must be rank 1");
    const int B = input->shape[0], I = input->shape[1];
    check(weight->shape[0] == I, "affine: inner dimensions disagree");
    const int O = weight->shape[1];
    check(bias->shape[0] == O, "affine: bias length disagrees with output");

    std::vector<double> v(static_cast<std::size_t>(B) * O);
    const double* x = input->values.data();
    const double* w = weight->values.data();
    const double* b = bias->values.data();
    for (int r = 0; r < B; ++r) {
        double* out_row = v.data() + static_cast<std::size_t>(r) * O;
        for (int j = 0; j < O; ++j) out_row[j] = b[j];
        const double* x_row = x + static_cast<std::size_t>(r) * I;
        for (int k = 0; k < I; ++k) {
            const double a = x_row[k];
            const double* w_row = w + static_cast<std::size_t>(k) * O;
            for (int j = 0; j < O; ++j) out_row[j] += a * w_row[j];
        }
    }
    Ptr out = make_node({B, O}, std::move(v),
                        g_grad_enabled && (input->requires_grad || weight->requires_grad ||
                                           bias->requires_grad),
                        "affine");
    if (out->requires_grad) {
        out->parents = {input, weight, bias};
        out->backward_fn = [B, I, O](Tensor& self) {
            Tensor& in = *self.parents[0];
            Tensor& wt = *self.parents[1];
            Tensor& bs = *self.parents[2];
            const double* g = self.grad.data();
            if (in.requires_grad) {
                std::vector<double> gx(static_cast<std::size_t>(B) * I, 0.0);
                const double* w = wt.values.data();
                for (int r = 0; r < B; ++r) {
                    const double* g_row = g + static_cast<std::size_t>(r) * O;
                    double* gx_row = gx.data() + static_cast<std::size_t>(r) * I;
                    for (int k = 0; k < I; ++k) {
                        const double* w_row = w + static_cast<std::size_t>(k) * O;
                        double acc = 0.0;
                        for (int j = 0; j < O; ++j) acc += g_row[j] * w_row[j];
                        gx_row[k] = acc;
                    }
                }
                in.accumulate_grad(gx.data(), in.numel());
            }
            if (wt.requires_grad) {
                std::vector<double> gw(static_cast<std::size_t>(I) * O, 0.0);
                const double* x = in.values.data();
                for (int r = 0; r < B; ++r) {
                    const double* x_row = x + static_cast<std::size_t>(r) * I;
                    const double* g_row = g + static_cast<std::size_t>(r) * O;
                    for (int k = 0; k < I; ++k) {
                        const double a = x_row[k];
                        double* gw_row = gw.data() + static_cast<std::size_t>(k) * O;
                        for (int j = 0; j < O; ++j) gw_row[j] += a * g_row[j];
                    }
                }
                wt.accumulate_grad(gw.data(), wt.numel());
            }
            if (bs.requires_grad) {
                std::vector<double> gb(static_cast<std::size_t>(O), 0.0);
                for (int r = 0; r < B; ++r) {
                    const double* g_row = g + static_cast<std::size_t>(r) * O;
                    for (int j = 0; j < O; ++j) gb[j] += g_row[j];
                }
                bs.accumulate_grad(gb.data(), O);
            }
        };
    }
    return out;
}

// --- nonlinearities -------------------------------------------------------------

Ptr tanh_op(const Ptr& a) {
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a->values[i]);
    Ptr out = make_node(a->shape, std::move(v), track(a), "tanh");
    if (out->requires_grad) {
        out->parents = {a};
        out->backward_fn = [](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = self.values[i];
                g[i] = self.grad[i] * (1.0 - y * y);
            }
            self.parents[0]->accumulate_grad(g.data(), self.numel());
        };
    }
    return out;
}

Ptr exp_op(const Ptr& a) {
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a->values[i]);
    Ptr out = make_node(a->shape, std::move(v), track(a), "exp");
    if (out->requires_grad) {
        out->parents = {a};
        out->backward_fn = [](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * self.values[i];
            self.parents[0]->accumulate_grad(g.data(), self.numel());
        };
    }
    return out;
}

Ptr softplus(const Ptr& a) {
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double x = a->values[i];
        v[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
    }
    Ptr out = make_node(a->shape, std::move(v), track(a), "softplus");
    if (out->requires_grad) {
        out->parents = {a};
        out->backward_fn = [](Tensor& self) {
            const auto& x = self.parents[0]->values;
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                // sigmoid(x), stable on both tails
                const double s = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                             : std::exp(x[i]) / (1.0 + std::exp(x[i]));
                g[i] = self.grad[i] * s;
            }
            self.parents[0]->accumulate_grad(g.data(), self.numel());
        };
    }
    return out;
}

Ptr log_softmax(const Ptr& logits, int axis) {
    const int rank = static_cast<int>(logits->shape.size());
    if (axis < 0) axis += rank;
    check(axis >= 0 && axis < rank, "log_softmax: invalid axis");
    for (double x : logits->values) {
        if (!std::isfinite(x)) throw std::runtime_error("log_softmax: non-finite input");
    }
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= logits->shape[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) inner *= logits->shape[static_cast<std::size_t>(i)];
    const std::int64_t n = logits->shape[static_cast<std::size_t>(axis)];

    std::vector<double> v(logits->values.size());
    const double* x = logits->values.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            double mx = x[base];
            for (std::int64_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
            double z = 0.0;
            for (std::int64_t k = 0; k < n; ++k) z += std::exp(x[base + k * inner] - mx);
            const double lz = mx + std::log(z);
            for (std::int64_t k = 0; k < n; ++k) v[static_cast<std::size_t>(base + k * inner)] =
                x[base + k * inner] - lz;
        }
    }
    Ptr out = make_node(logits->shape, std::move(v), track(logits), "log_softmax");
    if (out->requires_grad) {
        out->parents = {logits};
        out->backward_fn = [outer, inner, n](Tensor& self) {
            std::vector<double> g(self.grad.size());
            const double* y = self.values.data();
            const double* dy = self.grad.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    double s = 0.0;
                    for (std::int64_t k = 0; k < n; ++k) s += dy[base + k * inner];
                    for (std::int64_t k = 0; k < n; ++k) {
                        const std::int64_t i = base + k * inner;
                        g[static_cast<std::size_t>(i)] = dy[i] - std::exp(y[i]) * s;
                    }
                }
            }
            self.parents[0]->accumulate_grad(g.data(), self.numel());
        };
    }
    return out;
}

// --- gather / structure ops ------------------------------------------------------

Ptr gather_rows(const Ptr& table, const std::vector<int>& ids) {
    check(table->shape.size() == 2, "gather_rows: table must be rank 2");
    const int V = table->shape[0], D = table->shape[1];
    const int B = static_cast<int>(ids.size());
    std::vector<double> v(static_cast<std::size_t>(B) * D);
    for (int r = 0; r < B; ++r) {
        check(ids[static_cast<std::size_t>(r)] >= 0 && ids[static_cast<std::size_t>(r)] < V,
              "gather_rows: index out of range");
        const double* src = table->values.data() +
                            static_cast<std::size_t>(ids[static_cast<std::size_t>(r)]) * D;
        std::copy(src, src + D, v.data() + static_cast<std::size_t>(r) * D);
    }
    Ptr out = make_node({B, D}, std::move(v), track(table), "gather_rows");
    if (out->requires_grad) {
        out->parents = {table};
        out->backward_fn = [ids, D](Tensor& self) {
            Tensor& t = *self.parents[0];
            std::vector<double> g(t.values.size(), 0.0);
            for (std::size_t r = 0; r < ids.size(); ++r) {
                const double* src = self.grad.data() + r * static_cast<std::size_t>(D);
                double* dst = g.data() + static_cast<std::size_t>(ids[r]) * D;
                for (int j = 0; j < D; ++j) dst[j] += src[j];
            }
            t.accumulate_grad(g.data(), t.numel());
        };
    }
    return out;
}

Ptr prefix_embed(const Ptr& embed, const Ptr& pos,
                 const std::vector<std::vector<int>>& prefixes,
                 const std::vector<int>& positions) {
    check(embed->shape.size() == 2 && pos->shape.size() == 2, "prefix_embed: tables must be rank 2");
    check(embed->shape[1] == pos->shape[1], "prefix_embed: embedding widths disagree");
    check(prefixes.size() == positions.size(), "prefix_embed: row count mismatch");
    const int V = embed->shape[0], D = embed->shape[1], L = pos->shape[0];
    const int B = static_cast<int>(prefixes.size());
    std::vector<double> v(static_cast<std::size_t>(B) * D, 0.0);
    for (int r = 0; r < B; ++r) {
        const int k = positions[static_cast<std::size_t>(r)];
        check(k >= 0 && k < L, "prefix_embed: position out of range");
        double* row = v.data() + static_cast<std::size_t>(r) * D;
        const double* p = pos->values.data() + static_cast<std::size_t>(k) * D;
        for (int j = 0; j < D; ++j) row[j] = p[j];
        for (int tok : prefixes[static_cast<std::size_t>(r)]) {
            check(tok >= 0 && tok < V, "prefix_embed: token out of range");
            const double* e = embed->values.data() + static_cast<std::size_t>(tok) * D;
            for (int j = 0; j < D; ++j) row[j] += e[j];
        }
    }
    Ptr out = make_node({B, D}, std::move(v),
                        g_grad_enabled && (embed->requires_grad || pos->requires_grad),
                        "prefix_embed");
    if (out->requires_grad) {
        out->parents = {embed, pos};
        out->backward_fn = [prefixes, positions, D](Tensor& self) {
            Tensor& e = *self.parents[0];
            Tensor& p = *self.parents[1];
            if (e.requires_grad) {
                std::vector<double> g(e.values.size(), 0.0);
                for (std::size_t r = 0; r < prefixes.size(); ++r) {
                    const double* src = self.grad.data() + r * static_cast<std::size_t>(D);
                    for (int tok : prefixes[r]) {
                        double* dst = g.data() + static_cast<std::size_t>(tok) * D;
                        for (int j = 0; j < D; ++j) dst[j] += src[j];
                    }
                }
                e.accumulate_grad(g.data(), e.numel());
            }
            if (p.requires_grad) {
                std::vector<double> g(p.values.size(), 0.0);
                for (std::size_t r = 0; r < positions.size(); ++r) {
                    const double* src = self.grad.data() + r * static_cast<std::size_t>(D);
                    double* dst = g.data() + static_cast<std::size_t>(positions[r]) * D;
                    for (int j = 0; j < D; ++j) dst[j] += src[j];
                }
                p.accumulate_grad(g.data(), p.numel());
            }
        };
    }
    return out;
}

Ptr concat_cols(const Ptr& a, const Ptr& b) {
    check(a->shape.size() == 2 && b->shape.size() == 2, "concat_cols: rank 2 required");
    check(a->shape[0] == b->shape[0], "concat_cols: row counts disagree");
    const int B = a->shape[0], Ca = a->shape[1], Cb = b->shape[1];
    std::vector<double> v(static_cast<std::size_t>(B) * (Ca + Cb));
    for (int r = 0; r < B; ++r) {
        double* row = v.data() + static_cast<std::size_t>(r) * (Ca + Cb);
        std::copy(a->values.data() + static_cast<std::size_t>(r) * Ca,
                  a->values.data() + static_cast<std::size_t>(r + 1) * Ca, row);
        std::copy(b->values.data() + static_cast<std::size_t>(r) * Cb,
                  b->values.data() + static_cast<std::size_t>(r + 1) * Cb, row + Ca);
    }
    Ptr out = make_node({B, Ca + Cb}, std::move(v), track(a, b), "concat_cols");
    if (out->requires_grad) {
        out->parents = {a, b};
        out->backward_fn = [B, Ca, Cb](Tensor& self) {
            Tensor& ta = *self.parents[0];
            Tensor& tb = *self.parents[1];
            if (ta.requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(B) * Ca);
                for (int r = 0; r < B; ++r)
                    std::copy(self.grad.data() + static_cast<std::size_t>(r) * (Ca + Cb),
                              self.grad.data() + static_cast<std::size_t>(r) * (Ca + Cb) + Ca,
                              g.data() + static_cast<std::size_t>(r) * Ca);
                ta.accumulate_grad(g.data(), ta.numel());
            }
            if (tb.requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(B) * Cb);
                for (int r = 0; r < B; ++r)
                    std::copy(self.grad.data() + static_cast<std::size_t>(r) * (Ca + Cb) + Ca,
                              self.grad.data() + static_cast<std::size_t>(r + 1) * (Ca + Cb),
                              g.data() + static_cast<std::size_t>(r) * Cb);
                tb.accumulate_grad(g.data(), tb.numel());
            }
        };
    }
    return out;
}

Ptr pick(const Ptr& a, const std::vector<int>& idx) {
    check(a->shape.size() == 2, "pick: rank 2 required");
    const int B = a->shape[0], C = a->shape[1];
    check(static_cast<int>(idx.size()) == B, "pick: index count mismatch");
    std::vector<double> v(static_cast<std::size_t>(B));
    for (int r = 0; r < B; ++r) {
        check(idx[static_cast<std::size_t>(r)] >= 0 && idx[static_cast<std::size_t>(r)] < C,
              "pick: index out of range");
        v[static_cast<std::size_t>(r)] =
            a->values[static_cast<std::size_t>(r) * C + idx[static_cast<std::size_t>(r)]];
    }
    Ptr out = make_node({B}, std::move(v), track(a), "pick");
    if (out->requires_grad) {
        out->parents = {a};
        out->backward_fn = [idx, C](Tensor& self) {
            Tensor& t = *self.parents[0];
            std::vector<double> g(t.values.size(), 0.0);
            for (std::size_t r = 0; r < idx.size(); ++r)
                g[r * static_cast<std::size_t>(C) + static_cast<std::size_t>(idx[r])] = self.grad[r];
            t.accumulate_grad(g.data(), t.numel());
        };
    }
    return out;
}

Ptr segment_sum(const Ptr& a, const std::vector<int>& seg, int n_segments) {
    check(a->shape.size() == 1, "segment_sum: rank 1 required");
    check(static_cast<int>(seg.size()) == a->shape[0], "segment_sum: segment count mismatch");
    std::vector<double> v(static_cast<std::size_t>(n_segments), 0.0);
    for (std::size_t r = 0; r < seg.size(); ++r) {
        check(seg[r] >= 0 && seg[r] < n_segments, "segment_sum: segment id out of range");
        v[static_cast<std::size_t>(seg[r])] += a->values[r];
    }
    Ptr out = make_node({n_segments}, std::move(v), track(a), "segment_sum");
    if (out->requires_grad) {
        out->parents = {a};
        out->backward_fn = [seg](Tensor& self) {
            Tensor& t = *self.parents[0];
            std::vector<double> g(t.values.size());
            for (std::size_t r = 0; r < seg.size(); ++r)
                g[r] = self.grad[static_cast<std::size_t>(seg[r])];
            t.accumulate_grad(g.data(), t.numel());
        };
    }
    return out;
}

Ptr sum(const Ptr& a) {
    double s = 0.0;
    for (double x : a->values) s += x;
    Ptr out = make_node({1}, {s}, track(a), "sum");
    if (out->requires_grad) {
        out->parents = {a};
        out->backward_fn = [](Tensor& self) {
            Tensor& t = *self.parents[0];
            std::vector<double> g(t.values.size(), self.grad[0]);
            t.accumulate_grad(g.data(), t.numel());
        };
    }
    return out;
}

Ptr mean(const Ptr& a) {
    const double n = static_cast<double>(a->numel());
    return scale(sum(a), 1.0 / n);
}

Ptr minimum(const Ptr& a, const Ptr& b) {
    check_same_shape(a, b, "minimum");
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::min(a->values[i], b->values[i]);
    Ptr out = make_node(a->shape, std::move(v), track(a, b), "minimum");
    if (out->requires_grad) {
        out->parents = {a, b};
        out->backward_fn = [](Tensor& self) {
            const auto& av = self.parents[0]->values;
            const auto& bv = self.parents[1]->values;
            std::vector<double> ga(self.grad.size(), 0.0), gb(self.grad.size(), 0.0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                // ties route to the first argument
                if (av[i] <= bv[i]) ga[i] = self.grad[i];
                else gb[i] = self.grad[i];
            }
            self.parents[0]->accumulate_grad(ga.data(), self.numel());
            self.parents[1]->accumulate_grad(gb.data(), self.numel());
        };
    }
    return out;
}

Ptr clamp_const(const Ptr& a, double lo, double hi) {
    check(lo <= hi, "clamp: lo > hi");
    std::vector<double> v(a->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(a->values[i], lo, hi);
    Ptr out = make_node(a->shape, std::move(v), track(a), "clamp");
    if (out->requires_grad) {
        out->parents = {a};
        out->backward_fn = [lo, hi](Tensor& self) {
            const auto& x = self.parents[0]->values;
            std::vector<double> g(self.grad.size(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x[i] >= lo && x[i] <= hi) g[i] = self.grad[i];
            self.parents[0]->accumulate_grad(g.data(), self.numel());
        };
    }
    return out;
}

// --- backward ----------------------------------------------------------------

void backward(const Ptr& loss) {
    if (!loss->is_scalar()) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss->requires_grad) throw std::invalid_argument("backward: loss does not require grad");
    if (loss->backward_ran) {
        throw std::invalid_argument("backward: already ran on this graph; rebuild the graph first");
    }
    if (!std::isfinite(loss->values[0])) throw std::runtime_error("backward: non-finite loss");

    // iterative post-order toposort
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Tensor* child = node->parents[next_child].get();
            ++next_child;
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->grad.assign(1, 1.0);
    loss->grad_live = true;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
        node->backward_ran = true;
    }
}

// --- ParameterSet / AdamW ------------------------------------------------------

Ptr ParameterSet::add(const std::string& name, Ptr t) {
    if (params_.count(name)) throw std::invalid_argument("ParameterSet: duplicate name " + name);
    t->requires_grad = true;
    if (t->grad.size() != t->values.size()) t->grad.assign(t->values.size(), 0.0);
    params_[name] = t;
    moments_[name] = Moments{std::vector<double>(t->values.size(), 0.0),
                             std::vector<double>(t->values.size(), 0.0)};
    return t;
}

Ptr ParameterSet::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("ParameterSet: unknown name " + name);
    return it->second;
}

bool ParameterSet::contains(const std::string& name) const { return params_.count(name) > 0; }

std::vector<std::string> ParameterSet::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
}

std::int64_t ParameterSet::total_parameters() const {
    std::int64_t n = 0;
    for (const auto& [k, v] : params_) n += v->numel();
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& [k, v] : params_) v->zero_grad();
}

ParameterSet ParameterSet::clone(bool with_opt_state) const {
    ParameterSet out;
    for (const auto& [k, v] : params_) {
        out.add(k, from_values(v->shape, v->values, true));
    }
    if (with_opt_state) {
        out.moments_ = moments_;
        out.step_count_ = step_count_;
    }
    return out;
}

bool ParameterSet::values_equal(const ParameterSet& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (const auto& [k, v] : params_) {
        auto it = other.params_.find(k);
        if (it == other.params_.end()) return false;
        if (v->shape != it->second->shape) return false;
        if (std::memcmp(v->values.data(), it->second->values.data(),
                        v->values.size() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

void adamw_step(ParameterSet& params, const AdamwConfig& cfg) {
    for (const auto& [name, p] : params.params_) {
        if (!p->grad_live) {
            throw std::invalid_argument("adamw_step: missing gradient for " + name);
        }
    }
    params.step_count_ += 1;
    const double t = static_cast<double>(params.step_count_);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, p] : params.params_) {
        auto& mom = params.moments_[name];
        for (std::size_t i = 0; i < p->values.size(); ++i) {
            const double g = p->grad[i];
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            p->values[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps));
            p->values[i] -= cfg.lr * cfg.weight_decay * p->values[i];
        }
    }
}

// --- finite differences ----------------------------------------------------------

double finite_diff_check(ParameterSet& params, const std::function<Ptr()>& loss_fn,
                         const FiniteDiffOptions& opts) {
    params.zero_grad();
    Ptr loss = loss_fn();
    backward(loss);

    struct Coord {
        Ptr tensor;
        std::size_t index;
        double analytic;
    };
    std::vector<Coord> coords;
    for (const auto& name : params.names()) {
        Ptr p = params.at(name);
        for (std::size_t i = 0; i < p->values.size(); ++i)
            coords.push_back({p, i, p->grad[i]});
    }
    auto stream = rng::make_stream(opts.seed, rng::Stream::GradCheck);
    if (static_cast<int>(coords.size()) > opts.max_coords) {
        rng::shuffle(stream, coords);
        coords.resize(static_cast<std::size_t>(opts.max_coords));
    }

    auto eval = [&]() {
        NoGradGuard guard;
        return loss_fn()->scalar();
    };

    double worst = 0.0;
    for (const auto& c : coords) {
        const double saved = c.tensor->values[c.index];
        c.tensor->values[c.index] = saved + opts.step;
        const double fp = eval();
        c.tensor->values[c.index] = saved - opts.step;
        const double fm = eval();
        c.tensor->values[c.index] = saved;
        const double numeric = (fp - fm) / (2.0 * opts.step);
        const double denom = std::max({std::fabs(c.analytic), std::fabs(numeric), 1e-8});
        worst = std::max(worst, std::fabs(c.analytic - numeric) / denom);
    }
    return worst;
}

// --- checkpoint io -----------------------------------------------------------------

namespace {

std::string hex_of(double x) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(x)));
    return std::string(buf);
}

double double_of_hex(const std::string& s) {
    return std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(s, nullptr, 16)));
}

void write_values(std::ostream& os, const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        os << hex_of(v[i]);
        os << (((i + 1) % 8 == 0 || i + 1 == v.size()) ? '\n' : ' ');
    }
}

std::vector<double> read_values(std::istream& is, std::size_t n) {
    std::vector<double> out(n);
    std::string tok;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(is >> tok)) throw std::runtime_error("checkpoint: truncated value block");
        out[i] = double_of_hex(tok);
    }
    return out;
}

}  // namespace

struct CheckpointIo {
    static void save(const std::string& path, const ParameterSet& params,
                     const std::map<std::string, std::string>& meta, bool with_opt_state) {
        std::ofstream os(path);
        if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
        os << "istar-checkpoint 1\n";
        for (const auto& [k, v] : meta) {
            os << "meta\t" << k << '\t' << v << '\n';
        }
        os << "opt_state " << (with_opt_state ? 1 : 0) << ' ' << params.step_count_ << '\n';
        for (const auto& [name, p] : params.params_) {
            os << "tensor " << name << ' ' << p->shape.size();
            for (int d : p->shape) os << ' ' << d;
            os << '\n';
            write_values(os, p->values);
            if (with_opt_state) {
                const auto& mom = params.moments_.at(name);
                write_values(os, mom.m);
                write_values(os, mom.v);
            }
        }
        os << "end\n";
        if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
        std::string line;
        if (!std::getline(is, line) || line != "istar-checkpoint 1")
            throw std::runtime_error("checkpoint: bad header in " + path);
        Checkpoint ckpt;
        bool with_opt = false;
        std::int64_t step_count = 0;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            if (line == "end") break;
            std::istringstream ls(line);
            std::string kind;
            ls >> kind;
            if (kind == "meta") {
                // tab-delimited: meta\tkey\tvalue
                auto t1 = line.find('\t');
                auto t2 = line.find('\t', t1 + 1);
                if (t1 == std::string::npos || t2 == std::string::npos)
                    throw std::runtime_error("checkpoint: malformed meta line");
                ckpt.meta[line.substr(t1 + 1, t2 - t1 - 1)] = line.substr(t2 + 1);
            } else if (kind == "opt_state") {
                int flag = 0;
                ls >> flag >> step_count;
                with_opt = flag != 0;
            } else if (kind == "tensor") {
                std::string name;
                std::size_t rank = 0;
                ls >> name >> rank;
                std::vector<int> shape(rank);
                for (auto& d : shape) ls >> d;
                const auto n = static_cast<std::size_t>(shape_numel(shape));
                auto vals = read_values(is, n);
                Ptr t = from_values(shape, std::move(vals), true);
                ckpt.params.add(name, t);
                if (with_opt) {
                    auto& mom = ckpt.params.moments_[name];
                    mom.m = read_values(is, n);
                    mom.v = read_values(is, n);
                }
                is.ignore();  // trailing newline after value block
            } else {
                throw std::runtime_error("checkpoint: unknown record '" + kind + "'");
            }
        }
        ckpt.params.step_count_ = step_count;
        return ckpt;
    }
};

void save_checkpoint(const std::string& path, const ParameterSet& params,
                     const std::map<std::string, std::string>& meta, bool with_opt_state) {
    CheckpointIo::save(path, params, meta, with_opt_state);
}

Checkpoint load_checkpoint(const std::string& path) { return CheckpointIo::load(path); }

}  // namespace istar::tensor
