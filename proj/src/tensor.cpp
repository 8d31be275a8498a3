#include "wm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "wm/rng.hpp"

namespace wm::diff {

namespace {

std::atomic<uint64_t> g_epoch{0};

long long numel(const std::vector<int>& shape) {
    long long n = 1;
    for (int s : shape) n *= s;
    return n;
}

std::shared_ptr<TensorData> make(std::vector<int> shape, bool rg, bool flows) {
    for (int s : shape)
        if (s <= 0) throw std::invalid_argument("tensor: non-positive dimension");
    if (shape.empty() || shape.size() > 2)
        throw std::invalid_argument("tensor: rank must be 1 or 2");
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->v.assign(numel(d->shape), 0.0);
    d->requires_grad = rg;
    d->flows = rg || flows;
    return d;
}

Tensor wrap(std::shared_ptr<TensorData> d) {
    Tensor t;
    t.d = std::move(d);
    return t;
}

// Gradient buffer of a tensor inside the current sweep; sized on demand.
std::vector<double>& gbuf(const Tensor& t) {
    auto& g = t.d->g;
    if (g.size() != t.d->v.size()) g.assign(t.d->v.size(), 0.0);
    return g;
}

bool want(Graph* g, std::initializer_list<const Tensor*> ins) {
    if (!g) return false;
    for (const Tensor* t : ins)
        if (t->flows()) return true;
    return false;
}

[[noreturn]] void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(op + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace

// ------------------------------------------------------------------- Tensor

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return wrap(make(std::move(shape), requires_grad, false));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> vals, bool requires_grad) {
    auto d = make(std::move(shape), requires_grad, false);
    if (static_cast<long long>(vals.size()) != numel(d->shape))
        throw std::invalid_argument("Tensor::from: value count does not match shape");
    d->v = std::move(vals);
    auto t = wrap(std::move(d));
    return t;
}

Tensor Tensor::scalar(double x, bool requires_grad) {
    return from({1}, {x}, requires_grad);
}

Tensor Tensor::uniform(std::vector<int> shape, double scale, wm::Rng& rng, bool requires_grad) {
    auto d = make(std::move(shape), requires_grad, false);
    for (auto& x : d->v) x = (rng.uniform() * 2.0 - 1.0) * scale;
    return wrap(std::move(d));
}

double Tensor::value() const {
    if (!is_scalar()) throw std::logic_error("Tensor::value: tensor of shape " + shape_str() + " is not scalar");
    return d->v[0];
}

std::vector<double>& Tensor::grad() const {
    return gbuf(*this);
}

bool grad_is_current(const Tensor& t) {
    return t.defined() && t.d->zero_epoch == g_epoch.load() && !t.d->g.empty();
}

void set_grad(Tensor& t, std::vector<double> grad) {
    if (!t.defined()) throw std::invalid_argument("set_grad: undefined tensor");
    if (static_cast<long long>(grad.size()) != t.size())
        throw std::invalid_argument("set_grad: gradient of " + std::to_string(grad.size()) +
                                    " entries for a tensor of " + std::to_string(t.size()));
    t.d->g = std::move(grad);
    t.d->zero_epoch = g_epoch.load();
}

std::string Tensor::shape_str() const {
    if (!d) return "<undefined>";
    std::ostringstream os;
    for (size_t i = 0; i < d->shape.size(); ++i) os << (i ? "x" : "") << d->shape[i];
    return os.str();
}

// -------------------------------------------------------------------- Graph

void Graph::record(std::function<void()> fn, std::initializer_list<const Tensor*> touched) {
    if (consumed_) throw std::logic_error("Graph::record: graph already consumed; rebuild the forward pass");
    Node n;
    n.fn = std::move(fn);
    n.touched.reserve(touched.size());
    for (const Tensor* t : touched) n.touched.push_back(t->d.get());
    tape_.push_back(std::move(n));
}

void Graph::record(std::function<void()> fn, const std::vector<Tensor>& touched) {
    if (consumed_) throw std::logic_error("Graph::record: graph already consumed; rebuild the forward pass");
    Node n;
    n.fn = std::move(fn);
    n.touched.reserve(touched.size());
    for (const Tensor& t : touched) n.touched.push_back(t.d.get());
    tape_.push_back(std::move(n));
}

void Graph::sweep(const Tensor& loss) {
    if (!loss.is_scalar())
        throw std::invalid_argument("Graph::backward: loss of shape " + loss.shape_str() + " is not scalar");
    uint64_t epoch = ++g_epoch;
    for (auto& n : tape_) {
        for (TensorData* td : n.touched) {
            if (td->zero_epoch != epoch) {
                td->g.assign(td->v.size(), 0.0);
                td->zero_epoch = epoch;
            }
        }
    }
    if (loss.d->zero_epoch != epoch) {
        loss.d->g.assign(1, 0.0);
        loss.d->zero_epoch = epoch;
    }
    loss.d->g[0] = 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->fn();
}

void Graph::backward(const Tensor& loss) {
    if (consumed_) throw std::logic_error("Graph::backward: graph already consumed; rebuild the forward pass");
    sweep(loss);
    consumed_ = true;
}

std::pair<std::vector<double>, std::vector<double>> Graph::backward_pair(
    const Tensor& loss_a, const Tensor& loss_b, const std::vector<Tensor>& params) {
    if (consumed_) throw std::logic_error("Graph::backward_pair: graph already consumed; rebuild the forward pass");
    long long total = 0;
    for (const auto& p : params) total += p.size();
    auto extract = [&](uint64_t epoch) {
        std::vector<double> out;
        out.reserve(total);
        for (const auto& p : params) {
            // Parameters untouched by this sweep (no path from the loss) have
            // stale buffers; they contribute exact zeros.
            if (p.d->zero_epoch == epoch && !p.d->g.empty())
                out.insert(out.end(), p.d->g.begin(), p.d->g.end());
            else
                out.insert(out.end(), p.size(), 0.0);
        }
        return out;
    };
    sweep(loss_a);
    auto ga = extract(g_epoch.load());
    sweep(loss_b);
    auto gb = extract(g_epoch.load());
    consumed_ = true;
    return {std::move(ga), std::move(gb)};
}

void Graph::clear() {
    tape_.clear();
    consumed_ = false;
}

// --------------------------------------------------------------- operations

Tensor matmul(Graph* g, const Tensor& a, const Tensor& b) {
    if (b.d->shape.size() != 2) throw std::invalid_argument("matmul: rhs of shape " + b.shape_str() + " must be rank 2");
    int m = a.rows(), k = a.cols(), k2 = b.d->shape[0], n = b.d->shape[1];
    if (k != k2) shape_error("matmul", a, b);
    bool vec = a.d->shape.size() == 1;
    Tensor out = wrap(make(vec ? std::vector<int>{n} : std::vector<int>{m, n}, false, want(g, {&a, &b})));
    const double* av = a.data();
    const double* bv = b.data();
    double* ov = out.d->v.data();
    for (int i = 0; i < m; ++i) {
        double* orow = ov + static_cast<long long>(i) * n;
        const double* arow = av + static_cast<long long>(i) * k;
        for (int p = 0; p < k; ++p) {
            double x = arow[p];
            if (x == 0.0) continue;
            const double* brow = bv + static_cast<long long>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
        }
    }
    if (out.flows()) {
        g->record([a, b, out, m, k, n]() {
            const double* go = out.d->g.data();
            if (a.flows()) {
                double* ga = gbuf(a).data();
                const double* bv = b.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = go + static_cast<long long>(i) * n;
                    double* garow = ga + static_cast<long long>(i) * k;
                    for (int p = 0; p < k; ++p) {
                        const double* brow = bv + static_cast<long long>(p) * n;
                        double s = 0;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        garow[p] += s;
                    }
                }
            }
            if (b.flows()) {
                double* gb = gbuf(b).data();
                const double* av = a.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = go + static_cast<long long>(i) * n;
                    const double* arow = av + static_cast<long long>(i) * k;
                    for (int p = 0; p < k; ++p) {
                        double x = arow[p];
                        if (x == 0.0) continue;
                        double* gbrow = gb + static_cast<long long>(p) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += x * grow[j];
                    }
                }
            }
        }, {&out, &a, &b});
    }
    return out;
}

namespace {

template <class FwdFn, class BwdFn>
Tensor binary_same_shape(Graph* g, const char* name, const Tensor& a, const Tensor& b,
                         FwdFn fwd, BwdFn bwd) {
    // Rank-1 of n entries acts as the row [1 x n] (the documented convention),
    // so [n] and [1 x n] are element-compatible; the output takes a's shape.
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(name, a, b);
    Tensor out = wrap(make(a.d->shape, false, want(g, {&a, &b})));
    long long n = a.size();
    for (long long i = 0; i < n; ++i) out.d->v[i] = fwd(a.d->v[i], b.d->v[i]);
    if (out.flows()) {
        g->record([a, b, out, n, bwd]() {
            const double* go = out.d->g.data();
            double* ga = a.flows() ? gbuf(a).data() : nullptr;
            double* gb = b.flows() ? gbuf(b).data() : nullptr;
            for (long long i = 0; i < n; ++i) bwd(i, go[i], a.d->v[i], b.d->v[i], ga, gb);
        }, {&out, &a, &b});
    }
    return out;
}

template <class FwdFn, class DFn>
Tensor unary_op(Graph* g, const Tensor& x, FwdFn fwd, DFn dfn) {
    Tensor out = wrap(make(x.d->shape, false, want(g, {&x})));
    long long n = x.size();
    for (long long i = 0; i < n; ++i) out.d->v[i] = fwd(x.d->v[i]);
    if (out.flows()) {
        g->record([x, out, n, dfn]() {
            const double* go = out.d->g.data();
            double* gx = gbuf(x).data();
            for (long long i = 0; i < n; ++i) gx[i] += go[i] * dfn(x.d->v[i], out.d->v[i]);
        }, {&out, &x});
    }
    return out;
}

}  // namespace

Tensor add(Graph* g, const Tensor& a, const Tensor& b) {
    return binary_same_shape(g, "add", a, b,
        [](double x, double y) { return x + y; },
        [](long long i, double go, double, double, double* ga, double* gb) {
            if (ga) ga[i] += go;
            if (gb) gb[i] += go;
        });
}

Tensor sub(Graph* g, const Tensor& a, const Tensor& b) {
    return binary_same_shape(g, "sub", a, b,
        [](double x, double y) { return x - y; },
        [](long long i, double go, double, double, double* ga, double* gb) {
            if (ga) ga[i] += go;
            if (gb) gb[i] -= go;
        });
}

Tensor mul(Graph* g, const Tensor& a, const Tensor& b) {
    return binary_same_shape(g, "mul", a, b,
        [](double x, double y) { return x * y; },
        [](long long i, double go, double x, double y, double* ga, double* gb) {
            if (ga) ga[i] += go * y;
            if (gb) gb[i] += go * x;
        });
}

Tensor add_rowwise(Graph* g, const Tensor& m, const Tensor& row) {
    int r = m.rows(), c = m.cols();
    if (row.size() != c) shape_error("add_rowwise", m, row);
    Tensor out = wrap(make(m.d->shape, false, want(g, {&m, &row})));
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.d->v[static_cast<long long>(i) * c + j] = m.d->v[static_cast<long long>(i) * c + j] + row.d->v[j];
    if (out.flows()) {
        g->record([m, row, out, r, c]() {
            const double* go = out.d->g.data();
            if (m.flows()) {
                double* gm = gbuf(m).data();
                for (long long i = 0; i < static_cast<long long>(r) * c; ++i) gm[i] += go[i];
            }
            if (row.flows()) {
                double* gr = gbuf(row).data();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gr[j] += go[static_cast<long long>(i) * c + j];
            }
        }, {&out, &m, &row});
    }
    return out;
}

Tensor scale(Graph* g, const Tensor& x, double cst) {
    return unary_op(g, x, [cst](double v) { return v * cst; },
                    [cst](double, double) { return cst; });
}

Tensor add_const(Graph* g, const Tensor& x, double cst) {
    return unary_op(g, x, [cst](double v) { return v + cst; },
                    [](double, double) { return 1.0; });
}

Tensor tanh_op(Graph* g, const Tensor& x) {
    return unary_op(g, x, [](double v) { return std::tanh(v); },
                    [](double, double o) { return 1.0 - o * o; });
}

Tensor relu(Graph* g, const Tensor& x) {
    return unary_op(g, x, [](double v) { return v > 0 ? v : 0.0; },
                    [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid_op(Graph* g, const Tensor& x) {
    return unary_op(g, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                    [](double, double o) { return o * (1.0 - o); });
}

Tensor exp_op(Graph* g, const Tensor& x) {
    return unary_op(g, x, [](double v) { return std::exp(v); },
                    [](double, double o) { return o; });
}

Tensor log_op(Graph* g, const Tensor& x) {
    for (double v : x.d->v)
        if (!(v > 0)) throw std::domain_error("log: non-positive input");
    return unary_op(g, x, [](double v) { return std::log(v); },
                    [](double v, double) { return 1.0 / v; });
}

Tensor sqrt_op(Graph* g, const Tensor& x) {
    for (double v : x.d->v)
        if (v < 0) throw std::domain_error("sqrt: negative input");
    return unary_op(g, x, [](double v) { return std::sqrt(v); },
                    [](double, double o) { return 0.5 / o; });
}

Tensor softmax_rows(Graph* g, const Tensor& x) {
    int r = x.rows(), c = x.cols();
    Tensor out = wrap(make(x.d->shape, false, want(g, {&x})));
    for (int i = 0; i < r; ++i) {
        const double* xi = x.data() + static_cast<long long>(i) * c;
        double* oi = out.d->v.data() + static_cast<long long>(i) * c;
        double mx = xi[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        double s = 0;
        for (int j = 0; j < c; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            s += oi[j];
        }
        double inv = 1.0 / s;
        for (int j = 0; j < c; ++j) oi[j] *= inv;
    }
    if (out.flows()) {
        g->record([x, out, r, c]() {
            const double* go = out.d->g.data();
            double* gx = gbuf(x).data();
            for (int i = 0; i < r; ++i) {
                const double* p = out.d->v.data() + static_cast<long long>(i) * c;
                const double* gr = go + static_cast<long long>(i) * c;
                double ip = 0;
                for (int j = 0; j < c; ++j) ip += gr[j] * p[j];
                double* gxi = gx + static_cast<long long>(i) * c;
                for (int j = 0; j < c; ++j) gxi[j] += p[j] * (gr[j] - ip);
            }
        }, {&out, &x});
    }
    return out;
}

Tensor cross_entropy(Graph* g, const Tensor& logits, const std::vector<int>& targets, int ignore_index) {
    return cross_entropy(g, logits, targets, std::vector<double>(targets.size(), 1.0), ignore_index);
}

Tensor cross_entropy(Graph* g, const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>& weights, int ignore_index) {
    int r = logits.rows(), c = logits.cols();
    if (static_cast<int>(targets.size()) != r)
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(r) + " rows");
    if (weights.size() != targets.size())
        throw std::invalid_argument("cross_entropy: " + std::to_string(weights.size()) +
                                    " weights for " + std::to_string(targets.size()) + " targets");
    std::vector<double> lse(r);
    double wsum = 0;
    double total = 0;
    for (int i = 0; i < r; ++i) {
        int t = targets[i];
        if (t == ignore_index) continue;
        if (t < 0 || t >= c) throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                                                     " outside vocabulary of " + std::to_string(c));
        double w = weights[i];
        if (!std::isfinite(w) || w < 0)
            throw std::invalid_argument("cross_entropy: weight " + std::to_string(w) + " at row " +
                                        std::to_string(i));
        const double* xi = logits.data() + static_cast<long long>(i) * c;
        double mx = xi[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        double s = 0;
        for (int j = 0; j < c; ++j) s += std::exp(xi[j] - mx);
        lse[i] = mx + std::log(s);
        total += w * (lse[i] - xi[t]);
        wsum += w;
    }
    if (wsum <= 0) throw std::invalid_argument("cross_entropy: no scorable targets");
    Tensor out = wrap(make({1}, false, want(g, {&logits})));
    out.d->v[0] = total / wsum;
    if (out.flows()) {
        g->record([logits, out, targets, weights, ignore_index, lse, wsum, r, c]() {
            double go = out.d->g[0] / wsum;
            double* gx = gbuf(logits).data();
            for (int i = 0; i < r; ++i) {
                int t = targets[i];
                if (t == ignore_index) continue;
                double gw = go * weights[i];
                const double* xi = logits.data() + static_cast<long long>(i) * c;
                double* gi = gx + static_cast<long long>(i) * c;
                for (int j = 0; j < c; ++j) gi[j] += gw * std::exp(xi[j] - lse[i]);
                gi[t] -= gw;
            }
        }, {&out, &logits});
    }
    return out;
}

Tensor bce_with_logits(Graph* g, const Tensor& logits, const std::vector<double>& labels) {
    long long n = logits.size();
    if (static_cast<long long>(labels.size()) != n)
        throw std::invalid_argument("bce_with_logits: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(n) + " logits");
    double total = 0;
    for (long long i = 0; i < n; ++i) {
        double z = logits.d->v[i], y = labels[i];
        total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor out = wrap(make({1}, false, want(g, {&logits})));
    out.d->v[0] = total / n;
    if (out.flows()) {
        g->record([logits, out, labels, n]() {
            double go = out.d->g[0] / n;
            double* gx = gbuf(logits).data();
            for (long long i = 0; i < n; ++i) {
                double z = logits.d->v[i];
                gx[i] += go * (1.0 / (1.0 + std::exp(-z)) - labels[i]);
            }
        }, {&out, &logits});
    }
    return out;
}

Tensor gather_rows(Graph* g, const Tensor& m, const std::vector<int>& ids) {
    if (m.d->shape.size() != 2) throw std::invalid_argument("gather_rows: source of shape " + m.shape_str() + " must be rank 2");
    int r = m.rows(), c = m.cols();
    for (int id : ids)
        if (id < 0 || id >= r) throw std::out_of_range("gather_rows: row " + std::to_string(id) +
                                                       " outside " + m.shape_str());
    int n = static_cast<int>(ids.size());
    if (n == 0) throw std::invalid_argument("gather_rows: empty index list");
    Tensor out = wrap(make({n, c}, false, want(g, {&m})));
    for (int i = 0; i < n; ++i)
        std::copy_n(m.data() + static_cast<long long>(ids[i]) * c, c,
                    out.d->v.data() + static_cast<long long>(i) * c);
    if (out.flows()) {
        g->record([m, out, ids, c]() {
            double* gm = gbuf(m).data();
            const double* go = out.d->g.data();
            for (size_t i = 0; i < ids.size(); ++i) {
                double* dst = gm + static_cast<long long>(ids[i]) * c;
                const double* src = go + static_cast<long long>(i) * c;
                for (int j = 0; j < c; ++j) dst[j] += src[j];
            }
        }, {&out, &m});
    }
    return out;
}

Tensor concat_flat(Graph* g, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_flat: no parts");
    long long total = 0;
    bool flows = false;
    for (const auto& p : parts) {
        total += p.size();
        flows = flows || p.flows();
    }
    Tensor out = wrap(make({static_cast<int>(total)}, false, g && flows));
    long long off = 0;
    for (const auto& p : parts) {
        std::copy(p.d->v.begin(), p.d->v.end(), out.d->v.begin() + off);
        off += p.size();
    }
    if (out.flows()) {
        std::vector<Tensor> touched = parts;
        touched.push_back(out);
        g->record([parts, out]() {
            const double* go = out.d->g.data();
            long long off = 0;
            for (const auto& p : parts) {
                if (p.flows()) {
                    double* gp = gbuf(p).data();
                    for (long long i = 0; i < p.size(); ++i) gp[i] += go[off + i];
                }
                off += p.size();
            }
        }, touched);
    }
    return out;
}

Tensor stack_rows(Graph* g, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("stack_rows: no parts");
    int c = static_cast<int>(parts[0].size());
    bool flows = false;
    for (const auto& p : parts) {
        if (p.size() != c) shape_error("stack_rows", parts[0], p);
        flows = flows || p.flows();
    }
    int n = static_cast<int>(parts.size());
    Tensor out = wrap(make({n, c}, false, g && flows));
    for (int i = 0; i < n; ++i)
        std::copy(parts[i].d->v.begin(), parts[i].d->v.end(), out.d->v.begin() + static_cast<long long>(i) * c);
    if (out.flows()) {
        std::vector<Tensor> touched = parts;
        touched.push_back(out);
        g->record([parts, out, c]() {
            const double* go = out.d->g.data();
            for (size_t i = 0; i < parts.size(); ++i) {
                if (!parts[i].flows()) continue;
                double* gp = gbuf(parts[i]).data();
                const double* src = go + static_cast<long long>(i) * c;
                for (int j = 0; j < c; ++j) gp[j] += src[j];
            }
        }, touched);
    }
    return out;
}

Tensor reshape_copy(Graph* g, const Tensor& x, std::vector<int> shape) {
    Tensor out = wrap(make(std::move(shape), false, want(g, {&x})));
    if (out.size() != x.size())
        throw std::invalid_argument("reshape_copy: cannot view " + x.shape_str() + " as " + out.shape_str());
    out.d->v = x.d->v;
    if (out.flows()) {
        g->record([x, out]() {
            double* gx = gbuf(x).data();
            const double* go = out.d->g.data();
            for (long long i = 0; i < x.size(); ++i) gx[i] += go[i];
        }, {&out, &x});
    }
    return out;
}

Tensor sum_all(Graph* g, const Tensor& x) {
    Tensor out = wrap(make({1}, false, want(g, {&x})));
    double s = 0;
    for (double v : x.d->v) s += v;
    out.d->v[0] = s;
    if (out.flows()) {
        g->record([x, out]() {
            double go = out.d->g[0];
            double* gx = gbuf(x).data();
            for (long long i = 0; i < x.size(); ++i) gx[i] += go;
        }, {&out, &x});
    }
    return out;
}

Tensor mean_all(Graph* g, const Tensor& x) {
    Tensor out = wrap(make({1}, false, want(g, {&x})));
    double s = 0;
    for (double v : x.d->v) s += v;
    double n = static_cast<double>(x.size());
    out.d->v[0] = s / n;
    if (out.flows()) {
        g->record([x, out, n]() {
            double go = out.d->g[0] / n;
            double* gx = gbuf(x).data();
            for (long long i = 0; i < x.size(); ++i) gx[i] += go;
        }, {&out, &x});
    }
    return out;
}

Tensor scatter_row(Graph* g, const Tensor& vals, const std::vector<int>& ids, int width) {
    long long k = vals.size();
    if (static_cast<long long>(ids.size()) != k)
        throw std::invalid_argument("scatter_row: " + std::to_string(ids.size()) +
                                    " positions for " + std::to_string(k) + " values");
    for (int id : ids)
        if (id < 0 || id >= width) throw std::out_of_range("scatter_row: position " + std::to_string(id) +
                                                           " outside width " + std::to_string(width));
    Tensor out = wrap(make({width}, false, want(g, {&vals})));
    for (long long i = 0; i < k; ++i) out.d->v[ids[i]] = vals.d->v[i];
    if (out.flows()) {
        g->record([vals, out, ids]() {
            double* gv = gbuf(vals).data();
            const double* go = out.d->g.data();
            for (size_t i = 0; i < ids.size(); ++i) gv[i] += go[ids[i]];
        }, {&out, &vals});
    }
    return out;
}

Tensor pick(Graph* g, const Tensor& x, long long index) {
    if (index < 0 || index >= x.size())
        throw std::out_of_range("pick: index " + std::to_string(index) + " outside " + x.shape_str());
    Tensor out = wrap(make({1}, false, want(g, {&x})));
    out.d->v[0] = x.d->v[index];
    if (out.flows()) {
        g->record([x, out, index]() {
            gbuf(x)[index] += out.d->g[0];
        }, {&out, &x});
    }
    return out;
}

Tensor dot(Graph* g, const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) shape_error("dot", a, b);
    Tensor out = wrap(make({1}, false, want(g, {&a, &b})));
    double s = 0;
    for (long long i = 0; i < a.size(); ++i) s += a.d->v[i] * b.d->v[i];
    out.d->v[0] = s;
    if (out.flows()) {
        g->record([a, b, out]() {
            double go = out.d->g[0];
            if (a.flows()) {
                double* ga = gbuf(a).data();
                for (long long i = 0; i < a.size(); ++i) ga[i] += go * b.d->v[i];
            }
            if (b.flows()) {
                double* gb = gbuf(b).data();
                for (long long i = 0; i < b.size(); ++i) gb[i] += go * a.d->v[i];
            }
        }, {&out, &a, &b});
    }
    return out;
}

Tensor cos_sim(Graph* g, const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) shape_error("cos_sim", a, b);
    double ip = 0, na2 = 0, nb2 = 0;
    for (long long i = 0; i < a.size(); ++i) {
        ip += a.d->v[i] * b.d->v[i];
        na2 += a.d->v[i] * a.d->v[i];
        nb2 += b.d->v[i] * b.d->v[i];
    }
    if (!(na2 > 0) || !(nb2 > 0)) throw std::domain_error("cos_sim: zero-norm input");
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    double cosv = ip / (na * nb);
    Tensor out = wrap(make({1}, false, want(g, {&a, &b})));
    out.d->v[0] = cosv;
    if (out.flows()) {
        g->record([a, b, out, na, nb, cosv]() {
            double go = out.d->g[0];
            if (a.flows()) {
                double* ga = gbuf(a).data();
                for (long long i = 0; i < a.size(); ++i)
                    ga[i] += go * (b.d->v[i] / (na * nb) - cosv * a.d->v[i] / (na * na));
            }
            if (b.flows()) {
                double* gb = gbuf(b).data();
                for (long long i = 0; i < b.size(); ++i)
                    gb[i] += go * (a.d->v[i] / (na * nb) - cosv * b.d->v[i] / (nb * nb));
            }
        }, {&out, &a, &b});
    }
    return out;
}

Tensor affine(Graph* g, const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowwise(g, matmul(g, x, w), b);
}

GruCell GruCell::init(int d_in, int d_hidden, wm::Rng& rng) {
    double sx = std::sqrt(1.0 / d_in);
    double sh = std::sqrt(1.0 / d_hidden);
    GruCell c;
    c.wzx = Tensor::uniform({d_in, d_hidden}, sx, rng);
    c.wzh = Tensor::uniform({d_hidden, d_hidden}, sh, rng);
    c.bz = Tensor::zeros({d_hidden}, true);
    c.wcx = Tensor::uniform({d_in, d_hidden}, sx, rng);
    c.wch = Tensor::uniform({d_hidden, d_hidden}, sh, rng);
    c.bc = Tensor::zeros({d_hidden}, true);
    return c;
}

Tensor gru_cell(Graph* g, const Tensor& x, const Tensor& h, const GruCell& w) {
    int bsz = x.rows(), dx = x.cols(), dh = h.cols();
    if (h.rows() != bsz) shape_error("gru_cell", x, h);
    if (w.wzx.rows() != dx || w.wzx.cols() != dh) shape_error("gru_cell", x, w.wzx);
    if (w.wzh.rows() != dh || w.wzh.cols() != dh) shape_error("gru_cell", h, w.wzh);
    bool rec = want(g, {&x, &h, &w.wzx, &w.wzh, &w.bz, &w.wcx, &w.wch, &w.bc});
    Tensor out = wrap(make(h.d->shape, false, rec));

    std::vector<double> z(static_cast<size_t>(bsz) * dh), c(static_cast<size_t>(bsz) * dh);
    auto gate = [&](const Tensor& wx, const Tensor& wh, const Tensor& bias, std::vector<double>& dst) {
        for (int i = 0; i < bsz; ++i) {
            double* row = dst.data() + static_cast<long long>(i) * dh;
            for (int j = 0; j < dh; ++j) row[j] = bias.d->v[j];
            const double* xi = x.data() + static_cast<long long>(i) * dx;
            for (int p = 0; p < dx; ++p) {
                double xv = xi[p];
                if (xv == 0.0) continue;
                const double* wrow = wx.data() + static_cast<long long>(p) * dh;
                for (int j = 0; j < dh; ++j) row[j] += xv * wrow[j];
            }
            const double* hi = h.data() + static_cast<long long>(i) * dh;
            for (int p = 0; p < dh; ++p) {
                double hv = hi[p];
                if (hv == 0.0) continue;
                const double* wrow = wh.data() + static_cast<long long>(p) * dh;
                for (int j = 0; j < dh; ++j) row[j] += hv * wrow[j];
            }
        }
    };
    gate(w.wzx, w.wzh, w.bz, z);
    gate(w.wcx, w.wch, w.bc, c);
    for (long long i = 0; i < static_cast<long long>(bsz) * dh; ++i) {
        z[i] = 1.0 / (1.0 + std::exp(-z[i]));
        c[i] = std::tanh(c[i]);
        out.d->v[i] = (1.0 - z[i]) * h.d->v[i] + z[i] * c[i];
    }

    if (rec) {
        g->record([x, h, w, out, z, c, bsz, dx, dh]() {
            const double* go = out.d->g.data();
            long long total = static_cast<long long>(bsz) * dh;
            std::vector<double> dzp(total), dcp(total);
            double* gh = h.flows() ? gbuf(h).data() : nullptr;
            for (long long i = 0; i < total; ++i) {
                double dz = go[i] * (c[i] - h.d->v[i]);
                double dc = go[i] * z[i];
                if (gh) gh[i] += go[i] * (1.0 - z[i]);
                dzp[i] = dz * z[i] * (1.0 - z[i]);
                dcp[i] = dc * (1.0 - c[i] * c[i]);
            }
            auto back_gate = [&](const std::vector<double>& dpre, const Tensor& wx, const Tensor& wh,
                                 const Tensor& bias) {
                if (x.flows()) {
                    double* gx = gbuf(x).data();
                    for (int i = 0; i < bsz; ++i) {
                        const double* drow = dpre.data() + static_cast<long long>(i) * dh;
                        double* gxr = gx + static_cast<long long>(i) * dx;
                        for (int p = 0; p < dx; ++p) {
                            const double* wrow = wx.data() + static_cast<long long>(p) * dh;
                            double s = 0;
                            for (int j = 0; j < dh; ++j) s += drow[j] * wrow[j];
                            gxr[p] += s;
                        }
                    }
                }
                if (h.flows()) {
                    double* ghh = gbuf(h).data();
                    for (int i = 0; i < bsz; ++i) {
                        const double* drow = dpre.data() + static_cast<long long>(i) * dh;
                        double* ghr = ghh + static_cast<long long>(i) * dh;
                        for (int p = 0; p < dh; ++p) {
                            const double* wrow = wh.data() + static_cast<long long>(p) * dh;
                            double s = 0;
                            for (int j = 0; j < dh; ++j) s += drow[j] * wrow[j];
                            ghr[p] += s;
                        }
                    }
                }
                if (wx.flows()) {
                    double* gw = gbuf(wx).data();
                    for (int i = 0; i < bsz; ++i) {
                        const double* xi = x.data() + static_cast<long long>(i) * dx;
                        const double* drow = dpre.data() + static_cast<long long>(i) * dh;
                        for (int p = 0; p < dx; ++p) {
                            double xv = xi[p];
                            if (xv == 0.0) continue;
                            double* gwr = gw + static_cast<long long>(p) * dh;
                            for (int j = 0; j < dh; ++j) gwr[j] += xv * drow[j];
                        }
                    }
                }
                if (wh.flows()) {
                    double* gw = gbuf(wh).data();
                    for (int i = 0; i < bsz; ++i) {
                        const double* hi = h.data() + static_cast<long long>(i) * dh;
                        const double* drow = dpre.data() + static_cast<long long>(i) * dh;
                        for (int p = 0; p < dh; ++p) {
                            double hv = hi[p];
                            if (hv == 0.0) continue;
                            double* gwr = gw + static_cast<long long>(p) * dh;
                            for (int j = 0; j < dh; ++j) gwr[j] += hv * drow[j];
                        }
                    }
                }
                if (bias.flows()) {
                    double* gb = gbuf(bias).data();
                    for (int i = 0; i < bsz; ++i) {
                        const double* drow = dpre.data() + static_cast<long long>(i) * dh;
                        for (int j = 0; j < dh; ++j) gb[j] += drow[j];
                    }
                }
            };
            back_gate(dzp, w.wzx, w.wzh, w.bz);
            back_gate(dcp, w.wcx, w.wch, w.bc);
        }, {&out, &x, &h, &w.wzx, &w.wzh, &w.bz, &w.wcx, &w.wch, &w.bc});
    }
    return out;
}

// --------------------------------------------------------------- grad check

GradCheckReport grad_check(const std::function<Tensor(Graph*, std::vector<Tensor>&)>& f,
                           std::vector<Tensor> point, double step, double saturation_floor) {
    GradCheckReport rep;
    Graph graph;
    Tensor out = f(&graph, point);
    if (!out.is_scalar()) throw std::invalid_argument("grad_check: function output must be scalar");
    graph.backward(out);

    std::vector<std::vector<double>> analytic;
    for (auto& p : point) analytic.push_back(p.grad());

    auto eval = [&](std::vector<Tensor>& pt) { return f(nullptr, pt).value(); };

    for (size_t a = 0; a < point.size(); ++a) {
        if (!point[a].requires_grad()) continue;
        for (long long i = 0; i < point[a].size(); ++i) {
            double saved = point[a].d->v[i];
            point[a].d->v[i] = saved + step;
            double fp = eval(point);
            point[a].d->v[i] = saved - step;
            double fm = eval(point);
            point[a].d->v[i] = saved;
            double numeric = (fp - fm) / (2.0 * step);
            double an = analytic[a][i];
            if (std::abs(an) < saturation_floor && std::abs(numeric) < saturation_floor) {
                rep.saturated.push_back("arg" + std::to_string(a) + "[" + std::to_string(i) + "]");
                continue;
            }
            double err = std::abs(an - numeric) / std::max({1.0, std::abs(an), std::abs(numeric)});
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_arg = static_cast<int>(a);
                rep.worst_index = i;
            }
        }
    }
    return rep;
}

}  // namespace wm::diff
