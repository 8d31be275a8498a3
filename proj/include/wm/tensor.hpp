#pragma once

// Reverse-mode automatic differentiation on a dynamic tape.
//
// All values are double precision. A Tensor is a cheap shared handle onto a
// dense row-major buffer (rank 1 or 2). Operations optionally record a
// backward closure onto a Graph; passing a null Graph runs the same forward
// arithmetic with no recording (the inference path). Gradients flow to every
// tensor created with requires_grad and to every intermediate derived from
// one; frozen tensors never receive or propagate gradient.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace wm { class Rng; }

namespace wm::diff {

struct TensorData {
    std::vector<int> shape;
    std::vector<double> v;
    std::vector<double> g;      // sized lazily; valid after a backward sweep
    bool requires_grad = false;
    bool flows = false;         // gradient reaches this tensor (leaf rg or derived from one)
    uint64_t zero_epoch = 0;    // internal: last backward sweep that zeroed g
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> vals, bool requires_grad = false);
    static Tensor scalar(double x, bool requires_grad = false);
    // i.i.d. uniform in [-scale, scale]; the standard init for this codebase.
    static Tensor uniform(std::vector<int> shape, double scale, wm::Rng& rng, bool requires_grad = true);

    bool defined() const { return d != nullptr; }
    const std::vector<int>& shape() const { return d->shape; }
    long long size() const { return static_cast<long long>(d->v.size()); }
    int rows() const { return d->shape.size() == 2 ? d->shape[0] : 1; }
    int cols() const { return d->shape.size() == 2 ? d->shape[1] : d->shape[0]; }
    bool is_scalar() const { return d->v.size() == 1; }

    double* data() { return d->v.data(); }
    const double* data() const { return d->v.data(); }
    double value() const;                       // scalar only
    double at(long long i) const { return d->v[i]; }

    bool requires_grad() const { return d->requires_grad; }
    bool flows() const { return d && d->flows; }

    // Gradient buffer, zero-filled if not yet touched by a backward pass.
    std::vector<double>& grad() const;

    std::string shape_str() const;

    std::shared_ptr<TensorData> d;
};

// True when t's gradient buffer was filled by the most recent backward sweep;
// optimizers must treat anything else as zero (stale buffer from an older
// sweep that did not touch t).
bool grad_is_current(const Tensor& t);

// Installs an externally computed gradient (e.g. a multi-objective combined
// direction) and marks it current, so the optimizer applies it exactly as if
// the latest backward sweep had produced it.
void set_grad(Tensor& t, std::vector<double> grad);

// Dynamic tape. Nodes are recorded in forward order (hence already in
// topological order); backward() zeroes the gradient buffers of every tensor
// touched by the tape, seeds d(loss)/d(loss) = 1 and replays the closures in
// reverse. A graph is consumable exactly once per forward pass.
class Graph {
public:
    void record(std::function<void()> fn, std::initializer_list<const Tensor*> touched);
    void record(std::function<void()> fn, const std::vector<Tensor>& touched);

    // Single-loss reverse pass.
    void backward(const Tensor& loss);

    // Two reverse sweeps over one recorded forward pass, returning the two
    // gradient vectors of the given parameter list separately (first for
    // loss_a, then for loss_b). This is the multi-objective entry point; like
    // backward(), it consumes the graph.
    std::pair<std::vector<double>, std::vector<double>> backward_pair(
        const Tensor& loss_a, const Tensor& loss_b, const std::vector<Tensor>& params);

    size_t nodes() const { return tape_.size(); }
    void clear();

private:
    void sweep(const Tensor& loss);

    struct Node {
        std::function<void()> fn;
        std::vector<TensorData*> touched;
    };
    std::vector<Node> tape_;
    bool consumed_ = false;
};

// ---------------------------------------------------------------- operations
// Shapes: [m x k] denotes rank 2; a rank-1 tensor of n entries acts as the
// row [1 x n] where a matrix is expected. Every op validates shapes and
// reports both operands on mismatch.

Tensor matmul(Graph* g, const Tensor& a, const Tensor& b);           // [m x k]·[k x n]
Tensor add(Graph* g, const Tensor& a, const Tensor& b);              // same shape
Tensor sub(Graph* g, const Tensor& a, const Tensor& b);
Tensor mul(Graph* g, const Tensor& a, const Tensor& b);              // elementwise
Tensor add_rowwise(Graph* g, const Tensor& m, const Tensor& row);    // broadcast row
Tensor scale(Graph* g, const Tensor& x, double c);
Tensor add_const(Graph* g, const Tensor& x, double c);
Tensor tanh_op(Graph* g, const Tensor& x);
Tensor relu(Graph* g, const Tensor& x);  // subgradient 0 at the kink
Tensor sigmoid_op(Graph* g, const Tensor& x);
Tensor exp_op(Graph* g, const Tensor& x);
Tensor log_op(Graph* g, const Tensor& x);
Tensor sqrt_op(Graph* g, const Tensor& x);

// Stable softmax along the last axis (per row): max-subtracted.
Tensor softmax_rows(Graph* g, const Tensor& x);

// Mean over rows of -log softmax(logits)[target]; targets of ignore_index
// contribute nothing. Rejects empty effective batch.
Tensor cross_entropy(Graph* g, const Tensor& logits, const std::vector<int>& targets,
                     int ignore_index = -1);

// Weighted variant: sum(w_i * nll_i) / sum(w_i) over non-ignored rows.
// Weights must be finite and >= 0 with a positive non-ignored sum; an
// all-ones vector reproduces the unweighted mean.
Tensor cross_entropy(Graph* g, const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>& weights, int ignore_index = -1);

// Mean binary cross-entropy with logits (numerically stable form).
Tensor bce_with_logits(Graph* g, const Tensor& logits, const std::vector<double>& labels);

Tensor gather_rows(Graph* g, const Tensor& m, const std::vector<int>& ids);
Tensor concat_flat(Graph* g, const std::vector<Tensor>& parts);      // row vector
Tensor stack_rows(Graph* g, const std::vector<Tensor>& parts);       // [n x c]
Tensor reshape_copy(Graph* g, const Tensor& x, std::vector<int> shape);
Tensor sum_all(Graph* g, const Tensor& x);
Tensor mean_all(Graph* g, const Tensor& x);
// k values placed at the given column positions of a zero row [1 x width].
Tensor scatter_row(Graph* g, const Tensor& vals, const std::vector<int>& ids, int width);
Tensor pick(Graph* g, const Tensor& x, long long index);             // scalar
Tensor dot(Graph* g, const Tensor& a, const Tensor& b);              // flattened
// Fused cosine similarity with closed-form gradient:
//   d cos / d a = b/(|a||b|) - cos * a/|a|^2   (symmetrically for b).
Tensor cos_sim(Graph* g, const Tensor& a, const Tensor& b);
Tensor affine(Graph* g, const Tensor& x, const Tensor& w, const Tensor& b);

// Single-gate recurrent update cell (all rows batched):
//   z  = sigmoid(x Wzx + h Wzh + bz)
//   c  = tanh   (x Wcx + h Wch + bc)
//   h' = (1 - z) * h + z * c
// Backward (closed form), given dh':
//   dz = dh' * (c - h)            dc = dh' * z        dh += dh' * (1 - z)
//   dzp = dz * z * (1 - z)        dcp = dc * (1 - c^2)
//   dx  = dzp Wzx^T + dcp Wcx^T   dh += dzp Wzh^T + dcp Wch^T
//   dWzx += x^T dzp, dWzh += h^T dzp, dbz += sum dzp   (likewise for c).
struct GruCell {
    Tensor wzx, wzh, bz, wcx, wch, bc;
    static GruCell init(int d_in, int d_hidden, wm::Rng& rng);
    std::vector<Tensor> params() const { return {wzx, wzh, bz, wcx, wch, bc}; }
};
Tensor gru_cell(Graph* g, const Tensor& x, const Tensor& h, const GruCell& w);

// ---------------------------------------------------------------- grad check
// Central finite differences against the tape gradient. Coordinates whose
// analytic and numeric derivatives are both below `saturation_floor` are
// reported as saturated and excluded from the error maximum (the difference
// quotient carries no signal there).
struct GradCheckReport {
    double max_rel_err = 0.0;
    int worst_arg = -1;
    long long worst_index = -1;
    std::vector<std::string> saturated;
    bool ok(double tol) const { return max_rel_err <= tol; }
};

GradCheckReport grad_check(const std::function<Tensor(Graph*, std::vector<Tensor>&)>& f,
                           std::vector<Tensor> point, double step = 1e-5,
                           double saturation_floor = 1e-5);

}  // namespace wm::diff
