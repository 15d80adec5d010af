#include "stepviz/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace stepviz {

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw DimError("extent must be positive");
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

thread_local GradTape* g_active_tape = nullptr;

bool tracing(const Tensor& a) { return g_active_tape != nullptr && a.requires_grad(); }
bool tracing(const Tensor& a, const Tensor& b) {
    return g_active_tape != nullptr && (a.requires_grad() || b.requires_grad());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) throw DimError(std::string(op) + ": shape mismatch");
}

// ------------------------- matmul kernels -------------------------
// All kernels accumulate (C += ...). Layouts are row-major.

void mm_nn(double* __restrict c, const double* __restrict a, const double* __restrict b,
           int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
void mm_nt(double* __restrict c, const double* __restrict a, const double* __restrict b,
           int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
void mm_tn(double* __restrict c, const double* __restrict a, const double* __restrict b,
           int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const double* ap = a + static_cast<std::size_t>(p) * m;
        const double* bp = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = ap[i];
            double* ci = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ------------------------- Tensor -------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    const std::size_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(n, 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.vec().begin(), t.vec().end(), value);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return full({1}, value, requires_grad);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) throw DimError("from_data: size mismatch");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.vec()) v = rng.normal() * stddev;
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor is not scalar");
    return impl_->data[0];
}

std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() const {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

void Tensor::copy_data_from(const Tensor& other) {
    require_same_shape(*this, other, "copy_data_from");
    impl_->data = other.impl_->data;
}

// ------------------------- GradTape -------------------------

void GradTape::record(std::function<void()> backward_fn,
                      std::initializer_list<std::shared_ptr<TensorImpl>> touched) {
    ops_.push_back(std::move(backward_fn));
    for (const auto& t : touched) touched_.push_back(t);
}

void GradTape::record(std::function<void()> backward_fn,
                      std::vector<std::shared_ptr<TensorImpl>> touched) {
    ops_.push_back(std::move(backward_fn));
    for (auto& t : touched) touched_.push_back(std::move(t));
}

void GradTape::backward(Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
    loss.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void GradTape::zero_all_grads() {
    for (auto& t : touched_) {
        if (!t->grad.empty()) std::fill(t->grad.begin(), t->grad.end(), 0.0);
    }
}

void GradTape::clear() {
    ops_.clear();
    touched_.clear();
}

GradTape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(GradTape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoTapeScope::NoTapeScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_active_tape = prev_; }

// ------------------------- helpers for op bodies -------------------------

namespace {

// Rows/cols view of a 2-D (or [d] treated as [1,d]) tensor.
struct Mat2 {
    int rows;
    int cols;
};

Mat2 as_2d(const Tensor& t, const char* op) {
    if (t.ndim() == 1) return {1, t.dim(0)};
    if (t.ndim() == 2) return {t.dim(0), t.dim(1)};
    throw DimError(std::string(op) + ": expected 1-D or 2-D tensor");
}

Tensor make_out(std::vector<int> shape, bool traced) {
    Tensor out = Tensor::zeros(std::move(shape), traced);
    return out;
}

}  // namespace

// ------------------------- ops -------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw DimError("matmul: expected 2-D tensors");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) throw DimError("matmul: inner extents do not match");

    const bool traced = tracing(a, b);
    Tensor out = make_out({m, n}, traced);
    mm_nn(out.data(), a.data(), b.data(), m, k, n);

    if (traced) {
        g_active_tape->record(
            [a, b, out, m, k, n]() mutable {
                if (!out.has_grad()) return;
                const double* g = out.grad().data();
                if (a.requires_grad()) mm_nt(a.grad().data(), g, b.data(), m, n, k);
                if (b.requires_grad()) mm_tn(b.grad().data(), a.data(), g, k, m, n);
            },
            {a.impl(), b.impl(), out.impl()});
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw DimError("transpose: expected 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    const bool traced = tracing(a);
    Tensor out = make_out({n, m}, traced);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.data()[static_cast<std::size_t>(j) * m + i] =
                a.data()[static_cast<std::size_t>(i) * n + j];

    if (traced) {
        g_active_tape->record(
            [a, out, m, n]() mutable {
                if (!out.has_grad() || !a.requires_grad()) return;
                const double* g = out.grad().data();
                double* ga = a.grad().data();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        ga[static_cast<std::size_t>(i) * n + j] +=
                            g[static_cast<std::size_t>(j) * m + i];
            },
            {a.impl(), out.impl()});
    }
    return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    require_same_shape(a, b, name);
    const bool traced = tracing(a, b);
    Tensor out = make_out(a.shape(), traced);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i], b.data()[i]);

    if (traced) {
        g_active_tape->record(
            [a, b, out, n, bwd]() mutable {
                if (!out.has_grad()) return;
                const double* g = out.grad().data();
                double* ga = a.requires_grad() ? a.grad().data() : nullptr;
                double* gb = b.requires_grad() ? b.grad().data() : nullptr;
                for (std::size_t i = 0; i < n; ++i)
                    bwd(g[i], a.data()[i], b.data()[i], ga ? &ga[i] : nullptr,
                        gb ? &gb[i] : nullptr);
            },
            {a.impl(), b.impl(), out.impl()});
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double g, double, double, double* ga, double* gb) {
            if (ga) *ga += g;
            if (gb) *gb += g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double g, double, double, double* ga, double* gb) {
            if (ga) *ga += g;
            if (gb) *gb -= g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double g, double x, double y, double* ga, double* gb) {
            if (ga) *ga += g * y;
            if (gb) *gb += g * x;
        });
}

Tensor scale(const Tensor& a, double s) {
    const bool traced = tracing(a);
    Tensor out = make_out(a.shape(), traced);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    if (traced) {
        g_active_tape->record(
            [a, out, n, s]() mutable {
                if (!out.has_grad() || !a.requires_grad()) return;
                const double* g = out.grad().data();
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
            },
            {a.impl(), out.impl()});
    }
    return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
    const Mat2 m = as_2d(a, "add_rowvec");
    // flat view: [d] and [1,d] biases both broadcast over rows
    if (bias.numel() != static_cast<std::size_t>(m.cols))
        throw DimError("add_rowvec: bias must have row-width elements");
    const bool traced = tracing(a, bias);
    Tensor out = make_out(a.shape(), traced);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * m.cols + j;
            out.data()[idx] = a.data()[idx] + bias.data()[j];
        }
    if (traced) {
        g_active_tape->record(
            [a, bias, out, m]() mutable {
                if (!out.has_grad()) return;
                const double* g = out.grad().data();
                if (a.requires_grad()) {
                    double* ga = a.grad().data();
                    for (std::size_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
                }
                if (bias.requires_grad()) {
                    double* gb = bias.grad().data();
                    for (int i = 0; i < m.rows; ++i)
                        for (int j = 0; j < m.cols; ++j)
                            gb[j] += g[static_cast<std::size_t>(i) * m.cols + j];
                }
            },
            {a.impl(), bias.impl(), out.impl()});
    }
    return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Bwd bwd) {
    const bool traced = tracing(a);
    Tensor out = make_out(a.shape(), traced);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i]);
    if (traced) {
        g_active_tape->record(
            [a, out, n, bwd]() mutable {
                if (!out.has_grad() || !a.requires_grad()) return;
                const double* g = out.grad().data();
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bwd(a.data()[i]);
            },
            {a.impl(), out.impl()});
    }
    return out;
}

}  // namespace

Tensor silu(const Tensor& a) {
    return unary_elementwise(
        a, [](double x) { return x * sigmoid(x); },
        [](double x) {
            const double s = sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor relu(const Tensor& a) {
    return unary_elementwise(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp01(const Tensor& a) {
    return unary_elementwise(
        a, [](double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); },
        [](double x) { return (x > 0.0 && x < 1.0) ? 1.0 : 0.0; });
}

Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    const Mat2 m = as_2d(a, "layernorm");
    if (gain.ndim() != 1 || gain.dim(0) != m.cols || bias.ndim() != 1 || bias.dim(0) != m.cols)
        throw DimError("layernorm: gain/bias must be 1-D of row width");

    const bool traced = g_active_tape != nullptr &&
                        (a.requires_grad() || gain.requires_grad() || bias.requires_grad());
    Tensor out = make_out(a.shape(), traced);
    // Normalized rows are needed in backward; keep them alongside 1/sigma.
    auto norm = std::make_shared<std::vector<double>>(a.numel());
    auto inv_sigma = std::make_shared<std::vector<double>>(m.rows);

    for (int i = 0; i < m.rows; ++i) {
        const double* row = a.data() + static_cast<std::size_t>(i) * m.cols;
        double mean = 0.0;
        for (int j = 0; j < m.cols; ++j) mean += row[j];
        mean /= m.cols;
        double var = 0.0;
        for (int j = 0; j < m.cols; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= m.cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[i] = inv;
        for (int j = 0; j < m.cols; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * m.cols + j;
            const double y = (row[j] - mean) * inv;
            (*norm)[idx] = y;
            out.data()[idx] = y * gain.data()[j] + bias.data()[j];
        }
    }

    if (traced) {
        g_active_tape->record(
            [a, gain, bias, out, m, norm, inv_sigma]() mutable {
                if (!out.has_grad()) return;
                const double* g = out.grad().data();
                for (int i = 0; i < m.rows; ++i) {
                    const std::size_t off = static_cast<std::size_t>(i) * m.cols;
                    if (gain.requires_grad()) {
                        double* gg = gain.grad().data();
                        for (int j = 0; j < m.cols; ++j) gg[j] += g[off + j] * (*norm)[off + j];
                    }
                    if (bias.requires_grad()) {
                        double* gb = bias.grad().data();
                        for (int j = 0; j < m.cols; ++j) gb[j] += g[off + j];
                    }
                    if (a.requires_grad()) {
                        // dL/dy_j with y the normalized row, then the standard
                        // layernorm input gradient.
                        double mean_dy = 0.0, mean_dy_y = 0.0;
                        for (int j = 0; j < m.cols; ++j) {
                            const double dy = g[off + j] * gain.data()[j];
                            mean_dy += dy;
                            mean_dy_y += dy * (*norm)[off + j];
                        }
                        mean_dy /= m.cols;
                        mean_dy_y /= m.cols;
                        double* ga = a.grad().data();
                        for (int j = 0; j < m.cols; ++j) {
                            const double dy = g[off + j] * gain.data()[j];
                            ga[off + j] += (*inv_sigma)[i] *
                                           (dy - mean_dy - (*norm)[off + j] * mean_dy_y);
                        }
                    }
                }
            },
            {a.impl(), gain.impl(), bias.impl(), out.impl()});
    }
    return out;
}

Tensor l2_normalize(const Tensor& a, double eps) {
    const Mat2 m = as_2d(a, "l2_normalize");
    const bool traced = tracing(a);
    Tensor out = make_out(a.shape(), traced);
    auto inv_norm = std::make_shared<std::vector<double>>(m.rows);
    for (int i = 0; i < m.rows; ++i) {
        const double* row = a.data() + static_cast<std::size_t>(i) * m.cols;
        double s = eps;
        for (int j = 0; j < m.cols; ++j) s += row[j] * row[j];
        const double inv = 1.0 / std::sqrt(s);
        (*inv_norm)[i] = inv;
        for (int j = 0; j < m.cols; ++j)
            out.data()[static_cast<std::size_t>(i) * m.cols + j] = row[j] * inv;
    }
    if (traced) {
        g_active_tape->record(
            [a, out, m, inv_norm]() mutable {
                if (!out.has_grad() || !a.requires_grad()) return;
                const double* g = out.grad().data();
                double* ga = a.grad().data();
                for (int i = 0; i < m.rows; ++i) {
                    const std::size_t off = static_cast<std::size_t>(i) * m.cols;
                    double gr = 0.0;  // <g, r> with r the normalized row
                    for (int j = 0; j < m.cols; ++j) gr += g[off + j] * out.data()[off + j];
                    for (int j = 0; j < m.cols; ++j)
                        ga[off + j] +=
                            (*inv_norm)[i] * (g[off + j] - out.data()[off + j] * gr);
                }
            },
            {a.impl(), out.impl()});
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    const bool traced = tracing(a);
    Tensor out = make_out({1}, traced);
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i];
    out.data()[0] = s;
    if (traced) {
        g_active_tape->record(
            [a, out]() mutable {
                if (!out.has_grad() || !a.requires_grad()) return;
                const double g = out.grad()[0];
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g;
            },
            {a.impl(), out.impl()});
    }
    return out;
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    const bool traced = tracing(a, b);
    Tensor out = make_out({1}, traced);
    const std::size_t n = a.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    out.data()[0] = s / static_cast<double>(n);
    if (traced) {
        g_active_tape->record(
            [a, b, out, n]() mutable {
                if (!out.has_grad()) return;
                const double g = out.grad()[0] * 2.0 / static_cast<double>(n);
                double* ga = a.requires_grad() ? a.grad().data() : nullptr;
                double* gb = b.requires_grad() ? b.grad().data() : nullptr;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = a.data()[i] - b.data()[i];
                    if (ga) ga[i] += g * d;
                    if (gb) gb[i] -= g * d;
                }
            },
            {a.impl(), b.impl(), out.impl()});
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) { return concat(parts, 0); }

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    if (axis != 0 && axis != 1) throw DimError("concat: axis must be 0 or 1");
    const Mat2 first = as_2d(parts[0], "concat");
    int rows = 0, cols = 0;
    for (const Tensor& p : parts) {
        const Mat2 m = as_2d(p, "concat");
        if (axis == 0) {
            if (m.cols != first.cols) throw DimError("concat: column mismatch");
            rows += m.rows;
            cols = m.cols;
        } else {
            if (m.rows != first.rows) throw DimError("concat: row mismatch");
            rows = m.rows;
            cols += m.cols;
        }
    }
    bool any_grad = false;
    for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
    const bool traced = g_active_tape != nullptr && any_grad;
    Tensor out = make_out({rows, cols}, traced);

    if (axis == 0) {
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            std::copy(p.data(), p.data() + p.numel(), out.data() + off);
            off += p.numel();
        }
    } else {
        int col_off = 0;
        for (const Tensor& p : parts) {
            const Mat2 m = as_2d(p, "concat");
            for (int i = 0; i < m.rows; ++i)
                std::copy(p.data() + static_cast<std::size_t>(i) * m.cols,
                          p.data() + static_cast<std::size_t>(i + 1) * m.cols,
                          out.data() + static_cast<std::size_t>(i) * cols + col_off);
            col_off += m.cols;
        }
    }

    if (traced) {
        std::vector<Tensor> held = parts;
        std::vector<std::shared_ptr<TensorImpl>> touched;
        touched.reserve(parts.size() + 1);
        for (const Tensor& p : parts) touched.push_back(p.impl());
        touched.push_back(out.impl());
        g_active_tape->record(
            [held, out, rows, cols, axis]() mutable {
                if (!out.has_grad()) return;
                const double* g = out.grad().data();
                if (axis == 0) {
                    std::size_t off = 0;
                    for (Tensor& p : held) {
                        if (p.requires_grad()) {
                            double* gp = p.grad().data();
                            for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += g[off + i];
                        }
                        off += p.numel();
                    }
                } else {
                    int col_off = 0;
                    for (Tensor& p : held) {
                        const Mat2 m = as_2d(p, "concat");
                        if (p.requires_grad()) {
                            double* gp = p.grad().data();
                            for (int i = 0; i < m.rows; ++i)
                                for (int j = 0; j < m.cols; ++j)
                                    gp[static_cast<std::size_t>(i) * m.cols + j] +=
                                        g[static_cast<std::size_t>(i) * cols + col_off + j];
                        }
                        col_off += m.cols;
                    }
                }
            },
            std::move(touched));
    }
    return out;
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
    const Mat2 m = as_2d(a, "slice_rows");
    if (begin < 0 || end > m.rows || begin >= end) throw IndexError("slice_rows: bad range");
    const bool traced = tracing(a);
    Tensor out = make_out({end - begin, m.cols}, traced);
    std::copy(a.data() + static_cast<std::size_t>(begin) * m.cols,
              a.data() + static_cast<std::size_t>(end) * m.cols, out.data());
    if (traced) {
        g_active_tape->record(
            [a, out, begin, m]() mutable {
                if (!out.has_grad() || !a.requires_grad()) return;
                const double* g = out.grad().data();
                double* ga = a.grad().data() + static_cast<std::size_t>(begin) * m.cols;
                for (std::size_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
            },
            {a.impl(), out.impl()});
    }
    return out;
}

namespace {

// Shared softmax core: rows of `u` already hold the (possibly masked) logits.
Tensor softmax_of(const Tensor& u) {
    const Mat2 m = as_2d(u, "softmax");
    const bool traced = tracing(u);
    Tensor out = make_out(u.shape(), traced);
    for (int i = 0; i < m.rows; ++i) {
        const double* row = u.data() + static_cast<std::size_t>(i) * m.cols;
        double* orow = out.data() + static_cast<std::size_t>(i) * m.cols;
        double mx = row[0];
        for (int j = 1; j < m.cols; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        const double inv = 1.0 / z;
        for (int j = 0; j < m.cols; ++j) orow[j] *= inv;
    }
    if (traced) {
        g_active_tape->record(
            [u, out, m]() mutable {
                if (!out.has_grad() || !u.requires_grad()) return;
                const double* g = out.grad().data();
                double* gu = u.grad().data();
                for (int i = 0; i < m.rows; ++i) {
                    const std::size_t off = static_cast<std::size_t>(i) * m.cols;
                    double dot = 0.0;
                    for (int j = 0; j < m.cols; ++j) dot += g[off + j] * out.data()[off + j];
                    for (int j = 0; j < m.cols; ++j)
                        gu[off + j] += out.data()[off + j] * (g[off + j] - dot);
                }
            },
            {u.impl(), out.impl()});
    }
    return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) { return softmax_of(logits); }

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
    if (logits.ndim() != 2 || logits.dim(0) != logits.dim(1))
        throw DimError("masked_softmax: logits must be square");
    require_same_shape(logits, mask, "masked_softmax");
    return softmax_of(mul(logits, mask));
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    const Mat2 m = as_2d(logits, "cross_entropy_rows");
    if (static_cast<int>(targets.size()) != m.rows)
        throw DimError("cross_entropy_rows: one target per row required");
    for (int t : targets)
        if (t < 0 || t >= m.cols) throw IndexError("cross_entropy_rows: target out of range");

    const bool traced = tracing(logits);
    Tensor out = make_out({1}, traced);
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    double loss = 0.0;
    for (int i = 0; i < m.rows; ++i) {
        const double* row = logits.data() + static_cast<std::size_t>(i) * m.cols;
        double mx = row[0];
        for (int j = 1; j < m.cols; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < m.cols; ++j) z += std::exp(row[j] - mx);
        const double logz = std::log(z) + mx;
        loss += logz - row[targets[static_cast<std::size_t>(i)]];
        for (int j = 0; j < m.cols; ++j)
            (*probs)[static_cast<std::size_t>(i) * m.cols + j] = std::exp(row[j] - logz);
    }
    out.data()[0] = loss / m.rows;

    if (traced) {
        g_active_tape->record(
            [logits, out, m, probs, targets]() mutable {
                if (!out.has_grad() || !logits.requires_grad()) return;
                const double g = out.grad()[0] / m.rows;
                double* gl = logits.grad().data();
                for (int i = 0; i < m.rows; ++i)
                    for (int j = 0; j < m.cols; ++j) {
                        const std::size_t idx = static_cast<std::size_t>(i) * m.cols + j;
                        double p = (*probs)[idx];
                        if (j == targets[static_cast<std::size_t>(i)]) p -= 1.0;
                        gl[idx] += g * p;
                    }
            },
            {logits.impl(), out.impl()});
    }
    return out;
}

Tensor sinusoidal_embed(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw DimError("sinusoidal_embed: dim must be even and >= 2");
    Tensor out = Tensor::zeros({1, dim});  // row vector, ready for a Linear
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out.data()[2 * i] = std::sin(t * freq);
        out.data()[2 * i + 1] = std::cos(t * freq);
    }
    return out;
}

bool all_finite(const Tensor& a) {
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (!std::isfinite(a.data()[i])) return false;
    if (a.has_grad())
        for (double v : a.impl()->grad)
            if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace stepviz
