#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stepviz/errors.hpp"
#include "stepviz/rng.hpp"

namespace stepviz {

// Dense f64 tensor with reverse-mode autodiff. Row-major storage, no
// broadcasting beyond scalar*tensor and row-vector bias (everything else is
// a shape error). All computation is in 64-bit floats.

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::size_t numel() const { return impl_->data.size(); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    double item() const;  // requires numel() == 1

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    // Allocates zeros on first use. Const-qualified on purpose: Tensor is a
    // shared handle, so const-ness of the handle does not protect the buffer
    // (same as shared_ptr).
    std::vector<double>& grad() const;
    void zero_grad() const;

    // Deep copy that drops grad state and tape participation.
    Tensor detach() const;

    // Same-shape reassignment of contents (used by optimizers and loaders).
    void copy_data_from(const Tensor& other);

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Gradient tape
// ---------------------------------------------------------------------------

// Records backward closures in execution order; backward() replays them in
// reverse. One tape per training step; gradients accumulate additively across
// fan-out. A tape is single-threaded; the active tape is thread-local so
// independent tapes can run on separate threads.
class GradTape {
public:
    void record(std::function<void()> backward_fn,
                std::initializer_list<std::shared_ptr<TensorImpl>> touched);
    void record(std::function<void()> backward_fn,
                std::vector<std::shared_ptr<TensorImpl>> touched);

    std::size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
    void backward(Tensor& loss);

    // Clears gradients on every tensor this tape has touched (leaves included).
    void zero_all_grads();

    void clear();

private:
    std::vector<std::function<void()>> ops_;
    std::vector<std::shared_ptr<TensorImpl>> touched_;
};

GradTape* active_tape();

// Makes a tape current for the enclosing scope.
class TapeScope {
public:
    explicit TapeScope(GradTape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradTape* prev_;
};

// Suspends recording (inference / the untaped prefix of a sampling chain).
class NoTapeScope {
public:
    NoTapeScope();
    ~NoTapeScope();
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    GradTape* prev_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // 2-D only

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_rowvec(const Tensor& a, const Tensor& bias);  // [n,d] + [d]

Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor clamp01(const Tensor& a);

// Normalizes over the last axis with learnable gain/bias (both shape [d]).
Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Row-wise x / sqrt(sum(x^2) + eps); works on [d] and [n,d].
Tensor l2_normalize(const Tensor& a, double eps = 1e-12);

Tensor sum_all(const Tensor& a);   // -> [1]
Tensor mean_all(const Tensor& a);  // -> [1]
Tensor mse(const Tensor& a, const Tensor& b);  // mean squared error -> [1]

Tensor concat_rows(const std::vector<Tensor>& parts);        // stack along axis 0
Tensor concat(const std::vector<Tensor>& parts, int axis);   // 2-D, axis 0 or 1
Tensor slice_rows(const Tensor& a, int begin, int end);      // [begin, end)

// Row-wise softmax; masked variant multiplies logits elementwise by the mask
// first (entries in [0,1]); both require square or general [n,c] inputs.
Tensor softmax_rows(const Tensor& logits);
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);  // [n,n] each

// Mean cross-entropy of row-wise softmax against integer targets.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

// Classic transformer sin/cos embedding of an integer step index. Constant
// w.r.t. parameters, so it never participates in the tape.
Tensor sinusoidal_embed(int t, int dim);

// Checks every value (and grad, if any) for NaN/Inf.
bool all_finite(const Tensor& a);

}  // namespace stepviz
