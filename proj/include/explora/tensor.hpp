#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "explora/errors.hpp"
#include "explora/rng.hpp"

namespace explora {

enum class DType : uint8_t { f32 = 0, f64 = 1 };

inline size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }
inline const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }
DType dtype_from_name(const std::string& name);

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    DType dtype = DType::f32;
    std::vector<std::byte> data;                   // row-major payload
    bool requires_grad = false;
    std::unique_ptr<std::vector<std::byte>> grad;  // same layout, lazily allocated
};
} // namespace detail

// Dense row-major tensor. Handles share storage; clone() deep-copies. The
// gradient buffer lives next to the data so that a leaf keeps its accumulated
// gradient across tape replays until explicitly cleared.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dt = DType::f32);
    static Tensor full(Shape shape, double value, DType dt = DType::f32);
    static Tensor scalar(double value, DType dt = DType::f32);
    static Tensor from_values(Shape shape, const std::vector<double>& values, DType dt = DType::f32);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, DType dt = DType::f32);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t dim(int i) const;  // python-style negative indexing
    int64_t numel() const { return shape_numel(impl_->shape); }
    DType dtype() const { return impl_->dtype; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    template <typename T> std::span<T> data() {
        check_type<T>();
        return {reinterpret_cast<T*>(impl_->data.data()), static_cast<size_t>(numel())};
    }
    template <typename T> std::span<const T> data() const {
        check_type<T>();
        return {reinterpret_cast<const T*>(impl_->data.data()), static_cast<size_t>(numel())};
    }

    std::span<std::byte> bytes() { return {impl_->data.data(), impl_->data.size()}; }
    std::span<const std::byte> bytes() const { return {impl_->data.data(), impl_->data.size()}; }

    bool has_grad() const { return impl_->grad != nullptr; }
    void ensure_grad();  // allocate a zeroed grad buffer if absent
    void zero_grad() { impl_->grad.reset(); }
    template <typename T> std::span<T> grad() {
        check_type<T>();
        ensure_grad();
        return {reinterpret_cast<T*>(impl_->grad->data()), static_cast<size_t>(numel())};
    }
    template <typename T> std::span<const T> grad() const {
        check_type<T>();
        if (!has_grad()) throw StateError("tensor has no gradient buffer");
        return {reinterpret_cast<const T*>(impl_->grad->data()), static_cast<size_t>(numel())};
    }

    // dtype-agnostic element access (slow path; loops should use data<T>())
    double at(int64_t flat_index) const;
    void set(int64_t flat_index, double value);
    double item() const;  // value of a 1-element tensor

    Tensor clone() const;            // deep copy of data; requires_grad preserved, grad dropped
    Tensor astype(DType dt) const;   // converting copy (no tape participation)

    // identity of the underlying storage, for graph/freeze bookkeeping
    const void* id() const { return impl_.get(); }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    bool all_finite() const;

  private:
    template <typename T> void check_type() const;
    std::shared_ptr<detail::TensorImpl> impl_;
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    static Tensor make(Shape shape, DType dt);
    friend Tensor make_tensor(Shape shape, DType dt);
};

// internal factory used by ops
Tensor make_tensor(Shape shape, DType dt);

template <typename T> void Tensor::check_type() const {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    if (!impl_) throw StateError("use of undefined tensor");
    const DType want = std::is_same_v<T, float> ? DType::f32 : DType::f64;
    if (impl_->dtype != want)
        throw ContractError(std::string("tensor dtype is ") + dtype_name(impl_->dtype) +
                            ", accessed as " + dtype_name(want));
}

// Reverse-mode tape. Construction pushes the tape onto a thread-local stack;
// ops record backward closures onto the innermost active tape. Nodes are
// appended in execution order, which is already a topological order, so
// backward() is a single reverse sweep.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
    size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays all recorded closures in reverse,
    // accumulating gradients into every requires_grad tensor reachable from
    // the loss. The tape is cleared afterwards.
    void backward(Tensor loss);
    void clear() { nodes_.clear(); }

  private:
    std::vector<std::function<void()>> nodes_;
};

// RAII gradient-recording suppression (teacher forwards, evaluation).
class NoGrad {
  public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

  private:
    bool saved_;
};

bool grad_enabled();

// true if a backward closure should be recorded for these inputs
bool should_record(std::initializer_list<const Tensor*> inputs);

} // namespace explora
